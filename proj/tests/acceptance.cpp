// Acceptance suite: one test case per release criterion, each printing a
// [PASS] line with its measured margin when it holds. Run via ctest or
// directly: ./pod_acceptance -s

#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "cli_helpers.hpp"
#include "doctest.h"
#include "json.hpp"
#include "pod/experiments.hpp"
#include "pod/io.hpp"
#include "test_helpers.hpp"

using namespace pod;
using nlohmann::json;

namespace {

struct Stopwatch {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

HeadBlocks singleton_blocks(std::size_t layers, std::size_t heads) {
    HeadBlocks blocks;
    blocks.delta = 1.0;
    blocks.heads.assign(heads, {});
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t l = 1; l <= layers; ++l) {
            blocks.heads[h].push_back(LayerRange{l, l});
        }
    }
    return blocks;
}

HeadBlocks one_block(std::size_t layers, std::size_t heads) {
    HeadBlocks blocks;
    blocks.delta = 0.0;
    blocks.heads.assign(heads, {LayerRange{1, layers}});
    return blocks;
}

TokenSequence seeded_prompt(std::uint64_t seed, std::size_t n, std::size_t vocab) {
    CorpusSpec spec;
    spec.seed = seed;
    spec.num_samples = 1;
    spec.sample_length = n;
    spec.vocab_size = vocab;
    return generate_corpus(spec)[0];
}

std::size_t expected_key_entries(const HeadBlocks& blocks, std::size_t n, std::size_t n_s,
                                 std::size_t n_r) {
    const std::size_t L = blocks.num_layers();
    const std::size_t proximal = std::min(n, n_s + n_r);
    std::size_t total = 0;
    for (std::size_t h = 0; h < blocks.num_heads(); ++h) {
        total += blocks.blocks_in_head(h) * n + (L - blocks.blocks_in_head(h)) * proximal;
    }
    return total;
}

} // namespace

TEST_CASE("criterion 1: split-and-gate attention is exact against one softmax") {
    Stopwatch timer;
    SplitMix64 rng(20250801);
    const std::size_t dims[3] = {2, 16, 64};

    double worst = 0.0;
    for (int iter = 0; iter < 1000; ++iter) {
        const std::size_t d = dims[iter % 3];
        const std::size_t n = 4 + rng.next_below(61); // 4..64
        const std::size_t n_s = 1;
        const std::size_t n_r = 2; // distant nonempty for every n >= 4

        ModelConfig cfg;
        cfg.num_layers = 1;
        cfg.num_heads = 1;
        cfg.head_dim = d;
        cfg.model_dim = d;
        cfg.vocab_size = 4;
        PoDConfig pod_cfg;
        pod_cfg.n_s = n_s;
        pod_cfg.n_r = n_r;
        pod_cfg.blocks = one_block(1, 1);

        PoDKVCache cache(cfg, pod_cfg);
        std::vector<std::vector<double>> keys(n), values(n);
        for (std::size_t p = 0; p < n; ++p) {
            keys[p] = podtest::random_vector(rng, d, -3.0, 3.0);
            values[p] = podtest::random_vector(rng, d, -3.0, 3.0);
            cache.store_token_entry(0, 0, keys[p], values[p]);
            cache.finish_token();
        }
        const auto q = podtest::random_vector(rng, d, -3.0, 3.0);

        const SplitAttentionOutput split = split_attention(q, q, cache, 0, 0, n);
        REQUIRE(split.distant_out.has_value());
        const auto combined = gate_combine(split);

        std::vector<double> scores(n);
        for (std::size_t j = 0; j < n; ++j) {
            scores[j] = dot(q, keys[j]) / std::sqrt(static_cast<double>(d));
        }
        const ProbVector probs = stable_softmax(scores);
        std::vector<double> dense(d, 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t c = 0; c < d; ++c) {
                dense[c] += probs[j] * values[j][c];
            }
        }
        worst = std::max(worst, podtest::max_abs_diff(combined, dense));
    }
    CHECK(worst <= 1e-10);
    const double elapsed = timer.seconds();
    CHECK(elapsed < 10.0);
    std::printf("[PASS] criterion 1: 1000 instances, max |error| = %.3e (limit 1e-10), %.2fs\n",
                worst, elapsed);
}

TEST_CASE("criterion 2: singleton blocks reproduce dense prefill and decoding") {
    Stopwatch timer;
    double worst_prefill = 0.0;
    for (std::uint64_t seed = 100; seed < 120; ++seed) {
        ModelConfig cfg;
        cfg.num_layers = 8;
        cfg.num_heads = 4;
        cfg.head_dim = 16;
        cfg.model_dim = 64;
        cfg.vocab_size = 256;
        cfg.seed = seed;
        const ModelWeights w = init_model(cfg);

        PoDConfig pod_cfg;
        pod_cfg.n_s = 4;
        pod_cfg.n_r = 32;
        pod_cfg.blocks = singleton_blocks(cfg.num_layers, cfg.num_heads);

        const TokenSequence prompt = seeded_prompt(seed + 1000, 96, cfg.vocab_size);
        PrefillResult pre = prefill(w, pod_cfg, prompt);
        const ForwardResult dense = forward_dense(w, prompt, 1);
        worst_prefill = std::max(
            worst_prefill, podtest::max_abs_diff(pre.logits.flat(), dense.logits.flat()));
        REQUIRE(worst_prefill <= 1e-8);

        ReferenceDecoder reference(w, EvictionPolicy{0, std::nullopt});
        std::vector<double> ref_logits = reference.prefill(prompt);
        std::uint32_t pod_next =
            static_cast<std::uint32_t>(next_token_argmax(pre.logits.row(prompt.size() - 1)));
        std::uint32_t ref_next = static_cast<std::uint32_t>(next_token_argmax(ref_logits));
        for (int step = 0; step < 64; ++step) {
            REQUIRE(pod_next == ref_next); // identical greedy token sequences
            const DecodeStepResult pod_step = decode_step(w, pod_cfg, pre.cache, pod_next);
            ref_logits = reference.step(ref_next);
            pod_next = static_cast<std::uint32_t>(next_token_argmax(pod_step.logits));
            ref_next = static_cast<std::uint32_t>(next_token_argmax(ref_logits));
        }
    }
    const double elapsed = timer.seconds();
    CHECK(elapsed < 60.0);
    std::printf("[PASS] criterion 2: 20 seeds, prefill max |error| = %.3e (limit 1e-8), 64-step "
                "decode token-identical, %.2fs\n",
                worst_prefill, elapsed);
}

TEST_CASE("criterion 3: greedy grouping is valid for random similarity tensors") {
    Stopwatch timer;
    SplitMix64 rng(20250803);
    std::size_t checked = 0;
    for (int iter = 0; iter < 200; ++iter) {
        const std::size_t heads = 1 + rng.next_below(4);
        const std::size_t layers = 1 + rng.next_below(8);
        SimilarityTensor sim;
        sim.num_heads = heads;
        sim.num_layers = layers;
        sim.values.assign(heads * layers * layers, 0.0);
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t a = 0; a < layers; ++a) {
                sim.at(h, a, a) = 1.0;
                for (std::size_t b = a + 1; b < layers; ++b) {
                    const double v = rng.next_double();
                    sim.at(h, a, b) = v;
                    sim.at(h, b, a) = v;
                }
            }
        }
        for (int di = 1; di <= 9; ++di) {
            const double delta = di / 10.0;
            const HeadBlocks blocks = greedy_group(sim, delta);
            blocks.validate_structure();
            const ValidationReport report = validate_blocks(blocks, sim);
            REQUIRE(report.pair_violations.empty());
            REQUIRE(report.missed_merges.empty());
            ++checked;
        }
    }
    const double elapsed = timer.seconds();
    CHECK(elapsed < 5.0);
    std::printf("[PASS] criterion 3: %zu grouping runs with zero violations, %.2fs\n", checked,
                elapsed);
}

TEST_CASE("criterion 4: divergence kernel properties over random simplex pairs") {
    Stopwatch timer;
    SplitMix64 rng(20250804);
    double worst_asym = 0.0;
    for (int iter = 0; iter < 10000; ++iter) {
        const std::size_t dim = 2 + rng.next_below(15);
        const auto p = podtest::random_simplex(rng, dim);
        const auto q = podtest::random_simplex(rng, dim);
        const double pq = js_divergence(p, q);
        const double qp = js_divergence(q, p);
        worst_asym = std::max(worst_asym, std::abs(pq - qp));
        REQUIRE(pq >= 0.0);
        REQUIRE(pq <= 1.0);
        REQUIRE(js_divergence(p, p) <= 1e-12); // zero for equal inputs
        REQUIRE(pq > 1e-12);                   // nonzero for distinct random pairs
    }
    CHECK(worst_asym <= 1e-12);

    const double hand =
        js_divergence(std::vector<double>{0.5, 0.5}, std::vector<double>{1.0, 0.0});
    CHECK(hand == doctest::Approx(0.311278).epsilon(1e-5));

    const double elapsed = timer.seconds();
    CHECK(elapsed < 5.0);
    std::printf("[PASS] criterion 4: 10000 pairs, max asymmetry = %.3e, hand value %.6f "
                "(expect 0.311278), %.2fs\n",
                worst_asym, hand, elapsed);
}

TEST_CASE("criterion 5: cache-savings accounting meets the 35%% target arithmetic") {
    Stopwatch timer;
    // Three blocks per head over 10 layers x 2 heads: saved-layer fraction
    // (10-3)/10 = 0.7 per head.
    HeadBlocks blocks;
    blocks.delta = 0.5;
    blocks.heads = {{{1, 4}, {5, 8}, {9, 10}}, {{1, 2}, {3, 6}, {7, 10}}};

    const SavingsRate at_8k = savings_rate(blocks, 8192, 16, 128);
    CHECK(std::abs(at_8k.total_kv_fraction_saved - 0.35) <= 0.02 * 0.35 + 1e-12);

    const SavingsRate at_1m = savings_rate(blocks, 1'000'000, 16, 128);
    CHECK(std::abs(at_1m.total_kv_fraction_saved - 0.350) <= 0.001);

    // The same accounting must hold, integer-exactly, for a live cache at
    // n = 2048: prefill 2016 tokens and decode 32 more.
    ModelConfig cfg;
    cfg.num_layers = 10;
    cfg.num_heads = 2;
    cfg.head_dim = 8;
    cfg.model_dim = 16;
    cfg.vocab_size = 64;
    cfg.seed = 20250805;
    const ModelWeights w = init_model(cfg);
    PoDConfig pod_cfg;
    pod_cfg.n_s = 16;
    pod_cfg.n_r = 128;
    pod_cfg.blocks = blocks;

    const TokenSequence prompt = seeded_prompt(555, 2016, cfg.vocab_size);
    PrefillResult pre = prefill(w, pod_cfg, prompt);
    CHECK(pre.cache.key_entries() == expected_key_entries(blocks, 2016, 16, 128));

    std::uint32_t next =
        static_cast<std::uint32_t>(next_token_argmax(pre.logits.row(prompt.size() - 1)));
    std::size_t final_keys = 0;
    std::size_t final_values = 0;
    for (int step = 0; step < 32; ++step) {
        const DecodeStepResult result = decode_step(w, pod_cfg, pre.cache, next);
        next = static_cast<std::uint32_t>(next_token_argmax(result.logits));
        final_keys = result.report.key_entries;
        final_values = result.report.value_entries;
        REQUIRE(final_keys ==
                expected_key_entries(blocks, pre.cache.sequence_length(), 16, 128));
    }
    CHECK(pre.cache.sequence_length() == 2048);
    CHECK(final_keys == expected_key_entries(blocks, 2048, 16, 128));
    CHECK(final_values == cfg.num_layers * cfg.num_heads * 2048);
    const auto [audit_keys, audit_values] = pre.cache.recount_entries();
    CHECK(audit_keys == final_keys);
    CHECK(audit_values == final_values);

    const double elapsed = timer.seconds();
    std::printf("[PASS] criterion 5: total fraction %.6f at n=8192 and %.6f at n=1e6 "
                "(target 0.35); live cache at n=2048 holds %zu keys = closed form, %.2fs\n",
                at_8k.total_kv_fraction_saved, at_1m.total_kv_fraction_saved, final_keys,
                elapsed);
}

TEST_CASE("criterion 6: gate-threshold skipping is monotone, total at zero, and inert above") {
    Stopwatch timer;
    ModelConfig cfg;
    cfg.num_layers = 6;
    cfg.num_heads = 2;
    cfg.head_dim = 8;
    cfg.model_dim = 16;
    cfg.vocab_size = 64;
    cfg.seed = 20250806;
    const ModelWeights w = init_model(cfg);

    PoDConfig pod_cfg;
    pod_cfg.n_s = 4;
    pod_cfg.n_r = 32;
    pod_cfg.blocks = one_block(cfg.num_layers, cfg.num_heads);

    const TokenSequence prompt = seeded_prompt(777, 128, cfg.vocab_size);

    std::vector<double> taus;
    for (int i = 0; i <= 10; ++i) {
        taus.push_back(i / 10.0);
    }
    const TauSweep sweep = tau_sweep(w, pod_cfg, prompt, taus, 256);
    REQUIRE(sweep.points.size() == 11);

    CHECK(sweep.points.front().skip_fraction == 1.0); // tau = 0 skips everything eligible
    for (std::size_t i = 1; i < sweep.points.size(); ++i) {
        REQUIRE(sweep.points[i].skip_fraction <= sweep.points[i - 1].skip_fraction);
    }

    // tau above every observed gate leaves the run untouched.
    REQUIRE(sweep.max_observed_gate < 1.0);
    const TauSweep above = tau_sweep(w, pod_cfg, prompt,
                                     {std::min(1.0, sweep.max_observed_gate + 1e-9)}, 256);
    CHECK(above.points[0].skip_fraction == 0.0);
    CHECK(above.points[0].logit_divergence == 0.0);

    // Disabled threshold == an unskipped run, bitwise.
    PoDConfig at_one = pod_cfg;
    at_one.tau = 1.0;
    PrefillResult pa = prefill(w, pod_cfg, prompt);
    PrefillResult pb = prefill(w, at_one, prompt);
    std::uint32_t next =
        static_cast<std::uint32_t>(next_token_argmax(pa.logits.row(prompt.size() - 1)));
    double worst = 0.0;
    std::size_t stray_skips = 0;
    for (int step = 0; step < 256; ++step) {
        const DecodeStepResult ra = decode_step(w, pod_cfg, pa.cache, next);
        const DecodeStepResult rb = decode_step(w, at_one, pb.cache, next);
        worst = std::max(worst, podtest::max_abs_diff(ra.logits, rb.logits));
        for (const HeadStepReport& entry : rb.report.per_layer_head) {
            stray_skips += entry.skipped ? 1 : 0;
        }
        next = static_cast<std::uint32_t>(next_token_argmax(ra.logits));
    }
    CHECK(stray_skips == 0);
    CHECK(worst <= 1e-12);

    const double elapsed = timer.seconds();
    CHECK(elapsed < 120.0);
    std::printf("[PASS] criterion 6: skip fraction monotone over 11 thresholds "
                "(1.00 -> %.3f), disabled-vs-unskipped max |delta| = %.1e, %.2fs\n",
                sweep.points.back().skip_fraction, worst, elapsed);
}

TEST_CASE("criterion 7: match experiment is exact at full budget and reproducible") {
    Stopwatch timer;
    REQUIRE_FALSE(podtest::cli_path().empty());
    podtest::CliTempDir tmp;
    const std::string model = (tmp.path / "m").string();
    REQUIRE(podtest::run_cli("gen --out " + model +
                             " --seed 41 --layers 4 --heads 2 --head-dim 8 --vocab 64 "
                             "--samples 3 --length 48")
                .exit_code == 0);
    const std::string flags = "experiment match --model " + model + " --corpus " + model +
                              "/corpus.tokens --budgets 8,16,32,48 --compare-last 8 --ns 2 "
                              "--out " +
                              (tmp.path / "e").string();
    REQUIRE(podtest::run_cli(flags).exit_code == 0);
    const std::string csv = podtest::read_text(tmp.path / "e" / "match.csv");

    std::istringstream lines(csv);
    std::string line;
    std::string last;
    std::getline(lines, line); // manifest comment
    std::getline(lines, line);
    REQUIRE(line == "budget,match_fraction,samples");
    while (std::getline(lines, line)) {
        if (!line.empty()) {
            last = line;
        }
    }
    CHECK(last == "48,1.0,24"); // full-context budget: exact agreement

    REQUIRE(podtest::run_cli(flags).exit_code == 0);
    CHECK(podtest::read_text(tmp.path / "e" / "match.csv") == csv); // byte-identical rerun

    const double elapsed = timer.seconds();
    std::printf("[PASS] criterion 7: full-budget row '%s', rerun byte-identical, %.2fs\n",
                last.c_str(), elapsed);
}

TEST_CASE("criterion 8: the on-disk pipeline equals the in-process pipeline") {
    Stopwatch timer;
    REQUIRE_FALSE(podtest::cli_path().empty());
    podtest::CliTempDir tmp;
    const std::string model = (tmp.path / "m").string();
    REQUIRE(podtest::run_cli("gen --out " + model +
                             " --seed 77 --layers 4 --heads 2 --head-dim 8 --vocab 64 "
                             "--samples 4 --length 64")
                .exit_code == 0);
    REQUIRE(podtest::run_cli("analyze --model " + model + " --corpus " + model +
                             "/corpus.tokens --q 8 --out " + (tmp.path / "a").string())
                .exit_code == 0);
    REQUIRE(podtest::run_cli("group --similarity " +
                             (tmp.path / "a" / "similarity.json").string() + " --delta 0.5 --out " +
                             (tmp.path / "g").string())
                .exit_code == 0);
    REQUIRE(podtest::run_cli("run --model " + model + " --blocks " +
                             (tmp.path / "g" / "blocks.json").string() + " --prompt " + model +
                             "/corpus.tokens --ns 2 --nr 8 --steps 12 --out " +
                             (tmp.path / "r").string())
                .exit_code == 0);

    // In-process twin of the same pipeline.
    ModelConfig cfg;
    cfg.num_layers = 4;
    cfg.num_heads = 2;
    cfg.head_dim = 8;
    cfg.model_dim = 16;
    cfg.vocab_size = 64;
    cfg.seed = 77;
    const ModelWeights w = init_model(cfg);
    CorpusSpec corpus_spec;
    corpus_spec.seed = 77;
    corpus_spec.num_samples = 4;
    corpus_spec.sample_length = 64;
    corpus_spec.vocab_size = 64;
    const auto corpus = generate_corpus(corpus_spec);
    const SimilarityTensor sim = layer_similarity(collect_traces(w, corpus, 8));
    const HeadBlocks blocks = greedy_group(sim, 0.5);

    const SimilarityTensor disk_sim =
        pod::io::load_similarity(tmp.path / "a" / "similarity.json");
    REQUIRE(disk_sim.values.size() == sim.values.size());
    const double sim_diff = podtest::max_abs_diff(disk_sim.values, sim.values);
    CHECK(sim_diff <= 1e-12);

    const HeadBlocks disk_blocks = pod::io::load_blocks(tmp.path / "g" / "blocks.json");
    REQUIRE(disk_blocks.heads.size() == blocks.heads.size());
    for (std::size_t h = 0; h < blocks.heads.size(); ++h) {
        CHECK(disk_blocks.heads[h] == blocks.heads[h]);
    }

    PoDConfig pod_cfg;
    pod_cfg.n_s = 2;
    pod_cfg.n_r = 8;
    pod_cfg.blocks = blocks;
    PrefillResult pre = prefill(w, pod_cfg, corpus[0]);
    std::vector<std::uint32_t> generated;
    std::uint32_t next = static_cast<std::uint32_t>(
        next_token_argmax(pre.logits.row(corpus[0].size() - 1)));
    for (int step = 0; step < 12; ++step) {
        generated.push_back(next);
        const DecodeStepResult result = decode_step(w, pod_cfg, pre.cache, next);
        next = static_cast<std::uint32_t>(next_token_argmax(result.logits));
    }

    const json run = json::parse(podtest::read_text(tmp.path / "r" / "run.json"));
    const auto disk_tokens = run.at("generated").get<std::vector<std::uint32_t>>();
    CHECK(disk_tokens == generated);

    const double elapsed = timer.seconds();
    std::printf("[PASS] criterion 8: similarity max |delta| = %.1e (limit 1e-12), blocks and "
                "%zu generated tokens identical, %.2fs\n",
                sim_diff, generated.size(), elapsed);
}
