#include <algorithm>

#include "doctest.h"
#include "pod/similarity.hpp"
#include "test_helpers.hpp"

using namespace pod;

namespace {

ModelWeights tiny_model(std::uint64_t seed) {
    ModelConfig cfg;
    cfg.num_layers = 3;
    cfg.num_heads = 2;
    cfg.head_dim = 8;
    cfg.model_dim = 16;
    cfg.vocab_size = 32;
    cfg.seed = seed;
    return init_model(cfg);
}

std::vector<TokenSequence> tiny_corpus(std::uint64_t seed, std::size_t samples, std::size_t len) {
    CorpusSpec spec;
    spec.seed = seed;
    spec.num_samples = samples;
    spec.sample_length = len;
    spec.vocab_size = 32;
    return generate_corpus(spec);
}

// Hand-built trace: one head, q rows whose supports carry given distributions.
AttentionTrace make_trace(std::size_t num_layers, std::size_t num_heads, std::size_t q,
                          std::size_t n) {
    AttentionTrace t;
    t.num_layers = num_layers;
    t.num_heads = num_heads;
    t.traced_rows = q;
    t.seq_len = n;
    t.rows.assign(num_layers * num_heads, RealMatrix(q, n));
    return t;
}

} // namespace

TEST_CASE("collect_traces yields one deterministic trace per sample") {
    const ModelWeights w = tiny_model(3);
    const auto corpus = tiny_corpus(4, 3, 20);
    const auto traces = collect_traces(w, corpus, 6);
    REQUIRE(traces.size() == 3);

    const auto again = collect_traces(w, corpus, 6);
    for (std::size_t s = 0; s < traces.size(); ++s) {
        for (std::size_t m = 0; m < traces[s].rows.size(); ++m) {
            CHECK(traces[s].rows[m] == again[s].rows[m]);
        }
    }

    // Per-sample forward oracle: each trace equals an individual dense run.
    for (std::size_t s = 0; s < corpus.size(); ++s) {
        const ForwardResult single = forward_dense(w, corpus[s], 6);
        for (std::size_t m = 0; m < traces[s].rows.size(); ++m) {
            CHECK(traces[s].rows[m] == single.trace.rows[m]);
        }
    }
}

TEST_CASE("collect_traces validates q against the shortest sample") {
    const ModelWeights w = tiny_model(5);
    auto corpus = tiny_corpus(6, 2, 12);
    corpus[1].tokens.resize(8);
    CHECK_THROWS_AS(collect_traces(w, corpus, 9), InvalidInput);
    CHECK_THROWS_AS(collect_traces(w, {}, 1), InvalidInput);
}

TEST_CASE("layer_similarity equals one minus the mean pairwise divergence") {
    // Two layers, one head, two samples, q = 2; compare against a direct
    // average of the four divergence terms.
    SplitMix64 rng(7);
    std::vector<AttentionTrace> traces;
    for (int s = 0; s < 2; ++s) {
        AttentionTrace t = make_trace(2, 1, 2, 4);
        for (std::size_t l = 0; l < 2; ++l) {
            for (std::size_t j = 0; j < 2; ++j) {
                const std::size_t support = t.row_support(j);
                const auto p = podtest::random_simplex(rng, support);
                for (std::size_t c = 0; c < support; ++c) {
                    t.at(l, 0).at(j, c) = p[c];
                }
            }
        }
        traces.push_back(std::move(t));
    }

    double mean_js = 0.0;
    for (const AttentionTrace& t : traces) {
        for (std::size_t j = 0; j < 2; ++j) {
            const std::size_t support = t.row_support(j);
            mean_js += js_divergence(t.at(0, 0).row(j).first(support),
                                     t.at(1, 0).row(j).first(support));
        }
    }
    mean_js /= 4.0;

    const SimilarityTensor sim = layer_similarity(traces);
    CHECK(sim.at(0, 0, 1) == doctest::Approx(1.0 - mean_js).epsilon(1e-12));
    CHECK(sim.at(0, 1, 0) == sim.at(0, 0, 1));
    CHECK(sim.at(0, 0, 0) == 1.0);
    CHECK(sim.at(0, 1, 1) == 1.0);
}

TEST_CASE("identical layers are maximally similar, disjoint layers minimally") {
    AttentionTrace t = make_trace(3, 1, 1, 2);
    // Row support is 2. Layer 0 and 1: identical; layer 2: disjoint.
    t.at(0, 0).at(0, 0) = 1.0;
    t.at(1, 0).at(0, 0) = 1.0;
    t.at(2, 0).at(0, 1) = 1.0;
    const SimilarityTensor sim = layer_similarity({t});
    CHECK(sim.at(0, 0, 1) == 1.0);
    CHECK(sim.at(0, 0, 2) == 0.0);
    CHECK(sim.at(0, 1, 2) == 0.0);
    sim.validate();
}

TEST_CASE("layer_similarity output satisfies the tensor invariants") {
    const ModelWeights w = tiny_model(11);
    const auto corpus = tiny_corpus(12, 2, 16);
    const SimilarityTensor sim = layer_similarity(collect_traces(w, corpus, 4));
    sim.validate();
    CHECK(sim.num_heads == w.config.num_heads);
    CHECK(sim.num_layers == w.config.num_layers);
}

TEST_CASE("layer_similarity is invariant to sample order and duplication") {
    const ModelWeights w = tiny_model(13);
    const auto corpus = tiny_corpus(14, 3, 16);
    auto traces = collect_traces(w, corpus, 4);

    const SimilarityTensor base = layer_similarity(traces);

    auto reversed = traces;
    std::reverse(reversed.begin(), reversed.end());
    const SimilarityTensor permuted = layer_similarity(reversed);
    CHECK(podtest::max_abs_diff(base.values, permuted.values) < 1e-12);

    auto doubled = traces;
    doubled.insert(doubled.end(), traces.begin(), traces.end());
    const SimilarityTensor twice = layer_similarity(doubled);
    CHECK(podtest::max_abs_diff(base.values, twice.values) < 1e-12);
}

TEST_CASE("layer_similarity rejects inconsistent traces") {
    CHECK_THROWS_AS(layer_similarity({}), InvalidInput);

    AttentionTrace a = make_trace(2, 1, 1, 4);
    a.at(0, 0).at(0, 0) = 1.0;
    a.at(1, 0).at(0, 0) = 1.0;
    AttentionTrace b = make_trace(3, 1, 1, 4);
    CHECK_THROWS_AS(layer_similarity({a, b}), InvalidInput);
}
