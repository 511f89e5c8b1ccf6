#include <cmath>

#include "doctest.h"
#include "pod/model.hpp"
#include "reference_model.hpp"
#include "test_helpers.hpp"

using namespace pod;

namespace {

ModelConfig small_config(std::uint64_t seed) {
    ModelConfig cfg;
    cfg.num_layers = 3;
    cfg.num_heads = 2;
    cfg.head_dim = 8;
    cfg.model_dim = 16;
    cfg.vocab_size = 48;
    cfg.seed = seed;
    return cfg;
}

TokenSequence sample_tokens(std::uint64_t seed, std::size_t n, std::size_t vocab) {
    CorpusSpec spec;
    spec.seed = seed;
    spec.num_samples = 1;
    spec.sample_length = n;
    spec.vocab_size = vocab;
    return generate_corpus(spec)[0];
}

} // namespace

TEST_CASE("init_model is deterministic and seed-sensitive") {
    const ModelConfig cfg = small_config(123);
    const ModelWeights a = init_model(cfg);
    const ModelWeights b = init_model(cfg);
    CHECK(a.embedding == b.embedding);
    CHECK(a.unembedding == b.unembedding);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        CHECK(a.layers[l].wq == b.layers[l].wq);
        CHECK(a.layers[l].w2 == b.layers[l].w2);
    }

    ModelConfig other = cfg;
    other.seed = 124;
    const ModelWeights c = init_model(other);
    CHECK(a.embedding != c.embedding);
}

TEST_CASE("init_model shapes follow the config") {
    ModelConfig cfg;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.head_dim = 4;
    cfg.model_dim = 8;
    cfg.vocab_size = 16;
    const ModelWeights w = init_model(cfg);
    CHECK(w.layers.size() == 2);
    CHECK(w.layers[0].wq.rows() == cfg.model_dim);
    CHECK(w.layers[0].wq.cols() == cfg.model_dim);
    CHECK(w.layers[0].w1.cols() == cfg.ffn_dim());
    CHECK(w.embedding.rows() == cfg.vocab_size);

    // Bound check: entries within +-1/sqrt(fan_in).
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.model_dim));
    for (double v : w.layers[0].wq.flat()) {
        CHECK(std::abs(v) <= bound);
    }
}

TEST_CASE("init_model rejects inconsistent configs") {
    ModelConfig cfg = small_config(1);
    cfg.model_dim = 17;
    CHECK_THROWS_AS(init_model(cfg), InvalidInput);
    cfg = small_config(1);
    cfg.head_dim = 7; // odd
    CHECK_THROWS_AS(init_model(cfg), InvalidInput);
}

TEST_CASE("forward_dense traced rows are causal probability rows") {
    const ModelWeights w = init_model(small_config(5));
    const TokenSequence tokens = sample_tokens(6, 24, w.config.vocab_size);
    const ForwardResult fwd = forward_dense(w, tokens, 8);

    const AttentionTrace& trace = fwd.trace;
    CHECK(trace.traced_rows == 8);
    CHECK(trace.seq_len == 24);
    for (std::size_t l = 0; l < w.config.num_layers; ++l) {
        for (std::size_t h = 0; h < w.config.num_heads; ++h) {
            for (std::size_t j = 0; j < trace.traced_rows; ++j) {
                const std::size_t support = trace.row_support(j);
                const auto row = trace.at(l, h).row(j);
                double sum = 0.0;
                for (std::size_t c = 0; c < support; ++c) {
                    CHECK(row[c] >= 0.0);
                    sum += row[c];
                }
                CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
                for (std::size_t c = support; c < trace.seq_len; ++c) {
                    CHECK(row[c] == 0.0); // beyond the causal boundary
                }
            }
        }
    }
}

TEST_CASE("forward_dense single-token sequence attends only to itself") {
    const ModelWeights w = init_model(small_config(7));
    TokenSequence tokens;
    tokens.tokens = {3};
    const ForwardResult fwd = forward_dense(w, tokens, 1);
    for (std::size_t l = 0; l < w.config.num_layers; ++l) {
        for (std::size_t h = 0; h < w.config.num_heads; ++h) {
            CHECK(fwd.trace.at(l, h).at(0, 0) == 1.0);
        }
    }
}

TEST_CASE("forward_dense is deterministic and tracing is observation-only") {
    const ModelWeights w = init_model(small_config(9));
    const TokenSequence tokens = sample_tokens(10, 20, w.config.vocab_size);
    const ForwardResult a = forward_dense(w, tokens, 4);
    const ForwardResult b = forward_dense(w, tokens, 4);
    CHECK(a.logits == b.logits);

    const ForwardResult c = forward_dense(w, tokens, 20);
    CHECK(a.logits == c.logits); // trace_last_q must not affect logits
}

TEST_CASE("forward_dense trace suffix is consistent across q") {
    const ModelWeights w = init_model(small_config(21));
    const TokenSequence tokens = sample_tokens(22, 16, w.config.vocab_size);
    const ForwardResult full = forward_dense(w, tokens, 16);
    const ForwardResult part = forward_dense(w, tokens, 5);
    for (std::size_t l = 0; l < w.config.num_layers; ++l) {
        for (std::size_t h = 0; h < w.config.num_heads; ++h) {
            for (std::size_t j = 0; j < 5; ++j) {
                const auto expect = full.trace.at(l, h).row(16 - 5 + j);
                const auto got = part.trace.at(l, h).row(j);
                CHECK(podtest::max_abs_diff(expect, got) == 0.0);
            }
        }
    }
}

TEST_CASE("forward_dense matches the independent reference forward") {
    const ModelWeights w = init_model(small_config(31));
    const TokenSequence tokens = sample_tokens(32, 24, w.config.vocab_size);
    const ForwardResult fwd = forward_dense(w, tokens, tokens.size());
    const podtest::ReferenceForward ref = podtest::reference_forward(w, tokens);

    CHECK(podtest::max_abs_diff(fwd.logits.flat(), ref.logits.flat()) < 1e-9);
    for (std::size_t l = 0; l < w.config.num_layers; ++l) {
        for (std::size_t h = 0; h < w.config.num_heads; ++h) {
            for (std::size_t i = 0; i < tokens.size(); ++i) {
                CHECK(podtest::max_abs_diff(fwd.trace.at(l, h).row(i),
                                            ref.attention_rows[l * w.config.num_heads + h].row(i)) <
                      1e-9);
            }
        }
    }
}

TEST_CASE("forward_dense validates trace_last_q") {
    const ModelWeights w = init_model(small_config(41));
    const TokenSequence tokens = sample_tokens(42, 8, w.config.vocab_size);
    CHECK_THROWS_AS(forward_dense(w, tokens, 0), InvalidInput);
    CHECK_THROWS_AS(forward_dense(w, tokens, 9), InvalidInput);
}

TEST_CASE("next_token_argmax picks the max with lowest-index ties") {
    CHECK(next_token_argmax(std::vector<double>{0.1, 0.9, 0.3}) == 1);
    CHECK(next_token_argmax(std::vector<double>{0.5, 0.5}) == 0);

    SplitMix64 rng(43);
    for (int iter = 0; iter < 50; ++iter) {
        auto row = podtest::random_vector(rng, 16);
        const std::size_t base = next_token_argmax(row);
        const double c = rng.next_uniform(-100.0, 100.0);
        for (double& v : row) {
            v += c;
        }
        CHECK(next_token_argmax(row) == base);
    }
}

TEST_CASE("reference decoder extends forward_dense row by row") {
    const ModelWeights w = init_model(small_config(51));
    const TokenSequence tokens = sample_tokens(52, 20, w.config.vocab_size);

    ReferenceDecoder decoder(w, EvictionPolicy{0, std::nullopt});
    TokenSequence prompt;
    prompt.tokens.assign(tokens.tokens.begin(), tokens.tokens.begin() + 10);
    std::vector<double> logits = decoder.prefill(prompt);

    for (std::size_t i = 10; i < tokens.size(); ++i) {
        TokenSequence prefix;
        prefix.tokens.assign(tokens.tokens.begin(), tokens.tokens.begin() + i);
        const ForwardResult full = forward_dense(w, prefix, 1);
        CHECK(podtest::max_abs_diff(logits, full.logits.row(i - 1)) < 1e-12);
        logits = decoder.step(tokens.tokens[i]);
    }
}

TEST_CASE("reference decoder eviction policies bound the cache") {
    const ModelWeights w = init_model(small_config(61));
    const TokenSequence prompt = sample_tokens(62, 24, w.config.vocab_size);
    const std::size_t slots = w.config.num_layers * w.config.num_heads;

    ReferenceDecoder window(w, EvictionPolicy{0, 8});
    window.prefill(prompt);
    CHECK(window.cached_keys() == slots * 8);
    window.step(1);
    CHECK(window.cached_keys() == slots * 8);

    ReferenceDecoder streaming(w, EvictionPolicy{3, 8});
    streaming.prefill(prompt);
    CHECK(streaming.cached_keys() == slots * (3 + 8));
    streaming.step(1);
    CHECK(streaming.cached_keys() == slots * (3 + 8));
    CHECK(streaming.cached_values() == streaming.cached_keys());

    ReferenceDecoder dense(w, EvictionPolicy{0, std::nullopt});
    dense.prefill(prompt);
    dense.step(1);
    CHECK(dense.cached_keys() == slots * 25);
}

TEST_CASE("generate_corpus is deterministic and in-vocab") {
    CorpusSpec spec;
    spec.seed = 99;
    spec.num_samples = 3;
    spec.sample_length = 64;
    spec.vocab_size = 32;
    const auto a = generate_corpus(spec);
    const auto b = generate_corpus(spec);
    REQUIRE(a.size() == 3);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].tokens == b[i].tokens);
        a[i].validate(spec.vocab_size);
    }
    spec.seed = 100;
    const auto c = generate_corpus(spec);
    CHECK(a[0].tokens != c[0].tokens);
}
