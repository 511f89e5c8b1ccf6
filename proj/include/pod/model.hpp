#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "pod/numerics.hpp"

namespace pod {

struct ModelConfig {
    std::size_t num_layers = 8;
    std::size_t num_heads = 4;
    std::size_t head_dim = 16;
    std::size_t model_dim = 64; // num_heads * head_dim
    std::size_t vocab_size = 256;
    double rope_base = 10000.0;
    std::uint64_t seed = 0;

    // Hidden width of the two-layer feed-forward; fixed convention, not a field.
    std::size_t ffn_dim() const { return 4 * model_dim; }

    // Throws InvalidInput unless L >= 1, H >= 1, d >= 2 and even,
    // model_dim == H * d, and vocab_size >= 1.
    void validate() const;
};

struct LayerWeights {
    std::vector<double> attn_gain; // [model_dim] rmsnorm gain before attention
    RealMatrix wq, wk, wv, wo;     // [model_dim x model_dim]
    std::vector<double> ffn_gain;  // [model_dim] rmsnorm gain before the feed-forward
    RealMatrix w1;                 // [model_dim x ffn_dim]
    RealMatrix w2;                 // [ffn_dim x model_dim]
};

struct ModelWeights {
    ModelConfig config;
    RealMatrix embedding;           // [vocab x model_dim]
    std::vector<LayerWeights> layers;
    std::vector<double> final_gain; // [model_dim]
    RealMatrix unembedding;         // [model_dim x vocab]
};

struct TokenSequence {
    std::vector<std::uint32_t> tokens;

    std::size_t size() const { return tokens.size(); }

    // Throws InvalidInput if empty or if any token id >= vocab_size.
    void validate(std::size_t vocab_size) const;
};

// Per (layer, head) attention probability rows for the last `traced_rows`
// query positions. Row j (0-based) belongs to query position
// seq_len - traced_rows + j + 1 (1-based) and is zero beyond its causal
// boundary.
struct AttentionTrace {
    std::size_t num_layers = 0;
    std::size_t num_heads = 0;
    std::size_t traced_rows = 0; // q
    std::size_t seq_len = 0;     // n
    std::vector<RealMatrix> rows; // [layer * num_heads + head], each q x n

    RealMatrix& at(std::size_t layer, std::size_t head) { return rows[layer * num_heads + head]; }
    const RealMatrix& at(std::size_t layer, std::size_t head) const { return rows[layer * num_heads + head]; }

    // Causal support length of traced row j: the query can see this many keys.
    std::size_t row_support(std::size_t j) const { return seq_len - traced_rows + j + 1; }
};

// Deterministic initialization: a single splitmix64 stream seeded with
// config.seed drives every draw. Matrices are filled row-major with
// uniform [-1/sqrt(fan_in), +1/sqrt(fan_in)] where fan_in is the input
// dimension; norm gains start at 1. Draw order: embedding, then per layer
// {wq, wk, wv, wo, w1, w2}, then unembedding. Each drawn value is rounded
// to the nearest 32-bit float so weights survive the on-disk format
// losslessly.
ModelWeights init_model(const ModelConfig& config);

struct ForwardResult {
    RealMatrix logits;    // [n x vocab]
    AttentionTrace trace; // empty when trace_last_q == 0
};

// Full causal forward pass; collects attention rows for the last
// trace_last_q query positions of every layer/head.
// Throws InvalidInput when trace_last_q is 0 or exceeds the sequence length.
ForwardResult forward_dense(const ModelWeights& weights, const TokenSequence& tokens,
                            std::size_t trace_last_q);

// Allowed key positions for one query: [1, sink_end] u [recent_begin, i],
// all 1-based. Dense is {0, 1}; a width-w window is {0, max(1, i-w+1)}.
struct CausalSpan {
    std::size_t sink_end = 0;
    std::size_t recent_begin = 1;
};

using SpanFn = std::function<CausalSpan(std::size_t position)>;

// Forward pass where query position i attends only to span_for(i).
RealMatrix forward_masked(const ModelWeights& weights, const TokenSequence& tokens,
                          const SpanFn& span_for);

// Index of the maximum logit; ties resolve to the lowest index.
std::size_t next_token_argmax(std::span<const double> logits_row);

// Which keys an incremental reference decoder keeps. Dense keeps everything;
// window/streaming evict keys (and values) that fall out of the span.
struct EvictionPolicy {
    std::size_t sink_tokens = 0;              // initial tokens never evicted
    std::optional<std::size_t> window;        // recent window; nullopt = keep all
};

// Plain autoregressive decoding with a per-layer KV cache. This is the
// reference path the split/gated runtime is checked against, so it shares no
// attention code with it beyond the numerics kernels.
class ReferenceDecoder {
public:
    ReferenceDecoder(const ModelWeights& weights, EvictionPolicy policy);

    // Processes the prompt (masked per the policy) and returns the final
    // position's logits row.
    std::vector<double> prefill(const TokenSequence& prompt);

    // Appends one token and returns its logits row.
    std::vector<double> step(std::uint32_t token);

    std::size_t sequence_length() const { return length_; }
    std::size_t cached_keys() const;
    std::size_t cached_values() const;

private:
    CausalSpan span_at(std::size_t position) const;
    void evict(std::size_t position);

    const ModelWeights& weights_;
    EvictionPolicy policy_;
    std::size_t length_ = 0;
    // [layer][head] -> entries indexed by position-1; evicted slots are empty.
    std::vector<std::vector<std::vector<double>>> keys_;
    std::vector<std::vector<std::vector<double>>> values_;
};

struct CorpusSpec {
    std::uint64_t seed = 0;
    std::size_t num_samples = 8;
    std::size_t sample_length = 192;
    std::size_t vocab_size = 256;
    double repeat_prob = 0.35;  // chance a token copies an earlier one
    std::size_t lookback = 64;  // how far back copies may reach
};

// Seeded synthetic token streams. The copy mechanism plants repeated spans,
// which keeps attention rows structured instead of near-uniform.
std::vector<TokenSequence> generate_corpus(const CorpusSpec& spec);

} // namespace pod
