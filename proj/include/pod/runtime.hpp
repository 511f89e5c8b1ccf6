#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "pod/grouping.hpp"
#include "pod/model.hpp"

namespace pod {

// Parameters of the split proximal/distant attention runtime.
struct PoDConfig {
    std::size_t n_s = 4;            // start size: initial (sink) tokens
    std::size_t n_r = 32;           // recent size: trailing window
    std::optional<double> tau;      // gate threshold; nullopt disables skipping
    HeadBlocks blocks;

    // Throws InvalidInput / ConfigMismatch when sizes or block dimensions
    // disagree with the model.
    void validate(const ModelConfig& model) const;
};

// Proximal/distant partition of the context of a query at `position`
// (1-based): proximal = [1, sink_end] u [recent_begin, position], distant is
// the gap in between (possibly empty).
struct TokenSplit {
    std::size_t position = 0;
    std::size_t sink_end = 0;
    std::size_t recent_begin = 1;

    bool has_distant() const { return recent_begin > sink_end + 1; }
    std::size_t distant_begin() const { return sink_end + 1; }
    std::size_t distant_end() const { return recent_begin - 1; }
    std::size_t distant_count() const { return has_distant() ? recent_begin - sink_end - 1 : 0; }
    std::size_t proximal_count() const { return position - distant_count(); }

    std::vector<std::size_t> proximal_indices() const;
    std::vector<std::size_t> distant_indices() const;
};

// Throws InvalidInput when position == 0 or n_r == 0.
TokenSplit classify_tokens(std::size_t position, std::size_t n_s, std::size_t n_r);

// The two halves of one head's attention for one query, before gating.
// gate = exp(lse_proximal) / (exp(lse_proximal) + exp(lse_distant)),
// evaluated in log space. distant_out is absent iff the query has no distant
// tokens, in which case gate == 1.
struct SplitAttentionOutput {
    std::vector<double> proximal_out;
    std::optional<std::vector<double>> distant_out;
    double gate = 1.0;
    double lse_proximal = 0.0;
    std::optional<double> lse_distant;
};

// gate * proximal_out + (1 - gate) * distant_out (proximal_out alone when no
// distant half exists). With self-shared queries/keys this reproduces dense
// softmax attention over the full context.
std::vector<double> gate_combine(const SplitAttentionOutput& split);

// Layered KV store: values for every past token at every (layer, head); full
// keys only where the layer is the lowest of its block; proximal-only keys
// elsewhere. Query states are never stored.
class PoDKVCache {
public:
    PoDKVCache(const ModelConfig& model, const PoDConfig& config);

    std::size_t num_layers() const { return num_layers_; }
    std::size_t num_heads() const { return num_heads_; }
    std::size_t head_dim() const { return head_dim_; }
    std::size_t n_s() const { return n_s_; }
    std::size_t n_r() const { return n_r_; }
    std::size_t sequence_length() const { return length_; }

    // 0-based lowest layer of the block containing `layer` for `head`.
    std::size_t lowest_layer(std::size_t layer, std::size_t head) const {
        return lowest_[layer * num_heads_ + head];
    }
    bool is_block_lowest(std::size_t layer, std::size_t head) const {
        return lowest_layer(layer, head) == layer;
    }

    // One token enters the cache via store_token_entry() for every
    // (layer, head), then finish_token() commits it and evicts the key that
    // left the recent window at every non-lowest (layer, head).
    void store_token_entry(std::size_t layer, std::size_t head, std::span<const double> key,
                           std::span<const double> value);
    void finish_token();

    bool has_key(std::size_t layer, std::size_t head, std::size_t position) const;
    std::span<const double> key(std::size_t layer, std::size_t head, std::size_t position) const;
    std::span<const double> value(std::size_t layer, std::size_t head, std::size_t position) const;

    std::size_t key_entries() const { return key_entries_; }
    std::size_t value_entries() const { return value_entries_; }

    // Recounts from storage; used to audit the running counters.
    std::pair<std::size_t, std::size_t> recount_entries() const;

private:
    struct Store {
        std::vector<std::vector<double>> keys;   // [pos-1]; empty slot = evicted
        std::vector<std::vector<double>> values; // [pos-1]
    };

    Store& slot(std::size_t layer, std::size_t head) { return stores_[layer * num_heads_ + head]; }
    const Store& slot(std::size_t layer, std::size_t head) const {
        return stores_[layer * num_heads_ + head];
    }

    std::size_t num_layers_ = 0;
    std::size_t num_heads_ = 0;
    std::size_t head_dim_ = 0;
    std::size_t n_s_ = 0;
    std::size_t n_r_ = 0;
    std::size_t length_ = 0;
    std::vector<std::size_t> lowest_; // [layer * H + head] -> 0-based lowest layer
    std::vector<Store> stores_;
    std::size_t key_entries_ = 0;
    std::size_t value_entries_ = 0;
};

// One head's split attention for the query at `position` (1-based, may be the
// in-flight token whose entries are stored but not yet committed): the
// proximal half uses q_own against the layer's own keys/values; the distant
// half scores q_shared against the block-lowest layer's keys and aggregates
// the layer's own values. Throws CacheCorruption when required entries are
// missing.
SplitAttentionOutput split_attention(std::span<const double> q_own, std::span<const double> q_shared,
                                     const PoDKVCache& cache, std::size_t layer, std::size_t head,
                                     std::size_t position);

// Per-step record: gate and skip flag per (layer, head) plus cache counters.
struct HeadStepReport {
    double gate = 1.0;
    bool skipped = false;
};

struct DecodeStepReport {
    std::size_t position = 0;                   // sequence length after the step
    std::size_t num_heads = 0;
    std::vector<HeadStepReport> per_layer_head; // [layer * num_heads + head]
    std::size_t key_entries = 0;
    std::size_t value_entries = 0;

    const HeadStepReport& at(std::size_t layer, std::size_t head) const {
        return per_layer_head[layer * num_heads + head];
    }
};

struct PrefillResult {
    PoDKVCache cache;
    RealMatrix logits; // [n x vocab], split attention applied per position
};

// Runs split attention over the whole prompt (each position classified
// relative to itself) and leaves the cache in its deduplicated state.
PrefillResult prefill(const ModelWeights& weights, const PoDConfig& config,
                      const TokenSequence& tokens);

struct DecodeStepResult {
    std::vector<double> logits;
    DecodeStepReport report;
};

// Appends one token. At non-lowest layers with the threshold enabled and
// gate >= tau, the distant aggregation is skipped and the proximal output is
// emitted alone.
DecodeStepResult decode_step(const ModelWeights& weights, const PoDConfig& config,
                             PoDKVCache& cache, std::uint32_t token);

struct BoolMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> data;

    BoolMatrix() = default;
    BoolMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0) {}

    bool at(std::size_t r, std::size_t c) const { return data[r * cols + c] != 0; }
    void set(std::size_t r, std::size_t c, bool v) { data[r * cols + c] = v ? 1 : 0; }
};

struct SplitMasks {
    BoolMatrix proximal;
    BoolMatrix distant;
};

// n x n masks whose row i reproduces classify_tokens(i, n_s, n_r); their
// union is the full causal mask and they are disjoint.
SplitMasks build_split_mask(std::size_t n, std::size_t n_s, std::size_t n_r);

} // namespace pod
