#pragma once

#include <cstddef>
#include <vector>

#include "pod/similarity.hpp"

namespace pod {

// Contiguous inclusive layer range, 1-based to match the serialized form.
struct LayerRange {
    std::size_t first = 0;
    std::size_t last = 0;

    bool operator==(const LayerRange&) const = default;
};

// Per-head partition of layers 1..L into consecutive blocks. Within a block
// every layer pair meets the similarity threshold delta.
struct HeadBlocks {
    double delta = 0.0;
    std::vector<std::vector<LayerRange>> heads; // [head] -> ordered blocks

    std::size_t num_heads() const { return heads.size(); }
    std::size_t num_layers() const { return heads.empty() || heads[0].empty() ? 0 : heads[0].back().last; }
    std::size_t blocks_in_head(std::size_t h) const { return heads[h].size(); }

    // 1-based lowest layer of the block containing `layer` (1-based).
    std::size_t lowest_layer_of(std::size_t head, std::size_t layer) const;

    // Structural invariants: per head, blocks are non-empty, consecutive,
    // start at layer 1, and cover 1..L exactly. Throws InvalidInput.
    void validate_structure() const;
};

// Bottom-up greedy partition: per head, layer l joins the current block iff
// it is delta-similar to every layer already in it, else opens a new block.
// Ties at exactly delta join. Throws InvalidInput for delta outside [0, 1].
HeadBlocks greedy_group(const SimilarityTensor& sim, double delta);

struct BlockPairViolation {
    std::size_t head = 0;    // 0-based
    std::size_t layer_a = 0; // 1-based, within one block
    std::size_t layer_b = 0;
    double sim = 0.0;        // observed value < delta
};

// A layer that opened a new block although it is delta-similar to every
// member of the preceding block.
struct MissedMergeViolation {
    std::size_t head = 0;  // 0-based
    std::size_t layer = 0; // 1-based first layer of the offending block
};

struct ValidationReport {
    std::vector<BlockPairViolation> pair_violations;
    std::vector<MissedMergeViolation> missed_merges;

    bool clean() const { return pair_violations.empty() && missed_merges.empty(); }
};

// Empty report iff blocks == greedy_group(sim, blocks.delta).
// Throws InvalidInput on dimension mismatch or structurally broken blocks.
ValidationReport validate_blocks(const HeadBlocks& blocks, const SimilarityTensor& sim);

struct SavingsRate {
    double key_fraction_saved = 0.0;      // of all key entries
    double total_kv_fraction_saved = 0.0; // keys + values, values never shared
};

// Cache accounting for a grouping at sequence length n: every head saves
// (L - B_h) key entries per distant token, where B_h is its block count.
// n <= n_s + n_r means no distant tokens and zero savings (not an error, so
// sweeps over n are total). Throws InvalidInput only for n == 0.
SavingsRate savings_rate(const HeadBlocks& blocks, std::size_t n, std::size_t n_s, std::size_t n_r);

} // namespace pod
