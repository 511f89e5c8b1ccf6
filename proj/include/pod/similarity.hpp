#pragma once

#include <cstddef>
#include <vector>

#include "pod/model.hpp"

namespace pod {

// Head-wise layer-by-layer attention similarity in [0, 1]: 1 on the diagonal,
// symmetric, computed as 1 minus the mean base-2 JS divergence of matching
// attention rows.
struct SimilarityTensor {
    std::size_t num_heads = 0;
    std::size_t num_layers = 0;
    std::vector<double> values; // [head][layer_a][layer_b]

    double at(std::size_t h, std::size_t a, std::size_t b) const {
        return values[(h * num_layers + a) * num_layers + b];
    }
    double& at(std::size_t h, std::size_t a, std::size_t b) {
        return values[(h * num_layers + a) * num_layers + b];
    }

    // Throws InvalidInput unless symmetric with unit diagonal and all
    // entries in [0, 1].
    void validate() const;
};

// One dense forward per sample, tracing the last q query rows.
// Throws InvalidInput when the sample list is empty or q exceeds the
// shortest sample.
std::vector<AttentionTrace> collect_traces(const ModelWeights& weights,
                                           const std::vector<TokenSequence>& samples,
                                           std::size_t q);

// values[h][a][b] = 1 - mean over (sample, traced row) of
// JS(row at layer a, row at layer b), rows truncated to their shared causal
// support. Throws InvalidInput on an empty list or mismatched trace shapes.
SimilarityTensor layer_similarity(const std::vector<AttentionTrace>& traces);

} // namespace pod
