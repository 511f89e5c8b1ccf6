#pragma once

#include <span>
#include <vector>

#include "pod/model.hpp"
#include "pod/numerics.hpp"

// Layer-level building blocks shared between the forward passes and the
// split-attention runtime. Not part of the stable surface.
namespace pod::detail {

inline constexpr double kRmsNormEps = 1e-6;

std::vector<double> rmsnorm_row(std::span<const double> x, std::span<const double> gain);
RealMatrix rmsnorm_rows(const RealMatrix& x, std::span<const double> gain);

RealMatrix embed_tokens(const ModelWeights& weights, const TokenSequence& tokens);

// Post-rope query/key and value projections for a whole sequence.
struct LayerQKV {
    RealMatrix q, k, v; // [n x model_dim]
};

LayerQKV project_qkv(const LayerWeights& layer, const RealMatrix& normed, const ModelConfig& config);

// Single-token variant used by the decoders.
void qkv_row(const LayerWeights& layer, const ModelConfig& config, std::span<const double> normed,
             std::int64_t rope_position, std::vector<double>& q, std::vector<double>& k,
             std::vector<double>& v);

// x += w2 * silu(w1 * rmsnorm(x))
void ffn_row_inplace(const LayerWeights& layer, std::span<double> x, std::span<const double> gain);

std::vector<double> final_logits_row(const ModelWeights& weights, std::span<const double> x);

} // namespace pod::detail
