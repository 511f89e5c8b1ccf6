#pragma once

#include <cstddef>
#include <variant>
#include <vector>

#include "pod/runtime.hpp"

namespace pod {

// Reference attention modes: dense plus the two token-eviction baselines,
// and the split runtime itself.
struct DenseMode {};
struct WindowMode {
    std::size_t window = 1; // each token attends to its last `window` tokens
};
struct StreamingMode {
    std::size_t n_s = 0; // initial tokens kept as sinks
    std::size_t n_r = 1; // recent window
};
struct PodMode {
    PoDConfig config;
};

using AttentionMode = std::variant<DenseMode, WindowMode, StreamingMode, PodMode>;

// Logits over the whole sequence under the chosen mode. Window and streaming
// are realized as masked forward passes; pod delegates to prefill.
RealMatrix run_mode(const ModelWeights& weights, const TokenSequence& tokens,
                    const AttentionMode& mode);

// Fraction of next-token predictions that survive restricting attention to a
// proximal budget, per budget.
struct MatchPoint {
    std::size_t budget = 0;        // total proximal tokens: n_s + recent window
    double match_fraction = 0.0;
    std::size_t samples = 0;       // compared positions behind the fraction
};

struct MatchCurve {
    std::vector<MatchPoint> points; // budgets strictly increasing
};

// For each budget b: argmax agreement between streaming(n_s, b - n_s) and
// dense logits over the last compare_last positions of every sample. Budgets
// are deduplicated and reported in ascending order. A budget covering the
// whole sequence matches exactly.
// Throws InvalidInput when the corpus is empty, compare_last == 0 or exceeds
// a sample, or any budget <= n_s.
MatchCurve match_experiment(const ModelWeights& weights, const std::vector<TokenSequence>& corpus,
                            std::vector<std::size_t> budgets, std::size_t compare_last,
                            std::size_t n_s);

struct TauPoint {
    double tau = 0.0;
    double skip_fraction = 0.0;    // skipped / eligible (layer, head, step) triples
    double logit_divergence = 0.0; // mean |logit delta| vs the unskipped run
};

struct TauSweep {
    std::vector<TauPoint> points; // taus ascending
    double max_observed_gate = 0.0; // over eligible triples of the unskipped run
};

// Decodes decode_steps greedy tokens with skipping disabled, then replays the
// same token sequence once per tau with skipping enabled. Divergence compares
// logits rows step by step against the unskipped run.
// Throws InvalidInput for decode_steps == 0 or a tau outside [0, 1].
TauSweep tau_sweep(const ModelWeights& weights, const PoDConfig& config, const TokenSequence& prompt,
                   std::vector<double> taus, std::size_t decode_steps);

} // namespace pod
