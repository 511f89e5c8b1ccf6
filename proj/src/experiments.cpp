#include "pod/experiments.hpp"

#include <algorithm>
#include <cmath>

namespace pod {

RealMatrix run_mode(const ModelWeights& weights, const TokenSequence& tokens,
                    const AttentionMode& mode) {
    if (const auto* dense = std::get_if<DenseMode>(&mode); dense != nullptr) {
        return forward_masked(weights, tokens, [](std::size_t) { return CausalSpan{0, 1}; });
    }
    if (const auto* window = std::get_if<WindowMode>(&mode); window != nullptr) {
        const std::size_t w = window->window;
        if (w < 1) {
            throw InvalidInput("run_mode: window must be >= 1");
        }
        return forward_masked(weights, tokens, [w](std::size_t i) {
            return CausalSpan{0, i >= w ? i - w + 1 : 1};
        });
    }
    if (const auto* streaming = std::get_if<StreamingMode>(&mode); streaming != nullptr) {
        if (streaming->n_r < 1) {
            throw InvalidInput("run_mode: streaming n_r must be >= 1");
        }
        const std::size_t n_s = streaming->n_s;
        const std::size_t n_r = streaming->n_r;
        return forward_masked(weights, tokens, [n_s, n_r](std::size_t i) {
            const TokenSplit split = classify_tokens(i, n_s, n_r);
            return CausalSpan{split.sink_end, split.recent_begin};
        });
    }
    return prefill(weights, std::get<PodMode>(mode).config, tokens).logits;
}

MatchCurve match_experiment(const ModelWeights& weights, const std::vector<TokenSequence>& corpus,
                            std::vector<std::size_t> budgets, std::size_t compare_last,
                            std::size_t n_s) {
    if (corpus.empty()) {
        throw InvalidInput("match_experiment: empty corpus");
    }
    if (compare_last < 1) {
        throw InvalidInput("match_experiment: compare_last must be >= 1");
    }
    for (const TokenSequence& s : corpus) {
        if (compare_last > s.size()) {
            throw InvalidInput("match_experiment: compare_last exceeds a sample length");
        }
    }
    std::sort(budgets.begin(), budgets.end());
    budgets.erase(std::unique(budgets.begin(), budgets.end()), budgets.end());
    if (budgets.empty()) {
        throw InvalidInput("match_experiment: no budgets");
    }
    for (std::size_t b : budgets) {
        if (b <= n_s) {
            throw InvalidInput("match_experiment: every budget must exceed n_s");
        }
    }

    std::vector<RealMatrix> dense_logits;
    dense_logits.reserve(corpus.size());
    for (const TokenSequence& s : corpus) {
        dense_logits.push_back(run_mode(weights, s, DenseMode{}));
    }

    MatchCurve curve;
    for (std::size_t b : budgets) {
        MatchPoint point;
        point.budget = b;
        std::size_t matches = 0;
        for (std::size_t si = 0; si < corpus.size(); ++si) {
            const TokenSequence& s = corpus[si];
            const RealMatrix restricted =
                run_mode(weights, s, StreamingMode{n_s, b - n_s});
            for (std::size_t i = s.size() - compare_last; i < s.size(); ++i) {
                const std::size_t a = next_token_argmax(dense_logits[si].row(i));
                const std::size_t r = next_token_argmax(restricted.row(i));
                matches += (a == r) ? 1 : 0;
                ++point.samples;
            }
        }
        point.match_fraction = static_cast<double>(matches) / static_cast<double>(point.samples);
        curve.points.push_back(point);
    }
    return curve;
}

namespace {

struct ReplayRun {
    std::vector<std::vector<double>> logits; // one row per step
    std::vector<DecodeStepReport> reports;
};

ReplayRun decode_tokens(const ModelWeights& weights, const PoDConfig& config,
                        const TokenSequence& prompt, const std::vector<std::uint32_t>& tokens) {
    ReplayRun run;
    PrefillResult pre = prefill(weights, config, prompt);
    for (std::uint32_t t : tokens) {
        DecodeStepResult step = decode_step(weights, config, pre.cache, t);
        run.logits.push_back(std::move(step.logits));
        run.reports.push_back(std::move(step.report));
    }
    return run;
}

} // namespace

TauSweep tau_sweep(const ModelWeights& weights, const PoDConfig& config, const TokenSequence& prompt,
                   std::vector<double> taus, std::size_t decode_steps) {
    if (decode_steps < 1) {
        throw InvalidInput("tau_sweep: decode_steps must be >= 1");
    }
    for (double t : taus) {
        if (!(t >= 0.0 && t <= 1.0)) {
            throw InvalidInput("tau_sweep: taus must lie in [0, 1]");
        }
    }
    std::sort(taus.begin(), taus.end());

    // Unskipped greedy baseline; its tokens are replayed for every tau so the
    // logits comparison is position-by-position over identical inputs.
    PoDConfig baseline_config = config;
    baseline_config.tau.reset();
    baseline_config.validate(weights.config);

    std::vector<std::uint32_t> generated;
    ReplayRun baseline;
    {
        PrefillResult pre = prefill(weights, baseline_config, prompt);
        std::uint32_t next =
            static_cast<std::uint32_t>(next_token_argmax(pre.logits.row(prompt.size() - 1)));
        for (std::size_t s = 0; s < decode_steps; ++s) {
            generated.push_back(next);
            DecodeStepResult step = decode_step(weights, baseline_config, pre.cache, next);
            next = static_cast<std::uint32_t>(next_token_argmax(step.logits));
            baseline.logits.push_back(std::move(step.logits));
            baseline.reports.push_back(std::move(step.report));
        }
    }

    const std::size_t H = weights.config.num_heads;
    const HeadBlocks& blocks = config.blocks;

    auto eligible_at = [&](std::size_t position, std::size_t layer, std::size_t head) {
        if (blocks.lowest_layer_of(head, layer + 1) == layer + 1) {
            return false;
        }
        return classify_tokens(position, config.n_s, config.n_r).has_distant();
    };

    std::size_t eligible_total = 0;
    double max_gate = 0.0;
    for (const DecodeStepReport& report : baseline.reports) {
        for (std::size_t l = 0; l < weights.config.num_layers; ++l) {
            for (std::size_t h = 0; h < H; ++h) {
                if (eligible_at(report.position, l, h)) {
                    ++eligible_total;
                    max_gate = std::max(max_gate, report.at(l, h).gate);
                }
            }
        }
    }

    TauSweep sweep;
    sweep.max_observed_gate = max_gate;
    for (double tau : taus) {
        PoDConfig run_config = config;
        run_config.tau = tau;
        const ReplayRun run = decode_tokens(weights, run_config, prompt, generated);

        std::size_t skipped = 0;
        double abs_diff_sum = 0.0;
        std::size_t logit_count = 0;
        for (std::size_t s = 0; s < run.reports.size(); ++s) {
            for (const HeadStepReport& entry : run.reports[s].per_layer_head) {
                skipped += entry.skipped ? 1 : 0;
            }
            const auto& got = run.logits[s];
            const auto& ref = baseline.logits[s];
            for (std::size_t c = 0; c < got.size(); ++c) {
                abs_diff_sum += std::abs(got[c] - ref[c]);
                ++logit_count;
            }
        }

        TauPoint point;
        point.tau = tau;
        point.skip_fraction =
            eligible_total == 0 ? 0.0 : static_cast<double>(skipped) / static_cast<double>(eligible_total);
        point.logit_divergence = abs_diff_sum / static_cast<double>(logit_count);
        sweep.points.push_back(point);
    }
    return sweep;
}

} // namespace pod
