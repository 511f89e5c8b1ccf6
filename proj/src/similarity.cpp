#include "pod/similarity.hpp"

#include <algorithm>
#include <cmath>

namespace pod {

void SimilarityTensor::validate() const {
    if (num_heads < 1 || num_layers < 1) {
        throw InvalidInput("SimilarityTensor: empty dimensions");
    }
    if (values.size() != num_heads * num_layers * num_layers) {
        throw InvalidInput("SimilarityTensor: value count does not match dimensions");
    }
    for (std::size_t h = 0; h < num_heads; ++h) {
        for (std::size_t a = 0; a < num_layers; ++a) {
            if (at(h, a, a) != 1.0) {
                throw InvalidInput("SimilarityTensor: diagonal must be exactly 1");
            }
            for (std::size_t b = 0; b < num_layers; ++b) {
                const double v = at(h, a, b);
                if (!(v >= 0.0 && v <= 1.0)) {
                    throw InvalidInput("SimilarityTensor: entry outside [0, 1]");
                }
                if (v != at(h, b, a)) {
                    throw InvalidInput("SimilarityTensor: not symmetric");
                }
            }
        }
    }
}

std::vector<AttentionTrace> collect_traces(const ModelWeights& weights,
                                           const std::vector<TokenSequence>& samples,
                                           std::size_t q) {
    if (samples.empty()) {
        throw InvalidInput("collect_traces: no samples");
    }
    for (const TokenSequence& s : samples) {
        if (q < 1 || q > s.size()) {
            throw InvalidInput("collect_traces: q must be in [1, shortest sample length]");
        }
    }
    std::vector<AttentionTrace> traces;
    traces.reserve(samples.size());
    for (const TokenSequence& s : samples) {
        traces.push_back(forward_dense(weights, s, q).trace);
    }
    return traces;
}

SimilarityTensor layer_similarity(const std::vector<AttentionTrace>& traces) {
    if (traces.empty()) {
        throw InvalidInput("layer_similarity: no traces");
    }
    const std::size_t L = traces.front().num_layers;
    const std::size_t H = traces.front().num_heads;
    const std::size_t q = traces.front().traced_rows;
    for (const AttentionTrace& t : traces) {
        if (t.num_layers != L || t.num_heads != H || t.traced_rows != q) {
            throw InvalidInput("layer_similarity: traces disagree on L, H, or q");
        }
        if (t.rows.size() != L * H) {
            throw InvalidInput("layer_similarity: trace is missing layer/head matrices");
        }
        if (q < 1 || q > t.seq_len) {
            throw InvalidInput("layer_similarity: traced rows exceed the sequence length");
        }
        for (const RealMatrix& m : t.rows) {
            if (m.rows() != q || m.cols() != t.seq_len) {
                throw InvalidInput("layer_similarity: trace matrix shape mismatch");
            }
        }
    }

    SimilarityTensor sim;
    sim.num_heads = H;
    sim.num_layers = L;
    sim.values.assign(H * L * L, 1.0);

    const double inv_terms = 1.0 / (static_cast<double>(traces.size()) * static_cast<double>(q));
    for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t a = 0; a < L; ++a) {
            for (std::size_t b = a + 1; b < L; ++b) {
                double mean_js = 0.0;
                for (const AttentionTrace& t : traces) {
                    for (std::size_t j = 0; j < q; ++j) {
                        const std::size_t support = t.row_support(j);
                        mean_js += js_divergence(t.at(a, h).row(j).first(support),
                                                 t.at(b, h).row(j).first(support)) *
                                   inv_terms;
                    }
                }
                const double value = std::clamp(1.0 - mean_js, 0.0, 1.0);
                sim.at(h, a, b) = value;
                sim.at(h, b, a) = value;
            }
        }
    }
    return sim;
}

} // namespace pod
