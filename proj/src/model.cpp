#include "pod/model.hpp"

#include <algorithm>
#include <cmath>

#include "pod/model_detail.hpp"
#include "pod/rng.hpp"

namespace pod {

void ModelConfig::validate() const {
    if (num_layers < 1 || num_heads < 1) {
        throw InvalidInput("ModelConfig: num_layers and num_heads must be >= 1");
    }
    if (head_dim < 2 || head_dim % 2 != 0) {
        throw InvalidInput("ModelConfig: head_dim must be even and >= 2");
    }
    if (model_dim != num_heads * head_dim) {
        throw InvalidInput("ModelConfig: model_dim must equal num_heads * head_dim");
    }
    if (vocab_size < 1) {
        throw InvalidInput("ModelConfig: vocab_size must be >= 1");
    }
    if (!(rope_base > 0.0)) {
        throw InvalidInput("ModelConfig: rope_base must be positive");
    }
}

void TokenSequence::validate(std::size_t vocab_size) const {
    if (tokens.empty()) {
        throw InvalidInput("TokenSequence: empty sequence");
    }
    for (std::uint32_t t : tokens) {
        if (t >= vocab_size) {
            throw InvalidInput("TokenSequence: token id " + std::to_string(t) +
                               " out of vocab range " + std::to_string(vocab_size));
        }
    }
}

namespace {

// Values pass through float so the 32-bit on-disk format is lossless.
double draw_weight(SplitMix64& rng, double bound) {
    return static_cast<double>(static_cast<float>(rng.next_uniform(-bound, bound)));
}

void fill_uniform(RealMatrix& m, std::size_t fan_in, SplitMix64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : m.flat()) {
        v = draw_weight(rng, bound);
    }
}

} // namespace

ModelWeights init_model(const ModelConfig& config) {
    config.validate();
    SplitMix64 rng(config.seed);

    ModelWeights w;
    w.config = config;
    const std::size_t dim = config.model_dim;
    const std::size_t ffn = config.ffn_dim();

    w.embedding = RealMatrix(config.vocab_size, dim);
    fill_uniform(w.embedding, dim, rng);

    w.layers.resize(config.num_layers);
    for (LayerWeights& layer : w.layers) {
        layer.attn_gain.assign(dim, 1.0);
        layer.wq = RealMatrix(dim, dim);
        layer.wk = RealMatrix(dim, dim);
        layer.wv = RealMatrix(dim, dim);
        layer.wo = RealMatrix(dim, dim);
        fill_uniform(layer.wq, dim, rng);
        fill_uniform(layer.wk, dim, rng);
        fill_uniform(layer.wv, dim, rng);
        fill_uniform(layer.wo, dim, rng);
        layer.ffn_gain.assign(dim, 1.0);
        layer.w1 = RealMatrix(dim, ffn);
        layer.w2 = RealMatrix(ffn, dim);
        fill_uniform(layer.w1, dim, rng);
        fill_uniform(layer.w2, ffn, rng);
    }

    w.final_gain.assign(dim, 1.0);
    w.unembedding = RealMatrix(dim, config.vocab_size);
    fill_uniform(w.unembedding, dim, rng);
    return w;
}

namespace detail {

std::vector<double> rmsnorm_row(std::span<const double> x, std::span<const double> gain) {
    double sq = 0.0;
    for (double v : x) {
        sq += v * v;
    }
    const double inv_rms = 1.0 / std::sqrt(sq / static_cast<double>(x.size()) + kRmsNormEps);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] * inv_rms * gain[i];
    }
    return out;
}

RealMatrix rmsnorm_rows(const RealMatrix& x, std::span<const double> gain) {
    RealMatrix out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto normed = rmsnorm_row(x.row(r), gain);
        std::copy(normed.begin(), normed.end(), out.row(r).begin());
    }
    return out;
}

RealMatrix embed_tokens(const ModelWeights& weights, const TokenSequence& tokens) {
    const std::size_t dim = weights.config.model_dim;
    RealMatrix x(tokens.size(), dim);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const auto src = weights.embedding.row(tokens.tokens[i]);
        std::copy(src.begin(), src.end(), x.row(i).begin());
    }
    return x;
}

LayerQKV project_qkv(const LayerWeights& layer, const RealMatrix& normed, const ModelConfig& config) {
    LayerQKV out;
    out.q = matmul(normed, layer.wq);
    out.k = matmul(normed, layer.wk);
    out.v = matmul(normed, layer.wv);
    // Rotate each head's slice independently; row r sits at position r (0-based angle).
    const std::size_t d = config.head_dim;
    for (std::size_t r = 0; r < normed.rows(); ++r) {
        for (std::size_t h = 0; h < config.num_heads; ++h) {
            rope_rotate_inplace(out.q.row(r).subspan(h * d, d), static_cast<std::int64_t>(r), config.rope_base);
            rope_rotate_inplace(out.k.row(r).subspan(h * d, d), static_cast<std::int64_t>(r), config.rope_base);
        }
    }
    return out;
}

void qkv_row(const LayerWeights& layer, const ModelConfig& config, std::span<const double> normed,
             std::int64_t rope_position, std::vector<double>& q, std::vector<double>& k,
             std::vector<double>& v) {
    q = vecmat(normed, layer.wq);
    k = vecmat(normed, layer.wk);
    v = vecmat(normed, layer.wv);
    const std::size_t d = config.head_dim;
    for (std::size_t h = 0; h < config.num_heads; ++h) {
        rope_rotate_inplace(std::span<double>(q).subspan(h * d, d), rope_position, config.rope_base);
        rope_rotate_inplace(std::span<double>(k).subspan(h * d, d), rope_position, config.rope_base);
    }
}

void ffn_row_inplace(const LayerWeights& layer, std::span<double> x, std::span<const double> gain) {
    const auto normed = rmsnorm_row(x, gain);
    auto hidden = vecmat(normed, layer.w1);
    for (double& v : hidden) {
        v = v / (1.0 + std::exp(-v)); // silu
    }
    const auto out = vecmat(hidden, layer.w2);
    for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] += out[i];
    }
}

std::vector<double> final_logits_row(const ModelWeights& weights, std::span<const double> x) {
    const auto normed = rmsnorm_row(x, weights.final_gain);
    return vecmat(normed, weights.unembedding);
}

} // namespace detail

namespace {

using detail::LayerQKV;

// Shared layer loop for the dense and masked forward passes. Query position i
// attends to [1, span.sink_end] u [span.recent_begin, i]; iteration is in
// ascending position order so identical allowed sets give identical sums.
RealMatrix forward_core(const ModelWeights& weights, const TokenSequence& tokens,
                        const SpanFn& span_for, std::size_t trace_last_q,
                        AttentionTrace* trace_out, std::vector<LayerQKV>* capture_qkv) {
    const ModelConfig& cfg = weights.config;
    tokens.validate(cfg.vocab_size);
    const std::size_t n = tokens.size();
    const std::size_t d = cfg.head_dim;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    if (trace_out != nullptr) {
        trace_out->num_layers = cfg.num_layers;
        trace_out->num_heads = cfg.num_heads;
        trace_out->traced_rows = trace_last_q;
        trace_out->seq_len = n;
        trace_out->rows.assign(cfg.num_layers * cfg.num_heads, RealMatrix(trace_last_q, n));
    }

    RealMatrix x = detail::embed_tokens(weights, tokens);

    std::vector<std::size_t> allowed;
    allowed.reserve(n);

    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        const LayerWeights& layer = weights.layers[l];
        const RealMatrix normed = detail::rmsnorm_rows(x, layer.attn_gain);
        LayerQKV qkv = detail::project_qkv(layer, normed, cfg);

        RealMatrix heads_out(n, cfg.model_dim);
        for (std::size_t h = 0; h < cfg.num_heads; ++h) {
            const std::size_t off = h * d;
            for (std::size_t i = 1; i <= n; ++i) {
                const CausalSpan span = span_for(i);
                allowed.clear();
                for (std::size_t j = 1; j <= std::min(span.sink_end, i); ++j) {
                    allowed.push_back(j);
                }
                for (std::size_t j = std::max(span.recent_begin, span.sink_end + 1); j <= i; ++j) {
                    allowed.push_back(j);
                }

                std::vector<double> scores(allowed.size());
                const auto q_row = qkv.q.row(i - 1).subspan(off, d);
                for (std::size_t t = 0; t < allowed.size(); ++t) {
                    scores[t] = dot(q_row, qkv.k.row(allowed[t] - 1).subspan(off, d)) * scale;
                }
                const ProbVector probs = stable_softmax(scores);

                auto out_row = heads_out.row(i - 1).subspan(off, d);
                for (std::size_t t = 0; t < allowed.size(); ++t) {
                    const auto v_row = qkv.v.row(allowed[t] - 1).subspan(off, d);
                    for (std::size_t c = 0; c < d; ++c) {
                        out_row[c] += probs[t] * v_row[c];
                    }
                }

                if (trace_out != nullptr && i + trace_last_q > n) {
                    auto trace_row = trace_out->at(l, h).row(i - (n - trace_last_q) - 1);
                    for (std::size_t t = 0; t < allowed.size(); ++t) {
                        trace_row[allowed[t] - 1] = probs[t];
                    }
                }
            }
        }

        const RealMatrix attn_out = matmul(heads_out, layer.wo);
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < cfg.model_dim; ++c) {
                x.at(r, c) += attn_out.at(r, c);
            }
        }
        for (std::size_t r = 0; r < n; ++r) {
            detail::ffn_row_inplace(layer, x.row(r), layer.ffn_gain);
        }

        if (capture_qkv != nullptr) {
            (*capture_qkv)[l] = std::move(qkv);
        }
    }

    RealMatrix logits(n, cfg.vocab_size);
    for (std::size_t r = 0; r < n; ++r) {
        const auto row = detail::final_logits_row(weights, x.row(r));
        std::copy(row.begin(), row.end(), logits.row(r).begin());
    }
    return logits;
}

CausalSpan dense_span(std::size_t) {
    return CausalSpan{0, 1};
}

} // namespace

ForwardResult forward_dense(const ModelWeights& weights, const TokenSequence& tokens,
                            std::size_t trace_last_q) {
    if (trace_last_q < 1 || trace_last_q > tokens.size()) {
        throw InvalidInput("forward_dense: trace_last_q must be in [1, n]");
    }
    ForwardResult result;
    result.logits = forward_core(weights, tokens, dense_span, trace_last_q, &result.trace, nullptr);
    return result;
}

RealMatrix forward_masked(const ModelWeights& weights, const TokenSequence& tokens,
                          const SpanFn& span_for) {
    return forward_core(weights, tokens, span_for, 0, nullptr, nullptr);
}

std::size_t next_token_argmax(std::span<const double> logits_row) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits_row.size(); ++i) {
        if (logits_row[i] > logits_row[best]) {
            best = i;
        }
    }
    return best;
}

ReferenceDecoder::ReferenceDecoder(const ModelWeights& weights, EvictionPolicy policy)
    : weights_(weights), policy_(policy) {
    if (policy_.window && *policy_.window < 1) {
        throw InvalidInput("ReferenceDecoder: window must be >= 1");
    }
    const std::size_t slots = weights.config.num_layers * weights.config.num_heads;
    keys_.resize(slots);
    values_.resize(slots);
}

CausalSpan ReferenceDecoder::span_at(std::size_t position) const {
    CausalSpan span;
    span.sink_end = std::min(policy_.sink_tokens, position);
    if (policy_.window) {
        const std::size_t w = *policy_.window;
        span.recent_begin = position >= w ? position - w + 1 : 1;
        span.recent_begin = std::max(span.recent_begin, span.sink_end + 1);
    } else {
        span.recent_begin = span.sink_end + 1;
    }
    return span;
}

void ReferenceDecoder::evict(std::size_t position) {
    if (!policy_.window) {
        return;
    }
    // Position falling out of [position - window + 1, position] this step.
    if (position <= *policy_.window) {
        return;
    }
    const std::size_t out = position - *policy_.window;
    if (out <= policy_.sink_tokens) {
        return;
    }
    for (auto& per_head : keys_) {
        per_head[out - 1].clear();
    }
    for (auto& per_head : values_) {
        per_head[out - 1].clear();
    }
}

std::vector<double> ReferenceDecoder::prefill(const TokenSequence& prompt) {
    const ModelConfig& cfg = weights_.config;
    prompt.validate(cfg.vocab_size);
    std::vector<LayerQKV> qkv(cfg.num_layers);
    const RealMatrix logits = forward_core(
        weights_, prompt, [this](std::size_t i) { return span_at(i); }, 0, nullptr, &qkv);

    const std::size_t n = prompt.size();
    const std::size_t d = cfg.head_dim;
    length_ = n;
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        for (std::size_t h = 0; h < cfg.num_heads; ++h) {
            auto& kk = keys_[l * cfg.num_heads + h];
            auto& vv = values_[l * cfg.num_heads + h];
            kk.assign(n, {});
            vv.assign(n, {});
            for (std::size_t p = 1; p <= n; ++p) {
                const auto krow = qkv[l].k.row(p - 1).subspan(h * d, d);
                const auto vrow = qkv[l].v.row(p - 1).subspan(h * d, d);
                kk[p - 1].assign(krow.begin(), krow.end());
                vv[p - 1].assign(vrow.begin(), vrow.end());
            }
        }
    }
    // Replay evictions so the cache holds exactly what future steps may see.
    if (policy_.window) {
        for (std::size_t p = *policy_.window + 1; p <= n; ++p) {
            evict(p);
        }
    }
    const auto last = logits.row(n - 1);
    return {last.begin(), last.end()};
}

std::vector<double> ReferenceDecoder::step(std::uint32_t token) {
    const ModelConfig& cfg = weights_.config;
    if (token >= cfg.vocab_size) {
        throw InvalidInput("ReferenceDecoder::step: token out of vocab range");
    }
    if (length_ == 0) {
        throw InvalidInput("ReferenceDecoder::step: prefill first");
    }
    const std::size_t i = length_ + 1;
    const std::size_t d = cfg.head_dim;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    std::vector<double> x(weights_.embedding.row(token).begin(), weights_.embedding.row(token).end());
    std::vector<double> q, k, v;
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        const LayerWeights& layer = weights_.layers[l];
        const auto normed = detail::rmsnorm_row(x, layer.attn_gain);
        detail::qkv_row(layer, cfg, normed, static_cast<std::int64_t>(i - 1), q, k, v);

        std::vector<double> heads_out(cfg.model_dim, 0.0);
        const CausalSpan span = span_at(i);
        for (std::size_t h = 0; h < cfg.num_heads; ++h) {
            auto& kk = keys_[l * cfg.num_heads + h];
            auto& vv = values_[l * cfg.num_heads + h];
            kk.emplace_back(k.begin() + h * d, k.begin() + (h + 1) * d);
            vv.emplace_back(v.begin() + h * d, v.begin() + (h + 1) * d);

            std::vector<std::size_t> allowed;
            for (std::size_t j = 1; j <= std::min(span.sink_end, i); ++j) {
                allowed.push_back(j);
            }
            for (std::size_t j = std::max(span.recent_begin, span.sink_end + 1); j <= i; ++j) {
                allowed.push_back(j);
            }
            std::vector<double> scores(allowed.size());
            const std::span<const double> q_head(q.data() + h * d, d);
            for (std::size_t t = 0; t < allowed.size(); ++t) {
                const auto& key = kk[allowed[t] - 1];
                if (key.empty()) {
                    throw CacheCorruption("ReferenceDecoder: evicted key requested");
                }
                scores[t] = dot(q_head, key) * scale;
            }
            const ProbVector probs = stable_softmax(scores);
            for (std::size_t t = 0; t < allowed.size(); ++t) {
                const auto& val = vv[allowed[t] - 1];
                for (std::size_t c = 0; c < d; ++c) {
                    heads_out[h * d + c] += probs[t] * val[c];
                }
            }
        }

        const auto attn_out = vecmat(heads_out, layer.wo);
        for (std::size_t c = 0; c < cfg.model_dim; ++c) {
            x[c] += attn_out[c];
        }
        detail::ffn_row_inplace(layer, x, layer.ffn_gain);
    }

    length_ = i;
    evict(i);
    return detail::final_logits_row(weights_, x);
}

std::size_t ReferenceDecoder::cached_keys() const {
    std::size_t count = 0;
    for (const auto& per_head : keys_) {
        for (const auto& entry : per_head) {
            count += entry.empty() ? 0 : 1;
        }
    }
    return count;
}

std::size_t ReferenceDecoder::cached_values() const {
    std::size_t count = 0;
    for (const auto& per_head : values_) {
        for (const auto& entry : per_head) {
            count += entry.empty() ? 0 : 1;
        }
    }
    return count;
}

std::vector<TokenSequence> generate_corpus(const CorpusSpec& spec) {
    if (spec.num_samples < 1 || spec.sample_length < 1) {
        throw InvalidInput("generate_corpus: need at least one sample of length >= 1");
    }
    if (spec.vocab_size < 1) {
        throw InvalidInput("generate_corpus: vocab_size must be >= 1");
    }
    if (spec.repeat_prob < 0.0 || spec.repeat_prob > 1.0) {
        throw InvalidInput("generate_corpus: repeat_prob must lie in [0, 1]");
    }
    SplitMix64 rng(spec.seed);
    std::vector<TokenSequence> corpus(spec.num_samples);
    for (TokenSequence& seq : corpus) {
        seq.tokens.resize(spec.sample_length);
        for (std::size_t i = 0; i < spec.sample_length; ++i) {
            const bool copy = i > 0 && spec.lookback > 0 && rng.next_double() < spec.repeat_prob;
            if (copy) {
                const std::size_t reach = std::min(i, spec.lookback);
                const std::size_t offset = 1 + static_cast<std::size_t>(rng.next_below(reach));
                seq.tokens[i] = seq.tokens[i - offset];
            } else {
                seq.tokens[i] = static_cast<std::uint32_t>(rng.next_below(spec.vocab_size));
            }
        }
    }
    return corpus;
}

} // namespace pod
