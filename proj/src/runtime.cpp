#include "pod/runtime.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "pod/model_detail.hpp"

namespace pod {

void PoDConfig::validate(const ModelConfig& model) const {
    model.validate();
    if (n_r < 1) {
        throw InvalidInput("PoDConfig: n_r must be >= 1");
    }
    if (tau && (*tau < 0.0 || *tau > 1.0)) {
        throw InvalidInput("PoDConfig: tau must lie in [0, 1]");
    }
    blocks.validate_structure();
    if (blocks.num_heads() != model.num_heads || blocks.num_layers() != model.num_layers) {
        throw ConfigMismatch("PoDConfig: blocks cover " + std::to_string(blocks.num_layers()) +
                             " layers x " + std::to_string(blocks.num_heads()) +
                             " heads, model has " + std::to_string(model.num_layers) +
                             " layers x " + std::to_string(model.num_heads) + " heads");
    }
}

std::vector<std::size_t> TokenSplit::proximal_indices() const {
    std::vector<std::size_t> out;
    out.reserve(proximal_count());
    for (std::size_t j = 1; j <= sink_end; ++j) {
        out.push_back(j);
    }
    for (std::size_t j = recent_begin; j <= position; ++j) {
        out.push_back(j);
    }
    return out;
}

std::vector<std::size_t> TokenSplit::distant_indices() const {
    std::vector<std::size_t> out;
    out.reserve(distant_count());
    for (std::size_t j = distant_begin(); j <= distant_end() && has_distant(); ++j) {
        out.push_back(j);
    }
    return out;
}

TokenSplit classify_tokens(std::size_t position, std::size_t n_s, std::size_t n_r) {
    if (position < 1) {
        throw InvalidInput("classify_tokens: position must be >= 1");
    }
    if (n_r < 1) {
        throw InvalidInput("classify_tokens: n_r must be >= 1");
    }
    TokenSplit split;
    split.position = position;
    split.sink_end = std::min(n_s, position);
    const std::size_t window_begin = position >= n_r ? position - n_r + 1 : 1;
    split.recent_begin = std::max(split.sink_end + 1, window_begin);
    return split;
}

namespace {

double gate_from_lse(double lse_proximal, double lse_distant) {
    return 1.0 / (1.0 + std::exp(lse_distant - lse_proximal));
}

// Softmax attention over an explicit set of key/value entries; also returns
// the log-sum-exp of the raw scores and the normalized weights, which the
// distant half shares across layers.
struct HalfResult {
    std::vector<double> out;
    double lse = 0.0;
    ProbVector probs;
};

HalfResult attend_half(std::span<const double> q, const std::vector<std::span<const double>>& keys,
                       const std::vector<std::span<const double>>& values, double scale) {
    std::vector<double> scores(keys.size());
    for (std::size_t t = 0; t < keys.size(); ++t) {
        scores[t] = dot(q, keys[t]) * scale;
    }
    HalfResult half;
    half.probs = stable_softmax(scores);
    half.lse = log_sum_exp(scores);
    half.out.assign(q.size(), 0.0);
    for (std::size_t t = 0; t < values.size(); ++t) {
        for (std::size_t c = 0; c < q.size(); ++c) {
            half.out[c] += half.probs[t] * values[t][c];
        }
    }
    return half;
}

} // namespace

std::vector<double> gate_combine(const SplitAttentionOutput& split) {
    if (!split.distant_out) {
        return split.proximal_out;
    }
    const double g = split.gate;
    std::vector<double> out(split.proximal_out.size());
    for (std::size_t c = 0; c < out.size(); ++c) {
        out[c] = g * split.proximal_out[c] + (1.0 - g) * (*split.distant_out)[c];
    }
    return out;
}

PoDKVCache::PoDKVCache(const ModelConfig& model, const PoDConfig& config) {
    config.validate(model);
    num_layers_ = model.num_layers;
    num_heads_ = model.num_heads;
    head_dim_ = model.head_dim;
    n_s_ = config.n_s;
    n_r_ = config.n_r;
    lowest_.resize(num_layers_ * num_heads_);
    for (std::size_t h = 0; h < num_heads_; ++h) {
        for (const LayerRange& block : config.blocks.heads[h]) {
            for (std::size_t layer = block.first; layer <= block.last; ++layer) {
                lowest_[(layer - 1) * num_heads_ + h] = block.first - 1;
            }
        }
    }
    stores_.resize(num_layers_ * num_heads_);
}

void PoDKVCache::store_token_entry(std::size_t layer, std::size_t head, std::span<const double> key,
                                   std::span<const double> value) {
    if (key.size() != head_dim_ || value.size() != head_dim_) {
        throw CacheCorruption("PoDKVCache: entry dimension does not match head_dim");
    }
    Store& s = slot(layer, head);
    if (s.keys.size() != length_ || s.values.size() != length_) {
        throw CacheCorruption("PoDKVCache: duplicate or out-of-order entry for layer " +
                              std::to_string(layer + 1) + ", head " + std::to_string(head + 1));
    }
    s.keys.emplace_back(key.begin(), key.end());
    s.values.emplace_back(value.begin(), value.end());
    ++key_entries_;
    ++value_entries_;
}

void PoDKVCache::finish_token() {
    for (std::size_t l = 0; l < num_layers_; ++l) {
        for (std::size_t h = 0; h < num_heads_; ++h) {
            if (slot(l, h).keys.size() != length_ + 1) {
                throw CacheCorruption("PoDKVCache: token committed before all entries stored");
            }
        }
    }
    ++length_;
    // The token leaving the recent window loses its key wherever the layer is
    // not block-lowest; sinks are never evicted, values never are.
    if (length_ <= n_r_) {
        return;
    }
    const std::size_t evicted = length_ - n_r_;
    if (evicted <= n_s_) {
        return;
    }
    for (std::size_t l = 0; l < num_layers_; ++l) {
        for (std::size_t h = 0; h < num_heads_; ++h) {
            if (is_block_lowest(l, h)) {
                continue;
            }
            auto& entry = slot(l, h).keys[evicted - 1];
            if (entry.empty()) {
                throw CacheCorruption("PoDKVCache: key evicted twice at position " +
                                      std::to_string(evicted));
            }
            entry.clear();
            entry.shrink_to_fit();
            --key_entries_;
        }
    }
}

bool PoDKVCache::has_key(std::size_t layer, std::size_t head, std::size_t position) const {
    const Store& s = slot(layer, head);
    return position >= 1 && position <= s.keys.size() && !s.keys[position - 1].empty();
}

std::span<const double> PoDKVCache::key(std::size_t layer, std::size_t head,
                                        std::size_t position) const {
    if (!has_key(layer, head, position)) {
        throw CacheCorruption("PoDKVCache: missing key at layer " + std::to_string(layer + 1) +
                              ", head " + std::to_string(head + 1) + ", position " +
                              std::to_string(position));
    }
    return slot(layer, head).keys[position - 1];
}

std::span<const double> PoDKVCache::value(std::size_t layer, std::size_t head,
                                          std::size_t position) const {
    const Store& s = slot(layer, head);
    if (position < 1 || position > s.values.size() || s.values[position - 1].empty()) {
        throw CacheCorruption("PoDKVCache: missing value at layer " + std::to_string(layer + 1) +
                              ", head " + std::to_string(head + 1) + ", position " +
                              std::to_string(position));
    }
    return s.values[position - 1];
}

std::pair<std::size_t, std::size_t> PoDKVCache::recount_entries() const {
    std::size_t keys = 0;
    std::size_t values = 0;
    for (const Store& s : stores_) {
        for (const auto& k : s.keys) {
            keys += k.empty() ? 0 : 1;
        }
        for (const auto& v : s.values) {
            values += v.empty() ? 0 : 1;
        }
    }
    return {keys, values};
}

SplitAttentionOutput split_attention(std::span<const double> q_own, std::span<const double> q_shared,
                                     const PoDKVCache& cache, std::size_t layer, std::size_t head,
                                     std::size_t position) {
    const std::size_t d = cache.head_dim();
    if (q_own.size() != d || q_shared.size() != d) {
        throw InvalidInput("split_attention: query dimension does not match head_dim");
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    const TokenSplit split = classify_tokens(position, cache.n_s(), cache.n_r());

    std::vector<std::span<const double>> keys;
    std::vector<std::span<const double>> values;
    for (std::size_t j : split.proximal_indices()) {
        keys.push_back(cache.key(layer, head, j));
        values.push_back(cache.value(layer, head, j));
    }
    HalfResult proximal = attend_half(q_own, keys, values, scale);

    SplitAttentionOutput out;
    out.proximal_out = std::move(proximal.out);
    out.lse_proximal = proximal.lse;
    if (!split.has_distant()) {
        return out;
    }

    const std::size_t lowest = cache.lowest_layer(layer, head);
    keys.clear();
    values.clear();
    for (std::size_t j : split.distant_indices()) {
        keys.push_back(cache.key(lowest, head, j));
        values.push_back(cache.value(layer, head, j)); // scores shared, values own
    }
    HalfResult distant = attend_half(q_shared, keys, values, scale);
    out.distant_out = std::move(distant.out);
    out.lse_distant = distant.lse;
    out.gate = gate_from_lse(out.lse_proximal, distant.lse);
    return out;
}

namespace {

using detail::LayerQKV;

std::span<const double> head_slice(const RealMatrix& m, std::size_t row, std::size_t head,
                                   std::size_t d) {
    return m.row(row).subspan(head * d, d);
}

} // namespace

PrefillResult prefill(const ModelWeights& weights, const PoDConfig& config,
                      const TokenSequence& tokens) {
    const ModelConfig& cfg = weights.config;
    config.validate(cfg);
    tokens.validate(cfg.vocab_size);

    const std::size_t n = tokens.size();
    const std::size_t d = cfg.head_dim;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    PrefillResult result{PoDKVCache(cfg, config), RealMatrix(n, cfg.vocab_size)};

    RealMatrix x = detail::embed_tokens(weights, tokens);
    std::vector<LayerQKV> qkv(cfg.num_layers);

    std::vector<std::span<const double>> keys;
    std::vector<std::span<const double>> values;
    keys.reserve(n);
    values.reserve(n);

    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        const LayerWeights& layer = weights.layers[l];
        const RealMatrix normed = detail::rmsnorm_rows(x, layer.attn_gain);
        qkv[l] = detail::project_qkv(layer, normed, cfg);

        RealMatrix heads_out(n, cfg.model_dim);
        for (std::size_t h = 0; h < cfg.num_heads; ++h) {
            const std::size_t lowest = config.blocks.lowest_layer_of(h, l + 1) - 1;
            for (std::size_t i = 1; i <= n; ++i) {
                const TokenSplit split = classify_tokens(i, config.n_s, config.n_r);

                keys.clear();
                values.clear();
                for (std::size_t j : split.proximal_indices()) {
                    keys.push_back(head_slice(qkv[l].k, j - 1, h, d));
                    values.push_back(head_slice(qkv[l].v, j - 1, h, d));
                }
                HalfResult proximal = attend_half(head_slice(qkv[l].q, i - 1, h, d), keys, values, scale);

                std::vector<double> combined;
                if (split.has_distant()) {
                    keys.clear();
                    values.clear();
                    for (std::size_t j : split.distant_indices()) {
                        keys.push_back(head_slice(qkv[lowest].k, j - 1, h, d));
                        values.push_back(head_slice(qkv[l].v, j - 1, h, d));
                    }
                    HalfResult distant =
                        attend_half(head_slice(qkv[lowest].q, i - 1, h, d), keys, values, scale);
                    const double g = gate_from_lse(proximal.lse, distant.lse);
                    combined.resize(d);
                    for (std::size_t c = 0; c < d; ++c) {
                        combined[c] = g * proximal.out[c] + (1.0 - g) * distant.out[c];
                    }
                } else {
                    combined = std::move(proximal.out);
                }
                std::copy(combined.begin(), combined.end(), heads_out.row(i - 1).begin() + h * d);
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
    }

    for (std::size_t r = 0; r < n; ++r) {
        const auto row = detail::final_logits_row(weights, x.row(r));
        std::copy(row.begin(), row.end(), result.logits.row(r).begin());
    }

    // Feed the cache token by token so eviction follows the same policy as
    // decoding; the end state keeps full keys only at block-lowest layers.
    for (std::size_t p = 1; p <= n; ++p) {
        for (std::size_t l = 0; l < cfg.num_layers; ++l) {
            for (std::size_t h = 0; h < cfg.num_heads; ++h) {
                result.cache.store_token_entry(l, h, head_slice(qkv[l].k, p - 1, h, d),
                                               head_slice(qkv[l].v, p - 1, h, d));
            }
        }
        result.cache.finish_token();
    }
    return result;
}

DecodeStepResult decode_step(const ModelWeights& weights, const PoDConfig& config,
                             PoDKVCache& cache, std::uint32_t token) {
    const ModelConfig& cfg = weights.config;
    if (cache.num_layers() != cfg.num_layers || cache.num_heads() != cfg.num_heads ||
        cache.head_dim() != cfg.head_dim) {
        throw ConfigMismatch("decode_step: cache dimensions do not match the model");
    }
    if (cache.n_s() != config.n_s || cache.n_r() != config.n_r) {
        throw ConfigMismatch("decode_step: cache was built for n_s=" + std::to_string(cache.n_s()) +
                             ", n_r=" + std::to_string(cache.n_r()) + ", config has n_s=" +
                             std::to_string(config.n_s) + ", n_r=" + std::to_string(config.n_r));
    }
    if (token >= cfg.vocab_size) {
        throw InvalidInput("decode_step: token out of vocab range");
    }
    if (cache.sequence_length() == 0) {
        throw InvalidInput("decode_step: prefill before decoding");
    }

    const std::size_t i = cache.sequence_length() + 1;
    const std::size_t d = cfg.head_dim;
    const std::size_t H = cfg.num_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    const TokenSplit split = classify_tokens(i, config.n_s, config.n_r);

    DecodeStepResult result;
    result.report.position = i;
    result.report.num_heads = H;
    result.report.per_layer_head.assign(cfg.num_layers * H, HeadStepReport{});

    // Distant weights computed at each block-lowest layer, reused by the
    // layers above it within the same block for the rest of this step.
    struct DistantShared {
        ProbVector probs;
        double lse = 0.0;
        bool present = false;
    };
    std::vector<DistantShared> shared(cfg.num_layers * H);

    std::vector<double> x(weights.embedding.row(token).begin(), weights.embedding.row(token).end());
    std::vector<double> q, k, v;
    std::vector<std::span<const double>> keys;
    std::vector<std::span<const double>> values;

    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        const LayerWeights& layer = weights.layers[l];
        const auto normed = detail::rmsnorm_row(x, layer.attn_gain);
        detail::qkv_row(layer, cfg, normed, static_cast<std::int64_t>(i - 1), q, k, v);

        std::vector<double> heads_out(cfg.model_dim, 0.0);
        for (std::size_t h = 0; h < H; ++h) {
            cache.store_token_entry(l, h, std::span<const double>(k).subspan(h * d, d),
                                    std::span<const double>(v).subspan(h * d, d));

            const std::span<const double> q_head(q.data() + h * d, d);
            keys.clear();
            values.clear();
            for (std::size_t j : split.proximal_indices()) {
                keys.push_back(cache.key(l, h, j));
                values.push_back(cache.value(l, h, j));
            }
            HalfResult proximal = attend_half(q_head, keys, values, scale);

            HeadStepReport& entry = result.report.per_layer_head[l * H + h];
            std::vector<double> out;
            if (!split.has_distant()) {
                out = std::move(proximal.out);
            } else if (cache.is_block_lowest(l, h)) {
                keys.clear();
                values.clear();
                for (std::size_t j : split.distant_indices()) {
                    keys.push_back(cache.key(l, h, j));
                    values.push_back(cache.value(l, h, j));
                }
                HalfResult distant = attend_half(q_head, keys, values, scale);
                entry.gate = gate_from_lse(proximal.lse, distant.lse);
                out.resize(d);
                for (std::size_t c = 0; c < d; ++c) {
                    out[c] = entry.gate * proximal.out[c] + (1.0 - entry.gate) * distant.out[c];
                }
                shared[l * H + h] = DistantShared{std::move(distant.probs), distant.lse, true};
            } else {
                const DistantShared& lower = shared[cache.lowest_layer(l, h) * H + h];
                if (!lower.present) {
                    throw CacheCorruption("decode_step: shared distant weights missing");
                }
                entry.gate = gate_from_lse(proximal.lse, lower.lse);
                if (config.tau && entry.gate >= *config.tau) {
                    entry.skipped = true;
                    out = std::move(proximal.out);
                } else {
                    out.assign(d, 0.0);
                    std::size_t t = 0;
                    for (std::size_t j : split.distant_indices()) {
                        const auto val = cache.value(l, h, j);
                        for (std::size_t c = 0; c < d; ++c) {
                            out[c] += lower.probs[t] * val[c];
                        }
                        ++t;
                    }
                    for (std::size_t c = 0; c < d; ++c) {
                        out[c] = entry.gate * proximal.out[c] + (1.0 - entry.gate) * out[c];
                    }
                }
            }
            std::copy(out.begin(), out.end(), heads_out.begin() + h * d);
        }

        const auto attn_out = vecmat(heads_out, layer.wo);
        for (std::size_t c = 0; c < cfg.model_dim; ++c) {
            x[c] += attn_out[c];
        }
        detail::ffn_row_inplace(layer, x, layer.ffn_gain);
    }

    result.logits = detail::final_logits_row(weights, x);
    cache.finish_token();
    result.report.key_entries = cache.key_entries();
    result.report.value_entries = cache.value_entries();
    return result;
}

SplitMasks build_split_mask(std::size_t n, std::size_t n_s, std::size_t n_r) {
    if (n < 1) {
        throw InvalidInput("build_split_mask: n must be >= 1");
    }
    SplitMasks masks{BoolMatrix(n, n), BoolMatrix(n, n)};
    for (std::size_t i = 1; i <= n; ++i) {
        const TokenSplit split = classify_tokens(i, n_s, n_r);
        for (std::size_t j : split.proximal_indices()) {
            masks.proximal.set(i - 1, j - 1, true);
        }
        for (std::size_t j : split.distant_indices()) {
            masks.distant.set(i - 1, j - 1, true);
        }
    }
    return masks;
}

} // namespace pod
