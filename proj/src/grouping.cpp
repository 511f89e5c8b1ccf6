#include "pod/grouping.hpp"

#include <string>

namespace pod {

std::size_t HeadBlocks::lowest_layer_of(std::size_t head, std::size_t layer) const {
    for (const LayerRange& block : heads[head]) {
        if (layer >= block.first && layer <= block.last) {
            return block.first;
        }
    }
    throw InvalidInput("HeadBlocks: layer " + std::to_string(layer) + " not covered");
}

void HeadBlocks::validate_structure() const {
    if (heads.empty()) {
        throw InvalidInput("HeadBlocks: no heads");
    }
    if (delta < 0.0 || delta > 1.0) {
        throw InvalidInput("HeadBlocks: delta outside [0, 1]");
    }
    const std::size_t L = heads[0].empty() ? 0 : heads[0].back().last;
    for (std::size_t h = 0; h < heads.size(); ++h) {
        const auto& blocks = heads[h];
        if (blocks.empty()) {
            throw InvalidInput("HeadBlocks: head has no blocks");
        }
        if (blocks.front().first != 1) {
            throw InvalidInput("HeadBlocks: first block must start at layer 1");
        }
        std::size_t expected_next = 1;
        for (const LayerRange& b : blocks) {
            if (b.first != expected_next || b.last < b.first) {
                throw InvalidInput("HeadBlocks: blocks must be consecutive and non-empty");
            }
            expected_next = b.last + 1;
        }
        if (blocks.back().last != L) {
            throw InvalidInput("HeadBlocks: heads disagree on the layer count");
        }
    }
}

HeadBlocks greedy_group(const SimilarityTensor& sim, double delta) {
    if (delta < 0.0 || delta > 1.0) {
        throw InvalidInput("greedy_group: delta must lie in [0, 1]");
    }
    sim.validate();

    HeadBlocks result;
    result.delta = delta;
    result.heads.resize(sim.num_heads);
    for (std::size_t h = 0; h < sim.num_heads; ++h) {
        auto& blocks = result.heads[h];
        blocks.push_back(LayerRange{1, 1});
        for (std::size_t layer = 2; layer <= sim.num_layers; ++layer) {
            LayerRange& current = blocks.back();
            bool similar_to_all = true;
            for (std::size_t member = current.first; member <= current.last; ++member) {
                if (sim.at(h, layer - 1, member - 1) < delta) {
                    similar_to_all = false;
                    break;
                }
            }
            if (similar_to_all) {
                current.last = layer;
            } else {
                blocks.push_back(LayerRange{layer, layer});
            }
        }
    }
    return result;
}

ValidationReport validate_blocks(const HeadBlocks& blocks, const SimilarityTensor& sim) {
    sim.validate();
    blocks.validate_structure();
    if (blocks.num_heads() != sim.num_heads || blocks.num_layers() != sim.num_layers) {
        throw InvalidInput("validate_blocks: blocks and similarity tensor dimensions differ");
    }

    ValidationReport report;
    const double delta = blocks.delta;
    for (std::size_t h = 0; h < blocks.num_heads(); ++h) {
        const auto& head_blocks = blocks.heads[h];
        for (const LayerRange& block : head_blocks) {
            for (std::size_t a = block.first; a <= block.last; ++a) {
                for (std::size_t b = a + 1; b <= block.last; ++b) {
                    const double value = sim.at(h, a - 1, b - 1);
                    if (value < delta) {
                        report.pair_violations.push_back({h, a, b, value});
                    }
                }
            }
        }
        for (std::size_t bi = 1; bi < head_blocks.size(); ++bi) {
            const LayerRange& previous = head_blocks[bi - 1];
            const std::size_t opener = head_blocks[bi].first;
            bool similar_to_all = true;
            for (std::size_t member = previous.first; member <= previous.last; ++member) {
                if (sim.at(h, opener - 1, member - 1) < delta) {
                    similar_to_all = false;
                    break;
                }
            }
            if (similar_to_all) {
                report.missed_merges.push_back({h, opener});
            }
        }
    }
    return report;
}

SavingsRate savings_rate(const HeadBlocks& blocks, std::size_t n, std::size_t n_s, std::size_t n_r) {
    blocks.validate_structure();
    if (n == 0) {
        throw InvalidInput("savings_rate: n must be >= 1");
    }
    SavingsRate rate;
    if (n <= n_s + n_r) {
        return rate; // no distant tokens, nothing shared
    }
    const std::size_t distant = n - n_s - n_r;
    const std::size_t L = blocks.num_layers();
    const std::size_t H = blocks.num_heads();
    double saved_entries = 0.0;
    for (std::size_t h = 0; h < H; ++h) {
        saved_entries += static_cast<double>(L - blocks.blocks_in_head(h)) * static_cast<double>(distant);
    }
    rate.key_fraction_saved = saved_entries / (static_cast<double>(H) * static_cast<double>(L) * static_cast<double>(n));
    rate.total_kv_fraction_saved = rate.key_fraction_saved / 2.0;
    return rate;
}

} // namespace pod
