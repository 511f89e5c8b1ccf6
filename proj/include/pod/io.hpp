#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pod/grouping.hpp"
#include "pod/model.hpp"
#include "pod/runtime.hpp"
#include "pod/similarity.hpp"

namespace pod::io {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Tensor dump: "PODT" magic, u32 version (= 1), u32 ndim, ndim x u64 dims,
// then row-major 32-bit little-endian floats. In-memory math is 64-bit;
// precision drops to 32-bit only at this boundary.
// ---------------------------------------------------------------------------

struct TensorData {
    std::vector<std::size_t> dims;
    std::vector<float> payload;
};

void write_tensor(const fs::path& path, std::span<const std::size_t> dims,
                  std::span<const float> payload);
TensorData read_tensor(const fs::path& path);

void write_matrix(const fs::path& path, const RealMatrix& m);
RealMatrix read_matrix(const fs::path& path);

void write_trace(const fs::path& path, const AttentionTrace& trace);
AttentionTrace read_trace(const fs::path& path);

// ---------------------------------------------------------------------------
// Token records: per sequence a u32 LE count followed by that many u32 LE
// token ids.
// ---------------------------------------------------------------------------

void write_token_records(const fs::path& path, const std::vector<TokenSequence>& records);
std::vector<TokenSequence> read_token_records(const fs::path& path);

// ---------------------------------------------------------------------------
// JSON schemas
// ---------------------------------------------------------------------------

json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const json& j);

// Model directory layout: model.json plus weights/<name>.podt per tensor.
void save_model(const fs::path& dir, const ModelWeights& weights);
ModelWeights load_model(const fs::path& dir);

// {"L": ..., "H": ..., "values": [head][layer][layer]}; a manifest hash is
// embedded when provided and surfaced when present.
void save_similarity(const fs::path& path, const SimilarityTensor& sim,
                     const std::string& manifest_hash);
SimilarityTensor load_similarity(const fs::path& path, std::string* manifest_hash_out = nullptr);

// {"delta": ..., "heads": [[[first, last], ...], ...]} with 1-based inclusive
// layer ranges.
void save_blocks(const fs::path& path, const HeadBlocks& blocks, const std::string& manifest_hash);
HeadBlocks load_blocks(const fs::path& path, std::string* manifest_hash_out = nullptr);

// {"n_s": ..., "n_r": ..., "tau": number|null, "blocks": {...}}
void save_pod_config(const fs::path& path, const PoDConfig& config,
                     const std::string& manifest_hash);
PoDConfig load_pod_config(const fs::path& path, std::string* manifest_hash_out = nullptr);

// ---------------------------------------------------------------------------
// Run manifest: the parameters that identify a pipeline run. Every JSON/CSV
// artifact embeds the identity hash so stages refuse mixed inputs; the hash
// covers the generation-stage core (model config + corpus spec), which later
// stages only extend.
// ---------------------------------------------------------------------------

struct RunManifest {
    ModelConfig model_config;
    CorpusSpec corpus;
    std::optional<std::size_t> q;
    std::optional<double> delta;
    std::optional<std::size_t> n_s;
    std::optional<std::size_t> n_r;
    std::optional<double> tau;
    std::string output_dir;

    json to_json() const;
    static RunManifest from_json(const json& j);

    // FNV-1a 64 over the canonical generation-core serialization.
    std::string identity_hash() const;
};

void save_manifest(const fs::path& path, const RunManifest& manifest);
std::optional<RunManifest> load_manifest(const fs::path& path);

// Throws ConfigMismatch when two artifacts carry different identity hashes.
// Empty hashes (externally produced inputs) are exempt.
void require_matching_hashes(const std::string& a, const std::string& b, const std::string& what);

std::string fnv1a64_hex(std::string_view bytes);

// Shortest round-trip decimal form; used everywhere a double lands in CSV.
std::string format_double(double v);

json load_json_file(const fs::path& path);
void save_json_file(const fs::path& path, const json& j);

} // namespace pod::io
