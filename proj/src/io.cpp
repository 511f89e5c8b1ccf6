#include "pod/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace pod::io {

namespace {

constexpr char kMagic[4] = {'P', 'O', 'D', 'T'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kMaxNdim = 16;

void append_u32le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

void append_u64le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

void append_f32le(std::string& out, float v) {
    append_u32le(out, std::bit_cast<std::uint32_t>(v));
}

std::uint32_t read_u32le(const std::string& buf, std::size_t offset) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[offset + i])) << (8 * i);
    }
    return v;
}

std::uint64_t read_u64le(const std::string& buf, std::size_t offset) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[offset + i])) << (8 * i);
    }
    return v;
}

std::string read_file_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) {
        throw IoError("read failure on " + path.string());
    }
    return bytes;
}

void write_file_bytes(const fs::path& path, const std::string& bytes) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw IoError("write failure on " + path.string());
    }
}

} // namespace

void write_tensor(const fs::path& path, std::span<const std::size_t> dims,
                  std::span<const float> payload) {
    std::size_t expected = 1;
    for (std::size_t d : dims) {
        expected *= d;
    }
    if (expected != payload.size()) {
        throw InvalidInput("write_tensor: payload size does not match dims");
    }
    std::string bytes;
    bytes.append(kMagic, 4);
    append_u32le(bytes, kVersion);
    append_u32le(bytes, static_cast<std::uint32_t>(dims.size()));
    for (std::size_t d : dims) {
        append_u64le(bytes, static_cast<std::uint64_t>(d));
    }
    for (float v : payload) {
        append_f32le(bytes, v);
    }
    write_file_bytes(path, bytes);
}

TensorData read_tensor(const fs::path& path) {
    const std::string bytes = read_file_bytes(path);
    if (bytes.size() < 12) {
        throw FormatError(path.string() + ": truncated header at offset 0: need 12 bytes, got " +
                          std::to_string(bytes.size()));
    }
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw FormatError(path.string() + ": bad magic at offset 0: expected \"PODT\"");
    }
    const std::uint32_t version = read_u32le(bytes, 4);
    if (version != kVersion) {
        throw FormatError(path.string() + ": unsupported version " + std::to_string(version) +
                          " at offset 4");
    }
    const std::uint32_t ndim = read_u32le(bytes, 8);
    if (ndim == 0 || ndim > kMaxNdim) {
        throw FormatError(path.string() + ": implausible ndim " + std::to_string(ndim) +
                          " at offset 8");
    }
    const std::size_t header_size = 12 + 8 * static_cast<std::size_t>(ndim);
    if (bytes.size() < header_size) {
        throw FormatError(path.string() + ": truncated dims at offset 12: need " +
                          std::to_string(header_size) + " bytes, got " + std::to_string(bytes.size()));
    }
    TensorData data;
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < ndim; ++i) {
        const std::uint64_t d = read_u64le(bytes, 12 + 8 * static_cast<std::size_t>(i));
        data.dims.push_back(static_cast<std::size_t>(d));
        count *= static_cast<std::size_t>(d);
    }
    const std::size_t expected_bytes = 4 * count;
    const std::size_t actual_bytes = bytes.size() - header_size;
    if (actual_bytes != expected_bytes) {
        throw FormatError(path.string() + ": payload at offset " + std::to_string(header_size) +
                          ": expected " + std::to_string(expected_bytes) + " bytes, got " +
                          std::to_string(actual_bytes));
    }
    data.payload.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        data.payload[i] = std::bit_cast<float>(read_u32le(bytes, header_size + 4 * i));
    }
    return data;
}

void write_matrix(const fs::path& path, const RealMatrix& m) {
    std::vector<float> payload(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) {
        payload[i] = static_cast<float>(m.flat()[i]);
    }
    const std::size_t dims[2] = {m.rows(), m.cols()};
    write_tensor(path, dims, payload);
}

RealMatrix read_matrix(const fs::path& path) {
    const TensorData data = read_tensor(path);
    if (data.dims.size() != 2) {
        throw FormatError(path.string() + ": expected a 2-d tensor, got " +
                          std::to_string(data.dims.size()) + "-d");
    }
    RealMatrix m(data.dims[0], data.dims[1]);
    for (std::size_t i = 0; i < data.payload.size(); ++i) {
        m.flat()[i] = static_cast<double>(data.payload[i]);
    }
    return m;
}

void write_trace(const fs::path& path, const AttentionTrace& trace) {
    const std::size_t dims[4] = {trace.num_layers, trace.num_heads, trace.traced_rows,
                                 trace.seq_len};
    std::vector<float> payload;
    payload.reserve(trace.num_layers * trace.num_heads * trace.traced_rows * trace.seq_len);
    for (const RealMatrix& m : trace.rows) {
        for (double v : m.flat()) {
            payload.push_back(static_cast<float>(v));
        }
    }
    write_tensor(path, dims, payload);
}

AttentionTrace read_trace(const fs::path& path) {
    const TensorData data = read_tensor(path);
    if (data.dims.size() != 4) {
        throw FormatError(path.string() + ": expected a 4-d trace tensor, got " +
                          std::to_string(data.dims.size()) + "-d");
    }
    AttentionTrace trace;
    trace.num_layers = data.dims[0];
    trace.num_heads = data.dims[1];
    trace.traced_rows = data.dims[2];
    trace.seq_len = data.dims[3];
    trace.rows.assign(trace.num_layers * trace.num_heads,
                      RealMatrix(trace.traced_rows, trace.seq_len));
    const std::size_t per_matrix = trace.traced_rows * trace.seq_len;
    for (std::size_t m = 0; m < trace.rows.size(); ++m) {
        for (std::size_t i = 0; i < per_matrix; ++i) {
            trace.rows[m].flat()[i] = static_cast<double>(data.payload[m * per_matrix + i]);
        }
    }
    return trace;
}

void write_token_records(const fs::path& path, const std::vector<TokenSequence>& records) {
    std::string bytes;
    for (const TokenSequence& r : records) {
        append_u32le(bytes, static_cast<std::uint32_t>(r.tokens.size()));
        for (std::uint32_t t : r.tokens) {
            append_u32le(bytes, t);
        }
    }
    write_file_bytes(path, bytes);
}

std::vector<TokenSequence> read_token_records(const fs::path& path) {
    const std::string bytes = read_file_bytes(path);
    std::vector<TokenSequence> records;
    std::size_t offset = 0;
    while (offset < bytes.size()) {
        if (offset + 4 > bytes.size()) {
            throw FormatError(path.string() + ": truncated record length at offset " +
                              std::to_string(offset));
        }
        const std::uint32_t count = read_u32le(bytes, offset);
        offset += 4;
        if (offset + 4ull * count > bytes.size()) {
            throw FormatError(path.string() + ": truncated record at offset " +
                              std::to_string(offset) + ": expected " + std::to_string(4ull * count) +
                              " bytes, got " + std::to_string(bytes.size() - offset));
        }
        TokenSequence seq;
        seq.tokens.resize(count);
        for (std::uint32_t i = 0; i < count; ++i) {
            seq.tokens[i] = read_u32le(bytes, offset);
            offset += 4;
        }
        records.push_back(std::move(seq));
    }
    return records;
}

json model_config_to_json(const ModelConfig& config) {
    return json{{"num_layers", config.num_layers}, {"num_heads", config.num_heads},
                {"head_dim", config.head_dim},     {"model_dim", config.model_dim},
                {"vocab_size", config.vocab_size}, {"rope_base", config.rope_base},
                {"seed", config.seed}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig config;
    try {
        config.num_layers = j.at("num_layers").get<std::size_t>();
        config.num_heads = j.at("num_heads").get<std::size_t>();
        config.head_dim = j.at("head_dim").get<std::size_t>();
        config.model_dim = j.at("model_dim").get<std::size_t>();
        config.vocab_size = j.at("vocab_size").get<std::size_t>();
        config.rope_base = j.at("rope_base").get<double>();
        config.seed = j.at("seed").get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("model config json: ") + e.what());
    }
    config.validate();
    return config;
}

namespace {

std::string layer_tensor_name(std::size_t layer, const char* tensor) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "layer%03zu.%s", layer, tensor);
    return buf;
}

void write_gain(const fs::path& path, const std::vector<double>& gain) {
    std::vector<float> payload(gain.begin(), gain.end());
    const std::size_t dims[1] = {gain.size()};
    write_tensor(path, dims, payload);
}

std::vector<double> read_gain(const fs::path& path, std::size_t expected) {
    const TensorData data = read_tensor(path);
    if (data.dims.size() != 1 || data.dims[0] != expected) {
        throw FormatError(path.string() + ": gain tensor has unexpected shape");
    }
    return {data.payload.begin(), data.payload.end()};
}

RealMatrix read_matrix_checked(const fs::path& path, std::size_t rows, std::size_t cols) {
    RealMatrix m = read_matrix(path);
    if (m.rows() != rows || m.cols() != cols) {
        throw FormatError(path.string() + ": expected " + std::to_string(rows) + "x" +
                          std::to_string(cols) + ", got " + std::to_string(m.rows()) + "x" +
                          std::to_string(m.cols()));
    }
    return m;
}

} // namespace

void save_model(const fs::path& dir, const ModelWeights& weights) {
    std::error_code ec;
    fs::create_directories(dir / "weights", ec);
    save_json_file(dir / "model.json", model_config_to_json(weights.config));
    const fs::path wdir = dir / "weights";
    write_matrix(wdir / "embedding.podt", weights.embedding);
    write_matrix(wdir / "unembedding.podt", weights.unembedding);
    write_gain(wdir / "final_gain.podt", weights.final_gain);
    for (std::size_t l = 0; l < weights.layers.size(); ++l) {
        const LayerWeights& layer = weights.layers[l];
        write_gain(wdir / (layer_tensor_name(l, "attn_gain") + ".podt"), layer.attn_gain);
        write_gain(wdir / (layer_tensor_name(l, "ffn_gain") + ".podt"), layer.ffn_gain);
        write_matrix(wdir / (layer_tensor_name(l, "wq") + ".podt"), layer.wq);
        write_matrix(wdir / (layer_tensor_name(l, "wk") + ".podt"), layer.wk);
        write_matrix(wdir / (layer_tensor_name(l, "wv") + ".podt"), layer.wv);
        write_matrix(wdir / (layer_tensor_name(l, "wo") + ".podt"), layer.wo);
        write_matrix(wdir / (layer_tensor_name(l, "w1") + ".podt"), layer.w1);
        write_matrix(wdir / (layer_tensor_name(l, "w2") + ".podt"), layer.w2);
    }
}

ModelWeights load_model(const fs::path& dir) {
    ModelWeights weights;
    weights.config = model_config_from_json(load_json_file(dir / "model.json"));
    const std::size_t dim = weights.config.model_dim;
    const std::size_t ffn = weights.config.ffn_dim();
    const fs::path wdir = dir / "weights";
    weights.embedding = read_matrix_checked(wdir / "embedding.podt", weights.config.vocab_size, dim);
    weights.unembedding =
        read_matrix_checked(wdir / "unembedding.podt", dim, weights.config.vocab_size);
    weights.final_gain = read_gain(wdir / "final_gain.podt", dim);
    weights.layers.resize(weights.config.num_layers);
    for (std::size_t l = 0; l < weights.layers.size(); ++l) {
        LayerWeights& layer = weights.layers[l];
        layer.attn_gain = read_gain(wdir / (layer_tensor_name(l, "attn_gain") + ".podt"), dim);
        layer.ffn_gain = read_gain(wdir / (layer_tensor_name(l, "ffn_gain") + ".podt"), dim);
        layer.wq = read_matrix_checked(wdir / (layer_tensor_name(l, "wq") + ".podt"), dim, dim);
        layer.wk = read_matrix_checked(wdir / (layer_tensor_name(l, "wk") + ".podt"), dim, dim);
        layer.wv = read_matrix_checked(wdir / (layer_tensor_name(l, "wv") + ".podt"), dim, dim);
        layer.wo = read_matrix_checked(wdir / (layer_tensor_name(l, "wo") + ".podt"), dim, dim);
        layer.w1 = read_matrix_checked(wdir / (layer_tensor_name(l, "w1") + ".podt"), dim, ffn);
        layer.w2 = read_matrix_checked(wdir / (layer_tensor_name(l, "w2") + ".podt"), ffn, dim);
    }
    return weights;
}

void save_similarity(const fs::path& path, const SimilarityTensor& sim,
                     const std::string& manifest_hash) {
    sim.validate();
    json values = json::array();
    for (std::size_t h = 0; h < sim.num_heads; ++h) {
        json per_head = json::array();
        for (std::size_t a = 0; a < sim.num_layers; ++a) {
            json row = json::array();
            for (std::size_t b = 0; b < sim.num_layers; ++b) {
                row.push_back(sim.at(h, a, b));
            }
            per_head.push_back(std::move(row));
        }
        values.push_back(std::move(per_head));
    }
    json j{{"L", sim.num_layers}, {"H", sim.num_heads}, {"values", std::move(values)}};
    if (!manifest_hash.empty()) {
        j["manifest_hash"] = manifest_hash;
    }
    save_json_file(path, j);
}

SimilarityTensor load_similarity(const fs::path& path, std::string* manifest_hash_out) {
    const json j = load_json_file(path);
    SimilarityTensor sim;
    try {
        sim.num_layers = j.at("L").get<std::size_t>();
        sim.num_heads = j.at("H").get<std::size_t>();
        const json& values = j.at("values");
        sim.values.reserve(sim.num_heads * sim.num_layers * sim.num_layers);
        for (const json& per_head : values) {
            for (const json& row : per_head) {
                for (const json& v : row) {
                    sim.values.push_back(v.get<double>());
                }
            }
        }
        if (manifest_hash_out != nullptr) {
            *manifest_hash_out = j.value("manifest_hash", "");
        }
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    try {
        sim.validate();
    } catch (const InvalidInput& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return sim;
}

void save_blocks(const fs::path& path, const HeadBlocks& blocks, const std::string& manifest_hash) {
    blocks.validate_structure();
    json heads = json::array();
    for (const auto& head : blocks.heads) {
        json ranges = json::array();
        for (const LayerRange& r : head) {
            ranges.push_back(json::array({r.first, r.last}));
        }
        heads.push_back(std::move(ranges));
    }
    json j{{"delta", blocks.delta}, {"heads", std::move(heads)}};
    if (!manifest_hash.empty()) {
        j["manifest_hash"] = manifest_hash;
    }
    save_json_file(path, j);
}

HeadBlocks load_blocks(const fs::path& path, std::string* manifest_hash_out) {
    const json j = load_json_file(path);
    HeadBlocks blocks;
    try {
        blocks.delta = j.at("delta").get<double>();
        for (const json& head : j.at("heads")) {
            std::vector<LayerRange> ranges;
            for (const json& r : head) {
                ranges.push_back(LayerRange{r.at(0).get<std::size_t>(), r.at(1).get<std::size_t>()});
            }
            blocks.heads.push_back(std::move(ranges));
        }
        if (manifest_hash_out != nullptr) {
            *manifest_hash_out = j.value("manifest_hash", "");
        }
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    try {
        blocks.validate_structure();
    } catch (const InvalidInput& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return blocks;
}

void save_pod_config(const fs::path& path, const PoDConfig& config,
                     const std::string& manifest_hash) {
    json blocks_json;
    {
        blocks_json["delta"] = config.blocks.delta;
        json heads = json::array();
        for (const auto& head : config.blocks.heads) {
            json ranges = json::array();
            for (const LayerRange& r : head) {
                ranges.push_back(json::array({r.first, r.last}));
            }
            heads.push_back(std::move(ranges));
        }
        blocks_json["heads"] = std::move(heads);
    }
    json j{{"n_s", config.n_s},
           {"n_r", config.n_r},
           {"tau", config.tau ? json(*config.tau) : json(nullptr)},
           {"blocks", std::move(blocks_json)}};
    if (!manifest_hash.empty()) {
        j["manifest_hash"] = manifest_hash;
    }
    save_json_file(path, j);
}

PoDConfig load_pod_config(const fs::path& path, std::string* manifest_hash_out) {
    const json j = load_json_file(path);
    PoDConfig config;
    try {
        config.n_s = j.at("n_s").get<std::size_t>();
        config.n_r = j.at("n_r").get<std::size_t>();
        if (!j.at("tau").is_null()) {
            config.tau = j.at("tau").get<double>();
        }
        const json& blocks = j.at("blocks");
        config.blocks.delta = blocks.at("delta").get<double>();
        for (const json& head : blocks.at("heads")) {
            std::vector<LayerRange> ranges;
            for (const json& r : head) {
                ranges.push_back(LayerRange{r.at(0).get<std::size_t>(), r.at(1).get<std::size_t>()});
            }
            config.blocks.heads.push_back(std::move(ranges));
        }
        if (manifest_hash_out != nullptr) {
            *manifest_hash_out = j.value("manifest_hash", "");
        }
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    try {
        config.blocks.validate_structure();
    } catch (const InvalidInput& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return config;
}

namespace {

json corpus_spec_to_json(const CorpusSpec& c) {
    return json{{"seed", c.seed},
                {"num_samples", c.num_samples},
                {"sample_length", c.sample_length},
                {"vocab_size", c.vocab_size},
                {"repeat_prob", c.repeat_prob},
                {"lookback", c.lookback}};
}

CorpusSpec corpus_spec_from_json(const json& j) {
    CorpusSpec c;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.num_samples = j.at("num_samples").get<std::size_t>();
    c.sample_length = j.at("sample_length").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.repeat_prob = j.at("repeat_prob").get<double>();
    c.lookback = j.at("lookback").get<std::size_t>();
    return c;
}

template <typename T>
json optional_to_json(const std::optional<T>& v) {
    return v ? json(*v) : json(nullptr);
}

template <typename T>
std::optional<T> optional_from_json(const json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) {
        return std::nullopt;
    }
    return j.at(key).get<T>();
}

} // namespace

json RunManifest::to_json() const {
    return json{{"model_config", model_config_to_json(model_config)},
                {"corpus", corpus_spec_to_json(corpus)},
                {"q", optional_to_json(q)},
                {"delta", optional_to_json(delta)},
                {"n_s", optional_to_json(n_s)},
                {"n_r", optional_to_json(n_r)},
                {"tau", optional_to_json(tau)},
                {"output_dir", output_dir}};
}

RunManifest RunManifest::from_json(const json& j) {
    RunManifest m;
    try {
        m.model_config = model_config_from_json(j.at("model_config"));
        m.corpus = corpus_spec_from_json(j.at("corpus"));
        m.q = optional_from_json<std::size_t>(j, "q");
        m.delta = optional_from_json<double>(j, "delta");
        m.n_s = optional_from_json<std::size_t>(j, "n_s");
        m.n_r = optional_from_json<std::size_t>(j, "n_r");
        m.tau = optional_from_json<double>(j, "tau");
        m.output_dir = j.value("output_dir", "");
    } catch (const json::exception& e) {
        throw FormatError(std::string("manifest json: ") + e.what());
    }
    return m;
}

std::string RunManifest::identity_hash() const {
    const json core{{"model_config", model_config_to_json(model_config)},
                    {"corpus", corpus_spec_to_json(corpus)}};
    return fnv1a64_hex(core.dump());
}

void save_manifest(const fs::path& path, const RunManifest& manifest) {
    save_json_file(path, manifest.to_json());
}

std::optional<RunManifest> load_manifest(const fs::path& path) {
    if (!fs::exists(path)) {
        return std::nullopt;
    }
    return RunManifest::from_json(load_json_file(path));
}

void require_matching_hashes(const std::string& a, const std::string& b, const std::string& what) {
    if (a.empty() || b.empty()) {
        return;
    }
    if (a != b) {
        throw ConfigMismatch(what + ": manifest hash " + a + " vs " + b);
    }
}

std::string fnv1a64_hex(std::string_view bytes) {
    std::uint64_t hash = 0xcbf29ce484222325ULL;
    for (char c : bytes) {
        hash ^= static_cast<unsigned char>(c);
        hash *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash));
    return buf;
}

std::string format_double(double v) {
    return json(v).dump();
}

json load_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void save_json_file(const fs::path& path, const json& j) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    out << j.dump(2) << '\n';
    if (!out) {
        throw IoError("write failure on " + path.string());
    }
}

} // namespace pod::io
