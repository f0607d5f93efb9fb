#include "ffkv/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include <fmt/format.h>

#include "ffkv/error.hpp"

namespace ffkv {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are little-endian f32");

namespace {

constexpr std::uint64_t kMaxHeaderBytes = 64ull << 20;

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        s += (i ? "," : "") + std::to_string(shape[i]);
    }
    return s + "]";
}

template <typename T>
void put(std::string& buf, T v) {
    char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    buf.append(bytes, sizeof(T));
}

template <typename T>
T get(const std::string& buf, std::size_t offset) {
    T v;
    std::memcpy(&v, buf.data() + offset, sizeof(T));
    return v;
}

}  // namespace

nlohmann::json config_to_json(const ModelConfig& c) {
    return {
        {"n_layers", c.n_layers},       {"d_model", c.d_model},
        {"d_ff", c.d_ff},               {"n_heads", c.n_heads},
        {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
        {"tie_embeddings", c.tie_embeddings}, {"nonlinearity", to_string(c.nonlinearity)},
    };
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.value("n_layers", c.n_layers);
    c.d_model = j.value("d_model", c.d_model);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.tie_embeddings = j.value("tie_embeddings", c.tie_embeddings);
    c.nonlinearity = nonlinearity_from_string(j.value("nonlinearity", std::string("relu")));
    return c;
}

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const ModelWeights& weights,
                     const nlohmann::json& metadata, const std::map<std::string, ExtraTensor>& extras) {
    config.validate();
    Model(config, weights);  // shape validation

    struct Entry {
        std::string name;
        std::vector<std::size_t> shape;
        std::span<const float> data;
    };
    std::vector<Entry> entries;
    for (const auto& t : weights.tensors(config)) {
        entries.push_back({t.name, t.shape, t.data});
    }
    for (const auto& [name, t] : extras) {
        entries.push_back({"extra." + name, t.shape, t.data});
    }

    nlohmann::json dir = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& e : entries) {
        dir.push_back({{"name", e.name}, {"shape", e.shape}, {"dtype", "f32"}, {"offset", offset}});
        offset += e.data.size() * sizeof(float);
    }
    const nlohmann::json header = {{"config", config_to_json(config)}, {"tensors", dir}, {"metadata", metadata}};
    const std::string header_text = header.dump();

    std::string buf;
    buf.append(kCheckpointMagic, 4);
    put<std::uint32_t>(buf, kCheckpointVersion);
    put<std::uint64_t>(buf, header_text.size());
    buf += header_text;
    for (const auto& e : entries) {
        buf.append(reinterpret_cast<const char*>(e.data.data()), e.data.size() * sizeof(float));
    }

    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw CheckpointError("cannot open '" + tmp.string() + "' for writing");
        }
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!out) {
            throw CheckpointError("failed writing '" + tmp.string() + "'");
        }
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
    }
    const std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::string where = "checkpoint '" + path.string() + "': ";

    if (buf.size() < 16 || std::memcmp(buf.data(), kCheckpointMagic, 4) != 0) {
        throw CheckpointError(where + "bad magic (expected \"FFKV\")");
    }
    const auto version = get<std::uint32_t>(buf, 4);
    if (version != kCheckpointVersion) {
        throw CheckpointError(where + "unsupported version " + std::to_string(version));
    }
    const auto header_len = get<std::uint64_t>(buf, 8);
    if (header_len > kMaxHeaderBytes || 16 + header_len > buf.size()) {
        throw CheckpointError(where + "truncated header (declares " + std::to_string(header_len) + " bytes)");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(buf.begin() + 16, buf.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(where + "header is not valid JSON: " + e.what());
    }
    const std::size_t payload = 16 + header_len;

    Checkpoint ck;
    try {
        ck.config = config_from_json(header.at("config"));
        ck.config.validate();
    } catch (const std::exception& e) {
        throw CheckpointError(where + "invalid config: " + e.what());
    }
    ck.metadata = header.value("metadata", nlohmann::json::object());

    struct DirEntry {
        std::vector<std::size_t> shape;
        std::uint64_t offset;
    };
    std::map<std::string, DirEntry> dir;
    std::vector<std::string> dir_order;
    try {
        for (const auto& t : header.at("tensors")) {
            const std::string name = t.at("name").get<std::string>();
            if (t.value("dtype", std::string()) != "f32") {
                throw CheckpointError(where + "tensor '" + name + "' has unsupported dtype");
            }
            dir[name] = DirEntry{t.at("shape").get<std::vector<std::size_t>>(), t.at("offset").get<std::uint64_t>()};
            dir_order.push_back(name);
        }
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(where + "malformed tensor directory: " + e.what());
    }

    auto read_into = [&](const std::string& name, const DirEntry& e, std::span<float> dst) {
        const std::uint64_t bytes = dst.size() * sizeof(float);
        const std::uint64_t begin = payload + e.offset;
        if (begin + bytes > buf.size()) {
            throw CheckpointError(where + fmt::format("truncated: tensor '{}' needs bytes [{}, {}) but file has {}",
                                                      name, begin, begin + bytes, buf.size()));
        }
        std::memcpy(dst.data(), buf.data() + begin, bytes);
    };

    ck.weights = ModelWeights::zeros(ck.config);
    std::set<std::string> consumed;
    for (auto& t : ck.weights.tensors(ck.config)) {
        const auto it = dir.find(t.name);
        if (it == dir.end()) {
            throw CheckpointError(where + "missing tensor '" + t.name + "'");
        }
        if (it->second.shape != t.shape) {
            throw CheckpointError(where + "tensor '" + t.name + "' shape " + shape_str(it->second.shape) +
                                  " inconsistent with config (expected " + shape_str(t.shape) + ")");
        }
        read_into(t.name, it->second, t.data);
        consumed.insert(t.name);
    }
    for (const auto& name : dir_order) {
        if (consumed.count(name)) {
            continue;
        }
        if (name.rfind("extra.", 0) != 0) {
            throw CheckpointError(where + "unexpected tensor '" + name + "'");
        }
        const auto& e = dir.at(name);
        ExtraTensor x;
        x.shape = e.shape;
        std::size_t count = 1;
        for (auto s : e.shape) {
            count *= s;
        }
        x.data.resize(count);
        read_into(name, e, x.data);
        ck.extras[name.substr(6)] = std::move(x);
    }
    return ck;
}

}  // namespace ffkv
