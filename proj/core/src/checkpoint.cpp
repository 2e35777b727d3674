#include "mutr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace mutr {

namespace {

using nlohmann::ordered_json;

void put_u32_le(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_f32_le(std::string& out, float f) { put_u32_le(out, std::bit_cast<std::uint32_t>(f)); }

std::uint64_t get_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

float get_f32_le(const unsigned char* p) {
    const std::uint32_t v = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                            (static_cast<std::uint32_t>(p[2]) << 16) |
                            (static_cast<std::uint32_t>(p[3]) << 24);
    return std::bit_cast<float>(v);
}

ordered_json tensor_index_entry(const std::string& name, const Tensor& t, std::uint64_t offset) {
    ordered_json e;
    e["name"] = name;
    e["shape"] = t.shape();
    e["byte_offset"] = offset;
    return e;
}

void append_blob(std::string& blobs, const Tensor& t) {
    for (float v : t.data()) put_f32_le(blobs, v);
}

}  // namespace

void save_checkpoint(const Model& model, const OptimState* optimizer, const std::string& path) {
    ordered_json header;
    header["version"] = kCheckpointVersion;
    header["config"] = ordered_json::parse(config_to_json_text(model.config()));

    std::string blobs;
    header["tensors"] = ordered_json::array();
    for (const auto& e : model.entries()) {
        header["tensors"].push_back(tensor_index_entry(e.name, e.tensor, blobs.size()));
        append_blob(blobs, e.tensor);
    }

    if (optimizer) {
        ordered_json jo;
        jo["t"] = optimizer->t;
        jo["beta1"] = optimizer->beta1;
        jo["beta2"] = optimizer->beta2;
        jo["eps"] = optimizer->eps;
        jo["weight_decay"] = optimizer->weight_decay;
        jo["base_lr"] = optimizer->base_lr;
        jo["tensors"] = ordered_json::array();
        const auto params = model.named_parameters();
        if (!optimizer->m.empty() && optimizer->m.size() != params.size()) {
            throw CheckpointMismatchError("optimizer state covers " + std::to_string(optimizer->m.size()) +
                                          " parameters, model has " + std::to_string(params.size()));
        }
        for (std::size_t i = 0; i < optimizer->m.size(); ++i) {
            jo["tensors"].push_back(tensor_index_entry("m." + params[i].first, optimizer->m[i], blobs.size()));
            append_blob(blobs, optimizer->m[i]);
            jo["tensors"].push_back(tensor_index_entry("v." + params[i].first, optimizer->v[i], blobs.size()));
            append_blob(blobs, optimizer->v[i]);
        }
        header["optimizer"] = jo;
    } else {
        header["optimizer"] = nullptr;
    }

    const std::string htext = header.dump();
    std::string out;
    out.reserve(6 + 8 + htext.size() + blobs.size());
    out.append(kCheckpointMagic, 6);
    const std::uint64_t hlen = htext.size();
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((hlen >> (8 * i)) & 0xff));
    out += htext;
    out += blobs;

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open checkpoint for writing: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("failed writing checkpoint: " + path);
}

namespace {

struct RawCheckpoint {
    ordered_json header;
    std::string blobs;
};

RawCheckpoint read_raw(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() < 14) throw CheckpointFormatError("checkpoint truncated: " + path);
    if (std::memcmp(bytes.data(), kCheckpointMagic, 6) != 0) {
        throw CheckpointFormatError("bad checkpoint magic in " + path);
    }
    const std::uint64_t hlen = get_u64_le(reinterpret_cast<const unsigned char*>(bytes.data()) + 6);
    if (14 + hlen > bytes.size()) {
        throw CheckpointFormatError("checkpoint header extends past end of file: " + path);
    }
    RawCheckpoint raw;
    try {
        raw.header = ordered_json::parse(bytes.substr(14, hlen));
    } catch (const nlohmann::json::parse_error& e) {
        throw CheckpointFormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
    }
    raw.blobs = bytes.substr(14 + hlen);
    return raw;
}

void restore_blob(Tensor& t, const ordered_json& entry, const std::string& blobs) {
    const Shape shape = entry.at("shape").get<Shape>();
    if (shape != t.shape()) {
        throw CheckpointMismatchError("tensor \"" + entry.at("name").get<std::string>() + "\" has shape " +
                                      shape_str(shape) + " in the checkpoint but " + shape_str(t.shape()) +
                                      " in the model");
    }
    const std::uint64_t off = entry.at("byte_offset").get<std::uint64_t>();
    const std::uint64_t need = off + static_cast<std::uint64_t>(t.numel()) * 4;
    if (need > blobs.size()) {
        throw CheckpointFormatError("blob for tensor \"" + entry.at("name").get<std::string>() +
                                    "\" is truncated");
    }
    const auto* p = reinterpret_cast<const unsigned char*>(blobs.data()) + off;
    auto data = t.data();
    for (std::int64_t i = 0; i < t.numel(); ++i) data[i] = get_f32_le(p + 4 * i);
}

// First differing path between two JSON documents, depth first.
std::string first_json_diff(const ordered_json& a, const ordered_json& b, const std::string& path) {
    if (a.is_object() && b.is_object()) {
        for (auto it = a.begin(); it != a.end(); ++it) {
            const std::string sub = path.empty() ? it.key() : path + "." + it.key();
            if (!b.contains(it.key())) return sub;
            const std::string d = first_json_diff(it.value(), b[it.key()], sub);
            if (!d.empty()) return d;
        }
        for (auto it = b.begin(); it != b.end(); ++it) {
            if (!a.contains(it.key())) return path.empty() ? it.key() : path + "." + it.key();
        }
        return "";
    }
    if (a.is_array() && b.is_array()) {
        if (a.size() != b.size()) return path + ".length";
        for (std::size_t i = 0; i < a.size(); ++i) {
            const std::string d = first_json_diff(a[i], b[i], path + "[" + std::to_string(i) + "]");
            if (!d.empty()) return d;
        }
        return "";
    }
    return a == b ? "" : path;
}

LoadedCheckpoint load_from_raw(const RawCheckpoint& raw, const ModelConfig* config_override) {
    if (!raw.header.contains("version") || raw.header["version"].get<int>() != kCheckpointVersion) {
        throw CheckpointFormatError("unsupported checkpoint version");
    }
    if (!raw.header.contains("config") || !raw.header.contains("tensors")) {
        throw CheckpointFormatError("checkpoint header missing config or tensor index");
    }
    const ModelConfig config =
        config_override ? *config_override : config_from_json_text(raw.header["config"].dump());
    Model model(config, /*seed=*/0);

    const auto& index = raw.header["tensors"];
    const auto& entries = model.entries();
    if (index.size() != entries.size()) {
        throw CheckpointMismatchError("checkpoint lists " + std::to_string(index.size()) +
                                      " tensors, model has " + std::to_string(entries.size()));
    }
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const std::string name = index[i].at("name").get<std::string>();
        if (name != entries[i].name) {
            throw CheckpointMismatchError("tensor name mismatch at position " + std::to_string(i) +
                                          ": checkpoint has \"" + name + "\", model has \"" +
                                          entries[i].name + "\"");
        }
        Tensor t = entries[i].tensor;
        restore_blob(t, index[i], raw.blobs);
    }

    LoadedCheckpoint out{std::move(model), std::nullopt};
    if (raw.header.contains("optimizer") && !raw.header["optimizer"].is_null()) {
        const auto& jo = raw.header["optimizer"];
        OptimState st;
        st.t = jo.at("t").get<std::int64_t>();
        st.beta1 = jo.at("beta1").get<double>();
        st.beta2 = jo.at("beta2").get<double>();
        st.eps = jo.at("eps").get<double>();
        st.weight_decay = jo.at("weight_decay").get<double>();
        st.base_lr = jo.at("base_lr").get<double>();
        const auto params = out.model.named_parameters();
        const auto& jts = jo.at("tensors");
        if (jts.size() != 2 * params.size()) {
            throw CheckpointMismatchError("optimizer tensor index covers " + std::to_string(jts.size() / 2) +
                                          " parameters, model has " + std::to_string(params.size()));
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor m(params[i].second.shape());
            Tensor v(params[i].second.shape());
            restore_blob(m, jts[2 * i], raw.blobs);
            restore_blob(v, jts[2 * i + 1], raw.blobs);
            st.m.push_back(std::move(m));
            st.v.push_back(std::move(v));
        }
        out.optimizer = std::move(st);
    }
    return out;
}

}  // namespace

LoadedCheckpoint load_checkpoint(const std::string& path) {
    return load_from_raw(read_raw(path), nullptr);
}

LoadedCheckpoint load_checkpoint(const std::string& path, const ModelConfig& expected,
                                 bool allow_shape_compatible_override) {
    RawCheckpoint raw = read_raw(path);
    const ordered_json want = ordered_json::parse(config_to_json_text(expected));
    const ordered_json got = raw.header.contains("config") ? raw.header["config"] : ordered_json();
    const std::string diff = first_json_diff(want, got, "");
    if (diff.empty()) return load_from_raw(raw, nullptr);
    if (!allow_shape_compatible_override) {
        throw CheckpointMismatchError("checkpoint config differs from the requested config at field \"" +
                                      diff + "\"");
    }
    // Override: build from the requested config and restore blobs into it,
    // which demands an identical tensor index apart from shapes-by-name.
    return load_from_raw(raw, &expected);
}

}  // namespace mutr
