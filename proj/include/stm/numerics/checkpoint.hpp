#pragma once

// Checkpoint container:
//   "STCK1" | u32 manifest length | JSON manifest | float32 payload
// The manifest lists {name, shape, dtype, offset} per tensor (offset in
// bytes from the start of the payload) plus a free-form "meta" object.

#include "stm/motion/mgrd_io.hpp"
#include "stm/numerics/tensor.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <string>

namespace stm {

struct Checkpoint {
    std::map<std::string, Tensor<float>> tensors;
    nlohmann::json meta = nlohmann::json::object();

    const Tensor<float>& tensor(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw FormatError("checkpoint is missing tensor " + name);
        return it->second;
    }
};

inline constexpr char kCheckpointMagic[5] = {'S', 'T', 'C', 'K', '1'};

inline std::vector<char> encode_checkpoint(const Checkpoint& ck) {
    nlohmann::json manifest;
    manifest["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : ck.tensors) {
        manifest["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"dtype", "f32"}, {"offset", offset}});
        offset += 4 * t.size();
    }
    manifest["meta"] = ck.meta;
    const std::string text = manifest.dump();
    std::vector<char> out(kCheckpointMagic, kCheckpointMagic + 5);
    bytes::put_u32(out, static_cast<std::uint32_t>(text.size()));
    out.insert(out.end(), text.begin(), text.end());
    out.reserve(out.size() + offset);
    for (const auto& [_, t] : ck.tensors)
        for (float v : t.storage()) bytes::put_f32(out, v);
    return out;
}

inline Checkpoint decode_checkpoint(const std::vector<char>& data) {
    if (data.size() < 9 || !std::equal(kCheckpointMagic, kCheckpointMagic + 5, data.begin()))
        throw FormatError("bad magic");
    const std::uint64_t len = bytes::get_u32(data.data() + 5);
    if (9 + len > data.size()) throw FormatError("truncated file: manifest");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(data.begin() + 9, data.begin() + 9 + static_cast<std::ptrdiff_t>(len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("corrupt checkpoint manifest: ") + e.what());
    }
    const std::size_t payload = 9 + len;
    Checkpoint ck;
    ck.meta = manifest.value("meta", nlohmann::json::object());
    for (const auto& entry : manifest.at("tensors")) {
        if (entry.at("dtype") != "f32") throw FormatError("unsupported dtype in checkpoint");
        Shape shape = entry.at("shape").get<Shape>();
        const std::uint64_t off = entry.at("offset").get<std::uint64_t>();
        const std::size_t n = numel(shape);
        if (payload + off + 4 * n > data.size()) throw FormatError("truncated file: payload");
        Tensor<float> t(shape);
        for (std::size_t i = 0; i < n; ++i) t[i] = bytes::get_f32(data.data() + payload + off + 4 * i);
        ck.tensors.emplace(entry.at("name").get<std::string>(), std::move(t));
    }
    return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    bytes::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(bytes::read_file(path));
}

}  // namespace stm
