#pragma once

// MGRD motion files:
//   "MGRD1" | u32 T, J, F(=12), G, fps, label+1 (0 = none)
//   | T*J*F float32 joint block | T*G float32 global block
// All integers and floats little-endian.

#include "stm/motion/motion_grid.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

namespace stm {

struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace bytes {

inline void put_u32(std::vector<char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}
inline void put_f32(std::vector<char>& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

inline std::uint32_t get_u32(const char* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return v;
}
inline float get_f32(const char* p) { return std::bit_cast<float>(get_u32(p)); }

inline std::vector<char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, const std::vector<char>& data) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw FormatError("short write to " + path.string());
}

}  // namespace bytes

inline constexpr char kMgrdMagic[5] = {'M', 'G', 'R', 'D', '1'};

inline std::vector<char> encode_mgrd(const MotionGrid& grid) {
    grid.validate();
    std::vector<char> out(kMgrdMagic, kMgrdMagic + 5);
    bytes::put_u32(out, static_cast<std::uint32_t>(grid.frames));
    bytes::put_u32(out, static_cast<std::uint32_t>(grid.joints));
    bytes::put_u32(out, static_cast<std::uint32_t>(kJointFeatures));
    bytes::put_u32(out, static_cast<std::uint32_t>(grid.global_dims));
    bytes::put_u32(out, grid.fps);
    bytes::put_u32(out, grid.label ? *grid.label + 1 : 0);
    for (float v : grid.joint_feats) bytes::put_f32(out, v);
    for (float v : grid.global_feats) bytes::put_f32(out, v);
    return out;
}

inline MotionGrid decode_mgrd(const std::vector<char>& data) {
    constexpr std::size_t header = 5 + 6 * 4;
    if (data.size() < 5 || !std::equal(kMgrdMagic, kMgrdMagic + 5, data.begin())) throw FormatError("bad magic");
    if (data.size() < header) throw FormatError("truncated file: header");
    const char* p = data.data() + 5;
    const std::uint64_t t = bytes::get_u32(p), j = bytes::get_u32(p + 4), f = bytes::get_u32(p + 8),
                        g = bytes::get_u32(p + 12);
    const std::uint32_t fps = bytes::get_u32(p + 16), label = bytes::get_u32(p + 20);
    if (f != kJointFeatures) throw FormatError("unsupported joint feature width " + std::to_string(f));
    // 2^32 floats is far beyond any motion clip; anything larger is a corrupt header.
    constexpr std::uint64_t limit = std::uint64_t{1} << 32;
    if (t == 0 || j == 0 || t * j > limit / f || t * g > limit) throw FormatError("shape overflow");
    const std::uint64_t n_joint = t * j * f, n_global = t * g;
    if (data.size() != header + 4 * (n_joint + n_global)) {
        throw FormatError(data.size() < header + 4 * (n_joint + n_global) ? "truncated file: payload"
                                                                          : "trailing bytes after payload");
    }
    MotionGrid grid(t, j, g);
    grid.fps = fps;
    if (label) grid.label = label - 1;
    const char* q = data.data() + header;
    for (auto& v : grid.joint_feats) {
        v = bytes::get_f32(q);
        q += 4;
    }
    for (auto& v : grid.global_feats) {
        v = bytes::get_f32(q);
        q += 4;
    }
    grid.validate();
    return grid;
}

inline void write_mgrid(const MotionGrid& grid, const std::filesystem::path& path) {
    bytes::write_file(path, encode_mgrd(grid));
}

inline MotionGrid read_mgrid(const std::filesystem::path& path) { return decode_mgrd(bytes::read_file(path)); }

/// Headerless float32 rows of width 263 or 251; row count from file size.
inline MotionGrid read_flat(const std::filesystem::path& path, std::size_t dims) {
    FlatLayout::for_dims(dims);
    const auto data = bytes::read_file(path);
    if (data.size() % (4 * dims) != 0) throw FormatError("flat file size is not a whole number of rows");
    std::vector<float> rows(data.size() / 4);
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = bytes::get_f32(data.data() + 4 * i);
    return regroup_flat(rows, dims);
}

inline void write_flat(const MotionGrid& grid, const std::filesystem::path& path) {
    std::vector<char> out;
    for (float v : flatten_grid(grid)) bytes::put_f32(out, v);
    bytes::write_file(path, out);
}

/// All *.mgrd files of a directory, sorted by file name.
inline std::vector<MotionGrid> read_mgrid_dir(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw FormatError("not a directory: " + dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".mgrd") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::vector<MotionGrid> out;
    out.reserve(files.size());
    for (const auto& f : files) out.push_back(read_mgrid(f));
    return out;
}

}  // namespace stm
