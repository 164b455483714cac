#pragma once

// Joint-grid motion representation: T frames x J joints x 12 features, plus
// a T x G global stream. Per-joint features are (position 3, 6D rotation 6,
// velocity 3); the 11-wide global stream is (root rotation velocity,
// root linear velocity xy, root height, root joint velocity xyz,
// foot contacts x4).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace stm {

struct MotionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

inline constexpr std::size_t kJointFeatures = 12;
inline constexpr std::size_t kGlobalFeatures = 11;
inline constexpr std::size_t kFootContactOffset = 7;  // within the global stream
inline constexpr std::size_t kFootContacts = 4;

struct MotionGrid {
    std::size_t frames = 0;
    std::size_t joints = 0;
    std::size_t global_dims = kGlobalFeatures;
    std::uint32_t fps = 20;
    std::optional<std::uint32_t> label;
    std::vector<float> joint_feats;   // [T x J x 12]
    std::vector<float> global_feats;  // [T x G]

    MotionGrid() = default;
    MotionGrid(std::size_t t, std::size_t j, std::size_t g = kGlobalFeatures)
        : frames(t), joints(j), global_dims(g), joint_feats(t * j * kJointFeatures, 0.0f), global_feats(t * g, 0.0f) {}

    float& joint(std::size_t t, std::size_t j, std::size_t f) { return joint_feats[(t * joints + j) * kJointFeatures + f]; }
    float joint(std::size_t t, std::size_t j, std::size_t f) const {
        return joint_feats[(t * joints + j) * kJointFeatures + f];
    }
    float& global(std::size_t t, std::size_t k) { return global_feats[t * global_dims + k]; }
    float global(std::size_t t, std::size_t k) const { return global_feats[t * global_dims + k]; }

    /// Throws MotionError if any structural or value invariant is violated.
    void validate() const {
        if (frames < 1 || joints < 1) throw MotionError("motion grid needs at least one frame and one joint");
        if (joint_feats.size() != frames * joints * kJointFeatures || global_feats.size() != frames * global_dims) {
            throw MotionError("motion grid buffers do not match its shape");
        }
        for (float v : joint_feats)
            if (!std::isfinite(v)) throw MotionError("non-finite joint feature");
        for (float v : global_feats)
            if (!std::isfinite(v)) throw MotionError("non-finite global feature");
        if (global_dims == kGlobalFeatures) {
            for (std::size_t t = 0; t < frames; ++t)
                for (std::size_t k = 0; k < kFootContacts; ++k) {
                    const float c = global(t, kFootContactOffset + k);
                    if (c < 0.0f || c > 1.0f) throw MotionError("foot contact outside [0,1]");
                }
        }
    }

    /// First `t` frames.
    MotionGrid cropped(std::size_t t) const {
        if (t > frames) throw MotionError("crop longer than motion");
        MotionGrid out(t, joints, global_dims);
        out.fps = fps;
        out.label = label;
        std::copy_n(joint_feats.begin(), t * joints * kJointFeatures, out.joint_feats.begin());
        std::copy_n(global_feats.begin(), t * global_dims, out.global_feats.begin());
        return out;
    }

    friend bool operator==(const MotionGrid&, const MotionGrid&) = default;
};

/// Flat-vector layout of the 263 / 251 dimensional feature formats:
/// [root rot-vel 1 | root lin-vel 2 | root height 1 | joint positions 3J |
///  joint 6D rotations 6J | velocities 3(J+1), root first | foot contacts 4].
struct FlatLayout {
    std::size_t dims;
    std::size_t joints;

    static FlatLayout for_dims(std::size_t d) {
        if (d == 263) return {263, 21};
        if (d == 251) return {251, 20};
        throw MotionError("unknown layout: flat dimension " + std::to_string(d));
    }
    std::size_t pos(std::size_t j) const { return 4 + 3 * j; }
    std::size_t rot(std::size_t j) const { return 4 + 3 * joints + 6 * j; }
    std::size_t root_vel() const { return 4 + 9 * joints; }
    std::size_t vel(std::size_t j) const { return root_vel() + 3 + 3 * j; }
    std::size_t feet() const { return root_vel() + 3 * (joints + 1); }
};

/// Regroups T rows of a flat 263/251-dim feature sequence into a joint grid.
inline MotionGrid regroup_flat(std::span<const float> rows, std::size_t dims) {
    const FlatLayout lay = FlatLayout::for_dims(dims);
    if (rows.size() % dims != 0) throw MotionError("flat sequence length is not a multiple of " + std::to_string(dims));
    const std::size_t frames = rows.size() / dims;
    for (float v : rows)
        if (!std::isfinite(v)) throw MotionError("non-finite entry in flat sequence");
    MotionGrid grid(frames, lay.joints, kGlobalFeatures);
    for (std::size_t t = 0; t < frames; ++t) {
        const float* r = rows.data() + t * dims;
        for (std::size_t k = 0; k < 4; ++k) grid.global(t, k) = r[k];
        for (std::size_t k = 0; k < 3; ++k) grid.global(t, 4 + k) = r[lay.root_vel() + k];
        for (std::size_t k = 0; k < kFootContacts; ++k) grid.global(t, kFootContactOffset + k) = r[lay.feet() + k];
        for (std::size_t j = 0; j < lay.joints; ++j) {
            for (std::size_t k = 0; k < 3; ++k) grid.joint(t, j, k) = r[lay.pos(j) + k];
            for (std::size_t k = 0; k < 6; ++k) grid.joint(t, j, 3 + k) = r[lay.rot(j) + k];
            for (std::size_t k = 0; k < 3; ++k) grid.joint(t, j, 9 + k) = r[lay.vel(j) + k];
        }
    }
    return grid;
}

/// Inverse of regroup_flat.
inline std::vector<float> flatten_grid(const MotionGrid& grid) {
    if (grid.global_dims != kGlobalFeatures) throw MotionError("flatten_grid needs an 11-wide global stream");
    const FlatLayout lay = FlatLayout::for_dims(kGlobalFeatures + kJointFeatures * grid.joints);
    std::vector<float> out(grid.frames * lay.dims);
    for (std::size_t t = 0; t < grid.frames; ++t) {
        float* r = out.data() + t * lay.dims;
        for (std::size_t k = 0; k < 4; ++k) r[k] = grid.global(t, k);
        for (std::size_t k = 0; k < 3; ++k) r[lay.root_vel() + k] = grid.global(t, 4 + k);
        for (std::size_t k = 0; k < kFootContacts; ++k) r[lay.feet() + k] = grid.global(t, kFootContactOffset + k);
        for (std::size_t j = 0; j < lay.joints; ++j) {
            for (std::size_t k = 0; k < 3; ++k) r[lay.pos(j) + k] = grid.joint(t, j, k);
            for (std::size_t k = 0; k < 6; ++k) r[lay.rot(j) + k] = grid.joint(t, j, 3 + k);
            for (std::size_t k = 0; k < 3; ++k) r[lay.vel(j) + k] = grid.joint(t, j, 9 + k);
        }
    }
    return out;
}

/// Mean per-joint position error in millimetres (positions are metres).
inline double mpjpe(const MotionGrid& a, const MotionGrid& b) {
    if (a.frames != b.frames || a.joints != b.joints) throw MotionError("mpjpe: shape mismatch");
    double total = 0.0;
    for (std::size_t t = 0; t < a.frames; ++t)
        for (std::size_t j = 0; j < a.joints; ++j) {
            double sq = 0.0;
            for (std::size_t k = 0; k < 3; ++k) {
                const double d = double(a.joint(t, j, k)) - double(b.joint(t, j, k));
                sq += d * d;
            }
            total += std::sqrt(sq);
        }
    return 1000.0 * total / double(a.frames * a.joints);
}

}  // namespace stm
