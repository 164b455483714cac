#pragma once

// Synthetic labeled motion. Each clip drives a binary-tree kinematic chain
// (parent of joint j is (j-1)/2) with per-joint planar rotations whose
// angles are sums of up to three harmonics of a class frequency.

#include "stm/motion/condition.hpp"
#include "stm/motion/motion_grid.hpp"
#include "stm/numerics/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

namespace stm {

struct SynthConfig {
    std::size_t classes = 4;
    std::size_t frames = 64;
    std::size_t joints = 8;
    std::size_t train_clips = 512;
    std::size_t eval_clips = 128;
    std::uint32_t fps = 20;
    std::uint64_t seed = 0;
};

namespace synth {

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kRootHeight = 0.9;
inline constexpr double kBoneLength = 0.3;
inline constexpr double kContactHeight = 0.15;

/// Fundamental frequency in Hz for a class.
inline double class_frequency(std::size_t c) { return 0.625 * (1.0 + 1.5 * static_cast<double>(c)); }

using Mat3 = std::array<double, 9>;

inline Mat3 rot_z(double a) {
    const double c = std::cos(a), s = std::sin(a);
    return {c, -s, 0, s, c, 0, 0, 0, 1};
}

inline Mat3 mul(const Mat3& a, const Mat3& b) {
    Mat3 r{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k) r[i * 3 + j] += a[i * 3 + k] * b[k * 3 + j];
    return r;
}

}  // namespace synth

/// Deterministic in (class_id, frames, joints, seed). `classes` bounds class_id
/// and may not exceed the label table capacity.
inline MotionGrid synth_motion(std::size_t class_id, std::size_t frames, std::size_t joints, std::uint64_t seed,
                               std::size_t classes = 4, std::uint32_t fps = 20) {
    using namespace synth;
    if (classes > kLabelCapacity)
        throw MotionError("class count " + std::to_string(classes) + " exceeds embedding-table capacity " +
                          std::to_string(kLabelCapacity));
    if (class_id >= classes) throw MotionError("class id out of range");
    if (frames < 4) throw MotionError("synthetic motion needs at least 4 frames");
    if (joints < 1) throw MotionError("synthetic motion needs at least one joint");
    if (fps == 0) throw MotionError("fps must be positive");

    Rng rng(seed * 1000003ULL + class_id, Stream::synth);
    const double f0 = class_frequency(class_id) * (1.0 + 0.05 * (2.0 * rng.uniform() - 1.0));
    const double nyquist = 0.5 * fps;

    struct Harmonic {
        double amp, freq, phase;
    };
    std::vector<std::vector<Harmonic>> waves(joints);
    for (std::size_t j = 0; j < joints; ++j) {
        // Class-dependent amplitude profile across the chain.
        const double profile = 1.0 + 0.5 * std::cos(1.7 * double(class_id) + 0.9 * double(j));
        const double base = 0.35 * profile;
        for (int h = 1; h <= 3; ++h) {
            const double f = f0 * h;
            if (f >= nyquist) break;
            waves[j].push_back({base / (h * h), f, 2.0 * kPi * rng.uniform()});
        }
    }
    const double sway = 0.02 + 0.01 * rng.uniform();
    const double speed = 0.02 * (1.0 + double(class_id)) * (1.0 + 0.05 * (2.0 * rng.uniform() - 1.0));

    MotionGrid g(frames, joints, kGlobalFeatures);
    g.fps = fps;
    g.label = static_cast<std::uint32_t>(class_id);

    std::vector<std::array<double, 3>> pos(joints);
    std::vector<Mat3> rot(joints);
    std::array<double, 3> root{}, prev_root{};
    for (std::size_t t = 0; t < frames; ++t) {
        const double time = double(t) / fps;
        root = {speed * double(t), kRootHeight + sway * std::sin(2.0 * kPi * f0 * time), 0.0};
        for (std::size_t j = 0; j < joints; ++j) {
            double angle = 0.0;
            for (const auto& w : waves[j]) angle += w.amp * std::sin(2.0 * kPi * w.freq * time + w.phase);
            if (j == 0) {
                rot[0] = rot_z(angle);
                pos[0] = {0.0, root[1], 0.0};
            } else {
                const std::size_t p = (j - 1) / 2;
                rot[j] = mul(rot[p], rot_z(angle));
                // Bone hangs along -y in the joint's frame.
                pos[j] = {pos[p][0] + rot[j][1] * -kBoneLength, pos[p][1] + rot[j][4] * -kBoneLength,
                          pos[p][2] + rot[j][7] * -kBoneLength};
            }
        }
        for (std::size_t j = 0; j < joints; ++j) {
            for (int k = 0; k < 3; ++k) g.joint(t, j, k) = static_cast<float>(pos[j][k]);
            // 6D rotation: first two columns.
            for (int r = 0; r < 3; ++r) {
                g.joint(t, j, 3 + r) = static_cast<float>(rot[j][r * 3 + 0]);
                g.joint(t, j, 6 + r) = static_cast<float>(rot[j][r * 3 + 1]);
            }
        }
        if (t > 0) {
            for (std::size_t j = 0; j < joints; ++j)
                for (int k = 0; k < 3; ++k)
                    g.joint(t, j, 9 + k) = g.joint(t, j, k) - g.joint(t - 1, j, k);
            for (int k = 0; k < 3; ++k) g.global(t, 4 + k) = static_cast<float>(root[k] - prev_root[k]);
        }
        g.global(t, 0) = 0.0f;
        g.global(t, 1) = static_cast<float>(speed);
        g.global(t, 2) = 0.0f;
        g.global(t, 3) = static_cast<float>(root[1]);
        // Two contact flags per foot; the last two joints act as feet.
        for (std::size_t foot = 0; foot < 2; ++foot) {
            const std::size_t j = joints >= 2 ? joints - 2 + foot : 0;
            const double c = std::clamp(1.0 - double(g.joint(t, j, 1)) / kContactHeight, 0.0, 1.0);
            g.global(t, kFootContactOffset + 2 * foot) = static_cast<float>(c);
            g.global(t, kFootContactOffset + 2 * foot + 1) = static_cast<float>(c);
        }
        prev_root = root;
    }
    g.validate();
    return g;
}

struct SynthDataset {
    std::vector<MotionGrid> train;
    std::vector<MotionGrid> eval;
};

/// Balanced classes, clip i gets class i mod K. Train and eval seeds are disjoint.
inline SynthDataset synth_dataset(const SynthConfig& cfg) {
    SynthDataset ds;
    ds.train.reserve(cfg.train_clips);
    ds.eval.reserve(cfg.eval_clips);
    for (std::size_t i = 0; i < cfg.train_clips; ++i)
        ds.train.push_back(synth_motion(i % cfg.classes, cfg.frames, cfg.joints, cfg.seed * 2000003ULL + 2 * i,
                                        cfg.classes, cfg.fps));
    for (std::size_t i = 0; i < cfg.eval_clips; ++i)
        ds.eval.push_back(synth_motion(i % cfg.classes, cfg.frames, cfg.joints, cfg.seed * 2000003ULL + 2 * i + 1,
                                       cfg.classes, cfg.fps));
    return ds;
}

}  // namespace stm
