#pragma once

// Cosine mask schedule, two-stage (frames, then joints) masking and
// 80/10/10 token corruption.

#include "stm/numerics/rng.hpp"
#include "stm/vq/tokens.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace stm {

struct MaskError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// gamma(tau) = cos(pi tau / 2), with gamma(1) pinned to exactly 0.
inline double mask_ratio(double tau) {
    if (!(tau >= 0.0 && tau <= 1.0)) throw MaskError("mask ratio argument outside [0, 1]");
    if (tau == 1.0) return 0.0;
    return std::cos(1.57079632679489661923 * tau);
}

/// ceil(gamma * n) for a count of n items.
inline std::size_t masked_count(double gamma, std::size_t n) {
    return static_cast<std::size_t>(std::ceil(gamma * static_cast<double>(n)));
}

enum class MaskStage : std::uint8_t { none = 0, temporal = 1, spatial = 2, user = 3 };

struct MaskPlan {
    std::size_t frames = 0, cols = 0;
    std::vector<std::uint8_t> selected;
    std::vector<MaskStage> stage;
    std::vector<std::uint8_t> frozen;

    MaskPlan() = default;
    MaskPlan(std::size_t t, std::size_t j)
        : frames(t), cols(j), selected(t * j, 0), stage(t * j, MaskStage::none), frozen(t * j, 0) {}

    std::size_t cell(std::size_t t, std::size_t j) const { return t * cols + j; }
    bool is_selected(std::size_t t, std::size_t j) const { return selected[cell(t, j)] != 0; }
    bool is_frozen(std::size_t t, std::size_t j) const { return frozen[cell(t, j)] != 0; }

    void select(std::size_t i, MaskStage s) {
        if (frozen[i]) throw MaskError("cannot select a frozen cell");
        selected[i] = 1;
        stage[i] = s;
    }

    std::size_t count_selected() const { return std::accumulate(selected.begin(), selected.end(), std::size_t{0}); }

    bool frame_selected(std::size_t t) const {
        for (std::size_t j = 0; j < cols; ++j)
            if (!is_selected(t, j)) return false;
        return cols > 0;
    }
};

/// Selects ceil(gamma(tau_t) * T') whole frames uniformly among frames with
/// no frozen cell (capped at the number of such frames).
inline MaskPlan temporal_mask(std::size_t t_prime, std::size_t j_prime, double tau_t,
                              const std::vector<std::uint8_t>& frozen, Rng& rng) {
    MaskPlan plan(t_prime, j_prime);
    if (!frozen.empty()) {
        if (frozen.size() != t_prime * j_prime) throw MaskError("frozen mask does not match the token grid");
        plan.frozen = frozen;
    }
    std::vector<std::size_t> eligible;
    for (std::size_t t = 0; t < t_prime; ++t) {
        bool any = false;
        for (std::size_t j = 0; j < j_prime; ++j) any = any || plan.is_frozen(t, j);
        if (!any) eligible.push_back(t);
    }
    std::size_t n = std::min(t_prime, masked_count(mask_ratio(tau_t), t_prime));
    if (n > 0 && eligible.empty()) throw MaskError("no eligible frame for temporal masking");
    n = std::min(n, eligible.size());
    for (std::size_t t : rng.choose(eligible, n))
        for (std::size_t j = 0; j < j_prime; ++j) plan.select(plan.cell(t, j), MaskStage::temporal);
    return plan;
}

/// Within every frame left unselected by the temporal stage, selects
/// min(free, ceil(gamma(tau_s) * J')) non-frozen cells uniformly.
inline MaskPlan spatial_mask(MaskPlan plan, double tau_s, Rng& rng) {
    const std::size_t want = masked_count(mask_ratio(tau_s), plan.cols);
    if (want == 0) return plan;
    for (std::size_t t = 0; t < plan.frames; ++t) {
        bool temporal = false;
        std::vector<std::size_t> free;
        for (std::size_t j = 0; j < plan.cols; ++j) {
            const std::size_t i = plan.cell(t, j);
            temporal = temporal || plan.stage[i] == MaskStage::temporal;
            if (!plan.frozen[i] && !plan.selected[i]) free.push_back(i);
        }
        if (temporal || free.empty()) continue;
        for (std::size_t i : rng.choose(free, std::min(want, free.size()))) plan.select(i, MaskStage::spatial);
    }
    return plan;
}

/// Special token ids appended after the C codebook entries.
struct Vocab {
    std::size_t codes;
    std::int32_t mask_id() const { return static_cast<std::int32_t>(codes); }
    std::int32_t pad_id() const { return static_cast<std::int32_t>(codes + 1); }
    std::size_t size() const { return codes + 2; }
};

/// Each selected cell: mask token w.p. 0.8, uniform random code w.p. 0.1,
/// unchanged w.p. 0.1. Unselected cells are untouched.
inline TokenMap corrupt(const TokenMap& tokens, const MaskPlan& plan, std::size_t codes, Rng& rng) {
    if (plan.frames != tokens.frames || plan.cols != tokens.cols) throw MaskError("mask plan does not match tokens");
    TokenMap out = tokens;
    const Vocab vocab{codes};
    for (std::size_t i = 0; i < out.ids.size(); ++i) {
        if (!plan.selected[i]) continue;
        const double u = rng.uniform();
        if (u < 0.8)
            out.ids[i] = vocab.mask_id();
        else if (u < 0.9)
            out.ids[i] = static_cast<std::int32_t>(rng.index(codes));
    }
    return out;
}

/// Edit mask file {"frames": [t, ...], "cells": [[t, j], ...]} in token-grid
/// coordinates. Listed frames and cells are editable; every other cell is
/// frozen. Returns the frozen flags, row-major (frame, column).
inline std::vector<std::uint8_t> parse_edit_mask(const nlohmann::json& j, std::size_t t_prime, std::size_t j_prime) {
    if (!j.is_object()) throw MaskError("edit mask must be a JSON object");
    for (const auto& [key, _] : j.items())
        if (key != "frames" && key != "cells") throw MaskError("unknown edit mask key '" + key + "'");
    std::vector<std::uint8_t> frozen(t_prime * j_prime, 1);
    auto index = [](const nlohmann::json& v, std::size_t bound, const char* what) {
        if (!v.is_number_integer() || v.get<long long>() < 0 || std::size_t(v.get<long long>()) >= bound)
            throw MaskError(std::string("edit mask ") + what + " out of bounds");
        return static_cast<std::size_t>(v.get<long long>());
    };
    if (j.contains("frames")) {
        if (!j.at("frames").is_array()) throw MaskError("edit mask 'frames' must be an array");
        for (const auto& f : j.at("frames")) {
            const std::size_t t = index(f, t_prime, "frame");
            std::fill_n(frozen.begin() + t * j_prime, j_prime, std::uint8_t{0});
        }
    }
    if (j.contains("cells")) {
        if (!j.at("cells").is_array()) throw MaskError("edit mask 'cells' must be an array");
        for (const auto& c : j.at("cells")) {
            if (!c.is_array() || c.size() != 2) throw MaskError("edit mask cells must be [t, j] pairs");
            frozen[index(c[0], t_prime, "frame") * j_prime + index(c[1], j_prime, "column")] = 0;
        }
    }
    return frozen;
}

}  // namespace stm
