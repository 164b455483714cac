#pragma once

// Joint-level 2D residual VQ against a pose-level 1D VQ at the same codebook
// budget and step count, repeated over seeds.

#include "stm/harness/train_vq.hpp"

#include <cstdlib>
#include <sstream>

namespace stm {

struct AblationRow {
    std::string system;
    std::uint64_t seed = 0;
    double mpjpe = 0.0;
    std::size_t params = 0;
};

struct AblationReport {
    std::vector<AblationRow> rows;

    /// Seeds where the 2D system has strictly lower MPJPE than the 1D one.
    std::size_t wins_2d() const {
        std::size_t w = 0;
        for (const auto& a : rows)
            if (a.system == "joint2d")
                for (const auto& b : rows)
                    if (b.system == "pose1d" && b.seed == a.seed && a.mpjpe < b.mpjpe) ++w;
        return w;
    }

    std::string to_csv() const {
        std::ostringstream os;
        os.precision(9);
        os << "system,seed,mpjpe,params\n";
        for (const auto& r : rows) os << r.system << ',' << r.seed << ',' << r.mpjpe << ',' << r.params << '\n';
        return os.str();
    }
};

/// Mean MPJPE of `model` reconstructing `clips` (each cropped to a multiple of the downscale).
inline double held_out_mpjpe(const VqModel<float>& model, std::span<const MotionGrid> clips) {
    if (clips.empty()) throw TrainError("held-out set is empty");
    const std::size_t ds = model.config().downscale;
    double s = 0.0;
    for (const auto& c : clips) {
        const MotionGrid x = c.frames % ds ? c.cropped(c.frames - c.frames % ds) : c;
        s += mpjpe(model.reconstruct(x), x);
    }
    return s / static_cast<double>(clips.size());
}

inline void require_matched_budget(std::size_t a, std::size_t b) {
    const double hi = static_cast<double>(std::max(a, b));
    if (hi > 0 && std::abs(static_cast<double>(a) - static_cast<double>(b)) > 0.01 * hi)
        throw TrainError("budget mismatch: " + std::to_string(a) + " vs " + std::to_string(b) + " codebook parameters");
}

/// Seeds are base_seed, base_seed + 1, ...
inline AblationReport run_ablation(const VqConfig& cfg, std::span<const MotionGrid> train,
                                   std::span<const MotionGrid> eval, std::size_t seeds, std::uint64_t base_seed,
                                   const TrainOptions& opts = {}) {
    AblationReport rep;
    for (std::size_t s = 0; s < seeds; ++s) {
        const std::uint64_t seed = base_seed + s;
        std::size_t budget[2] = {0, 0};
        int k = 0;
        for (VqLayout layout : {VqLayout::joint2d, VqLayout::pose1d}) {
            VqTrainer tr(cfg, layout, train, seed);
            tr.run(opts);
            budget[k++] = tr.model().codebook_parameters();
            rep.rows.push_back({layout_name(layout), seed, held_out_mpjpe(tr.model(), eval), budget[k - 1]});
            if (opts.log) opts.log(layout_name(layout) + " seed " + std::to_string(seed) + " mpjpe " + std::to_string(rep.rows.back().mpjpe));
        }
        require_matched_budget(budget[0], budget[1]);
    }
    return rep;
}

}  // namespace stm
