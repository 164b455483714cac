#pragma once

// Iterative masked decoding with classifier-free guidance, greedy residual
// layer prediction, and mask-constrained editing.

#include "stm/masking/masking.hpp"
#include "stm/transformer/transformer.hpp"
#include "stm/vq/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace stm {

struct GenerationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct GenerationConfig {
    std::size_t iterations = 10;
    double cfg_scale = 4.0;
    double temperature = 1.0;
    /// Scale of annealed Gumbel noise added to log-confidences when ranking; 0 disables.
    double confidence_noise = 0.0;

    void validate() const {
        if (iterations == 0) throw ConfigError("generation.iterations must be at least 1");
        if (!(temperature > 0.0)) throw ConfigError("generation.temperature must be positive");
        if (confidence_noise < 0.0) throw ConfigError("generation.confidence_noise must be non-negative");
    }
};

inline void to_json(nlohmann::json& j, const GenerationConfig& c) {
    j = {{"iterations", c.iterations},
         {"cfg_scale", c.cfg_scale},
         {"temperature", c.temperature},
         {"confidence_noise", c.confidence_noise}};
}

inline void from_json(const nlohmann::json& j, GenerationConfig& c) {
    const std::string s = "generation";
    reject_unknown_keys(j, s, {"iterations", "cfg_scale", "temperature", "confidence_noise"});
    read_key(j, "iterations", c.iterations, s);
    read_key(j, "cfg_scale", c.cfg_scale, s);
    read_key(j, "temperature", c.temperature, s);
    read_key(j, "confidence_noise", c.confidence_noise, s);
    c.validate();
}

/// (1 + s) * con - s * un.
template <class T>
Tensor<T> cfg_combine(const Tensor<T>& con, const Tensor<T>& un, double s) {
    if (con.shape() != un.shape()) throw GenerationError("guidance logits differ in shape");
    Tensor<T> out(con.shape());
    const T a = static_cast<T>(1.0 + s), b = static_cast<T>(s);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * con[i] - b * un[i];
    return out;
}

/// Number of cells still masked after step n of N, for M free cells.
inline std::size_t remaining_masked(std::size_t n, std::size_t iterations, std::size_t free_cells) {
    return std::min(free_cells, masked_count(mask_ratio(double(n) / double(iterations)), free_cells));
}

/// Token ids that must survive generation. Cells with frozen != 0 keep
/// tokens.layers[l] at every layer l the stack provides.
struct EditConstraint {
    TokenStack tokens;
    std::vector<std::uint8_t> frozen;

    std::size_t free_cells() const {
        return static_cast<std::size_t>(std::count(frozen.begin(), frozen.end(), std::uint8_t{0}));
    }
};

struct DecodeTrace {
    std::vector<std::vector<std::size_t>> masked_after;  // [sample][step] masked count after the step
    std::size_t forward_calls = 0;
};

namespace detail {

template <class T>
Tensor<T> guided_logits(const Tensor<T>& con, const Tensor<T>& un, double s) {
    return s == 0.0 ? con : cfg_combine(con, un, s);
}

/// Conditional and (when needed) unconditional logits from one batched forward.
template <class Fwd>
std::pair<Tensor<float>, Tensor<float>> forward_both(Fwd fwd, const Tensor<float>& cond, double s,
                                                     std::size_t rows_per_sample) {
    const std::size_t b = cond.rows();
    if (s == 0.0) {
        Graph<float> g;
        return {fwd(g, cond, std::vector<std::uint8_t>(b, 0), 1).value(), {}};
    }
    Tensor<float> both(Shape{2 * b, cond.cols()});
    std::copy(cond.data().begin(), cond.data().end(), both.data().begin());
    std::copy(cond.data().begin(), cond.data().end(), both.data().begin() + cond.size());
    std::vector<std::uint8_t> un(2 * b, 0);
    std::fill(un.begin() + b, un.end(), 1);
    Graph<float> g;
    const Tensor<float> all = fwd(g, both, un, 2).value();
    const std::size_t half = b * rows_per_sample * all.cols();
    Tensor<float> c(Shape{b * rows_per_sample, all.cols()}), u(c.shape());
    std::copy_n(all.data().begin(), half, c.data().begin());
    std::copy_n(all.data().begin() + half, half, u.data().begin());
    return {c, u};
}

inline void require_constraints(std::span<const EditConstraint> cons, std::size_t batch, std::size_t frames,
                                std::size_t cols) {
    if (!cons.empty() && cons.size() != batch) throw GenerationError("one edit constraint per sample is required");
    for (const auto& c : cons) {
        if (c.frozen.size() != frames * cols) throw GenerationError("edit constraint does not match the token grid");
        if (c.tokens.depth() == 0 || c.tokens.frames() != frames || c.tokens.cols() != cols)
            throw GenerationError("edit constraint tokens do not match the token grid");
    }
}

}  // namespace detail

/// Base-layer maps for a batch of conditions [B x d_text]. Starts from an
/// all-mask map (frozen cells excepted); after step n exactly
/// remaining_masked(n, N, M_free) cells stay masked, the lowest-confidence ones.
inline std::vector<TokenMap> iterative_decode(const MaskTransformer<float>& model, const Tensor<float>& cond,
                                              std::size_t frames, std::size_t cols, const GenerationConfig& sched,
                                              Rng& rng, std::span<const EditConstraint> constraints = {},
                                              DecodeTrace* trace = nullptr) {
    sched.validate();
    const std::size_t batch = cond.rows(), cells = frames * cols, codes = model.codes();
    if (batch == 0) throw GenerationError("no conditions to decode");
    if (cond.cols() != model.config().d_text) throw GenerationError("condition width does not match the model");
    detail::require_constraints(constraints, batch, frames, cols);
    const std::int32_t mask_id = model.vocab().mask_id();

    std::vector<TokenMap> maps(batch, TokenMap(frames, cols, mask_id));
    std::vector<std::vector<std::size_t>> masked(batch);  // cells still masked, per sample
    std::vector<std::size_t> free_cells(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < cells; ++i) {
            if (!constraints.empty() && constraints[b].frozen[i]) {
                const auto id = constraints[b].tokens.layers[0].ids[i];
                if (id < 0 || std::size_t(id) >= codes) throw GenerationError("frozen token outside the codebook");
                maps[b].ids[i] = id;
            } else {
                masked[b].push_back(i);
            }
        }
        free_cells[b] = masked[b].size();
    }
    if (trace) {
        trace->masked_after.assign(batch, {});
        trace->forward_calls = 0;
    }

    const std::size_t n_steps = sched.iterations;
    auto fwd = [&](Graph<float>& g, const Tensor<float>& c, const std::vector<std::uint8_t>& un, std::size_t reps) {
        std::vector<TokenMap> in;
        for (std::size_t r = 0; r < reps; ++r) in.insert(in.end(), maps.begin(), maps.end());
        return model.forward(g, in, c, un);
    };
    for (std::size_t n = 1; n <= n_steps; ++n) {
        bool any = false;
        for (const auto& m : masked) any = any || !m.empty();
        if (any) {
            const auto [con, un] = detail::forward_both(fwd, cond, sched.cfg_scale, cells);
            if (trace) ++trace->forward_calls;
            const Tensor<float> logits = detail::guided_logits(con, un, sched.cfg_scale);
            for (std::size_t b = 0; b < batch; ++b) {
                std::vector<double> score(masked[b].size());
                std::vector<double> p(codes);
                for (std::size_t k = 0; k < masked[b].size(); ++k) {
                    const std::size_t cell = masked[b][k];
                    const float* row = logits.data().data() + (b * cells + cell) * codes;
                    double mx = -std::numeric_limits<double>::infinity();
                    for (std::size_t c = 0; c < codes; ++c) mx = std::max(mx, double(row[c]) / sched.temperature);
                    double z = 0;
                    for (std::size_t c = 0; c < codes; ++c) z += (p[c] = std::exp(double(row[c]) / sched.temperature - mx));
                    const double u = rng.uniform() * z;
                    std::size_t pick = codes - 1;
                    double acc = 0;
                    for (std::size_t c = 0; c < codes; ++c) {
                        acc += p[c];
                        if (u < acc) {
                            pick = c;
                            break;
                        }
                    }
                    maps[b].ids[cell] = static_cast<std::int32_t>(pick);
                    score[k] = p[pick] / z;
                    if (sched.confidence_noise > 0.0) {
                        const double gumbel = -std::log(-std::log(std::max(rng.uniform(), 1e-300)));
                        score[k] = std::log(score[k]) + sched.confidence_noise * (1.0 - double(n) / n_steps) * gumbel;
                    }
                }
                const std::size_t keep_masked = remaining_masked(n, n_steps, free_cells[b]);
                std::vector<std::size_t> order(masked[b].size());
                std::iota(order.begin(), order.end(), std::size_t{0});
                std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t c) { return score[a] > score[c]; });
                std::vector<std::size_t> still;
                for (std::size_t r = order.size() - std::min(keep_masked, order.size()); r < order.size(); ++r) {
                    const std::size_t cell = masked[b][order[r]];
                    maps[b].ids[cell] = mask_id;
                    still.push_back(cell);
                }
                std::sort(still.begin(), still.end());
                masked[b] = std::move(still);
            }
        }
        if (trace)
            for (std::size_t b = 0; b < batch; ++b) trace->masked_after[b].push_back(masked[b].size());
    }
    return maps;
}

/// Greedy residual layers 1..layers on top of complete base maps, with
/// guidance. Frozen constraint cells keep their original ids at every layer
/// the constraint stack provides.
inline std::vector<TokenStack> predict_residual_layers(const ResidualTransformer<float>* model,
                                                       std::span<const TokenMap> base, const Tensor<float>& cond,
                                                       const GenerationConfig& sched, std::size_t layers,
                                                       std::span<const EditConstraint> constraints = {}) {
    std::vector<TokenStack> stacks(base.size());
    for (std::size_t b = 0; b < base.size(); ++b) stacks[b].layers.push_back(base[b]);
    if (layers == 0) return stacks;
    if (!model) throw GenerationError("missing residual head");
    if (layers > model->residual_layers()) throw GenerationError("residual head predicts fewer layers than requested");
    if (cond.rows() != base.size()) throw GenerationError("one condition per token map is required");
    const std::size_t frames = base[0].frames, cols = base[0].cols, cells = frames * cols, codes = model->codes();
    detail::require_constraints(constraints, base.size(), frames, cols);
    for (std::size_t l = 1; l <= layers; ++l) {
        auto fwd = [&](Graph<float>& g, const Tensor<float>& c, const std::vector<std::uint8_t>& un, std::size_t reps) {
            std::vector<TokenStack> in;
            for (std::size_t r = 0; r < reps; ++r) in.insert(in.end(), stacks.begin(), stacks.end());
            return model->forward(g, in, l, c, un);
        };
        const auto [con, un] = detail::forward_both(fwd, cond, sched.cfg_scale, cells);
        const Tensor<float> logits = detail::guided_logits(con, un, sched.cfg_scale);
        for (std::size_t b = 0; b < base.size(); ++b) {
            TokenMap m(frames, cols);
            for (std::size_t i = 0; i < cells; ++i) {
                const bool keep = !constraints.empty() && constraints[b].frozen[i] && constraints[b].tokens.depth() > l;
                if (keep) {
                    m.ids[i] = constraints[b].tokens.layers[l].ids[i];
                    continue;
                }
                const float* row = logits.data().data() + (b * cells + i) * codes;
                m.ids[i] = static_cast<std::int32_t>(std::max_element(row, row + codes) - row);
            }
            stacks[b].layers.push_back(std::move(m));
        }
    }
    return stacks;
}

/// The trained pieces generation needs. `res` may be null when the VQ model
/// has no residual layers.
struct GenerationModels {
    const VqModel<float>* vq = nullptr;
    const MaskTransformer<float>* mask = nullptr;
    const ResidualTransformer<float>* res = nullptr;

    void validate() const {
        if (!vq || !mask) throw GenerationError("generation needs a VQ model and a mask transformer");
        if (vq->layout() != VqLayout::joint2d) throw GenerationError("generation needs a joint-level VQ model");
        if (mask->codes() != vq->joint_codes() || (res && res->codes() != vq->joint_codes()))
            throw GenerationError("transformer vocabulary does not match the VQ codebook");
    }
    std::size_t residual_depth() const { return vq->depth() - 1; }
};

struct Generated {
    std::vector<TokenStack> stacks;
    std::vector<MotionGrid> motions;
};

/// Full pipeline: base decode, residual layers, VQ decoder.
inline Generated generate(const GenerationModels& m, const Tensor<float>& cond, std::size_t frames,
                          const GenerationConfig& sched, Rng& rng, DecodeTrace* trace = nullptr) {
    m.validate();
    const std::size_t ds = m.vq->config().downscale;
    if (frames == 0 || frames % ds != 0)
        throw GenerationError("frame count must be a positive multiple of " + std::to_string(ds));
    const auto base = iterative_decode(*m.mask, cond, frames / ds, m.vq->token_cols(), sched, rng, {}, trace);
    Generated out;
    out.stacks = predict_residual_layers(m.res, base, cond, sched, m.res ? m.residual_depth() : 0);
    out.motions = m.vq->detokenize(out.stacks);
    return out;
}

struct EditResult {
    TokenStack before, after;
    std::vector<std::uint8_t> frozen;
    MotionGrid motion;
};

/// Regenerates the editable cells of `motion` (frozen == 0) under `cond`;
/// every frozen cell keeps its token ids at all layers. The clip is cropped
/// to a multiple of the downscale factor first.
inline EditResult edit(const GenerationModels& m, const MotionGrid& motion, const std::vector<std::uint8_t>& frozen,
                       const Tensor<float>& cond, const GenerationConfig& sched, Rng& rng,
                       DecodeTrace* trace = nullptr) {
    m.validate();
    if (cond.rows() != 1) throw GenerationError("edit takes exactly one condition");
    const std::size_t ds = m.vq->config().downscale;
    const std::size_t frames = motion.frames - motion.frames % ds;
    if (frames == 0) throw GenerationError("clip shorter than the downscale factor");
    const MotionGrid clip = frames == motion.frames ? motion : motion.cropped(frames);
    const std::span<const MotionGrid> one(&clip, 1);
    EditResult r;
    r.before = m.vq->tokenize(one).at(0);
    if (frozen.size() != r.before.frames() * r.before.cols()) throw GenerationError("edit mask does not match the token grid");
    r.frozen = frozen;
    const std::vector<EditConstraint> cons{{r.before, frozen}};
    const auto base = iterative_decode(*m.mask, cond, r.before.frames(), r.before.cols(), sched, rng, cons, trace);
    const std::size_t layers = r.before.depth() - 1;
    const auto stacks = predict_residual_layers(m.res, base, cond, sched, layers, cons);
    r.after = stacks.at(0);
    r.motion = m.vq->detokenize(stacks, one).at(0);
    r.motion.label = motion.label;
    return r;
}

}  // namespace stm
