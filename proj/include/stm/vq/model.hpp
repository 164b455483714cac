#pragma once

// Residual VQ-VAE over motion grids. Two layouts share the same encoder,
// decoder and quantizer code:
//   joint2d: [N x 12 x T x (J+1)], one token per (frame group, joint) plus a
//            global column quantized by its own codebooks;
//   pose1d:  [N x 12(J+1) x T x 1], one token per frame group.

#include "stm/motion/motion_grid.hpp"
#include "stm/numerics/checkpoint.hpp"
#include "stm/numerics/json_util.hpp"
#include "stm/vq/autoencoder.hpp"
#include "stm/vq/codebook.hpp"
#include "stm/vq/tokens.hpp"

#include <span>

namespace stm {

enum class VqLayout { joint2d, pose1d };

inline std::string layout_name(VqLayout l) { return l == VqLayout::joint2d ? "joint2d" : "pose1d"; }
inline VqLayout parse_layout(const std::string& s) {
    if (s == "joint2d") return VqLayout::joint2d;
    if (s == "pose1d") return VqLayout::pose1d;
    throw ConfigError("unknown VQ layout '" + s + "'");
}

struct VqConfig {
    double alpha = 1.0;
    std::size_t codes = 256;
    std::size_t code_dim = 1024;
    std::size_t residual_layers = 5;
    std::size_t downscale = 4;
    std::size_t width = 128;
    double decay = 0.99;
    double reset_threshold = 1.0;
    std::size_t reset_window = 20;
    bool frozen_zero = true;
    // training
    std::size_t steps = 2000;
    std::size_t batch = 32;
    double lr = 2e-4;
    double grad_clip = 0.0;
    std::size_t log_every = 50;

    void validate() const {
        if (alpha < 0.0) throw ConfigError("vqvae.alpha must be non-negative");
        if (codes < 2) throw ConfigError("vqvae.codes must be at least 2");
        if (code_dim == 0 || width == 0) throw ConfigError("vqvae widths must be positive");
        if (downscale != 1 && downscale != 2 && downscale != 4) throw ConfigError("vqvae.downscale must be 1, 2 or 4");
        if (decay <= 0.0 || decay > 1.0) throw ConfigError("vqvae.decay must lie in (0, 1]");
        if (batch == 0) throw ConfigError("vqvae.batch must be positive");
        if (reset_window == 0) throw ConfigError("vqvae.reset_window must be positive");
    }
};

inline void to_json(nlohmann::json& j, const VqConfig& c) {
    j = {{"alpha", c.alpha},
         {"codes", c.codes},
         {"code_dim", c.code_dim},
         {"residual_layers", c.residual_layers},
         {"downscale", c.downscale},
         {"width", c.width},
         {"decay", c.decay},
         {"reset_threshold", c.reset_threshold},
         {"reset_window", c.reset_window},
         {"frozen_zero", c.frozen_zero},
         {"steps", c.steps},
         {"batch", c.batch},
         {"lr", c.lr},
         {"grad_clip", c.grad_clip},
         {"log_every", c.log_every}};
}

inline void from_json(const nlohmann::json& j, VqConfig& c) {
    const std::string s = "vqvae";
    reject_unknown_keys(j, s,
                        {"alpha", "codes", "code_dim", "residual_layers", "downscale", "width", "decay",
                         "reset_threshold", "reset_window", "frozen_zero", "steps", "batch", "lr", "grad_clip",
                         "log_every"});
    read_key(j, "alpha", c.alpha, s);
    read_key(j, "codes", c.codes, s);
    read_key(j, "code_dim", c.code_dim, s);
    read_key(j, "residual_layers", c.residual_layers, s);
    read_key(j, "downscale", c.downscale, s);
    read_key(j, "width", c.width, s);
    read_key(j, "decay", c.decay, s);
    read_key(j, "reset_threshold", c.reset_threshold, s);
    read_key(j, "reset_window", c.reset_window, s);
    read_key(j, "frozen_zero", c.frozen_zero, s);
    read_key(j, "steps", c.steps, s);
    read_key(j, "batch", c.batch, s);
    read_key(j, "lr", c.lr, s);
    read_key(j, "grad_clip", c.grad_clip, s);
    read_key(j, "log_every", c.log_every, s);
    c.validate();
}

template <class T>
struct VqLoss {
    Var<T> total;
    T recon = 0;
    T commit = 0;
};

/// Masked mean L1 reconstruction plus alpha times the commitment MSE
/// between encoder output and the (constant) quantized vectors.
template <class T>
VqLoss<T> vq_loss(Var<T> recon, const Tensor<T>& target, std::span<const T> mask, Var<T> v, const Tensor<T>& v_q,
                  T alpha) {
    if (alpha < T{0}) throw VqError("negative commitment weight");
    Var<T> rec = ag::l1_loss(recon, target, mask);
    Var<T> com = ag::mse_loss(v, v_q);
    return {ag::add(rec, ag::scale(com, alpha)), rec.value()[0], com.value()[0]};
}

/// Row-level quantization result of one batch.
template <class T>
struct BatchQuant {
    ResidualQuantized<T> joint, global;
    std::vector<std::size_t> joint_rows, global_rows;  // batch row of each group row
    Tensor<T> quantized_sum;                           // [rows x d], batch order
    std::vector<TokenStack> stacks;                    // one per sample
};

template <class T>
class VqModel {
public:
    VqModel(VqConfig cfg, VqLayout layout, std::size_t joints, std::size_t global_dims, std::uint64_t seed)
        : cfg_(cfg), layout_(layout), joints_(joints), global_dims_(global_dims) {
        cfg_.validate();
        if (joints == 0) throw VqError("model needs at least one joint");
        if (global_dims > kJointFeatures) throw VqError("global stream wider than a joint column");
        Rng rng(seed, Stream::init);
        enc_ = ConvEncoder<T>(params_, "enc", in_channels(), cfg_.width, cfg_.code_dim, cfg_.downscale, rng);
        dec_ = ConvDecoder<T>(params_, "dec", cfg_.code_dim, cfg_.width, in_channels(), cfg_.downscale, rng);
        const T decay = static_cast<T>(cfg_.decay);
        for (std::size_t l = 0; l <= cfg_.residual_layers; ++l) {
            const bool fz = cfg_.frozen_zero && l > 0;
            joint_books_.emplace_back(joint_codes(), cfg_.code_dim, decay, fz, rng);
            if (layout_ == VqLayout::joint2d) global_books_.emplace_back(cfg_.codes, cfg_.code_dim, decay, fz, rng);
        }
        mean_.assign(columns_total() * kJointFeatures, T{0});
        std_.assign(columns_total() * kJointFeatures, T{1});
    }

    VqModel(VqModel&&) noexcept = default;
    VqModel& operator=(VqModel&&) noexcept = default;

    const VqConfig& config() const { return cfg_; }
    VqLayout layout() const { return layout_; }
    std::size_t joints() const { return joints_; }
    std::size_t global_dims() const { return global_dims_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }
    std::vector<Codebook<T>>& joint_books() { return joint_books_; }
    std::vector<Codebook<T>>& global_books() { return global_books_; }
    const std::vector<Codebook<T>>& joint_books() const { return joint_books_; }
    const std::vector<Codebook<T>>& global_books() const { return global_books_; }

    std::size_t depth() const { return cfg_.residual_layers + 1; }
    /// Joint codebook size; the 1D layout doubles it to match the 2D budget.
    std::size_t joint_codes() const { return layout_ == VqLayout::joint2d ? cfg_.codes : 2 * cfg_.codes; }
    std::size_t global_codes() const { return layout_ == VqLayout::joint2d ? cfg_.codes : 0; }
    std::size_t in_channels() const { return layout_ == VqLayout::joint2d ? kJointFeatures : kJointFeatures * columns_total(); }
    /// Token columns per frame group (J' in the 2D layout, 1 for 1D).
    std::size_t token_cols() const { return layout_ == VqLayout::joint2d ? columns_total() : 1; }
    std::size_t frames_out(std::size_t t) const { return t / cfg_.downscale; }

    std::size_t codebook_parameters() const {
        std::size_t n = 0;
        for (const auto& b : joint_books_) n += b.entries.size();
        for (const auto& b : global_books_) n += b.entries.size();
        return n;
    }

    /// Per (column, feature) mean and std over all frames of `grids`.
    void fit_normalizer(std::span<const MotionGrid> grids) {
        if (grids.empty()) throw VqError("cannot fit normalizer on an empty dataset");
        const std::size_t cells = columns_total() * kJointFeatures;
        std::vector<double> s(cells, 0.0), sq(cells, 0.0);
        double n = 0;
        for (const auto& g : grids) {
            check_grid(g);
            for (std::size_t t = 0; t < g.frames; ++t) {
                for (std::size_t c = 0; c < columns_total(); ++c)
                    for (std::size_t f = 0; f < kJointFeatures; ++f) {
                        const double v = raw(g, t, c, f);
                        s[c * kJointFeatures + f] += v;
                        sq[c * kJointFeatures + f] += v * v;
                    }
                n += 1;
            }
        }
        for (std::size_t i = 0; i < cells; ++i) {
            const double m = s[i] / n;
            const double var = std::max(0.0, sq[i] / n - m * m);
            mean_[i] = static_cast<T>(m);
            std_[i] = static_cast<T>(std::max(std::sqrt(var), 1e-3));
        }
        for (std::size_t f = global_dims_; f < kJointFeatures; ++f) {
            mean_[joints_ * kJointFeatures + f] = T{0};
            std_[joints_ * kJointFeatures + f] = T{1};
        }
    }

    /// Normalized model input for equal-length grids.
    Tensor<T> to_input(std::span<const MotionGrid> grids) const {
        if (grids.empty()) throw VqError("empty batch");
        const std::size_t frames = grids[0].frames;
        if (frames % cfg_.downscale != 0)
            throw VqError("clip length " + std::to_string(frames) + " is not a multiple of the downscale factor");
        Tensor<T> x(input_shape(grids.size(), frames));
        for (std::size_t b = 0; b < grids.size(); ++b) {
            const auto& g = grids[b];
            check_grid(g);
            if (g.frames != frames) throw VqError("batch clips differ in length");
            for (std::size_t t = 0; t < frames; ++t)
                for (std::size_t c = 0; c < columns_total(); ++c)
                    for (std::size_t f = 0; f < kJointFeatures; ++f) {
                        const std::size_t k = c * kJointFeatures + f;
                        x[index(b, t, c, f, frames)] = (static_cast<T>(raw(g, t, c, f)) - mean_[k]) / std_[k];
                    }
        }
        return x;
    }

    /// Inverse of to_input; fps and labels are copied from `like` when given.
    std::vector<MotionGrid> to_grids(const Tensor<T>& y, std::span<const MotionGrid> like = {}) const {
        const std::size_t batch = y.dim(0), frames = y.dim(2);
        if (y.shape() != input_shape(batch, frames)) throw VqError("decoder output shape mismatch");
        std::vector<MotionGrid> out;
        for (std::size_t b = 0; b < batch; ++b) {
            MotionGrid g(frames, joints_, global_dims_);
            if (b < like.size()) {
                g.fps = like[b].fps;
                g.label = like[b].label;
            }
            for (std::size_t t = 0; t < frames; ++t)
                for (std::size_t c = 0; c < columns_total(); ++c)
                    for (std::size_t f = 0; f < kJointFeatures; ++f) {
                        const std::size_t k = c * kJointFeatures + f;
                        const float v = static_cast<float>(y[index(b, t, c, f, frames)] * std_[k] + mean_[k]);
                        if (c < joints_)
                            g.joint(t, c, f) = v;
                        else if (f < global_dims_)
                            g.global(t, f) = v;
                    }
            if (global_dims_ == kGlobalFeatures)
                for (std::size_t t = 0; t < frames; ++t)
                    for (std::size_t k = 0; k < kFootContacts; ++k) {
                        float& c = g.global(t, kFootContactOffset + k);
                        c = std::clamp(c, 0.0f, 1.0f);
                    }
            out.push_back(std::move(g));
        }
        return out;
    }

    /// 1 for real channels, 0 for the zero padding of the global column.
    std::vector<T> loss_mask(std::size_t batch, std::size_t frames) const {
        std::vector<T> m(numel(input_shape(batch, frames)), T{1});
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t t = 0; t < frames; ++t)
                for (std::size_t f = global_dims_; f < kJointFeatures; ++f) m[index(b, t, joints_, f, frames)] = T{0};
        return m;
    }

    /// x [N x Cin x T x W] -> latent rows [(N*T'*W) x d], ordered (n, t', w).
    Var<T> encode(Graph<T>& g, Var<T> x) const { return ag::nchw_to_rows(enc_(g, x)); }

    Var<T> decode(Graph<T>& g, Var<T> rows, std::size_t batch, std::size_t t_prime) const {
        return dec_(g, ag::rows_to_nchw(rows, batch, t_prime, token_cols()));
    }

    BatchQuant<T> quantize(const Tensor<T>& rows, std::size_t batch, std::size_t t_prime) const {
        const std::size_t w = token_cols(), d = cfg_.code_dim;
        if (rows.rank() != 2 || rows.rows() != batch * t_prime * w || rows.cols() != d)
            throw VqError("latent rows do not match batch geometry");
        BatchQuant<T> q;
        const bool split = layout_ == VqLayout::joint2d;
        for (std::size_t r = 0; r < rows.rows(); ++r)
            (split && r % w == w - 1 ? q.global_rows : q.joint_rows).push_back(r);
        auto run = [&](const std::vector<std::size_t>& sel, const std::vector<Codebook<T>>& books) {
            Tensor<T> sub(Shape{sel.size(), d});
            for (std::size_t i = 0; i < sel.size(); ++i)
                std::copy_n(rows.data().data() + sel[i] * d, d, sub.data().data() + i * d);
            std::vector<const Codebook<T>*> ptrs;
            for (const auto& b : books) ptrs.push_back(&b);
            return residual_quantize<T>(sub, ptrs);
        };
        q.joint = run(q.joint_rows, joint_books_);
        if (split) q.global = run(q.global_rows, global_books_);
        q.quantized_sum = Tensor<T>(Shape{rows.rows(), d});
        q.stacks.assign(batch, TokenStack{std::vector<TokenMap>(depth(), TokenMap(t_prime, w))});
        auto scatter = [&](const ResidualQuantized<T>& rq, const std::vector<std::size_t>& sel) {
            for (std::size_t i = 0; i < sel.size(); ++i) {
                const std::size_t r = sel[i];
                std::copy_n(rq.quantized_sum.data().data() + i * d, d, q.quantized_sum.data().data() + r * d);
                const std::size_t b = r / (t_prime * w), cell = r % (t_prime * w);
                for (std::size_t l = 0; l < depth(); ++l) q.stacks[b].layers[l].ids[cell] = rq.ids[l][i];
            }
        };
        scatter(q.joint, q.joint_rows);
        if (split) scatter(q.global, q.global_rows);
        return q;
    }

    /// EMA update of every codebook from one batch.
    void update_codebooks(const BatchQuant<T>& q) {
        for (std::size_t l = 0; l < depth(); ++l) {
            ema_update<T>(joint_books_[l], q.joint.ids[l], q.joint.layer_inputs[l]);
            if (layout_ == VqLayout::joint2d) ema_update<T>(global_books_[l], q.global.ids[l], q.global.layer_inputs[l]);
        }
    }

    /// Dead-code reset of every codebook from the layer inputs of one batch.
    std::size_t reset_codebooks(const BatchQuant<T>& q, Rng& rng) {
        if (cfg_.decay >= 1.0) return 0;
        const T thr = static_cast<T>(cfg_.reset_threshold);
        std::size_t n = 0;
        for (std::size_t l = 0; l < depth(); ++l) {
            n += codebook_reset<T>(joint_books_[l], q.joint.layer_inputs[l], rng, thr);
            if (layout_ == VqLayout::joint2d) n += codebook_reset<T>(global_books_[l], q.global.layer_inputs[l], rng, thr);
        }
        return n;
    }

    std::vector<TokenStack> tokenize(std::span<const MotionGrid> grids) const {
        Graph<T> g;
        const Tensor<T> x = to_input(grids);
        Var<T> v = encode(g, g.constant(x));
        return quantize(v.value(), grids.size(), frames_out(grids[0].frames)).stacks;
    }

    /// Sum of selected entries over layers, in layer order, as latent rows.
    Tensor<T> lookup(std::span<const TokenStack> stacks) const {
        if (stacks.empty()) throw VqError("no token stacks to decode");
        const std::size_t tp = stacks[0].frames(), w = token_cols(), d = cfg_.code_dim;
        Tensor<T> rows(Shape{stacks.size() * tp * w, d});
        for (std::size_t b = 0; b < stacks.size(); ++b) {
            const auto& st = stacks[b];
            if (st.depth() == 0 || st.depth() > depth() || st.frames() != tp || st.cols() != w)
                throw VqError("token stack does not match the model");
            st.validate(joint_codes(), layout_ == VqLayout::joint2d ? global_codes() : joint_codes(),
                        layout_ == VqLayout::joint2d);
            for (std::size_t cell = 0; cell < tp * w; ++cell) {
                const bool global = layout_ == VqLayout::joint2d && cell % w == w - 1;
                T* out = rows.data().data() + (b * tp * w + cell) * d;
                for (std::size_t l = 0; l < st.depth(); ++l) {
                    const auto& book = global ? global_books_[l] : joint_books_[l];
                    const T* e = book.entries.data().data() + std::size_t(st.layers[l].ids[cell]) * d;
                    for (std::size_t k = 0; k < d; ++k) out[k] += e[k];
                }
            }
        }
        return rows;
    }

    std::vector<MotionGrid> detokenize(std::span<const TokenStack> stacks, std::span<const MotionGrid> like = {}) const {
        Graph<T> g;
        Var<T> y = decode(g, g.constant(lookup(stacks)), stacks.size(), stacks[0].frames());
        return to_grids(y.value(), like);
    }

    MotionGrid reconstruct(const MotionGrid& grid) const {
        const std::span<const MotionGrid> one(&grid, 1);
        const auto stacks = tokenize(one);
        return detokenize(stacks, one).at(0);
    }

    Checkpoint to_checkpoint() const {
        Checkpoint ck;
        for (const auto& [name, p] : params_.all()) ck.tensors.emplace("vq/" + name, p.value.template cast<float>());
        auto put_books = [&](const std::vector<Codebook<T>>& books, const std::string& kind) {
            for (std::size_t l = 0; l < books.size(); ++l) {
                const std::string base = "vq/book/" + kind + "/" + std::to_string(l);
                ck.tensors.emplace(base + "/entries", books[l].entries.template cast<float>());
                ck.tensors.emplace(base + "/cluster_sum", books[l].cluster_sum.template cast<float>());
                ck.tensors.emplace(base + "/usage", Tensor<T>(Shape{books[l].usage.size()}, books[l].usage).template cast<float>());
            }
        };
        put_books(joint_books_, "joint");
        put_books(global_books_, "global");
        ck.tensors.emplace("vq/norm/mean", Tensor<T>(Shape{mean_.size()}, mean_).template cast<float>());
        ck.tensors.emplace("vq/norm/std", Tensor<T>(Shape{std_.size()}, std_).template cast<float>());
        ck.meta["vq"] = {{"config", cfg_},
                         {"layout", layout_name(layout_)},
                         {"joints", joints_},
                         {"global_dims", global_dims_}};
        return ck;
    }

    static VqModel from_checkpoint(const Checkpoint& ck) {
        if (!ck.meta.contains("vq")) throw FormatError("checkpoint has no VQ model");
        const auto& m = ck.meta.at("vq");
        VqModel model(m.at("config").get<VqConfig>(), parse_layout(m.at("layout").get<std::string>()),
                      m.at("joints").get<std::size_t>(), m.at("global_dims").get<std::size_t>(), 0);
        auto load = [&](const std::string& name, Tensor<T>& dst) {
            const Tensor<float>& src = ck.tensor(name);
            if (src.shape() != dst.shape()) throw FormatError("checkpoint tensor " + name + " has the wrong shape");
            dst = src.template cast<T>();
        };
        for (auto& [name, p] : model.params_.all()) load("vq/" + name, p.value);
        auto get_books = [&](std::vector<Codebook<T>>& books, const std::string& kind) {
            for (std::size_t l = 0; l < books.size(); ++l) {
                const std::string base = "vq/book/" + kind + "/" + std::to_string(l);
                load(base + "/entries", books[l].entries);
                load(base + "/cluster_sum", books[l].cluster_sum);
                Tensor<T> u(Shape{books[l].usage.size()});
                load(base + "/usage", u);
                books[l].usage = u.storage();
            }
        };
        get_books(model.joint_books_, "joint");
        get_books(model.global_books_, "global");
        Tensor<T> mean(Shape{model.mean_.size()}), sd(Shape{model.std_.size()});
        load("vq/norm/mean", mean);
        load("vq/norm/std", sd);
        model.mean_ = mean.storage();
        model.std_ = sd.storage();
        return model;
    }

private:
    std::size_t columns_total() const { return joints_ + 1; }

    void check_grid(const MotionGrid& g) const {
        if (g.joints != joints_ || g.global_dims != global_dims_)
            throw VqError("motion grid has " + std::to_string(g.joints) + " joints / " + std::to_string(g.global_dims) +
                          " global dims, model expects " + std::to_string(joints_) + " / " + std::to_string(global_dims_));
    }

    double raw(const MotionGrid& g, std::size_t t, std::size_t c, std::size_t f) const {
        if (c < joints_) return g.joint(t, c, f);
        return f < global_dims_ ? g.global(t, f) : 0.0;
    }

    Shape input_shape(std::size_t batch, std::size_t frames) const {
        return {batch, in_channels(), frames, token_cols()};
    }

    std::size_t index(std::size_t b, std::size_t t, std::size_t c, std::size_t f, std::size_t frames) const {
        if (layout_ == VqLayout::joint2d) return ((b * kJointFeatures + f) * frames + t) * columns_total() + c;
        return (b * in_channels() + c * kJointFeatures + f) * frames + t;
    }

    VqConfig cfg_;
    VqLayout layout_;
    std::size_t joints_, global_dims_;
    ParamStore<T> params_;
    ConvEncoder<T> enc_;
    ConvDecoder<T> dec_;
    std::vector<Codebook<T>> joint_books_, global_books_;
    std::vector<T> mean_, std_;
};

}  // namespace stm
