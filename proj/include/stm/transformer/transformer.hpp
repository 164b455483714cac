#pragma once

// Mask and residual token transformers sharing one trunk: a condition token,
// position-encoded motion embeddings, and blocks of
// [spatial-temporal, joint-spatial, joint-temporal attention, feed-forward].

#include "stm/masking/masking.hpp"
#include "stm/numerics/checkpoint.hpp"
#include "stm/numerics/json_util.hpp"
#include "stm/transformer/attention.hpp"
#include "stm/vq/tokens.hpp"

#include <span>
#include <string>
#include <vector>

namespace stm {

struct TransformerConfig {
    std::size_t layers = 6;
    std::size_t heads = 6;
    std::size_t d_model = 384;
    std::size_t ffn_mult = 4;
    double dropout = 0.1;
    double uncond_prob = 0.1;
    std::size_t d_text = 512;
    bool pos_bias = false;
    std::size_t steps = 2000;
    std::size_t batch = 32;
    double lr = 2e-4;
    double grad_clip = 0.0;
    std::size_t log_every = 50;

    void validate() const {
        if (layers == 0) throw ConfigError("transformer.layers must be positive");
        if (heads == 0 || d_model % heads != 0) throw ConfigError("transformer.d_model must be divisible by heads");
        if (d_model % 2 != 0) throw ConfigError("transformer.d_model must be even");
        if (ffn_mult == 0 || d_text == 0 || batch == 0) throw ConfigError("transformer sizes must be positive");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("transformer.dropout must lie in [0, 1)");
        if (uncond_prob < 0.0 || uncond_prob > 1.0) throw ConfigError("transformer.uncond_prob must lie in [0, 1]");
    }
};

inline void to_json(nlohmann::json& j, const TransformerConfig& c) {
    j = {{"layers", c.layers},     {"heads", c.heads},       {"d_model", c.d_model},
         {"ffn_mult", c.ffn_mult}, {"dropout", c.dropout},   {"uncond_prob", c.uncond_prob},
         {"d_text", c.d_text},     {"pos_bias", c.pos_bias}, {"steps", c.steps},
         {"batch", c.batch},       {"lr", c.lr},             {"grad_clip", c.grad_clip},
         {"log_every", c.log_every}};
}

inline void from_json(const nlohmann::json& j, TransformerConfig& c) {
    const std::string s = "transformer";
    reject_unknown_keys(j, s,
                        {"layers", "heads", "d_model", "ffn_mult", "dropout", "uncond_prob", "d_text", "pos_bias",
                         "steps", "batch", "lr", "grad_clip", "log_every"});
    read_key(j, "layers", c.layers, s);
    read_key(j, "heads", c.heads, s);
    read_key(j, "d_model", c.d_model, s);
    read_key(j, "ffn_mult", c.ffn_mult, s);
    read_key(j, "dropout", c.dropout, s);
    read_key(j, "uncond_prob", c.uncond_prob, s);
    read_key(j, "d_text", c.d_text, s);
    read_key(j, "pos_bias", c.pos_bias, s);
    read_key(j, "steps", c.steps, s);
    read_key(j, "batch", c.batch, s);
    read_key(j, "lr", c.lr, s);
    read_key(j, "grad_clip", c.grad_clip, s);
    read_key(j, "log_every", c.log_every, s);
    c.validate();
}

/// Which attentions a block runs; switching one off is only for ablation tests.
struct BlockAttentions {
    bool spatial_temporal = true, joint_spatial = true, joint_temporal = true;
};

/// Per-forward geometry shared by all blocks.
template <class T>
struct Geometry {
    std::size_t batch = 0, frames = 0, cols = 0;
    Tensor<T> bias_st, bias_js, bias_jt;  // empty unless position-bias mode is on
    std::size_t cells() const { return frames * cols; }
};

template <class T>
struct Block {
    nn::LayerNorm<T> ln_st, ln_js, ln_jt, ln_ff;
    SelfAttention<T> st, js, jt;
    nn::Linear<T> ff1, ff2;

    Block() = default;
    Block(ParamStore<T>& ps, const std::string& name, const TransformerConfig& c, Rng& rng)
        : ln_st(ps, name + ".ln_st", c.d_model),
          ln_js(ps, name + ".ln_js", c.d_model),
          ln_jt(ps, name + ".ln_jt", c.d_model),
          ln_ff(ps, name + ".ln_ff", c.d_model),
          st(ps, name + ".st", c.d_model, c.heads, rng),
          js(ps, name + ".js", c.d_model, c.heads, rng),
          jt(ps, name + ".jt", c.d_model, c.heads, rng),
          ff1(ps, name + ".ff1", c.d_model, c.d_model * c.ffn_mult, rng),
          ff2(ps, name + ".ff2", c.d_model * c.ffn_mult, c.d_model, rng) {}

    /// Pre-norm residual block. The condition row only takes part in the
    /// spatial-temporal attention.
    std::pair<Var<T>, Var<T>> operator()(Graph<T>& g, Var<T> cond, Var<T> motion, const Geometry<T>& geo,
                                         double dropout, Rng* rng, BlockAttentions on = {}) const {
        auto drop = [&](Var<T> x) { return rng && dropout > 0.0 ? ag::dropout(x, dropout, *rng) : x; };
        auto bias = [](const Tensor<T>& b) { return b.empty() ? nullptr : &b; };
        if (on.spatial_temporal) {
            auto [c, m] = attn_spatial_temporal(g, st, ln_st(g, cond), ln_st(g, motion), geo.batch, geo.cells(),
                                                bias(geo.bias_st));
            cond = ag::add(cond, drop(c));
            motion = ag::add(motion, drop(m));
        }
        if (on.joint_spatial)
            motion = ag::add(motion, drop(attn_joint_spatial(g, js, ln_js(g, motion), geo.batch, geo.frames, geo.cols,
                                                             bias(geo.bias_js))));
        if (on.joint_temporal)
            motion = ag::add(motion, drop(attn_joint_temporal(g, jt, ln_jt(g, motion), geo.batch, geo.frames,
                                                              geo.cols, bias(geo.bias_jt))));
        motion = ag::add(motion, drop(ff2(g, ag::gelu(ff1(g, ln_ff(g, motion))))));
        return {cond, motion};
    }
};

/// Shared body: condition projection, null token, blocks, final norm, head.
template <class T>
class Trunk {
public:
    Trunk() = default;
    Trunk(ParamStore<T>& ps, const TransformerConfig& cfg, std::size_t codes, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        cond_proj_ = nn::Linear<T>(ps, "cond_proj", cfg.d_text, cfg.d_model, rng);
        null_ = &ps.uniform("null_cond", Shape{1, cfg.d_model}, cfg.d_model, rng);
        for (std::size_t i = 0; i < cfg.layers; ++i) blocks_.emplace_back(ps, "block" + std::to_string(i), cfg, rng);
        ln_out_ = nn::LayerNorm<T>(ps, "ln_out", cfg.d_model);
        head_ = nn::Linear<T>(ps, "head", cfg.d_model, codes, rng);
    }

    const TransformerConfig& config() const { return cfg_; }

    Geometry<T> geometry(std::size_t batch, std::size_t frames, std::size_t cols) const {
        Geometry<T> geo{batch, frames, cols, {}, {}, {}};
        if (!cfg_.pos_bias) return geo;
        const Tensor<T> p = pos_encode_2d<T>(frames, cols, cfg_.d_model);
        const std::size_t d = cfg_.d_model, half = d / 2;
        Tensor<T> st(Shape{frames * cols + 1, d});  // row 0 (condition) stays zero
        std::copy(p.data().begin(), p.data().end(), st.data().begin() + d);
        Tensor<T> js(Shape{cols, half}), jt(Shape{frames, half});
        for (std::size_t j = 0; j < cols; ++j)
            for (std::size_t c = 0; c < half; ++c) js.at(j, c) = p.at(j, half + c);
        for (std::size_t t = 0; t < frames; ++t)
            for (std::size_t c = 0; c < half; ++c) jt.at(t, c) = p.at(t * cols, c);
        geo.bias_st = position_bias(st);
        geo.bias_js = position_bias(js);
        geo.bias_jt = position_bias(jt);
        return geo;
    }

    /// Position-encoded motion embeddings [B*T'*J' x D] in, logits [B*T'*J' x C] out.
    /// `cond` is [B x d_text]; rows with uncond[b] != 0 use the learned null token.
    Var<T> operator()(Graph<T>& g, Var<T> motion, const Tensor<T>& cond, std::span<const std::uint8_t> uncond,
                      const Geometry<T>& geo, Rng* dropout_rng, BlockAttentions on = {}) const {
        const std::size_t b = geo.batch;
        if (cond.rank() != 2 || cond.rows() != b || cond.cols() != cfg_.d_text)
            throw TransformerError("condition batch must be B x d_text");
        if (uncond.size() != b) throw TransformerError("unconditional flags must have one entry per sample");
        std::vector<std::int32_t> pick(b);
        for (std::size_t i = 0; i < b; ++i) pick[i] = static_cast<std::int32_t>(uncond[i] ? b : i);
        Var<T> c = ag::gather_rows(ag::concat_rows(cond_proj_(g, g.constant(cond)), g.param(*null_)), pick);
        motion = ag::add(motion, g.constant(tiled_positions(geo)));
        for (const auto& blk : blocks_) std::tie(c, motion) = blk(g, c, motion, geo, cfg_.dropout, dropout_rng, on);
        return head_(g, ln_out_(g, motion));
    }

private:
    Tensor<T> tiled_positions(const Geometry<T>& geo) const {
        const Tensor<T> p = pos_encode_2d<T>(geo.frames, geo.cols, cfg_.d_model);
        Tensor<T> out(Shape{geo.batch * p.rows(), cfg_.d_model});
        for (std::size_t b = 0; b < geo.batch; ++b)
            std::copy(p.data().begin(), p.data().end(), out.data().begin() + b * p.size());
        return out;
    }

    TransformerConfig cfg_;
    nn::Linear<T> cond_proj_;
    Parameter<T>* null_ = nullptr;
    std::vector<Block<T>> blocks_;
    nn::LayerNorm<T> ln_out_;
    nn::Linear<T> head_;
};

namespace detail {

inline void require_same_grid(std::span<const TokenMap> maps) {
    if (maps.empty()) throw TransformerError("empty token batch");
    for (const auto& m : maps)
        if (m.frames != maps[0].frames || m.cols != maps[0].cols || m.ids.size() != m.frames * m.cols)
            throw TransformerError("token maps in a batch must share one grid");
}

template <class T>
void save_params(Checkpoint& ck, const ParamStore<T>& ps, const std::string& prefix) {
    for (const auto& [name, p] : ps.all()) ck.tensors.emplace(prefix + "/" + name, p.value.template cast<float>());
}

template <class T>
void load_params(const Checkpoint& ck, ParamStore<T>& ps, const std::string& prefix) {
    for (auto& [name, p] : ps.all()) {
        const Tensor<float>& src = ck.tensor(prefix + "/" + name);
        if (src.shape() != p.value.shape()) throw TransformerError("checkpoint tensor " + name + " has the wrong shape");
        p.value = src.template cast<T>();
    }
}

}  // namespace detail

/// Predicts base-layer codes for every cell of a (partially masked) token map.
template <class T>
class MaskTransformer {
public:
    MaskTransformer(const TransformerConfig& cfg, std::size_t codes, std::uint64_t seed) : codes_(codes) {
        if (codes == 0) throw TransformerError("codebook size must be positive");
        Rng rng(seed, Stream::init);
        embed_ = nn::Embedding<T>(params_, "embed", Vocab{codes}.size(), cfg.d_model, rng);
        trunk_ = Trunk<T>(params_, cfg, codes, rng);
    }
    MaskTransformer(MaskTransformer&&) noexcept = default;
    MaskTransformer& operator=(MaskTransformer&&) noexcept = default;

    const TransformerConfig& config() const { return trunk_.config(); }
    std::size_t codes() const { return codes_; }
    Vocab vocab() const { return Vocab{codes_}; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }

    /// Logits [B*T'*J' x C], rows ordered (sample, frame, column).
    Var<T> forward(Graph<T>& g, std::span<const TokenMap> tokens, const Tensor<T>& cond,
                   std::span<const std::uint8_t> uncond, Rng* dropout_rng = nullptr, BlockAttentions on = {}) const {
        detail::require_same_grid(tokens);
        std::vector<std::int32_t> ids;
        for (const auto& m : tokens)
            for (auto id : m.ids) {
                if (id < 0 || std::size_t(id) >= vocab().size())
                    throw TransformerError("token " + std::to_string(id) + " outside the vocabulary");
                ids.push_back(id);
            }
        const auto geo = trunk_.geometry(tokens.size(), tokens[0].frames, tokens[0].cols);
        return trunk_(g, embed_(g, ids), cond, uncond, geo, dropout_rng, on);
    }

    Checkpoint to_checkpoint() const {
        Checkpoint ck;
        detail::save_params(ck, params_, "mask");
        ck.meta["mask"] = {{"config", config()}, {"codes", codes_}};
        return ck;
    }

    static MaskTransformer from_checkpoint(const Checkpoint& ck) {
        if (!ck.meta.contains("mask")) throw TransformerError("checkpoint has no mask transformer");
        const auto& m = ck.meta.at("mask");
        MaskTransformer model(m.at("config").get<TransformerConfig>(), m.at("codes").get<std::size_t>(), 0);
        detail::load_params(ck, model.params_, "mask");
        return model;
    }

private:
    std::size_t codes_;
    ParamStore<T> params_;
    nn::Embedding<T> embed_;
    Trunk<T> trunk_;
};

/// Predicts the codes of residual layer l from the summed embeddings of
/// layers [0, l).
template <class T>
class ResidualTransformer {
public:
    ResidualTransformer(const TransformerConfig& cfg, std::size_t codes, std::size_t residual_layers,
                        std::uint64_t seed)
        : codes_(codes), layers_(residual_layers) {
        if (codes == 0) throw TransformerError("codebook size must be positive");
        if (residual_layers == 0) throw TransformerError("residual transformer needs at least one residual layer");
        Rng rng(seed, Stream::init);
        for (std::size_t l = 0; l < layers_; ++l)
            embeds_.emplace_back(params_, "embed" + std::to_string(l), codes, cfg.d_model, rng);
        layer_embed_ = nn::Embedding<T>(params_, "layer_embed", layers_, cfg.d_model, rng);
        trunk_ = Trunk<T>(params_, cfg, codes, rng);
    }
    ResidualTransformer(ResidualTransformer&&) noexcept = default;
    ResidualTransformer& operator=(ResidualTransformer&&) noexcept = default;

    const TransformerConfig& config() const { return trunk_.config(); }
    std::size_t codes() const { return codes_; }
    std::size_t residual_layers() const { return layers_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }

    /// Logits for layer `l` (1 <= l <= L); each stack must hold layers [0, l).
    Var<T> forward(Graph<T>& g, std::span<const TokenStack> stacks, std::size_t l, const Tensor<T>& cond,
                   std::span<const std::uint8_t> uncond, Rng* dropout_rng = nullptr) const {
        if (l < 1 || l > layers_) throw TransformerError("residual layer index out of range");
        if (stacks.empty()) throw TransformerError("empty token batch");
        std::vector<TokenMap> first;
        for (const auto& s : stacks) {
            if (s.depth() < l) throw TransformerError("token stack is missing preceding layers");
            first.push_back(s.layers[0]);
        }
        detail::require_same_grid(first);
        Var<T> x;
        for (std::size_t k = 0; k < l; ++k) {
            std::vector<std::int32_t> ids;
            for (const auto& s : stacks) {
                const TokenMap& m = s.layers[k];
                if (m.frames != first[0].frames || m.cols != first[0].cols)
                    throw TransformerError("token stack layers disagree in shape");
                for (auto id : m.ids) {
                    if (id < 0 || std::size_t(id) >= codes_)
                        throw TransformerError("token " + std::to_string(id) + " outside the codebook");
                    ids.push_back(id);
                }
            }
            Var<T> e = embeds_[k](g, ids);
            x = k == 0 ? e : ag::add(x, e);
        }
        const std::vector<std::int32_t> which(x.dim(0), static_cast<std::int32_t>(l - 1));
        x = ag::add(x, layer_embed_(g, which));
        const auto geo = trunk_.geometry(stacks.size(), first[0].frames, first[0].cols);
        return trunk_(g, x, cond, uncond, geo, dropout_rng);
    }

    Checkpoint to_checkpoint() const {
        Checkpoint ck;
        detail::save_params(ck, params_, "res");
        ck.meta["res"] = {{"config", config()}, {"codes", codes_}, {"residual_layers", layers_}};
        return ck;
    }

    static ResidualTransformer from_checkpoint(const Checkpoint& ck) {
        if (!ck.meta.contains("res")) throw TransformerError("checkpoint has no residual transformer");
        const auto& m = ck.meta.at("res");
        ResidualTransformer model(m.at("config").get<TransformerConfig>(), m.at("codes").get<std::size_t>(),
                                  m.at("residual_layers").get<std::size_t>(), 0);
        detail::load_params(ck, model.params_, "res");
        return model;
    }

private:
    std::size_t codes_, layers_;
    ParamStore<T> params_;
    std::vector<nn::Embedding<T>> embeds_;
    nn::Embedding<T> layer_embed_;
    Trunk<T> trunk_;
};

/// Mean cross-entropy over the selected cells of each plan. Logits rows are
/// ordered (sample, frame, column) as produced by the transformers.
template <class T>
Var<T> mask_loss(Var<T> logits, std::span<const TokenMap> targets, std::span<const MaskPlan> plans) {
    if (targets.size() != plans.size()) throw TransformerError("one mask plan per target map is required");
    std::vector<std::int32_t> ids;
    std::vector<T> w;
    for (std::size_t b = 0; b < targets.size(); ++b) {
        if (plans[b].frames != targets[b].frames || plans[b].cols != targets[b].cols)
            throw TransformerError("mask plan does not match the target grid");
        ids.insert(ids.end(), targets[b].ids.begin(), targets[b].ids.end());
        for (auto s : plans[b].selected) w.push_back(s ? T{1} : T{0});
    }
    if (logits.dim(0) != ids.size()) throw TransformerError("logits do not match the target grid");
    if (std::find(w.begin(), w.end(), T{1}) == w.end()) throw TransformerError("no masked positions");
    return ag::cross_entropy<T>(logits, ids, w);
}

template <class T>
Var<T> mask_loss(Var<T> logits, const TokenMap& target, const MaskPlan& plan) {
    return mask_loss<T>(logits, std::span<const TokenMap>(&target, 1), std::span<const MaskPlan>(&plan, 1));
}

}  // namespace stm
