#pragma once

// Training loops for the mask and residual transformers on a frozen VQ
// tokenization of the dataset.

#include "stm/harness/train_state.hpp"
#include "stm/masking/masking.hpp"
#include "stm/motion/condition.hpp"
#include "stm/transformer/transformer.hpp"
#include "stm/vq/model.hpp"

#include <map>
#include <sstream>

namespace stm {

struct TokenizedClip {
    TokenStack tokens;
    std::uint32_t label = 0;
};

/// Encodes every clip once (cropped to a multiple of the downscale factor).
/// Clips of equal length are encoded together.
inline std::vector<TokenizedClip> tokenize_dataset(const VqModel<float>& vq, std::span<const MotionGrid> clips,
                                                   std::size_t chunk = 32) {
    std::vector<TokenizedClip> out(clips.size());
    const std::size_t ds = vq.config().downscale;
    std::map<std::size_t, std::vector<std::size_t>> by_len;
    for (std::size_t i = 0; i < clips.size(); ++i) {
        if (!clips[i].label) throw TrainError("training clips need labels");
        const std::size_t t = clips[i].frames - clips[i].frames % ds;
        if (t == 0) throw TrainError("clip shorter than the downscale factor");
        by_len[t].push_back(i);
    }
    for (const auto& [t, idx] : by_len)
        for (std::size_t s = 0; s < idx.size(); s += chunk) {
            std::vector<MotionGrid> batch;
            for (std::size_t k = s; k < std::min(idx.size(), s + chunk); ++k)
                batch.push_back(clips[idx[k]].frames == t ? clips[idx[k]] : clips[idx[k]].cropped(t));
            auto stacks = vq.tokenize(batch);
            for (std::size_t k = 0; k < batch.size(); ++k)
                out[idx[s + k]] = {std::move(stacks[k]), *clips[idx[s + k]].label};
        }
    return out;
}

/// Label-table rows stacked into [B x d_text].
inline Tensor<float> label_conditions(const LabelTable& table, std::span<const std::uint32_t> labels) {
    Tensor<float> c(Shape{labels.size(), table.dim()});
    for (std::size_t b = 0; b < labels.size(); ++b) {
        const auto row = table(labels[b]).vector;
        std::copy(row.begin(), row.end(), c.data().begin() + b * table.dim());
    }
    return c;
}

/// Bernoulli(p) draw deciding whether a sample trains the unconditional branch.
inline bool draw_uncond(Rng& rng, double p) { return rng.uniform() < p; }

/// Residual layer index, uniform over 1..layers.
inline std::size_t pick_layer(Rng& rng, std::size_t layers) { return 1 + rng.index(layers); }

namespace detail {

/// Step counter, RNG streams and loss history shared by the transformer trainers.
struct LoopState {
    std::size_t step = 0;
    std::vector<float> history;
    std::map<std::string, Rng> rngs;
    std::size_t uncond_draws = 0, cond_draws = 0;

    Rng& rng(const std::string& name) { return rngs.at(name); }

    nlohmann::json to_json() const {
        nlohmann::json r = nlohmann::json::object();
        for (const auto& [k, v] : rngs) r[k] = v.state();
        return {{"step", step}, {"history", history}, {"rngs", r}, {"uncond_draws", uncond_draws}, {"cond_draws", cond_draws}};
    }

    void from_json(const nlohmann::json& j) {
        step = j.at("step").get<std::size_t>();
        history = j.at("history").get<std::vector<float>>();
        for (auto& [k, v] : rngs) v.set_state(j.at("rngs").at(k).get<std::string>());
        uncond_draws = j.at("uncond_draws").get<std::size_t>();
        cond_draws = j.at("cond_draws").get<std::size_t>();
    }
};

/// Samples a batch and crops its maps to the shortest T' in it.
inline std::vector<const TokenizedClip*> sample_batch(std::span<const TokenizedClip> data, std::size_t batch, Rng& rng,
                                                      std::size_t& frames) {
    std::vector<const TokenizedClip*> out;
    frames = std::numeric_limits<std::size_t>::max();
    for (std::size_t b = 0; b < batch; ++b) {
        out.push_back(&data[rng.index(data.size())]);
        frames = std::min(frames, out.back()->tokens.frames());
    }
    return out;
}

inline TokenMap crop_map(const TokenMap& m, std::size_t frames) {
    if (m.frames == frames) return m;
    TokenMap c(frames, m.cols);
    std::copy_n(m.ids.begin(), frames * m.cols, c.ids.begin());
    return c;
}

inline void require_tokens(std::span<const TokenizedClip> data) {
    if (data.empty()) throw TrainError("training dataset is empty");
}

}  // namespace detail

/// Masked-token training of the base-layer transformer.
class MaskTrainer {
public:
    MaskTrainer(const TransformerConfig& cfg, std::vector<TokenizedClip> data, std::size_t codes, std::uint64_t seed)
        : data_(std::move(data)), model_(cfg, codes, seed), opt_(adam_for(cfg)), table_(cfg.d_text) {
        detail::require_tokens(data_);
        init_rngs(seed);
    }

    MaskTrainer(const Checkpoint& ck, std::vector<TokenizedClip> data)
        : data_(std::move(data)),
          model_(MaskTransformer<float>::from_checkpoint(ck)),
          opt_(adam_for(model_.config())),
          table_(model_.config().d_text) {
        detail::require_tokens(data_);
        init_rngs(0);
        state_.from_json(ck.meta.at("train"));
        load_adam(ck, opt_, model_.params(), "adam");
    }

    MaskTransformer<float>& model() { return model_; }
    std::size_t step() const { return state_.step; }
    const std::vector<float>& history() const { return state_.history; }
    std::size_t uncond_draws() const { return state_.uncond_draws; }
    std::size_t cond_draws() const { return state_.cond_draws; }

    float train_step() {
        const auto& cfg = model_.config();
        std::size_t frames = 0;
        const auto batch = detail::sample_batch(data_, cfg.batch, state_.rng("data"), frames);
        std::vector<TokenMap> target, input;
        std::vector<MaskPlan> plans;
        std::vector<std::uint32_t> labels;
        std::vector<std::uint8_t> uncond;
        Rng& mrng = state_.rng("mask");
        for (const auto* clip : batch) {
            const TokenMap t = detail::crop_map(clip->tokens.layers.at(0), frames);
            const double tau_t = mrng.uniform(), tau_s = mrng.uniform();
            MaskPlan plan = spatial_mask(temporal_mask(t.frames, t.cols, tau_t, {}, mrng), tau_s, mrng);
            input.push_back(corrupt(t, plan, model_.codes(), mrng));
            target.push_back(t);
            plans.push_back(std::move(plan));
            labels.push_back(clip->label);
            const bool u = draw_uncond(state_.rng("cond_drop"), cfg.uncond_prob);
            uncond.push_back(u);
            ++(u ? state_.uncond_draws : state_.cond_draws);
        }
        Graph<float> g;
        Var<float> logits = model_.forward(g, input, label_conditions(table_, labels), uncond, &state_.rng("dropout"));
        Var<float> loss = mask_loss(logits, std::span<const TokenMap>(target), std::span<const MaskPlan>(plans));
        const float v = loss.value()[0];
        require_finite_loss(v, state_.step);
        g.backward(loss);
        opt_.step(model_.params());
        ++state_.step;
        state_.history.push_back(v);
        return v;
    }

    void run(const TrainOptions& opts = {}) {
        const auto& cfg = model_.config();
        while (state_.step < cfg.steps && state_.step < opts.stop_after) {
            const float l = train_step();
            if (opts.log && (state_.step % cfg.log_every == 0 || state_.step == cfg.steps)) {
                std::ostringstream os;
                os << "mask step " << state_.step << " loss " << l;
                opts.log(os.str());
            }
        }
    }

    Checkpoint checkpoint() const {
        Checkpoint ck = model_.to_checkpoint();
        save_adam(ck, opt_, "adam");
        ck.meta["train"] = state_.to_json();
        return ck;
    }

private:
    static Adam<float> adam_for(const TransformerConfig& c) { return Adam<float>(AdamConfig{c.lr, 0.9, 0.999, 1e-8, c.grad_clip}); }

    void init_rngs(std::uint64_t seed) {
        state_.rngs.emplace("data", Rng(seed, Stream::data));
        state_.rngs.emplace("mask", Rng(seed, Stream::mask));
        state_.rngs.emplace("dropout", Rng(seed, Stream::dropout));
        state_.rngs.emplace("cond_drop", Rng(seed, Stream::cond_drop));
    }

    std::vector<TokenizedClip> data_;
    MaskTransformer<float> model_;
    Adam<float> opt_;
    LabelTable table_;
    detail::LoopState state_;
};

/// Residual-layer training: each step picks l in 1..L and predicts layer l
/// at every cell from the summed embeddings of layers [0, l).
class ResidualTrainer {
public:
    ResidualTrainer(const TransformerConfig& cfg, std::vector<TokenizedClip> data, std::size_t codes,
                    std::uint64_t seed)
        : data_(std::move(data)),
          model_(cfg, codes, residual_depth(data_), seed),
          opt_(adam_for(cfg)),
          table_(cfg.d_text) {
        init_rngs(seed);
    }

    ResidualTrainer(const Checkpoint& ck, std::vector<TokenizedClip> data)
        : data_(std::move(data)),
          model_(ResidualTransformer<float>::from_checkpoint(ck)),
          opt_(adam_for(model_.config())),
          table_(model_.config().d_text) {
        if (residual_depth(data_) != model_.residual_layers())
            throw TrainError("token depth does not match the residual transformer");
        init_rngs(0);
        state_.from_json(ck.meta.at("train"));
        load_adam(ck, opt_, model_.params(), "adam");
    }

    ResidualTransformer<float>& model() { return model_; }
    std::size_t step() const { return state_.step; }
    const std::vector<float>& history() const { return state_.history; }

    float train_step() {
        const auto& cfg = model_.config();
        std::size_t frames = 0;
        const auto batch = detail::sample_batch(data_, cfg.batch, state_.rng("data"), frames);
        const std::size_t l = pick_layer(state_.rng("layer_pick"), model_.residual_layers());
        std::vector<TokenStack> input;
        std::vector<TokenMap> target;
        std::vector<MaskPlan> plans;
        std::vector<std::uint32_t> labels;
        std::vector<std::uint8_t> uncond;
        for (const auto* clip : batch) {
            TokenStack s;
            for (std::size_t k = 0; k < l; ++k) s.layers.push_back(detail::crop_map(clip->tokens.layers[k], frames));
            input.push_back(std::move(s));
            target.push_back(detail::crop_map(clip->tokens.layers[l], frames));
            MaskPlan all(frames, target.back().cols);
            std::fill(all.selected.begin(), all.selected.end(), std::uint8_t{1});
            plans.push_back(std::move(all));
            labels.push_back(clip->label);
            const bool u = draw_uncond(state_.rng("cond_drop"), cfg.uncond_prob);
            uncond.push_back(u);
            ++(u ? state_.uncond_draws : state_.cond_draws);
        }
        Graph<float> g;
        Var<float> logits = model_.forward(g, input, l, label_conditions(table_, labels), uncond, &state_.rng("dropout"));
        Var<float> loss = mask_loss(logits, std::span<const TokenMap>(target), std::span<const MaskPlan>(plans));
        const float v = loss.value()[0];
        require_finite_loss(v, state_.step);
        g.backward(loss);
        opt_.step(model_.params());
        ++state_.step;
        state_.history.push_back(v);
        return v;
    }

    void run(const TrainOptions& opts = {}) {
        const auto& cfg = model_.config();
        while (state_.step < cfg.steps && state_.step < opts.stop_after) {
            const float l = train_step();
            if (opts.log && (state_.step % cfg.log_every == 0 || state_.step == cfg.steps)) {
                std::ostringstream os;
                os << "res step " << state_.step << " loss " << l;
                opts.log(os.str());
            }
        }
    }

    Checkpoint checkpoint() const {
        Checkpoint ck = model_.to_checkpoint();
        save_adam(ck, opt_, "adam");
        ck.meta["train"] = state_.to_json();
        return ck;
    }

private:
    static Adam<float> adam_for(const TransformerConfig& c) { return Adam<float>(AdamConfig{c.lr, 0.9, 0.999, 1e-8, c.grad_clip}); }

    static std::size_t residual_depth(std::span<const TokenizedClip> data) {
        detail::require_tokens(data);
        const std::size_t depth = data.front().tokens.depth();
        if (depth < 2) throw TrainError("residual training needs at least one residual layer");
        for (const auto& c : data)
            if (c.tokens.depth() != depth) throw TrainError("token stacks disagree in depth");
        return depth - 1;
    }

    void init_rngs(std::uint64_t seed) {
        state_.rngs.emplace("data", Rng(seed, Stream::data));
        state_.rngs.emplace("layer_pick", Rng(seed, Stream::layer_pick));
        state_.rngs.emplace("dropout", Rng(seed, Stream::dropout));
        state_.rngs.emplace("cond_drop", Rng(seed, Stream::cond_drop));
    }

    std::vector<TokenizedClip> data_;
    ResidualTransformer<float> model_;
    Adam<float> opt_;
    LabelTable table_;
    detail::LoopState state_;
};

}  // namespace stm
