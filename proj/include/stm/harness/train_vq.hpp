#pragma once

#include "stm/harness/train_state.hpp"
#include "stm/motion/motion_grid.hpp"
#include "stm/vq/model.hpp"

#include <algorithm>
#include <sstream>
#include <vector>

namespace stm {

struct VqStepLoss {
    float total, recon, commit;
};

/// VQ-VAE training run. The model, optimizer, RNG streams and loss history
/// form the resumable state.
class VqTrainer {
public:
    VqTrainer(VqConfig cfg, VqLayout layout, std::span<const MotionGrid> data, std::uint64_t seed)
        : data_(data.begin(), data.end()),
          model_(cfg, layout, require_data_front(data).joints, require_data_front(data).global_dims, seed),
          opt_(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.grad_clip}),
          data_rng_(seed, Stream::data),
          reset_rng_(seed, Stream::reset) {
        model_.fit_normalizer(data_);
    }

    /// Continues the run stored in `ck` on the same data.
    VqTrainer(const Checkpoint& ck, std::span<const MotionGrid> data)
        : data_(data.begin(), data.end()),
          model_(VqModel<float>::from_checkpoint(ck)),
          opt_(AdamConfig{model_.config().lr, 0.9, 0.999, 1e-8, model_.config().grad_clip}) {
        require_data(data);
        const auto& t = ck.meta.at("train");
        step_ = t.at("step").get<std::size_t>();
        data_rng_.set_state(t.at("data_rng").get<std::string>());
        reset_rng_.set_state(t.at("reset_rng").get<std::string>());
        for (const auto& row : t.at("history")) history_.push_back({row.at(0), row.at(1), row.at(2)});
        load_adam(ck, opt_, model_.params(), "adam");
    }

    VqModel<float>& model() { return model_; }
    const std::vector<VqStepLoss>& history() const { return history_; }
    std::size_t step() const { return step_; }

    /// Runs until config().steps or opts.stop_after total steps.
    void run(const TrainOptions& opts = {}) {
        const auto& cfg = model_.config();
        while (step_ < cfg.steps && step_ < opts.stop_after) {
            const VqStepLoss l = train_step();
            if (opts.log && (step_ % cfg.log_every == 0 || step_ == cfg.steps)) {
                std::ostringstream os;
                os << "vq step " << step_ << " loss " << l.total << " recon " << l.recon << " commit " << l.commit;
                opts.log(os.str());
            }
        }
    }

    VqStepLoss train_step() {
        const auto& cfg = model_.config();
        std::vector<MotionGrid> batch;
        std::size_t frames = std::numeric_limits<std::size_t>::max();
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            batch.push_back(data_[data_rng_.index(data_.size())]);
            frames = std::min(frames, batch.back().frames);
        }
        frames -= frames % cfg.downscale;
        if (frames == 0) throw TrainError("clips shorter than the downscale factor");
        for (auto& g : batch)
            if (g.frames != frames) g = g.cropped(frames);

        const Tensor<float> x = model_.to_input(batch);
        const std::size_t tp = model_.frames_out(frames);
        Graph<float> g;
        Var<float> v = model_.encode(g, g.constant(x));
        BatchQuant<float> q = model_.quantize(v.value(), batch.size(), tp);
        if (step_ == 0 && cfg.decay < 1.0) {
            // Data-driven initialization: every code starts at an encoder output.
            model_.reset_codebooks(q, reset_rng_);
            q = model_.quantize(v.value(), batch.size(), tp);
        }
        Var<float> st = ag::straight_through(v, q.quantized_sum);
        Var<float> recon = model_.decode(g, st, batch.size(), tp);
        const std::vector<float> mask = model_.loss_mask(batch.size(), frames);
        const VqLoss<float> loss = vq_loss<float>(recon, x, mask, v, q.quantized_sum, static_cast<float>(cfg.alpha));
        require_finite_loss(loss.total.value()[0], step_);
        g.backward(loss.total);
        opt_.step(model_.params());
        model_.update_codebooks(q);
        ++step_;
        if (step_ % cfg.reset_window == 0) model_.reset_codebooks(q, reset_rng_);
        history_.push_back({loss.total.value()[0], loss.recon, loss.commit});
        return history_.back();
    }

    Checkpoint checkpoint() const {
        Checkpoint ck = model_.to_checkpoint();
        save_adam(ck, opt_, "adam");
        nlohmann::json hist = nlohmann::json::array();
        for (const auto& h : history_) hist.push_back({h.total, h.recon, h.commit});
        ck.meta["train"] = {{"step", step_},
                            {"data_rng", data_rng_.state()},
                            {"reset_rng", reset_rng_.state()},
                            {"history", hist}};
        return ck;
    }

private:
    static void require_data(std::span<const MotionGrid> d) {
        if (d.empty()) throw TrainError("training dataset is empty");
    }
    static const MotionGrid& require_data_front(std::span<const MotionGrid> d) {
        require_data(d);
        return d.front();
    }

    std::vector<MotionGrid> data_;
    VqModel<float> model_;
    Adam<float> opt_;
    Rng data_rng_, reset_rng_;
    std::size_t step_ = 0;
    std::vector<VqStepLoss> history_;
};

}  // namespace stm
