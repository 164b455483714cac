#pragma once

#include "stm/numerics/nn.hpp"

#include <cmath>
#include <map>
#include <string>

namespace stm {

struct AdamConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 0.0;  // global L2 norm; 0 disables
};

/// Adaptive-moment optimizer. Moments are keyed by parameter name so the
/// state can be checkpointed next to the weights.
template <class T>
class Adam {
public:
    struct Moments {
        Tensor<T> m, v;
    };

    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    const AdamConfig& config() const { return cfg_; }
    void set_lr(double lr) { cfg_.lr = lr; }
    std::uint64_t steps() const { return t_; }
    void set_steps(std::uint64_t t) { t_ = t; }
    std::map<std::string, Moments>& moments() { return state_; }
    const std::map<std::string, Moments>& moments() const { return state_; }

    /// Applies one update from the accumulated gradients, then zeroes them.
    void step(ParamStore<T>& params) {
        ++t_;
        T clip_scale{1};
        if (cfg_.grad_clip > 0.0) {
            double sq = 0.0;
            for (auto& [_, p] : params.all())
                for (T g : p.grad.storage()) sq += static_cast<double>(g) * static_cast<double>(g);
            const double norm = std::sqrt(sq);
            if (norm > cfg_.grad_clip) clip_scale = static_cast<T>(cfg_.grad_clip / norm);
        }
        const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
        const T c1 = static_cast<T>(1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)));
        const T c2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, static_cast<double>(t_)));
        const T lr = static_cast<T>(cfg_.lr), eps = static_cast<T>(cfg_.eps);
        for (auto& [name, p] : params.all()) {
            if (p.grad.shape() != p.value.shape()) {
                p.zero_grad();
            }
            auto& st = state_[name];
            if (st.m.shape() != p.value.shape()) {
                st.m = Tensor<T>(p.value.shape());
                st.v = Tensor<T>(p.value.shape());
            }
            for (std::size_t i = 0; i < p.value.size(); ++i) {
                const T g = p.grad[i] * clip_scale;
                st.m[i] = b1 * st.m[i] + (T{1} - b1) * g;
                st.v[i] = b2 * st.v[i] + (T{1} - b2) * g * g;
                const T mh = st.m[i] / c1;
                const T vh = st.v[i] / c2;
                p.value[i] -= lr * mh / (std::sqrt(vh) + eps);
            }
            p.zero_grad();
        }
    }

private:
    AdamConfig cfg_;
    std::uint64_t t_ = 0;
    std::map<std::string, Moments> state_;
};

}  // namespace stm
