#pragma once

// Optimizer and RNG state stored next to model weights so a run can be
// resumed bit-exactly.

#include "stm/numerics/checkpoint.hpp"
#include "stm/numerics/optim.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <string>

namespace stm {

struct TrainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainOptions {
    /// Stop (and save) after this many total steps; used to split a run.
    std::size_t stop_after = std::numeric_limits<std::size_t>::max();
    std::function<void(const std::string&)> log;
};

template <class T>
void save_adam(Checkpoint& ck, const Adam<T>& opt, const std::string& prefix) {
    for (const auto& [name, m] : opt.moments()) {
        ck.tensors.emplace(prefix + "/m/" + name, m.m.template cast<float>());
        ck.tensors.emplace(prefix + "/v/" + name, m.v.template cast<float>());
    }
    ck.meta[prefix + "_steps"] = opt.steps();
}

template <class T>
void load_adam(const Checkpoint& ck, Adam<T>& opt, const ParamStore<T>& params, const std::string& prefix) {
    opt.moments().clear();
    for (const auto& [name, _] : params.all()) {
        const auto mk = prefix + "/m/" + name;
        if (!ck.tensors.count(mk)) continue;
        opt.moments()[name] = {ck.tensor(mk).template cast<T>(), ck.tensor(prefix + "/v/" + name).template cast<T>()};
    }
    opt.set_steps(ck.meta.value(prefix + "_steps", std::uint64_t{0}));
}

inline void require_finite_loss(double loss, std::size_t step) {
    if (!std::isfinite(loss))
        throw TrainError("training diverged: loss is " + std::to_string(loss) + " at step " + std::to_string(step));
}

}  // namespace stm
