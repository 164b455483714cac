#pragma once

// Central finite-difference oracle for the autograd engine. Test-only; it
// re-runs the forward function on perturbed copies of the inputs and never
// looks at the backward closures.

#include "stm/numerics/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace stm::testing {

using Build = std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::size_t checked = 0;
};

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.storage()) v = scale * rng.normal();
    return t;
}

/// Scalarizes `build` by a fixed random projection of its output, then
/// compares the analytic gradient of every input against central
/// differences. Error per entry is |a - n| / max(1, |a|, |n|).
inline GradCheckResult grad_check(const Build& build, const std::vector<Tensor<double>>& inputs, Rng& rng,
                                  double h = 1e-5) {
    Tensor<double> proj;
    auto scalar_loss = [&](const std::vector<Tensor<double>>& xs, std::vector<Tensor<double>>* grads) {
        Graph<double> g;
        std::vector<Var<double>> vars;
        for (const auto& x : xs) vars.push_back(g.leaf(x));
        Var<double> out = build(g, vars);
        if (proj.shape() != out.shape()) {
            proj = Tensor<double>(out.shape());
            for (auto& v : proj.storage()) v = rng.normal();
        }
        Var<double> loss = out.value().size() == 1 ? out : ag::sum(ag::mul(out, g.constant(proj)));
        if (out.value().size() == 1) loss = ag::scale(out, proj[0]);
        if (grads) {
            g.backward(loss);
            grads->clear();
            for (auto v : vars) grads->push_back(g.grad(v.id));
        }
        return loss.value()[0];
    };
    std::vector<Tensor<double>> analytic;
    scalar_loss(inputs, &analytic);
    GradCheckResult res;
    std::vector<Tensor<double>> xs = inputs;
    for (std::size_t k = 0; k < xs.size(); ++k) {
        for (std::size_t i = 0; i < xs[k].size(); ++i) {
            const double orig = xs[k][i];
            xs[k][i] = orig + h;
            const double fp = scalar_loss(xs, nullptr);
            xs[k][i] = orig - h;
            const double fm = scalar_loss(xs, nullptr);
            xs[k][i] = orig;
            const double num = (fp - fm) / (2 * h);
            const double ana = analytic[k][i];
            const double err = std::abs(ana - num) / std::max({1.0, std::abs(ana), std::abs(num)});
            res.max_rel_err = std::max(res.max_rel_err, err);
            ++res.checked;
        }
    }
    return res;
}

}  // namespace stm::testing
