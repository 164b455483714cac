#pragma once

// Parameter storage and the handful of layers the models are built from.

#include "stm/numerics/autograd.hpp"

#include <cmath>
#include <map>
#include <string>

namespace stm {

/// Named parameters owned by a model. std::map keeps element addresses
/// stable across insertions and moves, so layers can hold raw pointers.
template <class T>
class ParamStore {
public:
    ParamStore() = default;
    ParamStore(const ParamStore&) = delete;
    ParamStore& operator=(const ParamStore&) = delete;
    ParamStore(ParamStore&&) noexcept = default;
    ParamStore& operator=(ParamStore&&) noexcept = default;

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
    Parameter<T>& uniform(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng) {
        Tensor<T> v(std::move(shape));
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in == 0 ? 1 : fan_in));
        for (auto& x : v.storage()) x = static_cast<T>(rng.uniform(-bound, bound));
        return add(name, std::move(v));
    }

    Parameter<T>& filled(const std::string& name, Shape shape, T value) {
        return add(name, Tensor<T>(std::move(shape), value));
    }

    Parameter<T>& add(const std::string& name, Tensor<T> value) {
        auto [it, inserted] = params_.try_emplace(name, name, std::move(value));
        if (!inserted) throw std::logic_error("duplicate parameter " + name);
        return it->second;
    }

    Parameter<T>& at(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::out_of_range("unknown parameter " + name);
        return it->second;
    }
    const Parameter<T>& at(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::out_of_range("unknown parameter " + name);
        return it->second;
    }
    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    std::map<std::string, Parameter<T>>& all() { return params_; }
    const std::map<std::string, Parameter<T>>& all() const { return params_; }

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& [_, p] : params_) n += p.value.size();
        return n;
    }

    void zero_grad() {
        for (auto& [_, p] : params_) p.zero_grad();
    }

private:
    std::map<std::string, Parameter<T>> params_;
};

namespace nn {

template <class T>
struct Linear {
    Parameter<T>* weight = nullptr;  // [in x out]
    Parameter<T>* bias = nullptr;    // [out]

    Linear() = default;
    Linear(ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool with_bias = true) {
        weight = &ps.uniform(name + ".weight", Shape{in, out}, in, rng);
        if (with_bias) bias = &ps.uniform(name + ".bias", Shape{out}, in, rng);
    }

    Var<T> operator()(Graph<T>& g, Var<T> x) const {
        Var<T> y = ag::matmul(x, g.param(*weight));
        return bias ? ag::add_bias(y, g.param(*bias)) : y;
    }
};

template <class T>
struct LayerNorm {
    Parameter<T>* gamma = nullptr;
    Parameter<T>* beta = nullptr;

    LayerNorm() = default;
    LayerNorm(ParamStore<T>& ps, const std::string& name, std::size_t d) {
        gamma = &ps.filled(name + ".gamma", Shape{d}, T{1});
        beta = &ps.filled(name + ".beta", Shape{d}, T{0});
    }

    Var<T> operator()(Graph<T>& g, Var<T> x) const { return ag::layer_norm(x, g.param(*gamma), g.param(*beta)); }
};

template <class T>
struct Conv2d {
    Parameter<T>* weight = nullptr;  // [out x in x kh x kw]
    Parameter<T>* bias = nullptr;
    ag::Conv2dSpec spec;

    Conv2d() = default;
    Conv2d(ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t kh,
           std::size_t kw, ag::Conv2dSpec s, Rng& rng)
        : spec(s) {
        const std::size_t fan_in = in * kh * kw;
        weight = &ps.uniform(name + ".weight", Shape{out, in, kh, kw}, fan_in, rng);
        bias = &ps.uniform(name + ".bias", Shape{out}, fan_in, rng);
    }

    Var<T> operator()(Graph<T>& g, Var<T> x) const { return ag::conv2d(x, g.param(*weight), g.param(*bias), spec); }
};

template <class T>
struct Embedding {
    Parameter<T>* table = nullptr;  // [vocab x d]

    Embedding() = default;
    Embedding(ParamStore<T>& ps, const std::string& name, std::size_t vocab, std::size_t d, Rng& rng) {
        table = &ps.uniform(name + ".table", Shape{vocab, d}, d, rng);
    }

    Var<T> operator()(Graph<T>& g, std::span<const std::int32_t> ids) const {
        return ag::gather_rows(g.param(*table), ids);
    }
};

}  // namespace nn
}  // namespace stm
