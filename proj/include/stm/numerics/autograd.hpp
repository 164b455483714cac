#pragma once

// Tape-based reverse-mode differentiation. A Graph records one forward pass;
// nodes are appended in creation order, which is already a topological order,
// so backward is a single reverse sweep.

#include "stm/numerics/kernels.hpp"
#include "stm/numerics/rng.hpp"
#include "stm/numerics/tensor.hpp"

#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace stm {

/// Trainable leaf that outlives a Graph. Gradients accumulate across
/// backward calls until zero_grad().
template <class T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

    void zero_grad() {
        if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
        grad.fill(T{0});
    }
};

template <class T>
class Graph;

template <class T>
struct Var {
    Graph<T>* g = nullptr;
    std::uint32_t id = 0;

    const Tensor<T>& value() const { return g->value(id); }
    const Shape& shape() const { return value().shape(); }
    std::size_t dim(std::size_t i) const { return shape().at(i); }
};

template <class T>
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::uint32_t)>;

    struct Node {
        const char* op = "leaf";
        Tensor<T> value;
        const Tensor<T>* external = nullptr;
        Tensor<T> grad;
        bool requires_grad = false;
        bool is_leaf = true;
        Parameter<T>* param = nullptr;
        BackwardFn backward;
    };

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    void set_check_finite(bool on) { check_finite_ = on; }

    Var<T> constant(Tensor<T> v) { return push_leaf(std::move(v), false, nullptr); }
    Var<T> leaf(Tensor<T> v, bool requires_grad = true) { return push_leaf(std::move(v), requires_grad, nullptr); }
    Var<T> param(Parameter<T>& p) {
        Node n;
        n.op = "param";
        n.external = &p.value;
        n.requires_grad = true;
        n.param = &p;
        nodes_.push_back(std::move(n));
        return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    /// Record an op output. The backward closure is dropped when no input
    /// needs a gradient.
    Var<T> make(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
        if (check_finite_ && !value.all_finite()) {
            throw NumericError(std::string("non-finite value produced by ") + op);
        }
        bool rg = false;
        for (const auto& in : inputs) {
            if (in.g != this) throw std::logic_error(std::string(op) + ": input from another graph");
            rg = rg || nodes_[in.id].requires_grad;
        }
        Node n;
        n.op = op;
        n.value = std::move(value);
        n.requires_grad = rg;
        n.is_leaf = false;
        if (rg) n.backward = std::move(fn);
        nodes_.push_back(std::move(n));
        return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    const Tensor<T>& value(std::uint32_t id) const {
        const Node& n = nodes_[id];
        return n.external ? *n.external : n.value;
    }
    bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }

    /// Gradient buffer of a node, zero-allocated on first touch.
    Tensor<T>& grad(std::uint32_t id) {
        Node& n = nodes_[id];
        if (n.grad.shape() != value(id).shape()) n.grad = Tensor<T>(value(id).shape());
        return n.grad;
    }
    const Tensor<T>& grad_of(Var<T> v) { return grad(v.id); }

    std::size_t size() const noexcept { return nodes_.size(); }

    /// Reverse sweep from a scalar loss. Intermediate gradients are reset on
    /// each call; leaf and parameter gradients accumulate.
    void backward(Var<T> loss) {
        if (value(loss.id).size() != 1) {
            throw ShapeError("backward: loss must be scalar, got " + shape_str(value(loss.id).shape()));
        }
        for (std::uint32_t i = 0; i <= loss.id; ++i) {
            if (!nodes_[i].is_leaf) nodes_[i].grad = Tensor<T>();
        }
        if (!nodes_[loss.id].requires_grad) return;
        Tensor<T> seed = Tensor<T>(value(loss.id).shape(), T{1});
        // Leaf gradients from earlier calls are preserved by accumulating
        // this sweep's contribution separately.
        std::vector<std::pair<std::uint32_t, Tensor<T>>> saved;
        for (std::uint32_t i = 0; i <= loss.id; ++i) {
            Node& n = nodes_[i];
            if (n.is_leaf && n.requires_grad && n.grad.size() > 0) {
                saved.emplace_back(i, std::move(n.grad));
                n.grad = Tensor<T>();
            }
        }
        grad(loss.id) = std::move(seed);
        for (std::uint32_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || n.grad.size() == 0) continue;
            if (n.backward) n.backward(*this, i);
            if (!n.is_leaf) n.grad = Tensor<T>();  // release once consumed
        }
        for (std::uint32_t i = 0; i <= loss.id; ++i) {
            Node& n = nodes_[i];
            if (n.param && n.grad.size() > 0) {
                Parameter<T>& p = *n.param;
                if (p.grad.shape() != p.value.shape()) p.grad = Tensor<T>(p.value.shape());
                for (std::size_t k = 0; k < n.grad.size(); ++k) p.grad[k] += n.grad[k];
                n.grad = Tensor<T>();
            }
        }
        for (auto& [i, g] : saved) {
            Tensor<T>& cur = grad(i);
            for (std::size_t k = 0; k < cur.size(); ++k) cur[k] += g[k];
        }
    }

    void zero_grad() {
        for (auto& n : nodes_) n.grad = Tensor<T>();
    }

private:
    Var<T> push_leaf(Tensor<T> v, bool rg, Parameter<T>* p) {
        Node n;
        n.value = std::move(v);
        n.requires_grad = rg;
        n.param = p;
        nodes_.push_back(std::move(n));
        return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    std::deque<Node> nodes_;  // stable references across push_back
    bool check_finite_ = true;
};

namespace ag {

namespace detail {
template <class T>
void require_same(const char* op, const Var<T>& a, const Var<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}
template <class T>
void require_rank(const char* op, const Var<T>& a, std::size_t r) {
    if (a.shape().size() != r) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(a.shape()));
    }
}
}  // namespace detail

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    detail::require_same("add", a, b);
    Tensor<T> out = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    const auto ia = a.id, ib = b.id;
    return a.g->make("add", std::move(out), {a, b}, [ia, ib](Graph<T>& g, std::uint32_t self) {
        const Tensor<T>& go = g.grad(self);
        for (auto id : {ia, ib}) {
            if (!g.requires_grad(id)) continue;
            auto& gi = g.grad(id);
            for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
        }
    });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
    detail::require_same("sub", a, b);
    Tensor<T> out = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    const auto ia = a.id, ib = b.id;
    return a.g->make("sub", std::move(out), {a, b}, [ia, ib](Graph<T>& g, std::uint32_t self) {
        const Tensor<T>& go = g.grad(self);
        if (g.requires_grad(ia)) {
            auto& gi = g.grad(ia);
            for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
        }
        if (g.requires_grad(ib)) {
            auto& gi = g.grad(ib);
            for (std::size_t i = 0; i < go.size(); ++i) gi[i] -= go[i];
        }
    });
}

/// Elementwise product.
template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
    detail::require_same("mul", a, b);
    Tensor<T> out = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    const auto ia = a.id, ib = b.id;
    return a.g->make("mul", std::move(out), {a, b}, [ia, ib](Graph<T>& g, std::uint32_t self) {
        const Tensor<T>& go = g.grad(self);
        const Tensor<T>& av = g.value(ia);
        const Tensor<T>& bv = g.value(ib);
        if (g.requires_grad(ia)) {
            auto& gi = g.grad(ia);
            for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * bv[i];
        }
        if (g.requires_grad(ib)) {
            auto& gi = g.grad(ib);
            for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * av[i];
        }
    });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
    Tensor<T> out = a.value();
    for (auto& v : out.storage()) v *= s;
    const auto ia = a.id;
    return a.g->make("scale", std::move(out), {a}, [ia, s](Graph<T>& g, std::uint32_t self) {
        const Tensor<T>& go = g.grad(self);
        auto& gi = g.grad(ia);
        for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * s;
    });
}

template <class T>
Var<T> reshape(Var<T> a, Shape shape) {
    Tensor<T> out = a.value().reshaped(std::move(shape));
    const auto ia = a.id;
    return a.g->make("reshape", std::move(out), {a}, [ia](Graph<T>& g, std::uint32_t self) {
        const Tensor<T>& go = g.grad(self);
        auto& gi = g.grad(ia);
        for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
    });
}

template <class T>
Var<T> sum(Var<T> a) {
    T s{0};
    for (T v : a.value().data()) s += v;
    const auto ia = a.id;
    return a.g->make("sum", Tensor<T>::scalar(s), {a}, [ia](Graph<T>& g, std::uint32_t self) {
        const T go = g.grad(self)[0];
        auto& gi = g.grad(ia);
        for (auto& v : gi.storage()) v += go;
    });
}

template <class T>
Var<T> mean(Var<T> a) {
    const std::size_t n = a.value().size();
    if (n == 0) throw ShapeError("mean: empty tensor");
    return scale(sum(a), T{1} / static_cast<T>(n));
}

/// a [m x k] * b [k x n].
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
    detail::require_rank("matmul", a, 2);
    detail::require_rank("matmul", b, 2);
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
    }
    Tensor<T> out(Shape{m, n});
    kernels::gemm<T>(false, false, m, n, k, T{1}, a.value().data().data(), b.value().data().data(), T{0},
                     out.data().data());
    const auto ia = a.id, ib = b.id;
    return a.g->make("matmul", std::move(out), {a, b}, [ia, ib, m, n, k](Graph<T>& g, std::uint32_t self) {
        const T* go = g.grad(self).data().data();
        if (g.requires_grad(ia)) {
            kernels::gemm<T>(false, true, m, k, n, T{1}, go, g.value(ib).data().data(), T{1},
                             g.grad(ia).data().data());
        }
        if (g.requires_grad(ib)) {
            kernels::gemm<T>(true, false, k, n, m, T{1}, g.value(ia).data().data(), go, T{1},
                             g.grad(ib).data().data());
        }
    });
}

/// x [n x d] + bias [d] broadcast over rows.
template <class T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
    detail::require_rank("add_bias", x, 2);
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (bias.value().size() != d) throw ShapeError("add_bias: bias length mismatch");
    Tensor<T> out = x.value();
    const auto& bv = bias.value();
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) out[r * d + c] += bv[c];
    const auto ix = x.id, ib = bias.id;
    return x.g->make("add_bias", std::move(out), {x, bias}, [ix, ib, n, d](Graph<T>& g, std::uint32_t self) {
        const Tensor<T>& go = g.grad(self);
        if (g.requires_grad(ix)) {
            auto& gi = g.grad(ix);
            for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
        }
        if (g.requires_grad(ib)) {
            auto& gb = g.grad(ib);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < d; ++c) gb[c] += go[r * d + c];
        }
    });
}

template <class T>
Var<T> relu(Var<T> x) {
    Tensor<T> out = x.value();
    for (auto& v : out.storage()) v = v > T{0} ? v : T{0};
    const auto ix = x.id;
    return x.g->make("relu", std::move(out), {x}, [ix](Graph<T>& g, std::uint32_t self) {
        const Tensor<T>& go = g.grad(self);
        const Tensor<T>& xv = g.value(ix);
        auto& gi = g.grad(ix);
        for (std::size_t i = 0; i < go.size(); ++i) gi[i] += xv[i] > T{0} ? go[i] : T{0};
    });
}

/// tanh-approximated GELU.
template <class T>
Var<T> gelu(Var<T> x) {
    constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
    constexpr T a = T(0.044715);
    Tensor<T> out = x.value();
    for (auto& v : out.storage()) {
        const T u = c * (v + a * v * v * v);
        v = T(0.5) * v * (T{1} + std::tanh(u));
    }
    const auto ix = x.id;
    return x.g->make("gelu", std::move(out), {x}, [ix](Graph<T>& g, std::uint32_t self) {
        const Tensor<T>& go = g.grad(self);
        const Tensor<T>& xv = g.value(ix);
        auto& gi = g.grad(ix);
        for (std::size_t i = 0; i < go.size(); ++i) {
            const T v = xv[i];
            const T u = c * (v + a * v * v * v);
            const T th = std::tanh(u);
            const T du = c * (T{1} + T{3} * a * v * v);
            gi[i] += go[i] * (T(0.5) * (T{1} + th) + T(0.5) * v * (T{1} - th * th) * du);
        }
    });
}

/// Row-wise layer normalization of x [n x d] with affine gamma, beta [d].
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
    detail::require_rank("layer_norm", x, 2);
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (gamma.value().size() != d || beta.value().size() != d) throw ShapeError("layer_norm: affine size mismatch");
    Tensor<T> out(x.shape());
    std::vector<T> xhat(n * d), rstd(n);
    const auto& xv = x.value();
    const auto& gv = gamma.value();
    const auto& bv = beta.value();
    for (std::size_t r = 0; r < n; ++r) {
        T mu{0};
        for (std::size_t c = 0; c < d; ++c) mu += xv[r * d + c];
        mu /= static_cast<T>(d);
        T var{0};
        for (std::size_t c = 0; c < d; ++c) {
            const T z = xv[r * d + c] - mu;
            var += z * z;
        }
        var /= static_cast<T>(d);
        rstd[r] = T{1} / std::sqrt(var + eps);
        for (std::size_t c = 0; c < d; ++c) {
            xhat[r * d + c] = (xv[r * d + c] - mu) * rstd[r];
            out[r * d + c] = xhat[r * d + c] * gv[c] + bv[c];
        }
    }
    const auto ix = x.id, ig = gamma.id, ib = beta.id;
    return x.g->make("layer_norm", std::move(out), {x, gamma, beta},
                     [ix, ig, ib, n, d, xhat = std::move(xhat), rstd = std::move(rstd)](Graph<T>& g,
                                                                                         std::uint32_t self) {
                         const Tensor<T>& go = g.grad(self);
                         const Tensor<T>& gv = g.value(ig);
                         if (g.requires_grad(ig)) {
                             auto& gg = g.grad(ig);
                             for (std::size_t r = 0; r < n; ++r)
                                 for (std::size_t c = 0; c < d; ++c) gg[c] += go[r * d + c] * xhat[r * d + c];
                         }
                         if (g.requires_grad(ib)) {
                             auto& gb = g.grad(ib);
                             for (std::size_t r = 0; r < n; ++r)
                                 for (std::size_t c = 0; c < d; ++c) gb[c] += go[r * d + c];
                         }
                         if (g.requires_grad(ix)) {
                             auto& gx = g.grad(ix);
                             for (std::size_t r = 0; r < n; ++r) {
                                 T m1{0}, m2{0};
                                 for (std::size_t c = 0; c < d; ++c) {
                                     const T dxh = go[r * d + c] * gv[c];
                                     m1 += dxh;
                                     m2 += dxh * xhat[r * d + c];
                                 }
                                 m1 /= static_cast<T>(d);
                                 m2 /= static_cast<T>(d);
                                 for (std::size_t c = 0; c < d; ++c) {
                                     const T dxh = go[r * d + c] * gv[c];
                                     gx[r * d + c] += rstd[r] * (dxh - m1 - xhat[r * d + c] * m2);
                                 }
                             }
                         }
                     });
}

template <class T>
Var<T> softmax_rows(Var<T> x) {
    detail::require_rank("softmax_rows", x, 2);
    const std::size_t n = x.dim(0), d = x.dim(1);
    Tensor<T> out = x.value();
    kernels::softmax_rows_inplace(out.data().data(), n, d);
    const auto ix = x.id;
    return x.g->make("softmax_rows", std::move(out), {x}, [ix, n, d](Graph<T>& g, std::uint32_t self) {
        const Tensor<T>& go = g.grad(self);
        const Tensor<T>& y = g.value(self);
        auto& gx = g.grad(ix);
        for (std::size_t r = 0; r < n; ++r) {
            T dot{0};
            for (std::size_t c = 0; c < d; ++c) dot += go[r * d + c] * y[r * d + c];
            for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += y[r * d + c] * (go[r * d + c] - dot);
        }
    });
}

/// Weighted mean of -log softmax(logits)[target] over rows. Rows with zero
/// weight do not contribute; with no weights every row has weight 1.
template <class T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::int32_t> targets, std::span<const T> weights = {}) {
    detail::require_rank("cross_entropy", logits, 2);
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    if (n == 0) throw ShapeError("cross_entropy: empty batch");
    if (targets.size() != n) throw ShapeError("cross_entropy: target count mismatch");
    if (!weights.empty() && weights.size() != n) throw ShapeError("cross_entropy: weight count mismatch");
    std::vector<T> w(n, T{1});
    if (!weights.empty()) w.assign(weights.begin(), weights.end());
    T wsum{0};
    for (T v : w) wsum += v;
    if (!(wsum > T{0})) throw ShapeError("cross_entropy: no weighted rows");
    std::vector<std::int32_t> tg(targets.begin(), targets.end());
    Tensor<T> probs = logits.value();
    kernels::softmax_rows_inplace(probs.data().data(), n, c);
    const auto& lv = logits.value();
    T loss{0};
    for (std::size_t r = 0; r < n; ++r) {
        if (tg[r] < 0 || static_cast<std::size_t>(tg[r]) >= c) throw ShapeError("cross_entropy: target out of range");
        if (w[r] == T{0}) continue;
        const T* row = &lv[r * c];
        T mx = row[0];
        for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, row[k]);
        T se{0};
        for (std::size_t k = 0; k < c; ++k) se += std::exp(row[k] - mx);
        loss += w[r] * (mx + std::log(se) - row[tg[r]]);
    }
    loss /= wsum;
    const auto il = logits.id;
    return logits.g->make(
        "cross_entropy", Tensor<T>::scalar(loss), {logits},
        [il, n, c, wsum, w = std::move(w), tg = std::move(tg), probs = std::move(probs)](Graph<T>& g,
                                                                                          std::uint32_t self) {
            const T go = g.grad(self)[0];
            auto& gl = g.grad(il);
            for (std::size_t r = 0; r < n; ++r) {
                if (w[r] == T{0}) continue;
                const T f = go * w[r] / wsum;
                for (std::size_t k = 0; k < c; ++k) gl[r * c + k] += f * probs[r * c + k];
                gl[r * c + static_cast<std::size_t>(tg[r])] -= f;
            }
        });
}

/// Row gather: out[i] = table[idx[i]]. Serves as embedding lookup and as a
/// differentiable row permutation.
template <class T>
Var<T> gather_rows(Var<T> table, std::span<const std::int32_t> idx) {
    detail::require_rank("gather_rows", table, 2);
    const std::size_t v = table.dim(0), d = table.dim(1);
    Tensor<T> out(Shape{idx.size(), d});
    const auto& tv = table.value();
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= v) {
            throw ShapeError("gather_rows: index " + std::to_string(idx[i]) + " out of range " + std::to_string(v));
        }
        std::copy_n(&tv[static_cast<std::size_t>(idx[i]) * d], d, &out[i * d]);
    }
    std::vector<std::int32_t> ids(idx.begin(), idx.end());
    const auto it = table.id;
    return table.g->make("gather_rows", std::move(out), {table},
                         [it, d, ids = std::move(ids)](Graph<T>& g, std::uint32_t self) {
                             const Tensor<T>& go = g.grad(self);
                             auto& gt = g.grad(it);
                             for (std::size_t i = 0; i < ids.size(); ++i) {
                                 T* dst = &gt[static_cast<std::size_t>(ids[i]) * d];
                                 const T* src = &go[i * d];
                                 for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
                             }
                         });
}

template <class T>
Var<T> concat_rows(Var<T> a, Var<T> b) {
    detail::require_rank("concat_rows", a, 2);
    detail::require_rank("concat_rows", b, 2);
    if (a.dim(1) != b.dim(1)) throw ShapeError("concat_rows: column mismatch");
    const std::size_t na = a.dim(0), nb = b.dim(0), d = a.dim(1);
    std::vector<T> data(a.value().storage());
    data.insert(data.end(), b.value().storage().begin(), b.value().storage().end());
    const auto ia = a.id, ib = b.id;
    return a.g->make("concat_rows", Tensor<T>(Shape{na + nb, d}, std::move(data)), {a, b},
                     [ia, ib, na, d](Graph<T>& g, std::uint32_t self) {
                         const Tensor<T>& go = g.grad(self);
                         if (g.requires_grad(ia)) {
                             auto& ga = g.grad(ia);
                             for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
                         }
                         if (g.requires_grad(ib)) {
                             auto& gb = g.grad(ib);
                             for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[na * d + i];
                         }
                     });
}

template <class T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t count) {
    detail::require_rank("slice_rows", x, 2);
    if (begin + count > x.dim(0)) throw ShapeError("slice_rows: range out of bounds");
    const std::size_t d = x.dim(1);
    const auto& xv = x.value().storage();
    std::vector<T> data(xv.begin() + static_cast<std::ptrdiff_t>(begin * d),
                        xv.begin() + static_cast<std::ptrdiff_t>((begin + count) * d));
    const auto ix = x.id;
    return x.g->make("slice_rows", Tensor<T>(Shape{count, d}, std::move(data)), {x},
                     [ix, begin, d](Graph<T>& g, std::uint32_t self) {
                         const Tensor<T>& go = g.grad(self);
                         auto& gx = g.grad(ix);
                         for (std::size_t i = 0; i < go.size(); ++i) gx[begin * d + i] += go[i];
                     });
}

struct Conv2dSpec {
    std::size_t stride_h = 1, stride_w = 1;
    std::size_t pad_h = 0, pad_w = 0;
};

template <class T>
void conv2d_backward(Graph<T>& g, std::uint32_t self, std::uint32_t ix, std::uint32_t iw,
                     std::optional<std::uint32_t> ib, const kernels::Conv2dGeom& geo, std::size_t batch,
                     std::size_t cout) {
    const std::size_t patch = geo.patch(), cells = geo.out_cells();
    const std::size_t in_size = geo.cin * geo.h * geo.w;
    const T* go = g.grad(self).data().data();
    const T* xv = g.value(ix).data().data();
    const T* wv = g.value(iw).data().data();
    std::vector<T> col(patch * cells);
    const bool need_w = g.requires_grad(iw), need_x = g.requires_grad(ix);
    for (std::size_t b = 0; b < batch; ++b) {
        const T* gob = go + b * cout * cells;
        if (need_w) {
            kernels::im2col(geo, xv + b * in_size, col.data());
            kernels::gemm<T>(false, true, cout, patch, cells, T{1}, gob, col.data(), T{1}, g.grad(iw).data().data());
        }
        if (need_x) {
            kernels::gemm<T>(true, false, patch, cells, cout, T{1}, wv, gob, T{0}, col.data());
            kernels::col2im(geo, col.data(), g.grad(ix).data().data() + b * in_size);
        }
        if (ib && g.requires_grad(*ib)) {
            auto& gb = g.grad(*ib);
            for (std::size_t co = 0; co < cout; ++co)
                for (std::size_t i = 0; i < cells; ++i) gb[co] += gob[co * cells + i];
        }
    }
}

/// Batched 2D convolution. x [N x Cin x H x W], w [Cout x Cin x kH x kW],
/// optional bias [Cout]. Output extent (H + 2pH - kH) / sH + 1 must be exact.
template <class T>
Var<T> conv2d_impl(Var<T> x, Var<T> w, std::optional<Var<T>> bias, Conv2dSpec spec) {
    detail::require_rank("conv2d", x, 4);
    detail::require_rank("conv2d", w, 4);
    const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != cin) throw ShapeError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
    if (spec.stride_h == 0 || spec.stride_w == 0) throw ShapeError("conv2d: zero stride");
    if (h + 2 * spec.pad_h < kh || wd + 2 * spec.pad_w < kw) throw ShapeError("conv2d: kernel larger than padded input");
    const std::size_t span_h = h + 2 * spec.pad_h - kh, span_w = wd + 2 * spec.pad_w - kw;
    if (span_h % spec.stride_h != 0 || span_w % spec.stride_w != 0) {
        throw ShapeError("conv2d: non-integral output extent for input " + shape_str(x.shape()));
    }
    if (bias && bias->value().size() != cout) throw ShapeError("conv2d: bias size mismatch");
    kernels::Conv2dGeom geo{cin, h, wd, kh, kw, spec.stride_h, spec.stride_w, spec.pad_h, spec.pad_w,
                            span_h / spec.stride_h + 1, span_w / spec.stride_w + 1};
    const std::size_t patch = geo.patch(), cells = geo.out_cells();
    Tensor<T> out(Shape{batch, cout, geo.oh, geo.ow});
    std::vector<T> col(patch * cells);
    const T* wv = w.value().data().data();
    for (std::size_t b = 0; b < batch; ++b) {
        kernels::im2col(geo, x.value().data().data() + b * cin * h * wd, col.data());
        T* ob = out.data().data() + b * cout * cells;
        kernels::gemm<T>(false, false, cout, cells, patch, T{1}, wv, col.data(), T{0}, ob);
        if (bias) {
            const auto& bv = bias->value();
            for (std::size_t co = 0; co < cout; ++co)
                for (std::size_t i = 0; i < cells; ++i) ob[co * cells + i] += bv[co];
        }
    }
    const auto ix = x.id, iw = w.id;
    const std::optional<std::uint32_t> ib = bias ? std::optional<std::uint32_t>(bias->id) : std::nullopt;
    if (bias) {
        return x.g->make("conv2d", std::move(out), {x, w, *bias},
                         [=](Graph<T>& g, std::uint32_t self) {
                             conv2d_backward(g, self, ix, iw, ib, geo, batch, cout);
                         });
    }
    return x.g->make("conv2d", std::move(out), {x, w},
                     [=](Graph<T>& g, std::uint32_t self) { conv2d_backward(g, self, ix, iw, ib, geo, batch, cout); });
}

template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> bias, Conv2dSpec spec) {
    return conv2d_impl<T>(x, w, bias, spec);
}

template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, Conv2dSpec spec) {
    return conv2d_impl<T>(x, w, std::nullopt, spec);
}

/// Nearest-neighbour upsampling along axis 2 of [N x C x H x W].
template <class T>
Var<T> upsample_rows(Var<T> x, std::size_t factor) {
    detail::require_rank("upsample_rows", x, 4);
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<T> out(Shape{n, c, h * factor, w});
    const auto& xv = x.value();
    for (std::size_t p = 0; p < n * c; ++p)
        for (std::size_t i = 0; i < h * factor; ++i)
            std::copy_n(&xv[(p * h + i / factor) * w], w, &out[(p * h * factor + i) * w]);
    const auto ix = x.id;
    return x.g->make("upsample_rows", std::move(out), {x}, [ix, n, c, h, w, factor](Graph<T>& g, std::uint32_t self) {
        const Tensor<T>& go = g.grad(self);
        auto& gx = g.grad(ix);
        for (std::size_t p = 0; p < n * c; ++p)
            for (std::size_t i = 0; i < h * factor; ++i)
                for (std::size_t j = 0; j < w; ++j) gx[(p * h + i / factor) * w + j] += go[(p * h * factor + i) * w + j];
    });
}

/// [N x C x H x W] -> [(N*H*W) x C], rows ordered (n, h, w).
template <class T>
Var<T> nchw_to_rows(Var<T> x) {
    detail::require_rank("nchw_to_rows", x, 4);
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<T> out(Shape{n * h * w, c});
    const auto& xv = x.value();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < h * w; ++p) out[(b * h * w + p) * c + ch] = xv[(b * c + ch) * h * w + p];
    const auto ix = x.id;
    return x.g->make("nchw_to_rows", std::move(out), {x}, [ix, n, c, h, w](Graph<T>& g, std::uint32_t self) {
        const Tensor<T>& go = g.grad(self);
        auto& gx = g.grad(ix);
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t p = 0; p < h * w; ++p) gx[(b * c + ch) * h * w + p] += go[(b * h * w + p) * c + ch];
    });
}

/// Inverse of nchw_to_rows.
template <class T>
Var<T> rows_to_nchw(Var<T> x, std::size_t n, std::size_t h, std::size_t w) {
    detail::require_rank("rows_to_nchw", x, 2);
    if (x.dim(0) != n * h * w) throw ShapeError("rows_to_nchw: row count mismatch");
    const std::size_t c = x.dim(1);
    Tensor<T> out(Shape{n, c, h, w});
    const auto& xv = x.value();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < h * w; ++p) out[(b * c + ch) * h * w + p] = xv[(b * h * w + p) * c + ch];
    const auto ix = x.id;
    return x.g->make("rows_to_nchw", std::move(out), {x}, [ix, n, c, h, w](Graph<T>& g, std::uint32_t self) {
        const Tensor<T>& go = g.grad(self);
        auto& gx = g.grad(ix);
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t p = 0; p < h * w; ++p) gx[(b * h * w + p) * c + ch] += go[(b * c + ch) * h * w + p];
    });
}

/// Multi-head scaled dot-product attention over `batches` independent
/// sequences of length `seq`. q, k, v are [batches*seq x D]; heads split D.
/// `bias`, when given, is an [seq x seq] additive logit term shared by all
/// batches and heads. If `probs_out` is non-null the attention rows are
/// copied there ([batches x heads x seq x seq]).
template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t batches, std::size_t seq, std::size_t heads,
                 const Tensor<T>* bias = nullptr, std::vector<T>* probs_out = nullptr) {
    detail::require_same("attention", q, k);
    detail::require_same("attention", q, v);
    detail::require_rank("attention", q, 2);
    const std::size_t d = q.dim(1);
    if (q.dim(0) != batches * seq) throw ShapeError("attention: length mismatch");
    if (heads == 0 || d % heads != 0) throw ShapeError("attention: model width not divisible by heads");
    if (bias && (bias->rank() != 2 || bias->dim(0) != seq || bias->dim(1) != seq)) {
        throw ShapeError("attention: bias must be seq x seq");
    }
    using Mat = kernels::RowMat<T>;
    using Strided = Eigen::Map<const Mat, 0, Eigen::OuterStride<>>;
    using StridedM = Eigen::Map<Mat, 0, Eigen::OuterStride<>>;
    const std::size_t dh = d / heads;
    const T sc = T{1} / std::sqrt(static_cast<T>(dh));
    const auto S = static_cast<Eigen::Index>(seq), Dh = static_cast<Eigen::Index>(dh);
    const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
    std::vector<T> probs(batches * heads * seq * seq);
    Tensor<T> out(Shape{batches * seq, d});
    Mat scores(S, S);
    for (std::size_t b = 0; b < batches; ++b) {
        for (std::size_t hh = 0; hh < heads; ++hh) {
            const std::size_t off = b * seq * d + hh * dh;
            Strided Q(q.value().data().data() + off, S, Dh, stride);
            Strided K(k.value().data().data() + off, S, Dh, stride);
            Strided V(v.value().data().data() + off, S, Dh, stride);
            scores.noalias() = (Q * K.transpose()) * sc;
            if (bias) scores += kernels::MapC<T>(bias->data().data(), S, S);
            kernels::softmax_rows_inplace(scores.data(), seq, seq);
            std::copy_n(scores.data(), seq * seq, probs.data() + (b * heads + hh) * seq * seq);
            StridedM O(out.data().data() + off, S, Dh, stride);
            O.noalias() = scores * V;
        }
    }
    if (probs_out) *probs_out = probs;
    const auto iq = q.id, ik = k.id, iv = v.id;
    return q.g->make(
        "attention", std::move(out), {q, k, v},
        [=, probs = std::move(probs)](Graph<T>& g, std::uint32_t self) {
            const T* go = g.grad(self).data().data();
            const T* qv = g.value(iq).data().data();
            const T* kv = g.value(ik).data().data();
            const T* vv = g.value(iv).data().data();
            T* gq = g.requires_grad(iq) ? g.grad(iq).data().data() : nullptr;
            T* gk = g.requires_grad(ik) ? g.grad(ik).data().data() : nullptr;
            T* gvp = g.requires_grad(iv) ? g.grad(iv).data().data() : nullptr;
            Mat dP(S, S);
            for (std::size_t b = 0; b < batches; ++b) {
                for (std::size_t hh = 0; hh < heads; ++hh) {
                    const std::size_t off = b * seq * d + hh * dh;
                    kernels::MapC<T> P(probs.data() + (b * heads + hh) * seq * seq, S, S);
                    Strided dO(go + off, S, Dh, stride);
                    Strided Q(qv + off, S, Dh, stride);
                    Strided K(kv + off, S, Dh, stride);
                    Strided V(vv + off, S, Dh, stride);
                    if (gvp) {
                        StridedM dV(gvp + off, S, Dh, stride);
                        dV.noalias() += P.transpose() * dO;
                    }
                    if (!gq && !gk) continue;
                    dP.noalias() = dO * V.transpose();
                    for (Eigen::Index r = 0; r < S; ++r) {
                        T dot{0};
                        for (Eigen::Index c = 0; c < S; ++c) dot += dP(r, c) * P(r, c);
                        for (Eigen::Index c = 0; c < S; ++c) dP(r, c) = P(r, c) * (dP(r, c) - dot) * sc;
                    }
                    if (gq) {
                        StridedM dQ(gq + off, S, Dh, stride);
                        dQ.noalias() += dP * K;
                    }
                    if (gk) {
                        StridedM dK(gk + off, S, Dh, stride);
                        dK.noalias() += dP.transpose() * Q;
                    }
                }
            }
        });
}

/// Mean absolute error against a constant target over entries where
/// mask != 0 (all entries when mask is empty).
template <class T>
Var<T> l1_loss(Var<T> x, const Tensor<T>& target, std::span<const T> mask = {}) {
    if (x.shape() != target.shape()) throw ShapeError("l1_loss: shape mismatch");
    if (!mask.empty() && mask.size() != target.size()) throw ShapeError("l1_loss: mask size mismatch");
    const auto& xv = x.value();
    T total{0}, count{0};
    std::vector<T> sign(xv.size(), T{0});
    for (std::size_t i = 0; i < xv.size(); ++i) {
        if (!mask.empty() && mask[i] == T{0}) continue;
        const T diff = xv[i] - target[i];
        total += std::abs(diff);
        count += T{1};
        sign[i] = diff > T{0} ? T{1} : (diff < T{0} ? T{-1} : T{0});
    }
    if (count == T{0}) throw ShapeError("l1_loss: empty selection");
    const auto ix = x.id;
    return x.g->make("l1_loss", Tensor<T>::scalar(total / count), {x},
                     [ix, count, sign = std::move(sign)](Graph<T>& g, std::uint32_t self) {
                         const T go = g.grad(self)[0] / count;
                         auto& gx = g.grad(ix);
                         for (std::size_t i = 0; i < sign.size(); ++i) gx[i] += go * sign[i];
                     });
}

/// Mean squared error against a constant (stop-gradient) target.
template <class T>
Var<T> mse_loss(Var<T> x, const Tensor<T>& target) {
    if (x.shape() != target.shape()) throw ShapeError("mse_loss: shape mismatch");
    const auto& xv = x.value();
    if (xv.size() == 0) throw ShapeError("mse_loss: empty tensor");
    T total{0};
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const T diff = xv[i] - target[i];
        total += diff * diff;
    }
    const T n = static_cast<T>(xv.size());
    const auto ix = x.id;
    return x.g->make("mse_loss", Tensor<T>::scalar(total / n), {x},
                     [ix, n, target](Graph<T>& g, std::uint32_t self) {
                         const T go = g.grad(self)[0] * T{2} / n;
                         const Tensor<T>& xv = g.value(ix);
                         auto& gx = g.grad(ix);
                         for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go * (xv[i] - target[i]);
                     });
}

/// Forward value is `quantized`; the incoming gradient is copied to `x`
/// unchanged (straight-through estimator).
template <class T>
Var<T> straight_through(Var<T> x, const Tensor<T>& quantized) {
    if (x.shape() != quantized.shape()) throw ShapeError("straight_through: shape mismatch");
    const auto ix = x.id;
    return x.g->make("straight_through", quantized, {x}, [ix](Graph<T>& g, std::uint32_t self) {
        const Tensor<T>& go = g.grad(self);
        auto& gx = g.grad(ix);
        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    });
}

/// Inverted dropout. Identity when p == 0.
template <class T>
Var<T> dropout(Var<T> x, double p, Rng& rng) {
    if (p <= 0.0) return x;
    if (p >= 1.0) throw std::invalid_argument("dropout: p must be < 1");
    const T keep = static_cast<T>(1.0 / (1.0 - p));
    std::vector<T> m(x.value().size());
    for (auto& v : m) v = rng.uniform() < p ? T{0} : keep;
    Tensor<T> out = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= m[i];
    const auto ix = x.id;
    return x.g->make("dropout", std::move(out), {x}, [ix, m = std::move(m)](Graph<T>& g, std::uint32_t self) {
        const Tensor<T>& go = g.grad(self);
        auto& gx = g.grad(ix);
        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * m[i];
    });
}

}  // namespace ag
}  // namespace stm
