#pragma once

// Codebooks with EMA statistics, nearest-code lookup, residual stacking and
// dead-code reset.

#include "stm/numerics/rng.hpp"
#include "stm/numerics/tensor.hpp"

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace stm {

struct VqError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

template <class T>
struct Codebook {
    Tensor<T> entries;      // [C x d]
    std::vector<T> usage;   // EMA of assignment counts
    Tensor<T> cluster_sum;  // EMA of assigned vector sums, [C x d]
    T decay = T(0.99);
    bool frozen_zero = false;  // entry 0 pinned to the zero vector

    Codebook() = default;
    Codebook(std::size_t codes, std::size_t dim, T decay_, bool frozen_zero_, Rng& rng)
        : entries(Shape{codes, dim}), usage(codes, T{0}), cluster_sum(Shape{codes, dim}), decay(decay_),
          frozen_zero(frozen_zero_) {
        if (codes < 2) throw VqError("codebook needs at least 2 entries");
        if (dim == 0) throw VqError("codebook dimension must be positive");
        const double bound = 1.0 / std::sqrt(double(dim));
        for (auto& v : entries.storage()) v = static_cast<T>(rng.uniform(-bound, bound));
        if (frozen_zero)
            for (std::size_t k = 0; k < dim; ++k) entries.at(0, k) = T{0};
    }

    std::size_t codes() const { return entries.rows(); }
    std::size_t dim() const { return entries.cols(); }
    bool is_frozen(std::size_t c) const { return frozen_zero && c == 0; }
};

namespace vqdetail {
template <class T>
T sq_dist(const T* a, const T* b, std::size_t d) {
    T s{0};
    for (std::size_t k = 0; k < d; ++k) {
        const T diff = a[k] - b[k];
        s += diff * diff;
    }
    return s;
}
}  // namespace vqdetail

template <class T>
struct Quantized {
    std::vector<std::int32_t> ids;
    Tensor<T> values;  // [N x d] selected entries
};

/// Nearest entry per row of `lat` [N x d]; ties go to the lowest index.
template <class T>
Quantized<T> quantize_nearest(const Tensor<T>& lat, const Codebook<T>& cb) {
    if (cb.codes() == 0) throw VqError("empty codebook");
    if (lat.rank() != 2 || lat.cols() != cb.dim()) throw VqError("latent width does not match codebook dimension");
    const std::size_t n = lat.rows(), d = cb.dim(), c = cb.codes();
    Quantized<T> out{std::vector<std::int32_t>(n), Tensor<T>(Shape{n, d})};
    for (std::size_t i = 0; i < n; ++i) {
        const T* v = lat.data().data() + i * d;
        std::size_t best = 0;
        T best_d = vqdetail::sq_dist(v, cb.entries.data().data(), d);
        for (std::size_t k = 1; k < c; ++k) {
            const T dist = vqdetail::sq_dist(v, cb.entries.data().data() + k * d, d);
            if (dist < best_d) {
                best_d = dist;
                best = k;
            }
        }
        out.ids[i] = static_cast<std::int32_t>(best);
        std::copy_n(cb.entries.data().data() + best * d, d, out.values.data().data() + i * d);
    }
    return out;
}

template <class T>
struct ResidualQuantized {
    std::vector<std::vector<std::int32_t>> ids;  // [layer][row]
    Tensor<T> quantized_sum;                     // [N x d], summed in layer order
    std::vector<Tensor<T>> layer_inputs;         // residual entering each layer
    std::vector<std::vector<T>> residual_norms;  // [layer][row], L2 norm after the layer
};

/// Layer l quantizes the residual left by layers < l; each new residual is
/// the previous residual minus the selected entry.
template <class T>
ResidualQuantized<T> residual_quantize(const Tensor<T>& lat, std::span<const Codebook<T>* const> books) {
    if (books.empty()) throw VqError("residual quantization needs at least one codebook");
    if (lat.rank() != 2) throw VqError("latent must be a row matrix");
    const std::size_t n = lat.rows(), d = lat.cols();
    for (const auto* b : books)
        if (b->dim() != d) throw VqError("codebook dimension mismatch in residual stack");
    ResidualQuantized<T> out;
    out.quantized_sum = Tensor<T>(Shape{n, d});
    Tensor<T> residual = lat;
    const std::vector<T> zero(d, T{0});
    for (std::size_t l = 0; l < books.size(); ++l) {
        Quantized<T> q = quantize_nearest(residual, *books[l]);
        out.layer_inputs.push_back(residual);
        std::vector<T> norms(n);
        for (std::size_t i = 0; i < n; ++i) {
            T* r = residual.data().data() + i * d;
            const T* e = q.values.data().data() + i * d;
            T* s = out.quantized_sum.data().data() + i * d;
            for (std::size_t k = 0; k < d; ++k) {
                r[k] = r[k] - e[k];
                s[k] += e[k];
            }
            norms[i] = std::sqrt(vqdetail::sq_dist(r, zero.data(), d));
        }
        out.ids.push_back(std::move(q.ids));
        out.residual_norms.push_back(std::move(norms));
    }
    return out;
}

/// Folds one batch of assignments into the EMA statistics and recomputes
/// the entries that received vectors this batch. Laplace smoothing keeps
/// the division finite. decay == 1 leaves the codebook frozen.
template <class T>
void ema_update(Codebook<T>& cb, std::span<const std::int32_t> ids, const Tensor<T>& lat, T eps = T(1e-5)) {
    if (cb.decay >= T{1}) return;
    const std::size_t c = cb.codes(), d = cb.dim();
    if (!ids.empty() && (lat.rank() != 2 || lat.rows() != ids.size() || lat.cols() != d))
        throw VqError("ema_update: latent/assignment shape mismatch");
    std::vector<T> count(c, T{0});
    Tensor<T> sums(Shape{c, d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const auto k = static_cast<std::size_t>(ids[i]);
        if (k >= c) throw VqError("ema_update: assignment out of range");
        count[k] += T{1};
        for (std::size_t q = 0; q < d; ++q) sums.at(k, q) += lat.at(i, q);
    }
    const T dec = cb.decay, keep = T{1} - cb.decay;
    T total{0};
    for (std::size_t k = 0; k < c; ++k) {
        if (cb.is_frozen(k)) continue;
        cb.usage[k] = dec * cb.usage[k] + keep * count[k];
        for (std::size_t q = 0; q < d; ++q) cb.cluster_sum.at(k, q) = dec * cb.cluster_sum.at(k, q) + keep * sums.at(k, q);
        total += cb.usage[k];
    }
    for (std::size_t k = 0; k < c; ++k) {
        if (cb.is_frozen(k) || count[k] == T{0}) continue;
        const T smoothed = (cb.usage[k] + eps) / (total + T(c) * eps) * total;
        for (std::size_t q = 0; q < d; ++q) cb.entries.at(k, q) = cb.cluster_sum.at(k, q) / smoothed;
    }
}

/// Replaces every non-frozen entry whose usage EMA is below `threshold` by
/// a uniformly drawn row of `pool`. Returns the number of replaced entries.
template <class T>
std::size_t codebook_reset(Codebook<T>& cb, const Tensor<T>& pool, Rng& rng, T threshold) {
    if (pool.rank() != 2 || pool.rows() == 0) throw VqError("codebook reset: no encoder outputs available");
    if (pool.cols() != cb.dim()) throw VqError("codebook reset: dimension mismatch");
    const std::size_t d = cb.dim();
    std::size_t replaced = 0;
    for (std::size_t k = 0; k < cb.codes(); ++k) {
        if (cb.is_frozen(k) || cb.usage[k] >= threshold) continue;
        const std::size_t src = rng.index(pool.rows());
        for (std::size_t q = 0; q < d; ++q) {
            cb.entries.at(k, q) = pool.at(src, q);
            cb.cluster_sum.at(k, q) = pool.at(src, q);
        }
        cb.usage[k] = T{1};
        ++replaced;
    }
    return replaced;
}

}  // namespace stm
