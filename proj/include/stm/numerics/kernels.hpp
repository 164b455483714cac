#pragma once

// Raw dense kernels over contiguous row-major buffers. GEMM is delegated to
// Eigen's single-threaded blocked product, which has a fixed reduction order
// for a given shape and build.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <span>

namespace stm::kernels {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapC = Eigen::Map<const RowMat<T>>;
template <class T>
using MapM = Eigen::Map<RowMat<T>>;

/// C (m x n) = alpha * op(A) * op(B) + beta * C.
/// op(A) is m x k; A is stored k x m when trans_a.
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          const T* b, T beta, T* c) {
    const auto M = static_cast<Eigen::Index>(m);
    const auto N = static_cast<Eigen::Index>(n);
    const auto K = static_cast<Eigen::Index>(k);
    MapM<T> C(c, M, N);
    if (beta == T{0}) {
        C.setZero();
    } else if (beta != T{1}) {
        C *= beta;
    }
    if (m == 0 || n == 0 || k == 0) return;
    if (!trans_a && !trans_b) {
        C.noalias() += alpha * (MapC<T>(a, M, K) * MapC<T>(b, K, N));
    } else if (!trans_a && trans_b) {
        C.noalias() += alpha * (MapC<T>(a, M, K) * MapC<T>(b, N, K).transpose());
    } else if (trans_a && !trans_b) {
        C.noalias() += alpha * (MapC<T>(a, K, M).transpose() * MapC<T>(b, K, N));
    } else {
        C.noalias() += alpha * (MapC<T>(a, K, M).transpose() * MapC<T>(b, N, K).transpose());
    }
}

struct Conv2dGeom {
    std::size_t cin, h, w;
    std::size_t kh, kw;
    std::size_t sh, sw;
    std::size_t ph, pw;
    std::size_t oh, ow;
    std::size_t patch() const { return cin * kh * kw; }
    std::size_t out_cells() const { return oh * ow; }
};

/// Unfold one sample [cin x h x w] into col [cin*kh*kw x oh*ow].
template <class T>
void im2col(const Conv2dGeom& g, const T* x, T* col) {
    const std::size_t cells = g.out_cells();
    for (std::size_t c = 0; c < g.cin; ++c) {
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                T* row = col + ((c * g.kh + ki) * g.kw + kj) * cells;
                for (std::size_t oi = 0; oi < g.oh; ++oi) {
                    const auto ii = static_cast<std::ptrdiff_t>(oi * g.sh + ki) - static_cast<std::ptrdiff_t>(g.ph);
                    for (std::size_t oj = 0; oj < g.ow; ++oj) {
                        const auto jj =
                            static_cast<std::ptrdiff_t>(oj * g.sw + kj) - static_cast<std::ptrdiff_t>(g.pw);
                        const bool inside = ii >= 0 && jj >= 0 && ii < static_cast<std::ptrdiff_t>(g.h) &&
                                            jj < static_cast<std::ptrdiff_t>(g.w);
                        row[oi * g.ow + oj] = inside ? x[(c * g.h + static_cast<std::size_t>(ii)) * g.w +
                                                         static_cast<std::size_t>(jj)]
                                                     : T{0};
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col: scatter-add col back into dx.
template <class T>
void col2im(const Conv2dGeom& g, const T* col, T* dx) {
    const std::size_t cells = g.out_cells();
    for (std::size_t c = 0; c < g.cin; ++c) {
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                const T* row = col + ((c * g.kh + ki) * g.kw + kj) * cells;
                for (std::size_t oi = 0; oi < g.oh; ++oi) {
                    const auto ii = static_cast<std::ptrdiff_t>(oi * g.sh + ki) - static_cast<std::ptrdiff_t>(g.ph);
                    if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(g.h)) continue;
                    for (std::size_t oj = 0; oj < g.ow; ++oj) {
                        const auto jj =
                            static_cast<std::ptrdiff_t>(oj * g.sw + kj) - static_cast<std::ptrdiff_t>(g.pw);
                        if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(g.w)) continue;
                        dx[(c * g.h + static_cast<std::size_t>(ii)) * g.w + static_cast<std::size_t>(jj)] +=
                            row[oi * g.ow + oj];
                    }
                }
            }
        }
    }
}

/// Row-wise softmax with max subtraction, in place.
template <class T>
void softmax_rows_inplace(T* x, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        T* row = x + r * cols;
        T mx = row[0];
        for (std::size_t c = 1; c < cols; ++c) mx = row[c] > mx ? row[c] : mx;
        T sum{0};
        for (std::size_t c = 0; c < cols; ++c) {
            row[c] = std::exp(row[c] - mx);
            sum += row[c];
        }
        const T inv = T{1} / sum;
        for (std::size_t c = 0; c < cols; ++c) row[c] *= inv;
    }
}

}  // namespace stm::kernels
