#pragma once

// 2D sinusoidal position encoding and the three attention patterns used on
// token maps: full attention over [condition; flattened map], attention
// across joints within each frame, and attention across frames within each
// joint column.

#include "stm/numerics/nn.hpp"

#include <cmath>
#include <vector>

namespace stm {

struct TransformerError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// [T'*J' x D] table. Channels [0, D/2) encode the frame index, channels
/// [D/2, D) the column index; within each half even channels are sines and
/// odd channels cosines of geometrically spaced frequencies.
template <class T>
Tensor<T> pos_encode_2d(std::size_t t_prime, std::size_t j_prime, std::size_t d_model) {
    if (d_model == 0 || d_model % 2 != 0) throw TransformerError("position encoding needs an even model width");
    const std::size_t half = d_model / 2;
    Tensor<T> p(Shape{t_prime * j_prime, d_model});
    auto fill = [&](double pos, std::size_t offset, T* row) {
        for (std::size_t c = 0; c < half; ++c) {
            const double freq = std::pow(10000.0, -double(2 * (c / 2)) / double(half));
            row[offset + c] = static_cast<T>(c % 2 == 0 ? std::sin(pos * freq) : std::cos(pos * freq));
        }
    };
    for (std::size_t t = 0; t < t_prime; ++t)
        for (std::size_t j = 0; j < j_prime; ++j) {
            T* row = p.data().data() + (t * j_prime + j) * d_model;
            fill(double(t), 0, row);
            fill(double(j), half, row);
        }
    return p;
}

/// Logit bias b[i][k] = P_i . P_k / sqrt(D) over a set of position rows.
template <class T>
Tensor<T> position_bias(const Tensor<T>& rows) {
    const std::size_t n = rows.rows(), d = rows.cols();
    Tensor<T> b(Shape{n, n});
    const T s = T{1} / std::sqrt(static_cast<T>(d));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < n; ++k) {
            T acc{0};
            for (std::size_t c = 0; c < d; ++c) acc += rows.at(i, c) * rows.at(k, c);
            b.at(i, k) = acc * s;
        }
    return b;
}

/// Multi-head self-attention with its own projections.
template <class T>
struct SelfAttention {
    nn::Linear<T> q, k, v, o;
    std::size_t heads = 1;

    SelfAttention() = default;
    SelfAttention(ParamStore<T>& ps, const std::string& name, std::size_t d, std::size_t heads_, Rng& rng)
        : q(ps, name + ".q", d, d, rng), k(ps, name + ".k", d, d, rng), v(ps, name + ".v", d, d, rng),
          o(ps, name + ".o", d, d, rng), heads(heads_) {
        if (heads == 0 || d % heads != 0) throw TransformerError("model width not divisible by head count");
    }

    /// x is [batches*seq x D], each consecutive block of `seq` rows one sequence.
    Var<T> operator()(Graph<T>& g, Var<T> x, std::size_t batches, std::size_t seq, const Tensor<T>* bias = nullptr,
                      std::vector<T>* probs = nullptr) const {
        if (x.dim(0) != batches * seq) throw TransformerError("attention input length mismatch");
        return o(g, ag::attention(q(g, x), k(g, x), v(g, x), batches, seq, heads, bias, probs));
    }
};

/// Row order for interleaving one condition row per sample in front of its
/// motion rows: out = [c_0; m_0; c_1; m_1; ...] from concat(c, m).
inline std::vector<std::int32_t> interleave_condition_order(std::size_t batch, std::size_t cells) {
    std::vector<std::int32_t> idx;
    idx.reserve(batch * (cells + 1));
    for (std::size_t b = 0; b < batch; ++b) {
        idx.push_back(static_cast<std::int32_t>(b));
        for (std::size_t i = 0; i < cells; ++i) idx.push_back(static_cast<std::int32_t>(batch + b * cells + i));
    }
    return idx;
}

/// Rows (b, t, j) -> (b, j, t).
inline std::vector<std::int32_t> frame_major_to_joint_major(std::size_t batch, std::size_t t_prime,
                                                            std::size_t j_prime) {
    std::vector<std::int32_t> idx;
    idx.reserve(batch * t_prime * j_prime);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t j = 0; j < j_prime; ++j)
            for (std::size_t t = 0; t < t_prime; ++t)
                idx.push_back(static_cast<std::int32_t>((b * t_prime + t) * j_prime + j));
    return idx;
}

/// Rows (b, j, t) -> (b, t, j).
inline std::vector<std::int32_t> joint_major_to_frame_major(std::size_t batch, std::size_t t_prime,
                                                            std::size_t j_prime) {
    std::vector<std::int32_t> idx;
    idx.reserve(batch * t_prime * j_prime);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < t_prime; ++t)
            for (std::size_t j = 0; j < j_prime; ++j)
                idx.push_back(static_cast<std::int32_t>((b * j_prime + j) * t_prime + t));
    return idx;
}

/// Full attention over each sample's [condition; T'*J' motion rows].
/// cond [B x D], motion [B*T'*J' x D] ordered (b, t, j). Returns the
/// updated (cond, motion) pair in the same layouts.
template <class T>
std::pair<Var<T>, Var<T>> attn_spatial_temporal(Graph<T>& g, const SelfAttention<T>& attn, Var<T> cond,
                                                Var<T> motion, std::size_t batch, std::size_t cells,
                                                const Tensor<T>* bias = nullptr) {
    if (cond.dim(0) != batch || motion.dim(0) != batch * cells)
        throw TransformerError("spatial-temporal attention: length mismatch");
    const auto order = interleave_condition_order(batch, cells);
    Var<T> seq = ag::gather_rows(ag::concat_rows(cond, motion), order);
    Var<T> out = attn(g, seq, batch, cells + 1, bias);
    std::vector<std::int32_t> c_idx, m_idx;
    for (std::size_t b = 0; b < batch; ++b) {
        c_idx.push_back(static_cast<std::int32_t>(b * (cells + 1)));
        for (std::size_t i = 0; i < cells; ++i) m_idx.push_back(static_cast<std::int32_t>(b * (cells + 1) + 1 + i));
    }
    return {ag::gather_rows(out, c_idx), ag::gather_rows(out, m_idx)};
}

/// Attention across the J' columns of each frame; frames are independent batches.
template <class T>
Var<T> attn_joint_spatial(Graph<T>& g, const SelfAttention<T>& attn, Var<T> motion, std::size_t batch,
                          std::size_t t_prime, std::size_t j_prime, const Tensor<T>* bias = nullptr) {
    if (motion.dim(0) != batch * t_prime * j_prime) throw TransformerError("joint-spatial attention: length mismatch");
    return attn(g, motion, batch * t_prime, j_prime, bias);
}

/// Attention across the T' frames of each column; columns are independent batches.
template <class T>
Var<T> attn_joint_temporal(Graph<T>& g, const SelfAttention<T>& attn, Var<T> motion, std::size_t batch,
                           std::size_t t_prime, std::size_t j_prime, const Tensor<T>* bias = nullptr) {
    if (motion.dim(0) != batch * t_prime * j_prime) throw TransformerError("joint-temporal attention: length mismatch");
    const auto to_joint = frame_major_to_joint_major(batch, t_prime, j_prime);
    const auto to_frame = joint_major_to_frame_major(batch, t_prime, j_prime);
    Var<T> y = attn(g, ag::gather_rows(motion, to_joint), batch * j_prime, t_prime, bias);
    return ag::gather_rows(y, to_frame);
}

}  // namespace stm
