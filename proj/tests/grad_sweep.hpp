#pragma once

// One randomized finite-difference pass over every differentiable op.
// Shared by the unit tests and the acceptance binary.

#include "gradcheck.hpp"

#include <string>
#include <utility>

namespace stm::testing {

struct OpError {
    std::string op;
    double max_rel_err;
};

inline std::vector<OpError> grad_sweep(int seed) {
    Rng rng(1000 + seed);
    auto dim = [&](std::size_t lo, std::size_t hi) { return lo + rng.index(hi - lo + 1); };
    using V = Var<double>;
    using VS = const std::vector<V>&;
    std::vector<OpError> out;
    auto check = [&](const char* name, const Build& f, std::vector<Tensor<double>> in) {
        out.push_back({name, grad_check(f, in, rng).max_rel_err});
    };

    const std::size_t m = dim(1, 4), k = dim(1, 5), n = dim(1, 4);
    check("matmul", [](Graph<double>&, VS v) { return ag::matmul(v[0], v[1]); },
          {random_tensor({m, k}, rng), random_tensor({k, n}, rng)});

    const std::size_t cin = dim(1, 3), cout = dim(1, 3), h = dim(3, 6), w = dim(1, 4);
    const std::size_t kh = dim(1, 3), kw = std::min<std::size_t>(dim(1, 3), w);
    const ag::Conv2dSpec spec{1, 1, std::size_t(seed % 2), 0};
    check("conv2d", [spec](Graph<double>&, VS v) { return ag::conv2d(v[0], v[1], v[2], spec); },
          {random_tensor({2, cin, h, w}, rng), random_tensor({cout, cin, kh, kw}, rng), random_tensor({cout}, rng)});
    check("strided conv2d", [](Graph<double>&, VS v) { return ag::conv2d(v[0], v[1], {2, 1, 1, 0}); },
          {random_tensor({1, cin, 6, w}, rng), random_tensor({cout, cin, 4, 1}, rng)});

    const std::size_t r = dim(1, 4), c = dim(2, 6);
    check("softmax_rows", [](Graph<double>&, VS v) { return ag::softmax_rows(v[0]); }, {random_tensor({r, c}, rng)});
    check("layer_norm", [](Graph<double>&, VS v) { return ag::layer_norm(v[0], v[1], v[2]); },
          {random_tensor({r, c}, rng), random_tensor({c}, rng), random_tensor({c}, rng)});

    std::vector<std::int32_t> ids(dim(1, 6));
    for (auto& i : ids) i = std::int32_t(rng.index(5));
    check("gather_rows", [ids](Graph<double>&, VS v) { return ag::gather_rows(v[0], ids); },
          {random_tensor({5, c}, rng)});

    std::vector<std::int32_t> tg(r);
    std::vector<double> wts(r);
    for (std::size_t i = 0; i < r; ++i) {
        tg[i] = std::int32_t(rng.index(c));
        wts[i] = (i % 2 == 0) ? 1.0 : 0.0;
    }
    check("cross_entropy", [tg](Graph<double>&, VS v) { return ag::cross_entropy(v[0], tg); },
          {random_tensor({r, c}, rng)});
    check("weighted cross_entropy", [tg, wts](Graph<double>&, VS v) { return ag::cross_entropy<double>(v[0], tg, wts); },
          {random_tensor({r, c}, rng)});
    check("gelu/add_bias", [](Graph<double>&, VS v) { return ag::gelu(ag::add_bias(v[0], v[1])); },
          {random_tensor({r, c}, rng), random_tensor({c}, rng)});
    check("relu/mul/sub/add", [](Graph<double>&, VS v) { return ag::add(ag::relu(ag::sub(ag::mul(v[0], v[1]), v[0])), v[1]); },
          {random_tensor({r, c}, rng), random_tensor({r, c}, rng)});
    check("concat/slice/scale",
          [](Graph<double>&, VS v) { return ag::concat_rows(ag::slice_rows(v[0], 1, 1), ag::scale(v[1], 0.5)); },
          {random_tensor({3, c}, rng), random_tensor({2, c}, rng)});
    check("upsample/layout",
          [](Graph<double>&, VS v) {
              auto rows = ag::nchw_to_rows(ag::upsample_rows(v[0], 2));
              return ag::rows_to_nchw(ag::mul(rows, rows), 2, 6, 2);
          },
          {random_tensor({2, 3, 3, 2}, rng)});

    const std::size_t heads = dim(1, 2), dh = dim(1, 3), seq = dim(1, 4), batches = dim(1, 3);
    const std::size_t d = heads * dh;
    const Tensor<double> bias = random_tensor({seq, seq}, rng);
    check("attention",
          [=](Graph<double>&, VS v) { return ag::attention(v[0], v[1], v[2], batches, seq, heads); },
          {random_tensor({batches * seq, d}, rng), random_tensor({batches * seq, d}, rng),
           random_tensor({batches * seq, d}, rng)});
    check("biased attention",
          [=](Graph<double>&, VS v) { return ag::attention(v[0], v[1], v[2], batches, seq, heads, &bias); },
          {random_tensor({batches * seq, d}, rng), random_tensor({batches * seq, d}, rng),
           random_tensor({batches * seq, d}, rng)});

    const auto target = random_tensor({r, c}, rng);
    check("mse_loss", [target](Graph<double>&, VS v) { return ag::mse_loss(v[0], target); }, {random_tensor({r, c}, rng)});
    check("l1_loss", [target](Graph<double>&, VS v) { return ag::l1_loss(ag::mul(v[0], v[0]), target); },
          {random_tensor({r, c}, rng)});
    check("sum/mean/reshape",
          [](Graph<double>&, VS v) {
              return ag::add(ag::mean(ag::reshape(v[0], {v[0].value().size()})), ag::scale(ag::sum(v[0]), 0.3));
          },
          {random_tensor({r, c}, rng)});
    // Dropout replays the same mask on every evaluation.
    const Rng mask_rng(7 + std::uint64_t(seed));
    check("dropout", [mask_rng](Graph<double>&, VS v) { Rng r2 = mask_rng; return ag::dropout(v[0], 0.4, r2); },
          {random_tensor({r, c}, rng)});

    // The straight-through estimator has a defined (not differentiated)
    // backward rule: the upstream gradient passes to x unchanged.
    {
        Graph<double> g;
        const auto x = g.leaf(random_tensor({r, c}, rng));
        const auto q = random_tensor({r, c}, rng), up = random_tensor({r, c}, rng);
        g.backward(ag::sum(ag::mul(ag::straight_through(x, q), g.constant(up))));
        double err = 0.0;
        for (std::size_t i = 0; i < up.size(); ++i) err = std::max(err, std::abs(g.grad(x.id)[i] - up[i]));
        out.push_back({"straight_through (rule)", err});
    }
    return out;
}

}  // namespace stm::testing
