#include "gradcheck.hpp"

#include "stm/motion/synth.hpp"
#include "stm/vq/model.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <set>

using namespace stm;

namespace {

Codebook<float> book_from(std::vector<float> values, std::size_t dim, bool frozen_zero = false) {
    Rng rng(0);
    const std::size_t n = values.size() / dim;
    Codebook<float> cb(n, dim, 0.99f, frozen_zero, rng);
    cb.entries = Tensor<float>(Shape{n, dim}, std::move(values));
    return cb;
}

Tensor<float> random_rows(std::size_t n, std::size_t d, Rng& rng, double scale = 1.0) {
    Tensor<float> t(Shape{n, d});
    for (auto& v : t.storage()) v = static_cast<float>(scale * rng.normal());
    return t;
}

// Exhaustive scan written independently of the library helper.
std::vector<std::int32_t> scan_oracle(const Tensor<float>& lat, const Tensor<float>& entries) {
    std::vector<std::int32_t> ids;
    for (std::size_t i = 0; i < lat.rows(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        std::int32_t arg = -1;
        for (std::size_t k = 0; k < entries.rows(); ++k) {
            float s = 0;
            for (std::size_t q = 0; q < lat.cols(); ++q) s += (lat.at(i, q) - entries.at(k, q)) * (lat.at(i, q) - entries.at(k, q));
            if (s < best) {
                best = s;
                arg = static_cast<std::int32_t>(k);
            }
        }
        ids.push_back(arg);
    }
    return ids;
}

VqConfig tiny_config() {
    VqConfig c;
    c.codes = 8;
    c.code_dim = 4;
    c.width = 6;
    c.residual_layers = 2;
    return c;
}

}  // namespace

TEST(Quantize, HandCases) {
    const auto cb = book_from({0, 0, 1, 1}, 2);
    EXPECT_EQ(quantize_nearest(Tensor<float>(Shape{1, 2}, {0.9f, 0.8f}), cb).ids[0], 1);
    EXPECT_EQ(quantize_nearest(Tensor<float>(Shape{1, 2}, {0.5f, 0.5f}), cb).ids[0], 0);
    const auto q = quantize_nearest(Tensor<float>(Shape{1, 2}, {0.9f, 0.8f}), cb);
    EXPECT_EQ(q.values[0], 1.0f);
    EXPECT_EQ(q.values[1], 1.0f);
}

TEST(Quantize, MatchesExhaustiveScan) {
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        Codebook<float> cb(16, 5, 0.99f, false, rng);
        const auto lat = random_rows(200, 5, rng, 0.5);
        EXPECT_EQ(quantize_nearest(lat, cb).ids, scan_oracle(lat, cb.entries));
    }
}

TEST(Quantize, Errors) {
    const auto cb = book_from({0, 0, 1, 1}, 2);
    EXPECT_THROW(quantize_nearest(Tensor<float>(Shape{1, 3}), cb), VqError);
    Rng rng(0);
    EXPECT_THROW(Codebook<float>(1, 2, 0.99f, false, rng), VqError);
}

TEST(ResidualQuantize, SingleLayerIsNearest) {
    Rng rng(2);
    Codebook<float> cb(12, 3, 0.99f, false, rng);
    const auto lat = random_rows(50, 3, rng);
    const Codebook<float>* books[] = {&cb};
    const auto rq = residual_quantize<float>(lat, books);
    const auto q = quantize_nearest(lat, cb);
    EXPECT_EQ(rq.ids[0], q.ids);
    EXPECT_EQ(rq.quantized_sum, q.values);
}

TEST(ResidualQuantize, SumIsExplicitEntrySum) {
    Rng rng(3);
    std::vector<Codebook<float>> books;
    for (int l = 0; l < 4; ++l) books.emplace_back(10, 3, 0.99f, l > 0, rng);
    std::vector<const Codebook<float>*> ptrs;
    for (auto& b : books) ptrs.push_back(&b);
    const auto lat = random_rows(40, 3, rng);
    const auto rq = residual_quantize<float>(lat, ptrs);
    for (std::size_t i = 0; i < 40; ++i)
        for (std::size_t k = 0; k < 3; ++k) {
            float s = 0.0f;
            for (std::size_t l = 0; l < 4; ++l) s += books[l].entries.at(rq.ids[l][i], k);
            EXPECT_EQ(s, rq.quantized_sum.at(i, k));
        }
}

TEST(ResidualQuantize, MonotoneResidualWithFrozenZero) {
    Rng rng(4);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<Codebook<float>> books;
        for (int l = 0; l < 6; ++l) books.emplace_back(16, 4, 0.99f, l > 0, rng);
        std::vector<const Codebook<float>*> ptrs;
        for (auto& b : books) ptrs.push_back(&b);
        const auto lat = random_rows(1000, 4, rng);
        const auto rq = residual_quantize<float>(lat, ptrs);
        for (std::size_t l = 1; l < 6; ++l)
            for (std::size_t i = 0; i < 1000; ++i) ASSERT_LE(rq.residual_norms[l][i], rq.residual_norms[l - 1][i]);
    }
}

TEST(ResidualQuantize, DimensionMismatch) {
    Rng rng(0);
    Codebook<float> a(4, 3, 0.99f, false, rng), b(4, 2, 0.99f, true, rng);
    const Codebook<float>* books[] = {&a, &b};
    EXPECT_THROW(residual_quantize<float>(random_rows(3, 3, rng), books), VqError);
}

TEST(Ema, FrozenWhenDecayIsOne) {
    auto cb = book_from({0, 0, 1, 1}, 2);
    cb.decay = 1.0f;
    const auto before = cb.entries;
    ema_update<float>(cb, std::vector<std::int32_t>{}, Tensor<float>(Shape{0, 2}));
    ema_update<float>(cb, std::vector<std::int32_t>{1}, Tensor<float>(Shape{1, 2}, {5.0f, 5.0f}));
    EXPECT_EQ(cb.entries, before);
}

TEST(Ema, RepeatedPointConvergesLikeScalarRecurrence) {
    auto cb = book_from({0.0f, 0.0f, 7.0f, 7.0f}, 2);
    const Tensor<float> p(Shape{1, 2}, {0.3f, -1.2f});
    const std::vector<std::int32_t> ids{0};
    double usage = 0, sum0 = 0;
    for (int step = 0; step < 200; ++step) {
        ema_update<float>(cb, ids, p);
        usage = 0.99 * usage + 0.01;
        sum0 = 0.99 * sum0 + 0.01 * 0.3;
    }
    EXPECT_NEAR(cb.entries.at(0, 0), 0.3, 1e-3);
    EXPECT_NEAR(cb.entries.at(0, 1), -1.2, 1e-3);
    EXPECT_NEAR(cb.usage[0], usage, 1e-5);
    EXPECT_NEAR(cb.cluster_sum.at(0, 0), sum0, 1e-5);
    // Never-assigned code keeps its entry while its stats decay towards 0.
    EXPECT_EQ(cb.entries.at(1, 0), 7.0f);
    EXPECT_EQ(cb.usage[1], 0.0f);
}

TEST(Ema, UnassignedCodeOnlyDecays) {
    auto cb = book_from({0, 0, 1, 1, 2, 2}, 2);
    cb.usage = {3.0f, 2.0f, 1.0f};
    cb.cluster_sum = Tensor<float>(Shape{3, 2}, {0, 0, 2, 2, 2, 2});
    ema_update<float>(cb, std::vector<std::int32_t>{0}, Tensor<float>(Shape{1, 2}, {0.1f, 0.1f}));
    EXPECT_EQ(cb.entries.at(1, 0), 1.0f);
    EXPECT_EQ(cb.entries.at(2, 1), 2.0f);
    EXPECT_FLOAT_EQ(cb.usage[1], 0.99f * 2.0f);
    EXPECT_FLOAT_EQ(cb.cluster_sum.at(2, 0), 0.99f * 2.0f);
}

TEST(Ema, FrozenZeroUntouched) {
    auto cb = book_from({0, 0, 1, 1}, 2, true);
    ema_update<float>(cb, std::vector<std::int32_t>{0, 0}, Tensor<float>(Shape{2, 2}, {3, 3, 4, 4}));
    EXPECT_EQ(cb.entries.at(0, 0), 0.0f);
    EXPECT_EQ(cb.entries.at(0, 1), 0.0f);
}

TEST(Reset, NoChangeWhenAllUsed) {
    auto cb = book_from({0, 0, 1, 1}, 2);
    cb.usage = {2.0f, 5.0f};
    const auto before = cb.entries;
    Rng rng(1);
    EXPECT_EQ(codebook_reset<float>(cb, Tensor<float>(Shape{1, 2}, {9, 9}), rng, 1.0f), 0u);
    EXPECT_EQ(cb.entries, before);
}

TEST(Reset, DeadCodeTakesABatchVector) {
    auto cb = book_from({0, 0, 1, 1, 2, 2}, 2);
    cb.usage = {2.0f, 0.1f, 5.0f};
    Rng rng(1);
    const Tensor<float> pool(Shape{3, 2}, {7, 8, 9, 10, 11, 12});
    EXPECT_EQ(codebook_reset<float>(cb, pool, rng, 1.0f), 1u);
    const std::set<std::pair<float, float>> members{{7, 8}, {9, 10}, {11, 12}};
    EXPECT_TRUE(members.count({cb.entries.at(1, 0), cb.entries.at(1, 1)}));
    EXPECT_EQ(cb.entries.at(0, 0), 0.0f);
    EXPECT_EQ(cb.entries.at(2, 0), 2.0f);
    EXPECT_THROW(codebook_reset<float>(cb, Tensor<float>(Shape{0, 2}), rng, 1.0f), VqError);
}

TEST(Reset, RateMatchesThresholdSemantics) {
    // Usage drawn uniformly on [0, 2): with threshold 0.5 a quarter of the
    // non-frozen codes should be replaced, and exactly those below it.
    Rng rng(9);
    std::size_t replaced = 0, expected = 0, total = 0;
    for (int trial = 0; trial < 50; ++trial) {
        Codebook<float> cb(64, 3, 0.99f, true, rng);
        for (auto& u : cb.usage) u = static_cast<float>(rng.uniform(0.0, 2.0));
        for (std::size_t k = 1; k < 64; ++k) expected += cb.usage[k] < 0.5f;
        total += 63;
        replaced += codebook_reset<float>(cb, random_rows(32, 3, rng), rng, 0.5f);
        for (std::size_t k = 0; k < 64; ++k) EXPECT_GE(cb.usage[k] + (k == 0 ? 1.0f : 0.0f), 0.5f);
    }
    EXPECT_EQ(replaced, expected);
    EXPECT_NEAR(double(replaced) / double(total), 0.25, 0.03);
}

TEST(Model, EncodeShape) {
    VqConfig cfg = tiny_config();
    VqModel<float> m(cfg, VqLayout::joint2d, 8, kGlobalFeatures, 1);
    std::vector<MotionGrid> grids{synth_motion(0, 64, 8, 1), synth_motion(1, 64, 8, 2)};
    Graph<float> g;
    Var<float> v = m.encode(g, g.constant(m.to_input(grids)));
    EXPECT_EQ(v.shape(), (Shape{2 * 16 * 9, 4}));
    EXPECT_TRUE(v.value().all_finite());
    const auto stacks = m.tokenize(grids);
    EXPECT_EQ(stacks[0].frames(), 16u);
    EXPECT_EQ(stacks[0].cols(), 9u);
    EXPECT_EQ(stacks[0].depth(), 3u);
}

TEST(Model, DecodeRoundTripShape) {
    VqModel<float> m(tiny_config(), VqLayout::joint2d, 5, kGlobalFeatures, 1);
    const MotionGrid src = synth_motion(2, 32, 5, 4);
    const MotionGrid rec = m.reconstruct(src);
    EXPECT_EQ(rec.frames, 32u);
    EXPECT_EQ(rec.joints, 5u);
    EXPECT_EQ(rec.global_dims, 11u);
    EXPECT_NO_THROW(rec.validate());
}

TEST(Model, PoseBaselineTokenShapeAndBudget) {
    VqConfig cfg = tiny_config();
    VqModel<float> two(cfg, VqLayout::joint2d, 8, kGlobalFeatures, 1);
    VqModel<float> one(cfg, VqLayout::pose1d, 8, kGlobalFeatures, 1);
    const std::vector<MotionGrid> grids{synth_motion(0, 64, 8, 1)};
    const auto stacks = one.tokenize(grids);
    EXPECT_EQ(stacks[0].frames(), 16u);
    EXPECT_EQ(stacks[0].cols(), 1u);
    EXPECT_EQ(one.codebook_parameters(), two.codebook_parameters());
    EXPECT_EQ(one.reconstruct(grids[0]).frames, 64u);
}

TEST(Model, InputRoundTripThroughNormalizer) {
    VqModel<float> m(tiny_config(), VqLayout::pose1d, 4, kGlobalFeatures, 1);
    std::vector<MotionGrid> grids{synth_motion(0, 16, 4, 1), synth_motion(3, 16, 4, 2)};
    m.fit_normalizer(grids);
    const auto back = m.to_grids(m.to_input(grids), grids);
    for (std::size_t b = 0; b < 2; ++b) {
        for (std::size_t i = 0; i < grids[b].joint_feats.size(); ++i)
            EXPECT_NEAR(back[b].joint_feats[i], grids[b].joint_feats[i], 1e-5);
        for (std::size_t i = 0; i < grids[b].global_feats.size(); ++i)
            EXPECT_NEAR(back[b].global_feats[i], grids[b].global_feats[i], 1e-5);
        EXPECT_EQ(back[b].label, grids[b].label);
    }
}

TEST(Model, RejectsBadClipLength) {
    VqModel<float> m(tiny_config(), VqLayout::joint2d, 4, kGlobalFeatures, 1);
    const std::vector<MotionGrid> grids{synth_motion(0, 18, 4, 1)};
    EXPECT_THROW(m.to_input(grids), VqError);
}

namespace {

// Finite differences over the input and every parameter of encode->decode.
double autoencoder_grad_error(VqLayout layout, std::size_t downscale, std::size_t frames) {
    VqConfig cfg;
    cfg.codes = 4;
    cfg.code_dim = 3;
    cfg.width = 3;
    cfg.residual_layers = 0;
    cfg.downscale = downscale;
    VqModel<double> m(cfg, layout, 2, kGlobalFeatures, 7);
    Rng rng(11);
    const std::vector<MotionGrid> grids{synth_motion(1, std::max<std::size_t>(frames, 4), 2, 3).cropped(frames)};
    Tensor<double> x = m.to_input(grids);
    Tensor<double> proj(x.shape());
    for (auto& v : proj.storage()) v = rng.normal();

    auto loss_of = [&](const Tensor<double>& input, bool backward, Tensor<double>* gx) {
        Graph<double> g;
        Var<double> xi = g.leaf(input);
        Var<double> v = m.encode(g, xi);
        Var<double> y = m.decode(g, v, 1, frames / downscale);
        Var<double> loss = ag::sum(ag::mul(y, g.constant(proj)));
        if (backward) {
            g.backward(loss);
            *gx = g.grad(xi.id);
        }
        return loss.value()[0];
    };
    m.params().zero_grad();
    Tensor<double> gx;
    loss_of(x, true, &gx);
    const double h = 1e-6;
    double worst = 0.0;
    auto check = [&](double analytic, double& slot, const Tensor<double>& input) {
        const double orig = slot;
        slot = orig + h;
        const double fp = loss_of(input, false, nullptr);
        slot = orig - h;
        const double fm = loss_of(input, false, nullptr);
        slot = orig;
        const double num = (fp - fm) / (2 * h);
        worst = std::max(worst, std::abs(analytic - num) / std::max({1.0, std::abs(analytic), std::abs(num)}));
    };
    for (std::size_t i = 0; i < x.size(); ++i) check(gx[i], x[i], x);
    for (auto& [name, p] : m.params().all()) {
        const Tensor<double> grad = p.grad;
        for (std::size_t i = 0; i < p.value.size(); ++i) check(grad[i], p.value[i], x);
    }
    return worst;
}

}  // namespace

TEST(Model, AutoencoderGradientTwoFrames) {
    EXPECT_LT(autoencoder_grad_error(VqLayout::joint2d, 2, 2), 1e-5);
}

TEST(Model, AutoencoderGradientDownscaleFour) {
    EXPECT_LT(autoencoder_grad_error(VqLayout::joint2d, 4, 4), 1e-5);
    EXPECT_LT(autoencoder_grad_error(VqLayout::pose1d, 4, 4), 1e-5);
}

TEST(VqLossTest, ZeroWhenPerfect) {
    Graph<float> g;
    const Tensor<float> target(Shape{2, 3}, 1.0f);
    const Tensor<float> vq(Shape{2, 2}, 0.5f);
    const auto l = vq_loss<float>(g.leaf(target), target, {}, g.leaf(vq), vq, 1.0f);
    EXPECT_EQ(l.total.value()[0], 0.0f);
}

TEST(VqLossTest, HandCaseAndAlphaLinearity) {
    Graph<float> g;
    const Tensor<float> target(Shape{2, 3}, 1.0f), recon(Shape{2, 3}, 1.5f);
    const Tensor<float> v(Shape{2, 2}, 1.0f), vq(Shape{2, 2}, 1.0f);
    EXPECT_FLOAT_EQ(vq_loss<float>(g.leaf(recon), target, {}, g.leaf(v), vq, 1.0f).total.value()[0], 0.5f);

    const Tensor<float> v2(Shape{2, 2}, 2.0f);
    const auto a1 = vq_loss<float>(g.leaf(recon), target, {}, g.leaf(v2), vq, 1.0f);
    const auto a2 = vq_loss<float>(g.leaf(recon), target, {}, g.leaf(v2), vq, 2.0f);
    EXPECT_FLOAT_EQ(a1.recon, a2.recon);
    EXPECT_FLOAT_EQ(a2.total.value()[0] - a2.recon, 2.0f * (a1.total.value()[0] - a1.recon));
    EXPECT_THROW(vq_loss<float>(g.leaf(recon), target, {}, g.leaf(v), vq, -1.0f), VqError);
}

TEST(VqLossTest, StraightThroughReachesEncoderSide) {
    Graph<double> g;
    Var<double> v = g.leaf(Tensor<double>(Shape{1, 2}, {0.2, 0.4}));
    const Tensor<double> q(Shape{1, 2}, {1.0, 1.0});
    Var<double> st = ag::straight_through(v, q);
    EXPECT_EQ(st.value(), q);
    const auto l = vq_loss<double>(st, Tensor<double>(Shape{1, 2}, {0.0, 0.0}), {}, v, q, 0.0);
    g.backward(l.total);
    EXPECT_DOUBLE_EQ(g.grad(v.id)[0], 0.5);
}

TEST(Checkpoint, ModelRoundTripForwardsIdentically) {
    VqModel<float> m(tiny_config(), VqLayout::joint2d, 4, kGlobalFeatures, 3);
    std::vector<MotionGrid> grids{synth_motion(0, 16, 4, 1)};
    m.fit_normalizer(grids);
    const auto path = std::filesystem::temp_directory_path() / "stm_test_vq" / "m.stck";
    save_checkpoint(m.to_checkpoint(), path);
    const auto loaded = VqModel<float>::from_checkpoint(load_checkpoint(path));
    EXPECT_EQ(loaded.tokenize(grids), m.tokenize(grids));
    EXPECT_EQ(loaded.reconstruct(grids[0]), m.reconstruct(grids[0]));
    EXPECT_EQ(loaded.config().codes, 8u);
}

TEST(Checkpoint, BadMagicAndTruncation) {
    Checkpoint ck;
    ck.tensors.emplace("a", Tensor<float>(Shape{2}, {1.0f, 2.0f}));
    auto bytes = encode_checkpoint(ck);
    EXPECT_EQ(decode_checkpoint(bytes).tensor("a"), ck.tensor("a"));
    auto bad = bytes;
    bad[1] = 'X';
    EXPECT_THROW(decode_checkpoint(bad), FormatError);
    bytes.pop_back();
    EXPECT_THROW(decode_checkpoint(bytes), FormatError);
}

TEST(Config, RejectsUnknownKeys) {
    EXPECT_THROW(nlohmann::json({{"codez", 3}}).get<VqConfig>(), ConfigError);
    EXPECT_THROW(nlohmann::json({{"alpha", -1.0}}).get<VqConfig>(), ConfigError);
    const VqConfig c = nlohmann::json({{"codes", 64}}).get<VqConfig>();
    EXPECT_EQ(c.codes, 64u);
    EXPECT_EQ(c.code_dim, 1024u);
    EXPECT_EQ(nlohmann::json(c).get<VqConfig>().codes, 64u);
}
