#include "stm/numerics/optim.hpp"
#include "stm/transformer/transformer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using namespace stm;

namespace {

Tensor<double> randn(std::size_t r, std::size_t c, Rng& rng) {
    Tensor<double> t(Shape{r, c});
    for (auto& v : t.storage()) v = rng.normal();
    return t;
}

Tensor<double> linear_ref(const Tensor<double>& x, const nn::Linear<double>& l) {
    const auto& w = l.weight->value;
    Tensor<double> y(Shape{x.rows(), w.dim(1)});
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t o = 0; o < w.dim(1); ++o) {
            double s = l.bias ? l.bias->value[o] : 0.0;
            for (std::size_t k = 0; k < w.dim(0); ++k) s += x.at(i, k) * w.at(k, o);
            y.at(i, o) = s;
        }
    return y;
}

// Per-sequence, per-head loop over an explicit list of row groups.
Tensor<double> attention_ref(const SelfAttention<double>& a, const Tensor<double>& x,
                             const std::vector<std::vector<std::size_t>>& groups, const Tensor<double>* bias) {
    const Tensor<double> q = linear_ref(x, a.q), k = linear_ref(x, a.k), v = linear_ref(x, a.v);
    const std::size_t d = x.cols(), dh = d / a.heads;
    Tensor<double> mixed(Shape{x.rows(), d});
    for (const auto& rows : groups)
        for (std::size_t h = 0; h < a.heads; ++h)
            for (std::size_t i = 0; i < rows.size(); ++i) {
                std::vector<double> s(rows.size());
                double mx = -1e300;
                for (std::size_t j = 0; j < rows.size(); ++j) {
                    double dot = 0;
                    for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) dot += q.at(rows[i], c) * k.at(rows[j], c);
                    s[j] = dot / std::sqrt(double(dh)) + (bias ? bias->at(i, j) : 0.0);
                    mx = std::max(mx, s[j]);
                }
                double z = 0;
                for (auto& e : s) z += (e = std::exp(e - mx));
                for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) {
                    double acc = 0;
                    for (std::size_t j = 0; j < rows.size(); ++j) acc += s[j] / z * v.at(rows[j], c);
                    mixed.at(rows[i], c) = acc;
                }
            }
    return linear_ref(mixed, a.o);
}

double max_diff(const Tensor<double>& a, const Tensor<double>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

TransformerConfig tiny(std::size_t d = 16, std::size_t heads = 2, std::size_t layers = 1) {
    TransformerConfig c;
    c.layers = layers;
    c.heads = heads;
    c.d_model = d;
    c.ffn_mult = 2;
    c.dropout = 0.0;
    c.d_text = 6;
    return c;
}

TokenMap random_map(std::size_t t, std::size_t j, std::size_t codes, Rng& rng) {
    TokenMap m(t, j);
    for (auto& id : m.ids) id = static_cast<std::int32_t>(rng.index(codes));
    return m;
}

template <class T>
Tensor<T> random_cond(std::size_t b, std::size_t d, Rng& rng) {
    Tensor<T> c(Shape{b, d});
    for (auto& v : c.storage()) v = static_cast<T>(rng.normal());
    return c;
}

}  // namespace

TEST(PositionEncoding, EndpointsAndRange) {
    const auto p = pos_encode_2d<double>(5, 3, 8);
    EXPECT_EQ(p.rows(), 15u);
    EXPECT_EQ(p.at(0, 0), 0.0);
    EXPECT_EQ(p.at(0, 1), 1.0);
    EXPECT_EQ(p.at(0, 4), 0.0);
    EXPECT_EQ(p.at(0, 5), 1.0);
    for (double v : p.storage()) EXPECT_LE(std::abs(v), 1.0);
    EXPECT_THROW(pos_encode_2d<double>(2, 2, 7), TransformerError);
}

TEST(PositionEncoding, HalvesDependOnOneAxis) {
    const auto p = pos_encode_2d<double>(6, 4, 12);
    for (std::size_t t = 0; t < 6; ++t)
        for (std::size_t j = 0; j < 4; ++j)
            for (std::size_t c = 0; c < 12; ++c) {
                if (c < 6)
                    EXPECT_EQ(p.at(t * 4 + j, c), p.at(t * 4, c));
                else
                    EXPECT_EQ(p.at(t * 4 + j, c), p.at(j, c));
            }
    EXPECT_NE(p.at(1 * 4 + 0, 0), p.at(0 * 4 + 1, 0));
}

TEST(PositionEncoding, AllRowsDistinctAtPaperSize) {
    const auto p = pos_encode_2d<float>(16, 9, 384);
    std::set<std::vector<float>> rows;
    for (std::size_t r = 0; r < p.rows(); ++r)
        rows.insert(std::vector<float>(p.data().begin() + r * 384, p.data().begin() + (r + 1) * 384));
    EXPECT_EQ(rows.size(), 144u);
}

TEST(Attention, SpatialTemporalMatchesOracle) {
    for (bool with_bias : {false, true}) {
        Rng rng(1);
        ParamStore<double> ps;
        SelfAttention<double> a(ps, "a", 8, 2, rng);
        const std::size_t batch = 2, tp = 3, jp = 2, cells = tp * jp;
        const auto cond = randn(batch, 8, rng), motion = randn(batch * cells, 8, rng);
        Tensor<double> bias;
        if (with_bias) {
            Tensor<double> rows(Shape{cells + 1, 8});
            const auto p = pos_encode_2d<double>(tp, jp, 8);
            std::copy(p.data().begin(), p.data().end(), rows.data().begin() + 8);
            bias = position_bias(rows);
        }
        Graph<double> g;
        auto [c, m] = attn_spatial_temporal(g, a, g.constant(cond), g.constant(motion), batch, cells,
                                            with_bias ? &bias : nullptr);
        // Oracle works on the sample-major [c_b; m_b] layout.
        Tensor<double> x(Shape{batch * (cells + 1), 8});
        std::vector<std::vector<std::size_t>> groups(batch);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i <= cells; ++i) {
                const std::size_t r = b * (cells + 1) + i;
                groups[b].push_back(r);
                for (std::size_t k = 0; k < 8; ++k)
                    x.at(r, k) = i == 0 ? cond.at(b, k) : motion.at(b * cells + i - 1, k);
            }
        const auto ref = attention_ref(a, x, groups, with_bias ? &bias : nullptr);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t k = 0; k < 8; ++k) {
                EXPECT_NEAR(c.value().at(b, k), ref.at(b * (cells + 1), k), 1e-5);
                for (std::size_t i = 0; i < cells; ++i)
                    EXPECT_NEAR(m.value().at(b * cells + i, k), ref.at(b * (cells + 1) + 1 + i, k), 1e-5);
            }
    }
}

TEST(Attention, JointSpatialAndTemporalMatchOracle) {
    Rng rng(2);
    ParamStore<double> ps;
    SelfAttention<double> a(ps, "a", 6, 3, rng);
    const std::size_t batch = 2, tp = 4, jp = 3;
    const auto x = randn(batch * tp * jp, 6, rng);
    Graph<double> g;
    const auto js = attn_joint_spatial(g, a, g.constant(x), batch, tp, jp).value();
    const auto jt = attn_joint_temporal(g, a, g.constant(x), batch, tp, jp).value();
    std::vector<std::vector<std::size_t>> frames, joints;
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t < tp; ++t) {
            frames.emplace_back();
            for (std::size_t j = 0; j < jp; ++j) frames.back().push_back((b * tp + t) * jp + j);
        }
        for (std::size_t j = 0; j < jp; ++j) {
            joints.emplace_back();
            for (std::size_t t = 0; t < tp; ++t) joints.back().push_back((b * tp + t) * jp + j);
        }
    }
    EXPECT_LT(max_diff(js, attention_ref(a, x, frames, nullptr)), 1e-5);
    EXPECT_LT(max_diff(jt, attention_ref(a, x, joints, nullptr)), 1e-5);
}

TEST(Attention, IdentityValuesAndUniformLogitsGiveMean) {
    Rng rng(3);
    ParamStore<double> ps;
    SelfAttention<double> a(ps, "a", 4, 1, rng);
    a.q.weight->value.fill(0.0);
    a.q.bias->value.fill(0.0);
    for (auto* l : {&a.v, &a.o}) {
        l->weight->value.fill(0.0);
        l->bias->value.fill(0.0);
        for (std::size_t i = 0; i < 4; ++i) l->weight->value.at(i, i) = 1.0;
    }
    const auto x = randn(5, 4, rng);
    Graph<double> g;
    const auto y = a(g, g.constant(x), 1, 5).value();
    for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t c = 0; c < 4; ++c) {
            double mean = 0;
            for (std::size_t i = 0; i < 5; ++i) mean += x.at(i, c) / 5;
            EXPECT_NEAR(y.at(r, c), mean, 1e-12);
        }
}

TEST(Attention, SingleMotionTokenIsConvexMixOfTwoValues) {
    Rng rng(4);
    ParamStore<double> ps;
    SelfAttention<double> a(ps, "a", 2, 1, rng);
    for (auto* l : {&a.v, &a.o}) {
        l->weight->value = Tensor<double>(Shape{2, 2}, {1, 0, 0, 1});
        l->bias->value.fill(0.0);
    }
    const Tensor<double> c(Shape{1, 2}, {1.0, -2.0}), m(Shape{1, 2}, {3.0, 4.0});
    Graph<double> g;
    auto [yc, ym] = attn_spatial_temporal(g, a, g.constant(c), g.constant(m), 1, 1);
    for (const auto& y : {yc.value(), ym.value()}) {
        const double w = (y[0] - 3.0) / (1.0 - 3.0);
        EXPECT_GE(w, 0.0);
        EXPECT_LE(w, 1.0);
        EXPECT_NEAR(y[1], w * -2.0 + (1 - w) * 4.0, 1e-12);
    }
}

TEST(Attention, DegenerateAxesReduceToValueProjection) {
    Rng rng(5);
    ParamStore<double> ps;
    SelfAttention<double> a(ps, "a", 4, 2, rng);
    const auto x = randn(6, 4, rng);
    const auto expect = linear_ref(linear_ref(x, a.v), a.o);
    Graph<double> g;
    EXPECT_LT(max_diff(attn_joint_spatial(g, a, g.constant(x), 2, 3, 1).value(), expect), 1e-12);
    EXPECT_LT(max_diff(attn_joint_temporal(g, a, g.constant(x), 2, 1, 3).value(), expect), 1e-12);
}

TEST(Attention, EquivariantToFrameAndJointPermutation) {
    Rng rng(6);
    ParamStore<float> ps;
    SelfAttention<float> a(ps, "a", 8, 2, rng);
    const std::size_t tp = 5, jp = 4;
    Tensor<float> x(Shape{tp * jp, 8});
    for (auto& v : x.storage()) v = static_cast<float>(rng.normal());
    const std::vector<std::size_t> pt{3, 0, 4, 1, 2}, pj{2, 3, 1, 0};
    Tensor<float> xt(x.shape()), xj(x.shape());
    for (std::size_t t = 0; t < tp; ++t)
        for (std::size_t j = 0; j < jp; ++j)
            for (std::size_t c = 0; c < 8; ++c) {
                xt.at(t * jp + j, c) = x.at(pt[t] * jp + j, c);
                xj.at(t * jp + j, c) = x.at(t * jp + pj[j], c);
            }
    Graph<float> g;
    const auto js = attn_joint_spatial(g, a, g.constant(x), 1, tp, jp).value();
    const auto js_p = attn_joint_spatial(g, a, g.constant(xt), 1, tp, jp).value();
    const auto jt = attn_joint_temporal(g, a, g.constant(x), 1, tp, jp).value();
    const auto jt_p = attn_joint_temporal(g, a, g.constant(xj), 1, tp, jp).value();
    for (std::size_t t = 0; t < tp; ++t)
        for (std::size_t j = 0; j < jp; ++j)
            for (std::size_t c = 0; c < 8; ++c) {
                EXPECT_EQ(js_p.at(t * jp + j, c), js.at(pt[t] * jp + j, c));
                EXPECT_EQ(jt_p.at(t * jp + j, c), jt.at(t * jp + pj[j], c));
            }
}

TEST(Attention, SoftmaxRowsSumToOne) {
    Rng rng(7);
    ParamStore<float> ps;
    SelfAttention<float> a(ps, "a", 8, 4, rng);
    Tensor<float> x(Shape{3 * 7, 8});
    for (auto& v : x.storage()) v = static_cast<float>(3 * rng.normal());
    Graph<float> g;
    std::vector<float> probs;
    a(g, g.constant(x), 3, 7, nullptr, &probs);
    ASSERT_EQ(probs.size(), 3u * 4 * 7 * 7);
    for (std::size_t r = 0; r < probs.size() / 7; ++r) {
        double s = 0;
        for (std::size_t c = 0; c < 7; ++c) s += probs[r * 7 + c];
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Attention, LengthMismatchThrows) {
    Rng rng(8);
    ParamStore<float> ps;
    SelfAttention<float> a(ps, "a", 4, 2, rng);
    Graph<float> g;
    Var<float> c = g.constant(Tensor<float>(Shape{2, 4})), m = g.constant(Tensor<float>(Shape{7, 4}));
    EXPECT_THROW(attn_spatial_temporal(g, a, c, m, 2, 4), TransformerError);
    EXPECT_THROW(attn_joint_spatial(g, a, m, 1, 2, 4), TransformerError);
    EXPECT_THROW(SelfAttention<float>(ps, "b", 6, 4, rng), TransformerError);
}

TEST(MaskTransformerTest, ShapeAndDeterminism) {
    TransformerConfig cfg = tiny(16, 2, 1);
    MaskTransformer<float> m(cfg, 256, 1);
    Rng rng(9);
    const std::vector<TokenMap> tok{random_map(16, 9, 258, rng)};
    const auto cond = random_cond<float>(1, 6, rng);
    const std::vector<std::uint8_t> un{0};
    Graph<float> g1, g2;
    const auto a = m.forward(g1, tok, cond, un).value();
    const auto b = m.forward(g2, tok, cond, un).value();
    EXPECT_EQ(a.shape(), (Shape{144, 256}));
    EXPECT_TRUE(a.all_finite());
    EXPECT_EQ(a, b);
}

TEST(MaskTransformerTest, RejectsOutOfVocabTokens) {
    MaskTransformer<float> m(tiny(), 8, 1);
    std::vector<TokenMap> tok{TokenMap(2, 2, 10)};
    Graph<float> g;
    const std::vector<std::uint8_t> un{0};
    EXPECT_THROW(m.forward(g, tok, Tensor<float>(Shape{1, 6}), un), TransformerError);
    tok[0].ids[0] = -1;
    EXPECT_THROW(m.forward(g, tok, Tensor<float>(Shape{1, 6}), un), TransformerError);
}

TEST(MaskTransformerTest, EachAttentionAffectsOutput) {
    MaskTransformer<double> m(tiny(8, 2, 1), 6, 2);
    Rng rng(10);
    const std::vector<TokenMap> tok{random_map(3, 3, 8, rng)};
    const auto cond = random_cond<double>(1, 6, rng);
    const std::vector<std::uint8_t> un{0};
    auto run = [&](BlockAttentions on) {
        Graph<double> g;
        return m.forward(g, tok, cond, un, nullptr, on).value();
    };
    const auto full = run({});
    EXPECT_GT(max_diff(full, run({false, true, true})), 1e-6);
    EXPECT_GT(max_diff(full, run({true, false, true})), 1e-6);
    EXPECT_GT(max_diff(full, run({true, true, false})), 1e-6);
}

TEST(MaskTransformerTest, ConditionAndNullTokenMatter) {
    MaskTransformer<double> m(tiny(8, 2, 1), 6, 3);
    Rng rng(11);
    const std::vector<TokenMap> tok{random_map(2, 3, 8, rng), random_map(2, 3, 8, rng)};
    const auto cond = random_cond<double>(2, 6, rng);
    auto run = [&](std::vector<std::uint8_t> un, const Tensor<double>& c) {
        Graph<double> g;
        return m.forward(g, tok, c, un).value();
    };
    EXPECT_GT(max_diff(run({0, 0}, cond), run({1, 1}, cond)), 1e-9);
    // Unconditional rows ignore the condition vector.
    EXPECT_EQ(run({1, 1}, cond), run({1, 1}, random_cond<double>(2, 6, rng)));
}

TEST(MaskTransformerTest, PositionBiasModeRuns) {
    TransformerConfig cfg = tiny(8, 2, 1);
    cfg.pos_bias = true;
    MaskTransformer<double> biased(cfg, 6, 4);
    cfg.pos_bias = false;
    MaskTransformer<double> plain(cfg, 6, 4);
    Rng rng(12);
    const std::vector<TokenMap> tok{random_map(3, 2, 8, rng)};
    const auto cond = random_cond<double>(1, 6, rng);
    const std::vector<std::uint8_t> un{0};
    Graph<double> g;
    const auto a = biased.forward(g, tok, cond, un).value(), b = plain.forward(g, tok, cond, un).value();
    EXPECT_TRUE(a.all_finite());
    EXPECT_GT(max_diff(a, b), 1e-9);
}

TEST(MaskTransformerTest, CheckpointRoundTrip) {
    MaskTransformer<float> m(tiny(), 12, 5);
    const auto back = MaskTransformer<float>::from_checkpoint(decode_checkpoint(encode_checkpoint(m.to_checkpoint())));
    Rng rng(13);
    const std::vector<TokenMap> tok{random_map(4, 3, 14, rng)};
    const auto cond = random_cond<float>(1, 6, rng);
    const std::vector<std::uint8_t> un{0};
    Graph<float> g;
    EXPECT_EQ(m.forward(g, tok, cond, un).value(), back.forward(g, tok, cond, un).value());
    EXPECT_EQ(back.codes(), 12u);
}

TEST(ResidualTransformerTest, LayerIndexContract) {
    ResidualTransformer<double> r(tiny(8, 2, 1), 6, 3, 1);
    Rng rng(14);
    TokenStack s;
    for (int l = 0; l < 3; ++l) s.layers.push_back(random_map(3, 2, 6, rng));
    const std::vector<TokenStack> st{s};
    const auto cond = random_cond<double>(1, 6, rng);
    const std::vector<std::uint8_t> un{0};
    Graph<double> g;
    EXPECT_THROW(r.forward(g, st, 0, cond, un), TransformerError);
    EXPECT_THROW(r.forward(g, st, 4, cond, un), TransformerError);
    const auto l1 = r.forward(g, st, 1, cond, un).value();
    const auto l2 = r.forward(g, st, 2, cond, un).value();
    EXPECT_EQ(l1.shape(), (Shape{6, 6}));
    EXPECT_GT(max_diff(l1, l2), 1e-9);
    // Layer 2 logits depend on layer 1 tokens.
    std::vector<TokenStack> st2 = st;
    st2[0].layers[1].ids[0] = (st2[0].layers[1].ids[0] + 1) % 6;
    EXPECT_GT(max_diff(l2, r.forward(g, st2, 2, cond, un).value()), 1e-9);
    st2[0].layers.resize(1);
    EXPECT_THROW(r.forward(g, st2, 2, cond, un), TransformerError);
}

TEST(ResidualTransformerTest, CheckpointRoundTrip) {
    ResidualTransformer<float> r(tiny(), 10, 2, 6);
    const auto back = ResidualTransformer<float>::from_checkpoint(decode_checkpoint(encode_checkpoint(r.to_checkpoint())));
    Rng rng(15);
    TokenStack s;
    for (int l = 0; l < 2; ++l) s.layers.push_back(random_map(2, 3, 10, rng));
    const std::vector<TokenStack> st{s};
    const auto cond = random_cond<float>(1, 6, rng);
    const std::vector<std::uint8_t> un{1};
    Graph<float> g;
    EXPECT_EQ(r.forward(g, st, 2, cond, un).value(), back.forward(g, st, 2, cond, un).value());
    EXPECT_EQ(back.residual_layers(), 2u);
}

TEST(MaskLoss, UniformLogitsGiveLogC) {
    const std::size_t c = 256;
    Graph<double> g;
    Var<double> logits = g.constant(Tensor<double>(Shape{6, c}, 0.7));
    TokenMap t(2, 3, 5);
    MaskPlan p(2, 3);
    p.select(1, MaskStage::spatial);
    p.select(4, MaskStage::spatial);
    EXPECT_NEAR(mask_loss(logits, t, p).value()[0], std::log(double(c)), 1e-12);
}

TEST(MaskLoss, ConfidentLogitsNearZero) {
    Graph<double> g;
    Tensor<double> l(Shape{4, 8});
    TokenMap t(2, 2);
    for (std::size_t i = 0; i < 4; ++i) {
        t.ids[i] = std::int32_t(i + 1);
        l.at(i, i + 1) = 20.0;
    }
    MaskPlan p(2, 2);
    for (std::size_t i = 0; i < 4; ++i) p.select(i, MaskStage::temporal);
    EXPECT_LT(mask_loss(g.constant(l), t, p).value()[0], 1e-6);
}

TEST(MaskLoss, UnselectedCellsIgnored) {
    Rng rng(16);
    Tensor<double> l = randn(6, 5, rng);
    TokenMap t(3, 2, 2);
    MaskPlan p(3, 2);
    p.select(2, MaskStage::spatial);
    Graph<double> g;
    const double before = mask_loss(g.constant(l), t, p).value()[0];
    for (std::size_t c = 0; c < 5; ++c) {
        l.at(0, c) += 100 * rng.normal();
        l.at(5, c) -= 50;
    }
    EXPECT_EQ(mask_loss(g.constant(l), t, p).value()[0], before);
    EXPECT_THROW(mask_loss(g.constant(l), t, MaskPlan(3, 2)), TransformerError);
    try {
        mask_loss(g.constant(l), t, MaskPlan(3, 2));
    } catch (const TransformerError& e) {
        EXPECT_STREQ(e.what(), "no masked positions");
    }
}

TEST(TransformerConfigTest, StrictJson) {
    TransformerConfig c = nlohmann::json{{"layers", 2}, {"d_model", 64}, {"heads", 4}}.get<TransformerConfig>();
    EXPECT_EQ(c.layers, 2u);
    EXPECT_EQ(c.d_model, 64u);
    const nlohmann::json round = c;
    EXPECT_EQ(round.get<TransformerConfig>().heads, 4u);
    EXPECT_THROW((nlohmann::json{{"layer", 2}}.get<TransformerConfig>()), ConfigError);
    EXPECT_THROW((nlohmann::json{{"d_model", 30}, {"heads", 4}}.get<TransformerConfig>()), ConfigError);
    const TransformerConfig d;
    EXPECT_EQ(d.layers, 6u);
    EXPECT_EQ(d.heads, 6u);
    EXPECT_EQ(d.d_model, 384u);
    EXPECT_EQ(d.uncond_prob, 0.1);
}

namespace {

// Finite differences over every parameter of a one-block model on a 2x2 map.
template <class Model, class Forward>
double model_grad_error(Model& m, Forward fwd) {
    auto loss_of = [&](bool backward) {
        Graph<double> g;
        Var<double> loss = fwd(g);
        if (backward) g.backward(loss);
        return loss.value()[0];
    };
    m.params().zero_grad();
    loss_of(true);
    const double h = 1e-6;
    double worst = 0;
    for (auto& [name, p] : m.params().all()) {
        const Tensor<double> grad = p.grad;
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double orig = p.value[i];
            p.value[i] = orig + h;
            const double fp = loss_of(false);
            p.value[i] = orig - h;
            const double fm = loss_of(false);
            p.value[i] = orig;
            const double num = (fp - fm) / (2 * h);
            worst = std::max(worst, std::abs(grad[i] - num) / std::max({1.0, std::abs(grad[i]), std::abs(num)}));
        }
    }
    return worst;
}

}  // namespace

TEST(TransformerGradient, MaskModelTwoByTwo) {
    for (bool bias : {false, true}) {
        TransformerConfig cfg = tiny(4, 2, 1);
        cfg.d_text = 3;
        cfg.pos_bias = bias;
        MaskTransformer<double> m(cfg, 5, 21);
        Rng rng(17);
        const std::vector<TokenMap> tok{TokenMap(2, 2, 5), random_map(2, 2, 5, rng)};
        const std::vector<TokenMap> target{random_map(2, 2, 5, rng), random_map(2, 2, 5, rng)};
        std::vector<MaskPlan> plans(2, MaskPlan(2, 2));
        for (auto& p : plans)
            for (std::size_t i = 0; i < 4; ++i) p.select(i, MaskStage::temporal);
        const auto cond = random_cond<double>(2, 3, rng);
        const std::vector<std::uint8_t> un{0, 1};
        const double err = model_grad_error(m, [&](Graph<double>& g) {
            return mask_loss(m.forward(g, tok, cond, un), std::span<const TokenMap>(target),
                             std::span<const MaskPlan>(plans));
        });
        EXPECT_LT(err, 1e-5) << "bias mode " << bias;
    }
}

TEST(TransformerGradient, ResidualModelTwoByTwo) {
    TransformerConfig cfg = tiny(4, 2, 1);
    cfg.d_text = 3;
    ResidualTransformer<double> m(cfg, 5, 2, 22);
    Rng rng(18);
    TokenStack s;
    for (int l = 0; l < 3; ++l) s.layers.push_back(random_map(2, 2, 5, rng));
    const std::vector<TokenStack> st{s};
    MaskPlan all(2, 2);
    for (std::size_t i = 0; i < 4; ++i) all.select(i, MaskStage::temporal);
    const auto cond = random_cond<double>(1, 3, rng);
    const std::vector<std::uint8_t> un{0};
    const double err = model_grad_error(
        m, [&](Graph<double>& g) { return mask_loss(m.forward(g, st, 2, cond, un), s.layers[2], all); });
    EXPECT_LT(err, 1e-5);
}

TEST(TransformerTraining, MaskModelOverfitsOneBatch) {
    TransformerConfig cfg = tiny(32, 4, 2);
    MaskTransformer<float> m(cfg, 16, 3);
    Rng rng(19);
    std::vector<TokenMap> target, input;
    std::vector<MaskPlan> plans;
    for (int b = 0; b < 2; ++b) {
        target.push_back(random_map(4, 3, 16, rng));
        plans.push_back(spatial_mask(temporal_mask(4, 3, 0.4, {}, rng), 0.5, rng));
        input.push_back(corrupt(target.back(), plans.back(), 16, rng));
    }
    const auto cond = random_cond<float>(2, 6, rng);
    const std::vector<std::uint8_t> un{0, 0};
    Adam<float> opt(AdamConfig{2e-3, 0.9, 0.999, 1e-8, 0.0});
    float loss = 0;
    for (int step = 0; step < 300; ++step) {
        Graph<float> g;
        Var<float> l = mask_loss(m.forward(g, input, cond, un), std::span<const TokenMap>(target),
                                 std::span<const MaskPlan>(plans));
        loss = l.value()[0];
        g.backward(l);
        opt.step(m.params());
    }
    EXPECT_LT(loss, 0.1);
}

TEST(TransformerTraining, ResidualModelOverfitsOneBatch) {
    TransformerConfig cfg = tiny(32, 4, 2);
    ResidualTransformer<float> m(cfg, 16, 2, 4);
    Rng rng(20);
    TokenStack s;
    for (int l = 0; l < 3; ++l) s.layers.push_back(random_map(4, 3, 16, rng));
    const std::vector<TokenStack> st{s};
    MaskPlan all(4, 3);
    for (std::size_t i = 0; i < 12; ++i) all.select(i, MaskStage::temporal);
    const auto cond = random_cond<float>(1, 6, rng);
    const std::vector<std::uint8_t> un{0};
    Adam<float> opt(AdamConfig{2e-3, 0.9, 0.999, 1e-8, 0.0});
    float loss = 0;
    for (int step = 0; step < 300; ++step) {
        Graph<float> g;
        const std::size_t l = 1 + step % 2;
        Var<float> lv = mask_loss(m.forward(g, st, l, cond, un), s.layers[l], all);
        if (step >= 298) loss = std::max(loss, lv.value()[0]);
        g.backward(lv);
        opt.step(m.params());
    }
    EXPECT_LT(loss, 0.1);
}
