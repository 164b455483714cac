#include "stm/motion/condition.hpp"
#include "stm/motion/mgrd_io.hpp"
#include "stm/motion/synth.hpp"

#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <complex>
#include <filesystem>

using namespace stm;

namespace {

std::filesystem::path temp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "stm_test_motion";
    std::filesystem::create_directories(dir);
    return dir / name;
}

std::vector<float> random_flat(std::size_t rows, std::size_t dims, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<float> v(rows * dims);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return v;
}

MotionGrid random_grid(std::size_t t, std::size_t j, std::uint64_t seed) {
    Rng rng(seed);
    MotionGrid g(t, j);
    for (auto& x : g.joint_feats) x = static_cast<float>(rng.normal());
    for (auto& x : g.global_feats) x = static_cast<float>(rng.uniform());
    g.label = 3;
    return g;
}

// Frequency (Hz) of the largest non-DC bin of a plain DFT.
double dominant_frequency(const std::vector<double>& x, double fps) {
    const std::size_t n = x.size();
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= double(n);
    std::size_t best = 1;
    double best_mag = -1.0;
    for (std::size_t k = 1; k <= n / 2; ++k) {
        std::complex<double> s{0.0, 0.0};
        for (std::size_t t = 0; t < n; ++t)
            s += (x[t] - mean) * std::polar(1.0, -2.0 * synth::kPi * double(k * t) / double(n));
        if (std::abs(s) > best_mag) {
            best_mag = std::abs(s);
            best = k;
        }
    }
    return double(best) * fps / double(n);
}

double mean_dominant_frequency(std::size_t cls) {
    double total = 0.0;
    std::size_t count = 0;
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        const MotionGrid g = synth_motion(cls, 64, 8, seed);
        for (std::size_t j = 1; j < g.joints; ++j) {
            std::vector<double> x(g.frames);
            for (std::size_t t = 0; t < g.frames; ++t) x[t] = g.joint(t, j, 0);
            total += dominant_frequency(x, g.fps);
            ++count;
        }
    }
    return total / double(count);
}

}  // namespace

TEST(Regroup, DimensionBookkeeping) {
    for (auto [d, j] : {std::pair<std::size_t, std::size_t>{263, 21}, {251, 20}}) {
        EXPECT_EQ(d, kGlobalFeatures + kJointFeatures * j);
        const MotionGrid g = regroup_flat(random_flat(3, d, d), d);
        EXPECT_EQ(g.joints, j);
        EXPECT_EQ(g.global_dims, 11u);
        EXPECT_EQ(g.frames, 3u);
    }
}

TEST(Regroup, UnknownLayout) {
    try {
        regroup_flat(random_flat(2, 100, 1), 100);
        FAIL();
    } catch (const MotionError& e) {
        EXPECT_NE(std::string(e.what()).find("unknown layout"), std::string::npos);
    }
}

TEST(Regroup, NonFinite) {
    auto v = random_flat(2, 263, 1);
    v[17] = std::numeric_limits<float>::quiet_NaN();
    EXPECT_THROW(regroup_flat(v, 263), MotionError);
}

TEST(Regroup, RoundTripBitExact) {
    for (std::size_t d : {263u, 251u}) {
        const auto v = random_flat(7, d, 42 + d);
        const auto back = flatten_grid(regroup_flat(v, d));
        ASSERT_EQ(back.size(), v.size());
        for (std::size_t i = 0; i < v.size(); ++i)
            EXPECT_EQ(std::bit_cast<std::uint32_t>(back[i]), std::bit_cast<std::uint32_t>(v[i]));
    }
}

TEST(Regroup, FieldPlacement) {
    // Fill each flat slot with its own index and check where it lands.
    std::vector<float> v(263);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = float(i);
    const MotionGrid g = regroup_flat(v, 263);
    EXPECT_EQ(g.global(0, 0), 0.0f);
    EXPECT_EQ(g.global(0, 3), 3.0f);
    EXPECT_EQ(g.joint(0, 0, 0), 4.0f);
    EXPECT_EQ(g.joint(0, 20, 2), 4.0f + 62.0f);
    EXPECT_EQ(g.joint(0, 0, 3), 67.0f);
    EXPECT_EQ(g.global(0, 4), 193.0f);
    EXPECT_EQ(g.joint(0, 0, 9), 196.0f);
    EXPECT_EQ(g.joint(0, 20, 11), 258.0f);
    EXPECT_EQ(g.global(0, 7), 259.0f);
    EXPECT_EQ(g.global(0, 10), 262.0f);
}

TEST(Synth, Deterministic) {
    EXPECT_EQ(synth_motion(2, 32, 8, 11), synth_motion(2, 32, 8, 11));
    EXPECT_FALSE(synth_motion(2, 32, 8, 11) == synth_motion(2, 32, 8, 12));
}

TEST(Synth, VelocityIsFirstDifference) {
    const MotionGrid g = synth_motion(1, 40, 8, 5);
    for (std::size_t t = 1; t < g.frames; ++t)
        for (std::size_t j = 0; j < g.joints; ++j)
            for (std::size_t k = 0; k < 3; ++k)
                EXPECT_NEAR(g.joint(t, j, 9 + k), g.joint(t, j, k) - g.joint(t - 1, j, k), 1e-6);
}

TEST(Synth, PassesInvariantsAllClasses) {
    for (std::size_t c = 0; c < 4; ++c)
        for (std::uint64_t s = 0; s < 10; ++s) {
            const MotionGrid g = synth_motion(c, 64, 8, s);
            EXPECT_NO_THROW(g.validate());
            EXPECT_EQ(g.label, c);
        }
    EXPECT_NO_THROW(synth_motion(0, 4, 1, 0).validate());
}

TEST(Synth, DominantFrequencySeparatesClasses) {
    const double f0 = mean_dominant_frequency(0), f1 = mean_dominant_frequency(1);
    EXPECT_GT(f1, 2.0 * f0) << f0 << " " << f1;
}

TEST(Synth, Errors) {
    EXPECT_THROW(synth_motion(0, 64, 8, 0, kLabelCapacity + 1), MotionError);
    EXPECT_THROW(synth_motion(4, 64, 8, 0, 4), MotionError);
    EXPECT_THROW(synth_motion(0, 3, 8, 0), MotionError);
}

TEST(Synth, DatasetBalanced) {
    SynthConfig cfg;
    cfg.train_clips = 8;
    cfg.eval_clips = 4;
    const auto ds = synth_dataset(cfg);
    ASSERT_EQ(ds.train.size(), 8u);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(ds.train[i].label, i % 4);
    EXPECT_FALSE(ds.train[0] == ds.eval[0]);
}

TEST(Condition, LabelTableUnitRows) {
    LabelTable table;
    EXPECT_EQ(table.dim(), 512u);
    for (std::size_t l = 0; l < 8; ++l) {
        const auto c = table(l);
        double sq = 0;
        for (float v : c.vector) sq += double(v) * v;
        EXPECT_NEAR(sq, 1.0, 1e-5);
        EXPECT_EQ(c.source, ConditionEmbedding::Source::label_table);
    }
    EXPECT_THROW(table(kLabelCapacity), MotionError);
    EXPECT_EQ(LabelTable()(3).vector, table(3).vector);
}

TEST(Condition, ExternalValidated) {
    EXPECT_NO_THROW(ConditionEmbedding::external({1.0f, 2.0f}));
    EXPECT_THROW(ConditionEmbedding::external({1.0f, std::numeric_limits<float>::infinity()}), MotionError);
    EXPECT_THROW(ConditionEmbedding::external({1.0f}).validate(2), MotionError);
}

TEST(Mgrd, RoundTrip) {
    const MotionGrid g = random_grid(5, 3, 9);
    const auto path = temp_path("round.mgrd");
    write_mgrid(g, path);
    EXPECT_EQ(read_mgrid(path), g);
}

TEST(Mgrd, BadMagic) {
    auto bytes = encode_mgrd(random_grid(2, 1, 1));
    bytes[0] = 'X';
    try {
        decode_mgrd(bytes);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_STREQ(e.what(), "bad magic");
    }
}

TEST(Mgrd, Truncated) {
    auto bytes = encode_mgrd(random_grid(2, 1, 1));
    bytes.pop_back();
    EXPECT_THROW(decode_mgrd(bytes), FormatError);
    bytes.resize(12);
    EXPECT_THROW(decode_mgrd(bytes), FormatError);
}

TEST(Mgrd, ShapeOverflow) {
    auto bytes = encode_mgrd(random_grid(2, 1, 1));
    for (int i = 0; i < 4; ++i) {
        bytes[5 + i] = char(0xff);  // T
        bytes[9 + i] = char(0xff);  // J
    }
    try {
        decode_mgrd(bytes);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_STREQ(e.what(), "shape overflow");
    }
}

TEST(Mgrd, HandAssembledFixture) {
    // T=2, J=1, F=12, G=11, fps=20, label 2 (stored as 3); joint values
    // 0..23, global values 100..121.
    std::vector<char> raw = {'M', 'G', 'R', 'D', '1'};
    auto u32 = [&](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) raw.push_back(char((v >> (8 * i)) & 0xff));
    };
    u32(2);
    u32(1);
    u32(12);
    u32(11);
    u32(20);
    u32(3);
    for (int i = 0; i < 24; ++i) u32(std::bit_cast<std::uint32_t>(float(i) / 24.0f));
    for (int i = 0; i < 22; ++i) u32(std::bit_cast<std::uint32_t>(i % 11 >= 7 ? 0.5f : float(100 + i)));
    ASSERT_EQ(raw.size(), 29u + 4u * 46u);

    const MotionGrid g = decode_mgrd(raw);
    EXPECT_EQ(g.frames, 2u);
    EXPECT_EQ(g.joints, 1u);
    EXPECT_EQ(g.global_dims, 11u);
    EXPECT_EQ(g.fps, 20u);
    EXPECT_EQ(g.label, 2u);
    EXPECT_EQ(g.joint(1, 0, 0), 12.0f / 24.0f);
    EXPECT_EQ(g.joint(1, 0, 11), 23.0f / 24.0f);
    EXPECT_EQ(g.global(1, 0), 111.0f);
    EXPECT_EQ(g.global(1, 7), 0.5f);
    EXPECT_EQ(encode_mgrd(g), raw);
}

TEST(Mgrd, FlatFileIngest) {
    const auto v = random_flat(4, 251, 3);
    const auto path = temp_path("clip.f32");
    write_flat(regroup_flat(v, 251), path);
    EXPECT_EQ(flatten_grid(read_flat(path, 251)), v);
    EXPECT_THROW(read_flat(path, 263), FormatError);
}

TEST(Mpjpe, Basics) {
    const MotionGrid a = random_grid(4, 3, 1);
    EXPECT_EQ(mpjpe(a, a), 0.0);
    MotionGrid b = a;
    for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t j = 0; j < 3; ++j) b.joint(t, j, 0) += 1.0f;
    EXPECT_NEAR(mpjpe(a, b), 1000.0, 1e-3);
    EXPECT_THROW(mpjpe(a, random_grid(4, 2, 1)), MotionError);
}

TEST(Mpjpe, MatchesLoopOracleAndSymmetric) {
    const MotionGrid a = random_grid(6, 5, 2), b = random_grid(6, 5, 3);
    double total = 0;
    for (std::size_t t = 0; t < 6; ++t)
        for (std::size_t j = 0; j < 5; ++j) {
            const double dx = double(a.joint(t, j, 0)) - b.joint(t, j, 0),
                         dy = double(a.joint(t, j, 1)) - b.joint(t, j, 1),
                         dz = double(a.joint(t, j, 2)) - b.joint(t, j, 2);
            total += std::hypot(dx, dy, dz);
        }
    EXPECT_NEAR(mpjpe(a, b), 1000.0 * total / 30.0, 1e-9);
    EXPECT_EQ(mpjpe(a, b), mpjpe(b, a));
}
