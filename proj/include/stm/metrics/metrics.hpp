#pragma once

// Evaluation: a frozen random-projection feature extractor, FID,
// R-precision, MM-Dist, diversity, and a repeated-run reporter.

#include "stm/motion/condition.hpp"
#include "stm/motion/motion_grid.hpp"
#include "stm/numerics/rng.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace stm {

struct MetricError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

using FeatureMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct FeatureSet {
    FeatureMatrix motion;  // n x d_f
    FeatureMatrix text;    // n x d_f, row i pairs with motion row i
    std::vector<std::uint32_t> labels;
    std::string extractor;
    std::uint64_t seed = 0;

    std::size_t size() const { return static_cast<std::size_t>(motion.rows()); }
};

/// Per-frame frozen Gaussian projection followed by temporal mean and
/// standard deviation. Calibration on reference clips fits a per-channel
/// input standardization and the condition map (ridge regression from
/// label-table rows onto motion features); both are frozen afterwards.
class FeatureExtractor {
public:
    static constexpr const char* kId = "randproj-meanstd-v1";

    FeatureExtractor(std::size_t joints, std::size_t global_dims, std::uint64_t seed, std::size_t d_f = 64,
                     std::size_t d_text = kDefaultTextDim)
        : joints_(joints), global_dims_(global_dims), seed_(seed), d_f_(d_f), table_(d_text) {
        if (d_f == 0 || d_f % 2 != 0) throw MetricError("feature width must be even and positive");
        const std::size_t in = joints * kJointFeatures + global_dims;
        proj_.resize(static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(d_f / 2));
        Rng rng(seed, Stream::eval);
        const double s = 1.0 / std::sqrt(double(in));
        for (Eigen::Index i = 0; i < proj_.size(); ++i) proj_.data()[i] = s * rng.normal();
    }

    std::size_t dim() const { return d_f_; }
    std::uint64_t seed() const { return seed_; }
    const LabelTable& labels() const { return table_; }
    bool calibrated() const { return text_map_.size() != 0; }

    Eigen::RowVectorXd motion_feature(const MotionGrid& g) const {
        if (g.joints != joints_ || g.global_dims != global_dims_) throw MetricError("clip layout does not match the extractor");
        if (g.frames == 0) throw MetricError("empty clip");
        const Eigen::Index in = proj_.rows(), h = proj_.cols();
        Eigen::RowVectorXd frame(in), sum = Eigen::RowVectorXd::Zero(h), sq = Eigen::RowVectorXd::Zero(h);
        for (std::size_t t = 0; t < g.frames; ++t) {
            Eigen::Index k = 0;
            for (std::size_t i = 0; i < g.joints * kJointFeatures; ++i) frame[k++] = g.joint_feats[t * g.joints * kJointFeatures + i];
            for (std::size_t i = 0; i < g.global_dims; ++i) frame[k++] = g.global_feats[t * g.global_dims + i];
            if (in_mean_.size()) frame = (frame - in_mean_).cwiseQuotient(in_std_);
            const Eigen::RowVectorXd z = frame * proj_;
            sum += z;
            sq += z.cwiseProduct(z);
        }
        const double n = double(g.frames);
        Eigen::RowVectorXd out(2 * h);
        out.head(h) = sum / n;
        out.tail(h) = (sq / n - (sum / n).cwiseProduct(sum / n)).cwiseMax(0.0).cwiseSqrt();
        return out;
    }

    /// Fits the condition map on labeled reference clips.
    void calibrate(std::span<const MotionGrid> reference, double ridge = 1e-3) {
        if (reference.empty()) throw MetricError("calibration needs reference clips");
        const Eigen::Index in = proj_.rows();
        Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(in), sq = Eigen::RowVectorXd::Zero(in);
        double count = 0;
        for (const auto& g : reference) {
            if (g.joints != joints_ || g.global_dims != global_dims_) throw MetricError("clip layout does not match the extractor");
            for (std::size_t t = 0; t < g.frames; ++t) {
                for (Eigen::Index k = 0; k < in; ++k) {
                    const std::size_t jk = g.joints * kJointFeatures;
                    const double v = std::size_t(k) < jk ? g.joint_feats[t * jk + k] : g.global_feats[t * g.global_dims + (k - jk)];
                    sum[k] += v;
                    sq[k] += v * v;
                }
                ++count;
            }
        }
        const Eigen::RowVectorXd mean = sum / count;
        const Eigen::RowVectorXd sd = (sq / count - mean.cwiseProduct(mean)).cwiseMax(0.0).cwiseSqrt().cwiseMax(1e-3);
        in_mean_ = mean;
        in_std_ = sd;
        const std::size_t dt = table_.dim();
        Eigen::MatrixXd e(reference.size(), dt), f(reference.size(), d_f_);
        for (std::size_t i = 0; i < reference.size(); ++i) {
            if (!reference[i].label) throw MetricError("calibration clips must carry labels");
            const auto row = table_(*reference[i].label).vector;
            for (std::size_t k = 0; k < dt; ++k) e(i, k) = row[k];
            f.row(i) = motion_feature(reference[i]);
        }
        // W = E^T (E E^T + ridge I)^-1 F  (dual form; n is small next to d_text)
        const Eigen::MatrixXd gram = e * e.transpose() + ridge * Eigen::MatrixXd::Identity(e.rows(), e.rows());
        text_map_ = e.transpose() * gram.ldlt().solve(f);
    }

    Eigen::RowVectorXd text_feature(std::uint32_t label) const {
        if (!calibrated()) throw MetricError("condition features need a calibrated extractor");
        const auto row = table_(label).vector;
        Eigen::RowVectorXd e(row.size());
        for (std::size_t k = 0; k < row.size(); ++k) e[k] = row[k];
        return e * text_map_;
    }

    FeatureSet extract(std::span<const MotionGrid> motions) const {
        FeatureSet fs;
        fs.extractor = kId;
        fs.seed = seed_;
        fs.motion.resize(static_cast<Eigen::Index>(motions.size()), static_cast<Eigen::Index>(d_f_));
        fs.text.resize(fs.motion.rows(), fs.motion.cols());
        for (std::size_t i = 0; i < motions.size(); ++i) {
            fs.motion.row(i) = motion_feature(motions[i]);
            if (motions[i].label) {
                fs.labels.push_back(*motions[i].label);
                fs.text.row(i) = calibrated() ? text_feature(*motions[i].label) : Eigen::RowVectorXd::Zero(d_f_);
            }
        }
        if (!fs.labels.empty() && fs.labels.size() != motions.size())
            throw MetricError("either every clip or no clip must carry a label");
        return fs;
    }

private:
    std::size_t joints_, global_dims_;
    std::uint64_t seed_;
    std::size_t d_f_;
    LabelTable table_;
    Eigen::MatrixXd proj_;
    Eigen::RowVectorXd in_mean_, in_std_;  // empty until calibrated
    Eigen::MatrixXd text_map_;
};

inline void require_same_extractor(const FeatureSet& a, const FeatureSet& b) {
    if (a.extractor != b.extractor || a.seed != b.seed) throw MetricError("feature sets come from different extractors");
}

struct FidDiagnostics {
    double min_eigenvalue = 0.0;
    bool clamped = false;  // min eigenvalue below -1e-6 was clamped to 0
};

/// Frechet distance between two Gaussians. Tr((S1 S2)^1/2) is computed as
/// the trace of the square root of the symmetric S1^1/2 S2 S1^1/2.
inline double fid_from_stats(const Eigen::VectorXd& mu1, const Eigen::MatrixXd& s1, const Eigen::VectorXd& mu2,
                             const Eigen::MatrixXd& s2, FidDiagnostics* diag = nullptr) {
    if (mu1.size() != mu2.size() || s1.rows() != s2.rows()) throw MetricError("feature dimensions differ");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es1(0.5 * (s1 + s1.transpose()));
    const Eigen::MatrixXd r1 =
        es1.eigenvectors() * es1.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() * es1.eigenvectors().transpose();
    const Eigen::MatrixXd m = r1 * s2 * r1;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
    const Eigen::VectorXd ev = es.eigenvalues();
    const double lo = ev.size() ? ev.minCoeff() : 0.0;
    if (diag) *diag = {lo, lo < -1e-6};
    const double tr_sqrt = ev.cwiseMax(0.0).cwiseSqrt().sum();
    return (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
}

inline std::pair<Eigen::VectorXd, Eigen::MatrixXd> mean_cov(const FeatureMatrix& f) {
    if (f.rows() < 2) throw MetricError("FID needs at least two samples per set");
    const Eigen::VectorXd mu = f.colwise().mean().transpose();
    const Eigen::MatrixXd c = f.rowwise() - mu.transpose();
    return {mu, (c.transpose() * c) / double(f.rows() - 1)};
}

inline double fid(const FeatureMatrix& gen, const FeatureMatrix& ref, FidDiagnostics* diag = nullptr) {
    const auto [m1, s1] = mean_cov(gen);
    const auto [m2, s2] = mean_cov(ref);
    return fid_from_stats(m1, s1, m2, s2, diag);
}

struct TopK {
    double top1 = 0, top2 = 0, top3 = 0;
};

/// For each motion row, ranks its own text row among `pool_size - 1`
/// mismatched text rows by Euclidean distance. Mismatched rows are drawn
/// without replacement from other indices (other labels when labels are
/// given). The rank counts strictly closer candidates.
inline TopK r_precision(const FeatureMatrix& motion, const FeatureMatrix& text, Rng& rng, std::size_t pool_size = 32,
                        std::span<const std::uint32_t> labels = {}) {
    const std::size_t n = static_cast<std::size_t>(motion.rows());
    if (text.rows() != motion.rows() || text.cols() != motion.cols()) throw MetricError("motion and text features are not paired");
    if (!labels.empty() && labels.size() != n) throw MetricError("label count does not match features");
    if (pool_size < 2) throw MetricError("pool needs at least two candidates");
    TopK out;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::size_t> others;
        for (std::size_t j = 0; j < n; ++j)
            if (j != i && (labels.empty() || labels[j] != labels[i])) others.push_back(j);
        if (others.size() < pool_size - 1)
            throw MetricError("fewer than " + std::to_string(pool_size) + " candidates available");
        const double own = (motion.row(i) - text.row(i)).norm();
        std::size_t rank = 0;
        for (std::size_t j : rng.choose(others, pool_size - 1)) rank += (motion.row(i) - text.row(j)).norm() < own;
        out.top1 += rank < 1;
        out.top2 += rank < 2;
        out.top3 += rank < 3;
    }
    out.top1 /= double(n);
    out.top2 /= double(n);
    out.top3 /= double(n);
    return out;
}

/// Top-k accuracy of each motion against a fixed pool of one text feature
/// per class (row c of `class_text` is class c).
inline TopK label_r_precision(const FeatureMatrix& motion, std::span<const std::uint32_t> labels,
                              const FeatureMatrix& class_text) {
    const std::size_t n = static_cast<std::size_t>(motion.rows());
    if (labels.size() != n) throw MetricError("label count does not match features");
    TopK out;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] >= class_text.rows()) throw MetricError("label outside the class pool");
        const double own = (motion.row(i) - class_text.row(labels[i])).norm();
        std::size_t rank = 0;
        for (Eigen::Index c = 0; c < class_text.rows(); ++c)
            rank += c != labels[i] && (motion.row(i) - class_text.row(c)).norm() < own;
        out.top1 += rank < 1;
        out.top2 += rank < 2;
        out.top3 += rank < 3;
    }
    if (n) {
        out.top1 /= double(n);
        out.top2 /= double(n);
        out.top3 /= double(n);
    }
    return out;
}

inline double mm_dist(const FeatureMatrix& motion, const FeatureMatrix& text) {
    if (text.rows() != motion.rows() || text.cols() != motion.cols()) throw MetricError("motion and text features are not paired");
    if (motion.rows() == 0) throw MetricError("no feature pairs");
    return (motion - text).rowwise().norm().mean();
}

/// Mean distance over n_pairs index pairs (i != j) drawn uniformly.
inline double diversity(const FeatureMatrix& f, Rng& rng, std::size_t n_pairs = 300) {
    const std::size_t n = static_cast<std::size_t>(f.rows());
    if (n < 2) throw MetricError("diversity needs at least two features");
    double total = 0;
    for (std::size_t p = 0; p < n_pairs; ++p) {
        const std::size_t i = rng.index(n);
        std::size_t j = rng.index(n - 1);
        if (j >= i) ++j;
        total += (f.row(i) - f.row(j)).norm();
    }
    return total / double(n_pairs);
}

struct MetricSummary {
    double mean = 0, ci95 = 0;
    std::vector<double> values;
};

/// Mean and 1.96 * sample-sd / sqrt(R) half-width.
inline MetricSummary summarize(std::vector<double> values) {
    if (values.size() < 2) throw MetricError("confidence intervals need at least two repeats");
    MetricSummary s;
    const double r = double(values.size());
    for (double v : values) s.mean += v / r;
    double var = 0;
    for (double v : values) var += (v - s.mean) * (v - s.mean) / (r - 1);
    s.ci95 = 1.96 * std::sqrt(var / r);
    s.values = std::move(values);
    return s;
}

struct EvalReport {
    std::size_t repeats = 0;
    std::uint64_t seed = 0;
    std::map<std::string, MetricSummary> metrics;  // ordered for stable output

    nlohmann::json to_json() const {
        nlohmann::json j{{"repeats", repeats}, {"seed", seed}, {"metrics", nlohmann::json::object()}};
        for (const auto& [name, m] : metrics) j["metrics"][name] = {{"mean", m.mean}, {"ci95", m.ci95}};
        return j;
    }

    std::string to_csv() const {
        std::ostringstream os;
        os.precision(9);
        os << "metric,mean,ci95\n";
        for (const auto& [name, m] : metrics) os << name << ',' << m.mean << ',' << m.ci95 << '\n';
        return os.str();
    }
};

struct EvalOptions {
    std::size_t repeats = 20;
    std::uint64_t seed = 0;
    std::size_t pool_size = 32;
    std::size_t diversity_pairs = 300;
    std::size_t threads = 1;
};

/// Repeats: each draws a bootstrap resample of the generated set (the
/// first repeat uses it as-is) and fresh R-precision pools and diversity
/// pairs from its own RNG stream. Results are gathered in repeat order, so
/// the report does not depend on the thread count.
inline EvalReport evaluate(const FeatureSet& gen, const FeatureSet& ref, const FeatureMatrix& class_text,
                           const EvalOptions& opt) {
    require_same_extractor(gen, ref);
    if (opt.repeats < 2) throw MetricError("evaluation needs at least two repeats");
    if (gen.size() < 2 || ref.size() < 2) throw MetricError("evaluation needs at least two clips per set");
    const bool labeled = gen.labels.size() == gen.size() && class_text.rows() > 0;
    const std::size_t n = gen.size();
    std::vector<std::map<std::string, double>> rows(opt.repeats);
    auto run = [&](std::size_t r) {
        Rng rng(opt.seed + r, Stream::eval);
        FeatureSet s;
        s.motion.resize(gen.motion.rows(), gen.motion.cols());
        s.text.resize(gen.text.rows(), gen.text.cols());
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t k = r == 0 ? i : rng.index(n);
            s.motion.row(i) = gen.motion.row(k);
            s.text.row(i) = gen.text.row(k);
            if (labeled) s.labels.push_back(gen.labels[k]);
        }
        auto& out = rows[r];
        out["fid"] = fid(s.motion, ref.motion);
        out["diversity"] = diversity(s.motion, rng, opt.diversity_pairs);
        if (labeled) {
            out["mm_dist"] = mm_dist(s.motion, s.text);
            const TopK lk = label_r_precision(s.motion, s.labels, class_text);
            out["label_top1"] = lk.top1;
            out["label_top2"] = lk.top2;
            out["label_top3"] = lk.top3;
            std::size_t largest_class = 0;
            for (auto l : s.labels)
                largest_class = std::max<std::size_t>(largest_class, std::count(s.labels.begin(), s.labels.end(), l));
            if (n - largest_class + 1 >= opt.pool_size) {
                const TopK k = r_precision(s.motion, s.text, rng, opt.pool_size, s.labels);
                out["r_precision_top1"] = k.top1;
                out["r_precision_top2"] = k.top2;
                out["r_precision_top3"] = k.top3;
            }
        }
    };
    const std::size_t threads = std::max<std::size_t>(1, std::min(opt.threads, opt.repeats));
    if (threads == 1) {
        for (std::size_t r = 0; r < opt.repeats; ++r) run(r);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < threads; ++w)
            pool.emplace_back([&, w] {
                for (std::size_t r = w; r < opt.repeats; r += threads) run(r);
            });
        for (auto& t : pool) t.join();
    }
    EvalReport rep;
    rep.repeats = opt.repeats;
    rep.seed = opt.seed;
    for (const auto& [name, _] : rows[0]) {
        std::vector<double> v;
        for (const auto& row : rows)
            if (row.count(name)) v.push_back(row.at(name));
        if (v.size() == opt.repeats) rep.metrics[name] = summarize(std::move(v));
    }
    return rep;
}

}  // namespace stm
