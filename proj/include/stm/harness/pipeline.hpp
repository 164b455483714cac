#pragma once

// Stage runners shared by the command-line tool and the acceptance binary:
// training stages with checkpoint files, model loading, label-conditioned
// sampling and evaluation of clip sets.

#include "stm/harness/ablation.hpp"
#include "stm/harness/config.hpp"
#include "stm/harness/train_transformer.hpp"
#include "stm/metrics/metrics.hpp"

#include <fstream>
#include <optional>

namespace stm {

struct StageOptions {
    bool resume = false;
    TrainOptions train;
};

namespace detail {

inline void write_text(const std::filesystem::path& p, const std::string& s) {
    std::ofstream out(p);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << s;
}

inline std::string loss_csv(const std::vector<float>& h) {
    std::ostringstream os;
    os.precision(9);
    os << "step,loss\n";
    for (std::size_t i = 0; i < h.size(); ++i) os << i + 1 << ',' << h[i] << '\n';
    return os.str();
}

inline Checkpoint load_stage(const RunConfig& c, const std::string& name) {
    const auto p = run_path(c, name);
    if (!std::filesystem::exists(p)) throw std::runtime_error("missing checkpoint " + p.string());
    return load_checkpoint(p);
}

inline std::vector<TokenizedClip> tokenized_train_set(const RunConfig& c, const SynthDataset& data) {
    const auto vq = VqModel<float>::from_checkpoint(load_stage(c, "vq.ckpt"));
    if (vq.layout() != VqLayout::joint2d) throw std::runtime_error("transformer stages need a joint-level VQ model");
    return tokenize_dataset(vq, data.train);
}

}  // namespace detail

inline VqTrainer train_vq_stage(const RunConfig& c, const SynthDataset& data, const StageOptions& o = {}) {
    std::filesystem::create_directories(c.out_dir);
    VqTrainer tr = o.resume ? VqTrainer(detail::load_stage(c, "vq.ckpt"), data.train)
                            : VqTrainer(c.vqvae, VqLayout::joint2d, data.train, c.seed);
    tr.run(o.train);
    save_checkpoint(tr.checkpoint(), run_path(c, "vq.ckpt"));
    std::ostringstream os;
    os.precision(9);
    os << "step,total,recon,commit\n";
    for (std::size_t i = 0; i < tr.history().size(); ++i) {
        const auto& h = tr.history()[i];
        os << i + 1 << ',' << h.total << ',' << h.recon << ',' << h.commit << '\n';
    }
    detail::write_text(run_path(c, "vq_loss.csv"), os.str());
    return tr;
}

inline MaskTrainer train_mask_stage(const RunConfig& c, const SynthDataset& data, const StageOptions& o = {}) {
    auto toks = detail::tokenized_train_set(c, data);
    const std::size_t codes = c.vqvae.codes;
    MaskTrainer tr = o.resume ? MaskTrainer(detail::load_stage(c, "mask.ckpt"), std::move(toks))
                              : MaskTrainer(c.transformer, std::move(toks), codes, c.seed);
    tr.run(o.train);
    save_checkpoint(tr.checkpoint(), run_path(c, "mask.ckpt"));
    detail::write_text(run_path(c, "mask_loss.csv"), detail::loss_csv(tr.history()));
    return tr;
}

inline ResidualTrainer train_res_stage(const RunConfig& c, const SynthDataset& data, const StageOptions& o = {}) {
    auto toks = detail::tokenized_train_set(c, data);
    const std::size_t codes = c.vqvae.codes;
    ResidualTrainer tr = o.resume ? ResidualTrainer(detail::load_stage(c, "res.ckpt"), std::move(toks))
                                  : ResidualTrainer(c.transformer, std::move(toks), codes, c.seed);
    tr.run(o.train);
    save_checkpoint(tr.checkpoint(), run_path(c, "res.ckpt"));
    detail::write_text(run_path(c, "res_loss.csv"), detail::loss_csv(tr.history()));
    return tr;
}

/// Models read from a run directory; res.ckpt is optional.
struct LoadedModels {
    VqModel<float> vq;
    MaskTransformer<float> mask;
    std::optional<ResidualTransformer<float>> res;

    GenerationModels view() const { return {&vq, &mask, res ? &*res : nullptr}; }
};

inline LoadedModels load_models(const std::filesystem::path& dir) {
    auto need = [&](const char* name) {
        const auto p = dir / name;
        if (!std::filesystem::exists(p)) throw std::runtime_error("missing checkpoint " + p.string());
        return load_checkpoint(p);
    };
    LoadedModels m{VqModel<float>::from_checkpoint(need("vq.ckpt")),
                   MaskTransformer<float>::from_checkpoint(need("mask.ckpt")), std::nullopt};
    if (std::filesystem::exists(dir / "res.ckpt"))
        m.res.emplace(ResidualTransformer<float>::from_checkpoint(load_checkpoint(dir / "res.ckpt")));
    m.view().validate();
    return m;
}

/// One clip per entry of `labels`, decoded in chunks from a single sample stream.
inline std::vector<MotionGrid> sample_labels(const GenerationModels& m, std::span<const std::uint32_t> labels,
                                             std::size_t frames, const GenerationConfig& sched, std::uint64_t seed,
                                             std::size_t chunk = 16) {
    const LabelTable table(m.mask->config().d_text);
    Rng rng(seed, Stream::sample);
    std::vector<MotionGrid> out;
    for (std::size_t s = 0; s < labels.size(); s += chunk) {
        const auto part = labels.subspan(s, std::min(chunk, labels.size() - s));
        auto g = generate(m, label_conditions(table, part), frames, sched, rng);
        for (std::size_t i = 0; i < part.size(); ++i) {
            g.motions[i].label = part[i];
            out.push_back(std::move(g.motions[i]));
        }
    }
    return out;
}

/// Extractor calibrated on the reference clips.
inline FeatureExtractor reference_extractor(std::span<const MotionGrid> ref, std::uint64_t seed, std::size_t dim) {
    if (ref.empty()) throw MetricError("reference set is empty");
    FeatureExtractor ex(ref.front().joints, ref.front().global_dims, seed, dim);
    ex.calibrate(ref);
    return ex;
}

inline FeatureMatrix class_text_features(const FeatureExtractor& ex, std::span<const MotionGrid> ref) {
    std::uint32_t top = 0;
    for (const auto& g : ref)
        if (g.label) top = std::max(top, *g.label + 1);
    FeatureMatrix t(top, ex.dim());
    for (std::uint32_t c = 0; c < top; ++c) t.row(c) = ex.text_feature(c);
    return t;
}

inline EvalReport evaluate_clips(std::span<const MotionGrid> gen, std::span<const MotionGrid> ref, const EvalConfig& e,
                                 std::uint64_t seed, std::size_t threads) {
    const auto ex = reference_extractor(ref, seed, e.feature_dim);
    EvalOptions o;
    o.repeats = e.repeats;
    o.seed = seed;
    o.pool_size = e.pool_size;
    o.diversity_pairs = e.diversity_pairs;
    o.threads = threads;
    return evaluate(ex.extract(gen), ex.extract(ref), class_text_features(ex, ref), o);
}

/// Mean over labels of FID between generated and reference clips of that
/// label. With `shift` > 0 generated clips of label c are compared against
/// reference clips of label (c + shift) mod K.
inline double label_conditional_fid(const FeatureSet& gen, const FeatureSet& ref, std::size_t classes,
                                    std::size_t shift = 0) {
    require_same_extractor(gen, ref);
    auto rows = [](const FeatureSet& f, std::uint32_t c) {
        std::vector<Eigen::Index> idx;
        for (std::size_t i = 0; i < f.labels.size(); ++i)
            if (f.labels[i] == c) idx.push_back(Eigen::Index(i));
        FeatureMatrix m(idx.size(), f.motion.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) m.row(i) = f.motion.row(idx[i]);
        return m;
    };
    double s = 0.0;
    for (std::size_t c = 0; c < classes; ++c)
        s += fid(rows(gen, std::uint32_t(c)), rows(ref, std::uint32_t((c + shift) % classes)));
    return s / double(classes);
}

}  // namespace stm
