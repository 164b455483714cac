#pragma once

// Run configuration: one JSON document with data / vqvae / transformer /
// generation / eval / ablation sections plus a global seed.

#include "stm/generation/generation.hpp"
#include "stm/motion/mgrd_io.hpp"
#include "stm/motion/synth.hpp"
#include "stm/numerics/json_util.hpp"
#include "stm/transformer/transformer.hpp"
#include "stm/vq/model.hpp"

#include <filesystem>
#include <fstream>
#include <string>

namespace stm {

struct DataConfig {
    SynthConfig synth;
    /// Directories of .mgrd clips; when empty the synthetic set is generated in memory.
    std::string train_dir, eval_dir;
};

struct EvalConfig {
    std::size_t repeats = 20;
    std::size_t pool_size = 32;
    std::size_t diversity_pairs = 300;
    std::size_t feature_dim = 64;
    std::size_t samples_per_label = 32;
};

struct AblationConfig {
    std::size_t seeds = 5;
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string out_dir = "run";
    DataConfig data;
    VqConfig vqvae;
    TransformerConfig transformer;
    GenerationConfig generation;
    EvalConfig eval;
    AblationConfig ablation;
};

inline void to_json(nlohmann::json& j, const DataConfig& d) {
    j = {{"classes", d.synth.classes},         {"frames", d.synth.frames},         {"joints", d.synth.joints},
         {"train_clips", d.synth.train_clips}, {"eval_clips", d.synth.eval_clips}, {"fps", d.synth.fps},
         {"train_dir", d.train_dir},           {"eval_dir", d.eval_dir}};
}

inline void from_json(const nlohmann::json& j, DataConfig& d) {
    const std::string s = "data";
    reject_unknown_keys(j, s, {"classes", "frames", "joints", "train_clips", "eval_clips", "fps", "train_dir", "eval_dir"});
    read_key(j, "classes", d.synth.classes, s);
    read_key(j, "frames", d.synth.frames, s);
    read_key(j, "joints", d.synth.joints, s);
    read_key(j, "train_clips", d.synth.train_clips, s);
    read_key(j, "eval_clips", d.synth.eval_clips, s);
    read_key(j, "fps", d.synth.fps, s);
    read_key(j, "train_dir", d.train_dir, s);
    read_key(j, "eval_dir", d.eval_dir, s);
}

inline void to_json(nlohmann::json& j, const EvalConfig& e) {
    j = {{"repeats", e.repeats},
         {"pool_size", e.pool_size},
         {"diversity_pairs", e.diversity_pairs},
         {"feature_dim", e.feature_dim},
         {"samples_per_label", e.samples_per_label}};
}

inline void from_json(const nlohmann::json& j, EvalConfig& e) {
    const std::string s = "eval";
    reject_unknown_keys(j, s, {"repeats", "pool_size", "diversity_pairs", "feature_dim", "samples_per_label"});
    read_key(j, "repeats", e.repeats, s);
    read_key(j, "pool_size", e.pool_size, s);
    read_key(j, "diversity_pairs", e.diversity_pairs, s);
    read_key(j, "feature_dim", e.feature_dim, s);
    read_key(j, "samples_per_label", e.samples_per_label, s);
    if (e.repeats < 2) throw ConfigError("eval.repeats must be at least 2");
}

inline void to_json(nlohmann::json& j, const AblationConfig& a) { j = {{"seeds", a.seeds}}; }

inline void from_json(const nlohmann::json& j, AblationConfig& a) {
    reject_unknown_keys(j, "ablation", {"seeds"});
    read_key(j, "seeds", a.seeds, "ablation");
    if (a.seeds == 0) throw ConfigError("ablation.seeds must be positive");
}

inline void to_json(nlohmann::json& j, const RunConfig& c) {
    j = {{"seed", c.seed},
         {"out_dir", c.out_dir},
         {"data", c.data},
         {"vqvae", c.vqvae},
         {"transformer", c.transformer},
         {"generation", c.generation},
         {"eval", c.eval},
         {"ablation", c.ablation}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
    reject_unknown_keys(j, "config", {"seed", "out_dir", "data", "vqvae", "transformer", "generation", "eval", "ablation"});
    read_key(j, "seed", c.seed, "config");
    read_key(j, "out_dir", c.out_dir, "config");
    auto section = [&](const char* key, auto& out) {
        if (j.contains(key)) from_json(j.at(key), out);
    };
    section("data", c.data);
    section("vqvae", c.vqvae);
    section("transformer", c.transformer);
    section("generation", c.generation);
    section("eval", c.eval);
    section("ablation", c.ablation);
    c.vqvae.validate();
    c.transformer.validate();
    c.generation.validate();
    c.data.synth.seed = c.seed;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + path + " is not valid JSON: " + e.what());
    }
    return j.get<RunConfig>();
}

/// Training and evaluation clips named by the data section.
inline SynthDataset load_dataset(const DataConfig& d) {
    if (d.train_dir.empty() != d.eval_dir.empty())
        throw ConfigError("data.train_dir and data.eval_dir must be given together");
    if (d.train_dir.empty()) return synth_dataset(d.synth);
    SynthDataset out{read_mgrid_dir(d.train_dir), read_mgrid_dir(d.eval_dir)};
    if (out.train.empty()) throw ConfigError("no .mgrd clips in " + d.train_dir);
    return out;
}

inline std::filesystem::path run_path(const RunConfig& c, const std::string& name) {
    return std::filesystem::path(c.out_dir) / name;
}

}  // namespace stm
