#include "stm/harness/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <iomanip>
#include <iostream>

using namespace stm;

namespace {

std::size_t worker_threads() {
    const char* v = std::getenv("STME_THREADS");
    if (!v || !*v) return 1;
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (*end || n < 1) throw std::runtime_error("STME_THREADS must be a positive integer");
    return static_cast<std::size_t>(n);
}

void log_line(const std::string& s) { std::cerr << s << '\n'; }

std::string clip_name(std::size_t i) {
    std::ostringstream os;
    os << "clip_" << std::setw(5) << std::setfill('0') << i << ".mgrd";
    return os.str();
}

void write_dir(const std::vector<MotionGrid>& clips, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < clips.size(); ++i) write_mgrid(clips[i], dir / clip_name(i));
}

GenerationConfig generation_from(const std::string& config_path) {
    return config_path.empty() ? GenerationConfig{} : load_run_config(config_path).generation;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Spatio-temporal masked motion modeling toolkit"};
    app.require_subcommand(1);

    // synth
    SynthConfig synth;
    std::size_t synth_clips = 512;
    std::size_t synth_eval = 0;
    std::string synth_out;
    auto* c_synth = app.add_subcommand("synth", "Write a labeled synthetic dataset as DIR/train and DIR/eval");
    c_synth->add_option("--classes", synth.classes, "Number of motion classes")->check(CLI::Range(1, 64));
    c_synth->add_option("--clips", synth_clips, "Training clips")->check(CLI::PositiveNumber);
    c_synth->add_option("--eval-clips", synth_eval, "Held-out clips (default clips / 4)");
    c_synth->add_option("--frames", synth.frames, "Frames per clip")->check(CLI::PositiveNumber);
    c_synth->add_option("--joints", synth.joints, "Joints per frame")->check(CLI::PositiveNumber);
    c_synth->add_option("--seed", synth.seed, "Random seed");
    c_synth->add_option("--out", synth_out, "Output directory")->required();

    // training stages
    std::string config_path;
    StageOptions stage;
    std::size_t stop_after = 0;
    auto add_stage = [&](const char* name, const char* help) {
        auto* c = app.add_subcommand(name, help);
        c->add_option("config", config_path, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
        c->add_flag("--resume", stage.resume, "Continue from the checkpoint in out_dir");
        c->add_option("--stop-after", stop_after, "Stop after this many total steps (checkpoint is still written)");
        return c;
    };
    auto* c_vq = add_stage("train-vq", "Train the joint-level residual VQ-VAE");
    auto* c_mask = add_stage("train-mask", "Train the masked base-layer transformer");
    auto* c_res = add_stage("train-res", "Train the residual-layer transformer");

    // generate
    std::string ckpt_dir, out_path, gen_config;
    std::uint32_t label = 0;
    std::size_t frames = 64;
    std::uint64_t seed = 0;
    auto* c_gen = app.add_subcommand("generate", "Generate one clip for a label");
    c_gen->add_option("--ckpt", ckpt_dir, "Run directory with vq.ckpt, mask.ckpt and optional res.ckpt")->required();
    c_gen->add_option("--label", label, "Condition label")->required();
    c_gen->add_option("--frames", frames, "Frames to generate (multiple of the downscale factor)");
    c_gen->add_option("--seed", seed, "Sampling seed");
    c_gen->add_option("--config", gen_config, "Run configuration whose generation section is used");
    c_gen->add_option("--out", out_path, "Output .mgrd file")->required();

    // sample: a labeled set for evaluation
    std::size_t per_label = 32, classes = 4;
    auto* c_sample = app.add_subcommand("sample", "Generate a labeled clip directory for evaluation");
    c_sample->add_option("--ckpt", ckpt_dir, "Run directory")->required();
    c_sample->add_option("--classes", classes, "Labels 0..K-1")->check(CLI::PositiveNumber);
    c_sample->add_option("--per-label", per_label, "Clips per label")->check(CLI::PositiveNumber);
    c_sample->add_option("--frames", frames, "Frames per clip");
    c_sample->add_option("--seed", seed, "Sampling seed");
    c_sample->add_option("--config", gen_config, "Run configuration whose generation section is used");
    c_sample->add_option("--out", out_path, "Output directory")->required();

    // edit
    std::string in_path, mask_path;
    auto* c_edit = app.add_subcommand("edit", "Regenerate the editable token cells of a clip");
    c_edit->add_option("--in", in_path, "Input .mgrd clip")->required()->check(CLI::ExistingFile);
    c_edit->add_option("--mask", mask_path, "Edit mask JSON (token-grid frames and cells)")->required()->check(CLI::ExistingFile);
    c_edit->add_option("--label", label, "Condition label")->required();
    c_edit->add_option("--ckpt", ckpt_dir, "Run directory")->required();
    c_edit->add_option("--seed", seed, "Sampling seed");
    c_edit->add_option("--config", gen_config, "Run configuration whose generation section is used");
    c_edit->add_option("--out", out_path, "Output .mgrd file")->required();

    // eval
    std::string gen_dir, ref_dir, eval_out;
    EvalConfig eval_cfg;
    auto* c_eval = app.add_subcommand("eval", "Compare generated clips with reference clips");
    c_eval->add_option("--gen", gen_dir, "Directory of generated .mgrd clips")->required()->check(CLI::ExistingDirectory);
    c_eval->add_option("--ref", ref_dir, "Directory of reference .mgrd clips")->required()->check(CLI::ExistingDirectory);
    c_eval->add_option("--repeats", eval_cfg.repeats, "Evaluation repeats")->check(CLI::Range(2, 100000));
    c_eval->add_option("--seed", seed, "Extractor and evaluation seed");
    c_eval->add_option("--out", eval_out, "Write the report as JSON here (CSV goes to stdout)");

    // ablate
    auto* c_ablate = app.add_subcommand("ablate", "Joint-level 2D VQ against pose-level 1D VQ over seeds");
    c_ablate->add_option("config", config_path, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (stop_after) stage.train.stop_after = stop_after;
        stage.train.log = log_line;

        if (c_synth->parsed()) {
            synth.train_clips = synth_clips;
            synth.eval_clips = synth_eval ? synth_eval : std::max<std::size_t>(1, synth_clips / 4);
            const auto data = synth_dataset(synth);
            write_dir(data.train, std::filesystem::path(synth_out) / "train");
            write_dir(data.eval, std::filesystem::path(synth_out) / "eval");
            std::cout << "wrote " << data.train.size() << " train and " << data.eval.size() << " eval clips to "
                      << synth_out << '\n';
        } else if (c_vq->parsed() || c_mask->parsed() || c_res->parsed()) {
            const RunConfig cfg = load_run_config(config_path);
            const auto data = load_dataset(cfg.data);
            if (c_vq->parsed()) train_vq_stage(cfg, data, stage);
            if (c_mask->parsed()) train_mask_stage(cfg, data, stage);
            if (c_res->parsed()) train_res_stage(cfg, data, stage);
        } else if (c_gen->parsed()) {
            const auto m = load_models(ckpt_dir);
            const std::vector<std::uint32_t> labels{label};
            const auto clips = sample_labels(m.view(), labels, frames, generation_from(gen_config), seed);
            write_mgrid(clips.at(0), out_path);
        } else if (c_sample->parsed()) {
            const auto m = load_models(ckpt_dir);
            std::vector<std::uint32_t> labels;
            for (std::size_t c = 0; c < classes; ++c)
                for (std::size_t k = 0; k < per_label; ++k) labels.push_back(std::uint32_t(c));
            write_dir(sample_labels(m.view(), labels, frames, generation_from(gen_config), seed), out_path);
        } else if (c_edit->parsed()) {
            const auto m = load_models(ckpt_dir);
            const MotionGrid clip = read_mgrid(in_path);
            const std::size_t ds = m.vq.config().downscale;
            nlohmann::json mj;
            std::ifstream(mask_path) >> mj;
            const auto frozen = parse_edit_mask(mj, clip.frames / ds, m.vq.token_cols());
            const LabelTable table(m.mask.config().d_text);
            const std::vector<std::uint32_t> labels{label};
            Rng rng(seed, Stream::sample);
            auto r = edit(m.view(), clip, frozen, label_conditions(table, labels), generation_from(gen_config), rng);
            r.motion.label = label;
            write_mgrid(r.motion, out_path);
        } else if (c_eval->parsed()) {
            const auto gen = read_mgrid_dir(gen_dir), ref = read_mgrid_dir(ref_dir);
            const auto rep = evaluate_clips(gen, ref, eval_cfg, seed, worker_threads());
            std::cout << rep.to_csv();
            if (!eval_out.empty()) detail::write_text(eval_out, rep.to_json().dump(2) + "\n");
        } else if (c_ablate->parsed()) {
            const RunConfig cfg = load_run_config(config_path);
            const auto data = load_dataset(cfg.data);
            TrainOptions o;
            o.log = log_line;
            const auto rep = run_ablation(cfg.vqvae, data.train, data.eval, cfg.ablation.seeds, cfg.seed, o);
            std::filesystem::create_directories(cfg.out_dir);
            detail::write_text(run_path(cfg, "ablation.csv"), rep.to_csv());
            std::cout << rep.to_csv() << "joint2d wins " << rep.wins_2d() << " of " << cfg.ablation.seeds << '\n';
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
