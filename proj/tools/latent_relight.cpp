#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "latent_relight/data.hpp"
#include "latent_relight/eval.hpp"
#include "latent_relight/grid.hpp"
#include "latent_relight/model.hpp"
#include "latent_relight/train.hpp"

namespace fs = std::filesystem;
namespace lr = latent_relight;
using nlohmann::json;

namespace {

constexpr const char* kToolVersion = "0.1.0";

struct RuntimeFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void write_json(const fs::path& path, const json& doc) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw lr::IoError("cannot write " + path.string());
    out << std::setw(2) << doc << '\n';
    if (!out) throw lr::IoError("failed writing " + path.string());
}

fs::path manifest_path_for(const fs::path& out, bool is_dir) {
    return is_dir ? out / "manifest.json" : fs::path(out.string() + ".manifest.json");
}

// Records the resolved options (defaults included) as TOML, which can be fed
// back through --config to reproduce the run.
json make_manifest(const CLI::App& sub, std::uint64_t seed, const std::vector<std::string>& inputs,
                   const std::vector<std::string>& outputs, json resolved) {
    return json{{"command", sub.get_name()},
                {"config", std::move(resolved)},
                {"config_toml", "[" + sub.get_name() + "]\n" + sub.config_to_str(true, false)},
                {"inputs", inputs},
                {"outputs", outputs},
                {"seed", seed},
                {"tool_version", kToolVersion}};
}

std::optional<std::uint64_t> env_seed() {
    const char* v = std::getenv("LATENT_RELIGHT_SEED");
    if (!v || !*v) return std::nullopt;
    try {
        std::size_t used = 0;
        const unsigned long long s = std::stoull(v, &used);
        if (used != std::string(v).size()) throw std::invalid_argument(v);
        return s;
    } catch (const std::exception&) {
        throw CLI::ValidationError("LATENT_RELIGHT_SEED", std::string("not an unsigned integer: ") + v);
    }
}

lr::Weights load_weights(const fs::path& ckpt) { return lr::load_checkpoint(ckpt).weights; }

lr::ImageBuffer load_model_input(const fs::path& path, const lr::ModelConfig& cfg) {
    lr::ImageBuffer img = lr::read_png(path);
    if (img.height != cfg.base_resolution || img.width != cfg.base_resolution) {
        std::cerr << "notice: resizing " << path.string() << " from " << img.width << "x" << img.height << " to "
                  << cfg.base_resolution << "x" << cfg.base_resolution << "\n";
        img = lr::resize_bilinear(img, cfg.base_resolution, cfg.base_resolution);
    }
    return img;
}

std::string fixed(double v, int digits) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(digits) << v;
    return s.str();
}

// IIW-style split: every <id>.png with a sibling <id>.json.
std::vector<std::pair<fs::path, fs::path>> list_iiw(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw lr::IoError("judgment directory does not exist: " + dir.string());
    std::vector<std::pair<fs::path, fs::path>> items;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.path().extension() != ".png") continue;
        fs::path js = e.path();
        js.replace_extension(".json");
        if (fs::exists(js)) items.emplace_back(e.path(), js);
    }
    std::sort(items.begin(), items.end());
    if (items.empty()) throw lr::IoError("no <id>.png/<id>.json pairs in " + dir.string());
    return items;
}

void albedo_maps(const lr::Weights& w, const std::vector<std::pair<fs::path, fs::path>>& items,
                 std::vector<lr::LightnessMap>& maps, std::vector<lr::JudgmentSet>& sets) {
    for (const auto& [png, js] : items) {
        maps.push_back(lr::LightnessMap::from_image(lr::estimate_albedo(w, load_model_input(png, w.config))));
        sets.push_back(lr::load_iiw_judgments(js));
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Lighting-aware image autoencoder: relighting and intrinsic decomposition"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_config("--config", "", "TOML file of option values; command-line flags take precedence");
    app.set_version_flag("--version", kToolVersion);

    std::uint64_t default_seed = 0;
    try {
        default_seed = env_seed().value_or(0);
    } catch (const CLI::Error& e) {
        std::cerr << e.what() << "\n";
        return 1;
    }

    // synth-data
    lr::SyntheticSceneSpec synth;
    synth.seed = default_seed;
    std::string synth_out;
    auto* synth_cmd = app.add_subcommand("synth-data", "Render a synthetic multi-illumination dataset");
    synth_cmd->add_option("--out", synth_out, "Output dataset directory")->required();
    synth_cmd->add_option("--scenes", synth.n_scenes, "Number of scenes")->capture_default_str();
    synth_cmd->add_option("--lights", synth.n_lights, "Lightings per scene")->capture_default_str();
    synth_cmd->add_option("--size", synth.image_size, "Image side in pixels")->capture_default_str();
    synth_cmd->add_option("--regions", synth.n_albedo_regions, "Albedo regions per scene")->capture_default_str();
    synth_cmd->add_option("--ambient", synth.ambient, "Ambient term in [0,1]")->capture_default_str();
    synth_cmd->add_flag("--white-lights", synth.white_lights, "Use white light colors");
    synth_cmd->add_option("--seed", synth.seed, "Random seed")->capture_default_str();

    // train
    lr::ModelConfig model_cfg;
    lr::TrainConfig train_cfg;
    train_cfg.seed = default_seed;
    std::string data_dir, resume_path;
    std::int64_t stop_at = 0;
    int log_every = 10;
    auto* train_cmd = app.add_subcommand("train", "Train the autoencoder on a multi-illumination dataset");
    train_cmd->add_option("--data", data_dir, "Dataset root (<scene>/<lighting>.png)")->required();
    train_cmd->add_option("--out", train_cfg.out_dir, "Run directory")->capture_default_str();
    train_cmd->add_option("--resolution", model_cfg.base_resolution, "Training image side")->capture_default_str();
    train_cmd->add_option("--channels", model_cfg.channels_per_level, "Channels per level")->delimiter(',')->capture_default_str();
    train_cmd->add_option("--blocks", model_cfg.blocks_per_level, "Residual blocks per level")->delimiter(',')->capture_default_str();
    train_cmd->add_option("--extrinsic-dim", model_cfg.extrinsic_dim, "Extrinsic code length")->capture_default_str();
    train_cmd->add_option("--alpha", model_cfg.alpha, "Constrained-scaling bound")->capture_default_str();
    train_cmd->add_option("--inject-hidden", model_cfg.injection_mlp_hidden, "Injection MLP width")->capture_default_str();
    train_cmd->add_option("--head-hidden", model_cfg.extrinsic_head_hidden, "Extrinsic head width")->capture_default_str();
    train_cmd->add_option("--batch-size", train_cfg.batch_size, "Pairs per step")->capture_default_str();
    train_cmd->add_option("--epochs", train_cfg.epochs, "Epochs")->capture_default_str();
    train_cmd->add_option("--max-steps", train_cfg.max_steps, "Total steps (overrides --epochs when > 0)")->capture_default_str();
    train_cmd->add_option("--lr", train_cfg.learning_rate, "AdamW learning rate")->capture_default_str();
    train_cmd->add_option("--weight-decay", train_cfg.weight_decay, "AdamW weight decay")->capture_default_str();
    train_cmd->add_option("--noise-warmup", train_cfg.noise.warmup_fraction, "Fraction of training with input noise")->capture_default_str();
    train_cmd->add_option("--noise-log-mean", train_cfg.noise.log_mean, "Mean of log noise level")->capture_default_str();
    train_cmd->add_option("--noise-log-std", train_cfg.noise.log_std, "Std of log noise level")->capture_default_str();
    train_cmd->add_option("--crop-min", train_cfg.crop_ratio_min, "Smallest crop ratio")->capture_default_str();
    train_cmd->add_option("--crop-max", train_cfg.crop_ratio_max, "Largest crop ratio")->capture_default_str();
    train_cmd->add_option("--w-l2", train_cfg.losses.w_l2, "L2 weight")->capture_default_str();
    train_cmd->add_option("--w-ssim", train_cfg.losses.w_ssim, "SSIM weight")->capture_default_str();
    train_cmd->add_option("--w-grad", train_cfg.losses.w_grad, "Gradient-loss weight")->capture_default_str();
    train_cmd->add_option("--w-intrinsic", train_cfg.losses.w_intrinsic, "Intrinsic distance weight")->capture_default_str();
    train_cmd->add_option("--w-intrinsic-reg", train_cfg.losses.w_intrinsic_reg, "Intrinsic regularizer weight")->capture_default_str();
    train_cmd->add_option("--w-extrinsic", train_cfg.losses.w_extrinsic, "Extrinsic regularizer weight")->capture_default_str();
    train_cmd->add_option("--lambda", train_cfg.losses.lambda_distortion, "Coding-rate distortion")->capture_default_str();
    train_cmd->add_option("--checkpoint-every", train_cfg.eval_every, "Checkpoint period in steps (0: final only)")->capture_default_str();
    train_cmd->add_option("--seed", train_cfg.seed, "Random seed")->capture_default_str();
    train_cmd->add_option("--resume", resume_path, "Checkpoint to resume from");
    train_cmd->add_option("--stop-at-step", stop_at, "Stop after this global step (0: run to the end)")->capture_default_str();
    train_cmd->add_option("--log-every", log_every, "Progress line period in steps")->capture_default_str();

    // relight / albedo / interpolate
    std::string ckpt, input, ref, ref_a, ref_b, out;
    int steps = 5;
    auto* relight_cmd = app.add_subcommand("relight", "Transfer the lighting of a reference image onto an input");
    relight_cmd->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    relight_cmd->add_option("--input", input, "Input PNG")->required()->check(CLI::ExistingFile);
    relight_cmd->add_option("--ref", ref, "Reference PNG")->required()->check(CLI::ExistingFile);
    relight_cmd->add_option("--out", out, "Output PNG")->required();

    auto* albedo_cmd = app.add_subcommand("albedo", "Estimate albedo by disabling the extrinsic pathway");
    albedo_cmd->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    albedo_cmd->add_option("--input", input, "Input PNG")->required()->check(CLI::ExistingFile);
    albedo_cmd->add_option("--out", out, "Output PNG")->required();

    auto* interp_cmd = app.add_subcommand("interpolate", "Render a lighting interpolation strip between two references");
    interp_cmd->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    interp_cmd->add_option("--input", input, "Input PNG")->required()->check(CLI::ExistingFile);
    interp_cmd->add_option("--ref-a", ref_a, "Reference at t=0")->required()->check(CLI::ExistingFile);
    interp_cmd->add_option("--ref-b", ref_b, "Reference at t=1")->required()->check(CLI::ExistingFile);
    interp_cmd->add_option("--steps", steps, "Number of frames")->capture_default_str()->check(CLI::Range(2, 64));
    interp_cmd->add_option("--out", out, "Output grid PNG")->required();
    std::string frames_dir;
    interp_cmd->add_option("--frames-dir", frames_dir, "Also write each frame as frame_<i>.png here");

    // eval-relight
    int n_refs = 12;
    std::uint64_t eval_seed = default_seed;
    bool identity_model = false;
    auto* evr_cmd = app.add_subcommand("eval-relight", "Score relighting on a dataset with fixed reference pairs");
    evr_cmd->add_option("--ckpt", ckpt, "Checkpoint")->check(CLI::ExistingFile);
    evr_cmd->add_flag("--identity", identity_model, "Score the identity baseline instead of a checkpoint");
    evr_cmd->add_option("--data", data_dir, "Dataset root")->required();
    evr_cmd->add_option("--n-refs", n_refs, "References per input image")->capture_default_str();
    evr_cmd->add_option("--resolution", model_cfg.base_resolution, "Image side for --identity")->capture_default_str();
    evr_cmd->add_option("--seed", eval_seed, "Pairing seed")->capture_default_str();
    evr_cmd->add_option("--out", out, "Report JSON")->required();

    // eval-whdr
    std::string tune_dir;
    double delta = 0.1;
    auto* evw_cmd = app.add_subcommand("eval-whdr", "WHDR of estimated albedo against pairwise lightness judgments");
    evw_cmd->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    evw_cmd->add_option("--data", data_dir, "Directory of <id>.png + <id>.json (IIW format)")->required();
    evw_cmd->add_option("--delta", delta, "Threshold when not tuning")->capture_default_str();
    evw_cmd->add_option("--tune-on", tune_dir, "Split used to tune delta over the default grid");
    evw_cmd->add_option("--out", out, "Report JSON")->required();

    // inspect-checkpoint
    auto* inspect_cmd = app.add_subcommand("inspect-checkpoint", "Print checkpoint metadata as JSON");
    inspect_cmd->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    inspect_cmd->add_option("--out", out, "Also write the JSON here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*synth_cmd) {
            synth.validate();
            write_json(manifest_path_for(synth_out, true),
                       make_manifest(*synth_cmd, synth.seed, {}, {synth_out}, json(synth)));
            const auto scenes = lr::generate_synthetic_dataset(synth, synth_out);
            std::cerr << "wrote " << scenes.size() << " scenes to " << synth_out << "\n";
        } else if (*train_cmd) {
            const fs::path run_dir = train_cfg.out_dir;
            lr::FitOptions options;
            if (!resume_path.empty()) {
                options.resume = lr::load_checkpoint(resume_path);
                if (!(options.resume->model_config == model_cfg))
                    std::cerr << "notice: model options are taken from the checkpoint being resumed\n";
                model_cfg = options.resume->model_config;
            }
            model_cfg.seed = train_cfg.seed;
            if (options.resume) model_cfg.seed = options.resume->model_config.seed;
            model_cfg.validate();
            train_cfg.validate();
            const auto scenes = lr::load_multi_illum(data_dir);
            if (scenes.empty()) throw RuntimeFailure("no usable scenes under " + data_dir);
            std::vector<std::string> inputs{data_dir};
            if (!resume_path.empty()) inputs.push_back(resume_path);
            write_json(manifest_path_for(run_dir, true),
                       make_manifest(*train_cmd, train_cfg.seed, inputs, {run_dir.string()},
                                     json{{"model", model_cfg}, {"train", train_cfg}, {"stop_at_step", stop_at}}));
            options.metrics_path = run_dir / "metrics.jsonl";
            options.checkpoint_dir = run_dir / "checkpoints";
            if (stop_at > 0) options.stop_at_step = stop_at;
            const std::int64_t total = lr::total_steps(scenes, train_cfg);
            options.on_step = [&](const lr::StepReport& r) {
                if (log_every > 0 && (r.step % log_every == 0 || r.step + 1 == total))
                    std::cerr << "step " << r.step + 1 << "/" << total << " loss " << fixed(r.breakdown.total, 5) << " relit_l2 "
                              << fixed(r.breakdown.relit_l2, 5) << " (" << fixed(r.wall_seconds, 1) << " s)\n";
            };
            const lr::Checkpoint ck = lr::fit(model_cfg, train_cfg, scenes, options);
            std::cerr << "finished at step " << ck.step << "; checkpoint " << (run_dir / "checkpoints" / "final.ckpt").string() << "\n";
        } else if (*relight_cmd) {
            write_json(manifest_path_for(out, false), make_manifest(*relight_cmd, 0, {ckpt, input, ref}, {out}, json::object()));
            const auto w = load_weights(ckpt);
            lr::write_png(out, lr::relight(w, load_model_input(input, w.config), load_model_input(ref, w.config)));
        } else if (*albedo_cmd) {
            write_json(manifest_path_for(out, false), make_manifest(*albedo_cmd, 0, {ckpt, input}, {out}, json::object()));
            const auto w = load_weights(ckpt);
            lr::write_png(out, lr::estimate_albedo(w, load_model_input(input, w.config)));
        } else if (*interp_cmd) {
            std::vector<std::string> outputs{out};
            if (!frames_dir.empty()) outputs.push_back(frames_dir);
            write_json(manifest_path_for(out, false),
                       make_manifest(*interp_cmd, 0, {ckpt, input, ref_a, ref_b}, outputs, json{{"steps", steps}}));
            const auto w = load_weights(ckpt);
            const auto feats = lr::encode(w, load_model_input(input, w.config)).first;
            const auto code_a = lr::encode(w, load_model_input(ref_a, w.config)).second;
            const auto code_b = lr::encode(w, load_model_input(ref_b, w.config)).second;
            std::vector<lr::ImageBuffer> frames;
            std::vector<std::string> labels;
            for (int i = 0; i < steps; ++i) {
                const double t = static_cast<double>(i) / (steps - 1);
                frames.push_back(lr::decode(w, feats, lr::interpolate_extrinsics(code_a, code_b, t)));
                labels.push_back("t=" + fixed(t, 2));
            }
            if (!frames_dir.empty()) {
                fs::create_directories(frames_dir);
                for (int i = 0; i < steps; ++i) lr::write_png(fs::path(frames_dir) / ("frame_" + std::to_string(i) + ".png"), frames[i]);
            }
            lr::render_grid(frames, labels, out);
        } else if (*evr_cmd) {
            if (identity_model == !ckpt.empty()) throw CLI::ValidationError("eval-relight", "pass exactly one of --ckpt or --identity");
            std::vector<std::string> inputs{data_dir};
            if (!ckpt.empty()) inputs.push_back(ckpt);
            write_json(manifest_path_for(out, false),
                       make_manifest(*evr_cmd, eval_seed, inputs, {out}, json{{"n_refs", n_refs}, {"identity", identity_model}}));
            const auto scenes = lr::load_multi_illum(data_dir);
            lr::RelightReport report;
            if (identity_model) {
                report = lr::eval_relight([](const lr::ImageBuffer& in, const lr::ImageBuffer&) { return in; }, scenes, n_refs,
                                          eval_seed, model_cfg.base_resolution);
            } else {
                report = lr::eval_relight(load_weights(ckpt), scenes, n_refs, eval_seed);
            }
            write_json(out, report);
            std::cerr << "pairs " << report.rows.size() << " skipped " << report.skipped << " raw RMSE "
                      << fixed(report.mean_raw_rmse, 4) << " SSIM " << fixed(report.mean_raw_ssim, 4) << " corrected RMSE "
                      << fixed(report.mean_corrected_rmse, 4) << " SSIM " << fixed(report.mean_corrected_ssim, 4) << "\n";
        } else if (*evw_cmd) {
            std::vector<std::string> inputs{ckpt, data_dir};
            if (!tune_dir.empty()) inputs.push_back(tune_dir);
            write_json(manifest_path_for(out, false), make_manifest(*evw_cmd, 0, inputs, {out}, json{{"delta", delta}}));
            const auto w = load_weights(ckpt);
            if (!tune_dir.empty()) {
                std::vector<lr::LightnessMap> maps;
                std::vector<lr::JudgmentSet> sets;
                albedo_maps(w, list_iiw(tune_dir), maps, sets);
                delta = lr::tune_delta(maps, sets);
                std::cerr << "tuned delta " << fixed(delta, 2) << "\n";
            }
            const auto items = list_iiw(data_dir);
            std::vector<lr::LightnessMap> maps;
            std::vector<lr::JudgmentSet> sets;
            albedo_maps(w, items, maps, sets);
            json rows = json::array();
            double mean = 0;
            for (std::size_t i = 0; i < items.size(); ++i) {
                const lr::WhdrResult r = lr::whdr(maps[i], sets[i], delta);
                json row = r;
                row["image"] = items[i].first.filename().string();
                rows.push_back(row);
                mean += r.whdr;
            }
            mean /= static_cast<double>(items.size());
            write_json(out, json{{"delta", delta}, {"tuned", !tune_dir.empty()}, {"mean_whdr", mean}, {"images", rows}});
            std::cerr << "mean WHDR " << fixed(mean, 4) << " at delta " << fixed(delta, 2) << "\n";
        } else if (*inspect_cmd) {
            const lr::Checkpoint ck = lr::load_checkpoint(ckpt);
            json arrays = json::array();
            for (const auto& [name, t] : ck.weights.params) arrays.push_back(json{{"name", name}, {"shape", t.shape}});
            json info{{"format_version", ck.format_version},
                      {"step", ck.step},
                      {"model_config", ck.model_config},
                      {"train_config", ck.train_config},
                      {"parameter_count", ck.weights.parameter_count()},
                      {"parameters", arrays}};
            std::vector<std::string> outputs;
            if (!out.empty()) outputs.push_back(out);
            info["manifest"] = make_manifest(*inspect_cmd, 0, {ckpt}, outputs, json::object());
            if (!out.empty()) write_json(out, info);
            std::cout << std::setw(2) << info << '\n';
        }
    } catch (const CLI::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
