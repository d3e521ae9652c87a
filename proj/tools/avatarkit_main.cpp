#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "avatarkit/config.hpp"
#include "avatarkit/dataio.hpp"
#include "avatarkit/metrics.hpp"
#include "avatarkit/reenactor.hpp"
#include "avatarkit/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonArgs {
    std::string config_file;
    std::string out;
    std::vector<std::string> overrides;
    int64_t seed = -1;
    bool deterministic = false;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool out_required = true) {
    cmd->add_option("--config", args.config_file, "JSON config file");
    auto* out = cmd->add_option("--out", args.out, "output directory");
    if (out_required) out->required();
    cmd->add_option("--set", args.overrides, "config override key.path=value")->take_all();
    cmd->add_option("--seed", args.seed, "override the run seed");
    cmd->add_flag("--deterministic", args.deterministic, "force deterministic mode");
}

json effective_config(const CommonArgs& args) {
    json cfg = args.config_file.empty() ? avk::default_config()
                                        : avk::load_config(args.config_file);
    for (const auto& ov : args.overrides) avk::apply_override(cfg, ov);
    if (args.seed >= 0) {
        cfg["synth"]["seed"] = args.seed;
        cfg["trainer"]["seed"] = args.seed;
    }
    if (args.deterministic) cfg["trainer"]["deterministic"] = true;
    return cfg;
}

avk::SynthConfig synth_from_json(const json& s) {
    avk::SynthConfig c;
    c.seed = s.value("seed", c.seed);
    c.resolution = s.value("resolution", c.resolution);
    c.frame_count = s.value("frame_count", c.frame_count);
    c.motion_amplitude = s.value("motion_amplitude", c.motion_amplitude);
    c.texture_frequency = s.value("texture_frequency", c.texture_frequency);
    c.fps = s.value("fps", c.fps);
    c.identity_tag = s.value("identity_tag", c.identity_tag);
    return c;
}

int run_synth(const CommonArgs& args) {
    json cfg = effective_config(args);
    avk::write_effective_config(cfg, args.out);
    avk::SynthConfig sc = synth_from_json(cfg["synth"]);
    auto manifest = avk::synthesize_dataset(sc, args.out);
    std::printf("synthesized %d frames at %dx%d into %s\n", manifest.frame_count,
                manifest.resolution, manifest.resolution, args.out.c_str());
    return 0;
}

int run_train(const CommonArgs& args) {
    json cfg = effective_config(args);
    avk::write_effective_config(cfg, args.out);
    std::string dataset_dir = cfg["trainer"].value("dataset", std::string());
    if (dataset_dir.empty())
        throw avk::UsageError("trainer.dataset must point at a dataset directory");
    avk::TrainConfig tc = avk::TrainConfig::from_json(cfg["trainer"]);
    auto ds = avk::load_dataset(dataset_dir);
    std::printf("training on %d frames for %d steps...\n",
                static_cast<int>(ds.frames.size()), tc.steps);
    auto manifest = avk::train(ds, tc, args.out);
    std::printf("final checkpoint: %s (step %d, hash %.12s...)\n",
                manifest.path.string().c_str(), manifest.step, manifest.content_hash.c_str());
    return 0;
}

int run_reenact(const CommonArgs& args) {
    json cfg = effective_config(args);
    avk::write_effective_config(cfg, args.out);
    const json& rc = cfg["reenact"];
    std::string checkpoint = rc.value("checkpoint", std::string());
    std::string driving = rc.value("driving", std::string());
    if (checkpoint.empty() || driving.empty())
        throw avk::UsageError("reenact.checkpoint and reenact.driving must be set");
    avk::ReenactOptions opts;
    opts.mode = rc.value("mode", std::string("self"));
    std::string bg = rc.value("background", std::string());
    if (!bg.empty()) opts.composite_background = bg;
    auto rep = avk::reenact(checkpoint, driving, opts, args.out);
    std::printf("reenacted %d frames (%s) at %.1f fps (mean %.2f ms/frame)\n", rep.frame_count,
                rep.mode.c_str(), rep.fps, rep.mean_latency_ms);
    return 0;
}

int run_eval(const CommonArgs& args, const std::string& pred, const std::string& ref) {
    json cfg = effective_config(args);
    avk::write_effective_config(cfg, args.out);
    std::string pred_dir = pred.empty() ? cfg["eval"].value("pred", std::string()) : pred;
    std::string ref_dir = ref.empty() ? cfg["eval"].value("ref", std::string()) : ref;
    if (pred_dir.empty() || ref_dir.empty())
        throw avk::UsageError("eval needs --pred and --ref directories");
    auto backbone = avk::Backbone<double>::build_surrogate(
        avk::BackboneSpec::from_json(cfg["eval"]["backbone"]));
    auto rep = avk::evaluate_dirs(pred_dir, ref_dir, backbone);
    std::ofstream rf(fs::path(args.out) / "report.json");
    rf << rep.to_json().dump(2) << "\n";
    std::printf("evaluated %d frame pairs\n", rep.frame_count);
    std::printf("  ssim        %.4f\n", rep.ssim);
    if (rep.psnr_infinite)
        std::printf("  psnr        inf (identical frames present)\n");
    else
        std::printf("  psnr        %.2f dB\n", rep.psnr_db);
    std::printf("  perceptual  %.6f\n", rep.perceptual);
    std::printf("  fid         %.6f\n", rep.fid);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"head avatar pipeline: synthesize data, train, reenact, evaluate"};
    app.require_subcommand(1);

    CommonArgs synth_args, train_args, reenact_args, eval_args;
    std::string eval_pred, eval_ref;

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    add_common(synth, synth_args);
    auto* train = app.add_subcommand("train", "train the avatar pipeline");
    add_common(train, train_args);
    auto* reenact = app.add_subcommand("reenact", "drive a checkpoint with render/uv streams");
    add_common(reenact, reenact_args);
    auto* eval = app.add_subcommand("eval", "compute image metrics between two frame sets");
    add_common(eval, eval_args);
    eval->add_option("--pred", eval_pred, "prediction directory");
    eval->add_option("--ref", eval_ref, "reference directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return 2;
    }

    try {
        if (synth->parsed()) return run_synth(synth_args);
        if (train->parsed()) return run_train(train_args);
        if (reenact->parsed()) return run_reenact(reenact_args);
        if (eval->parsed()) return run_eval(eval_args, eval_pred, eval_ref);
    } catch (const avk::UsageError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 2;
    } catch (const avk::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
