#include "avatarkit/reenactor.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>

#include "avatarkit/dataio.hpp"
#include "avatarkit/errors.hpp"
#include "avatarkit/png_io.hpp"
#include "avatarkit/trainer.hpp"

namespace avk {

using nlohmann::json;

json ReenactReport::to_json() const {
    json j;
    j["frame_count"] = frame_count;
    j["mean_latency_ms"] = mean_latency_ms;
    j["p50_ms"] = p50_ms;
    j["p90_ms"] = p90_ms;
    j["p99_ms"] = p99_ms;
    j["fps"] = fps;
    j["mode"] = mode;
    j["output_dir"] = output_dir;
    return j;
}

Tensor<float> composite(const Tensor<float>& avatar, const Tensor<float>& mask,
                        const Tensor<float>& background) {
    if (avatar.rank() != 3 || avatar.dim(0) != 3) throw ShapeError("composite avatar must be {3,H,W}");
    if (mask.rank() != 3 || mask.dim(0) != 1) throw ShapeError("composite mask must be {1,H,W}");
    if (background.shape() != avatar.shape()) throw ShapeError("composite background shape mismatch");
    if (mask.dim(1) != avatar.dim(1) || mask.dim(2) != avatar.dim(2))
        throw ShapeError("composite mask resolution mismatch");
    Tensor<float> out(avatar.shape());
    int H = avatar.dim(1), W = avatar.dim(2);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                float m = mask.at(0, y, x);
                float v = m * avatar.at(c, y, x) + (1.0f - m) * background.at(c, y, x);
                out.at(c, y, x) = std::clamp(v, 0.0f, 1.0f);
            }
    return out;
}

namespace {

double percentile(std::vector<double> sorted, double p) {
    if (sorted.empty()) return 0;
    double idx = p * (sorted.size() - 1);
    size_t lo = static_cast<size_t>(idx);
    size_t hi = std::min(lo + 1, sorted.size() - 1);
    double frac = idx - lo;
    return sorted[lo] * (1 - frac) + sorted[hi] * frac;
}

}  // namespace

ReenactReport reenact(const std::filesystem::path& checkpoint_path,
                      const std::filesystem::path& driving_dir, const ReenactOptions& opts,
                      const std::filesystem::path& out) {
    if (opts.mode != "self" && opts.mode != "cross")
        throw ValueError("reenact mode must be 'self' or 'cross', got '" + opts.mode + "'");

    TrainState state = TrainState::load_checkpoint(checkpoint_path);
    const auto& cfg = state.config();

    LoadOptions lo;
    lo.require_real = opts.mode == "self";
    lo.require_mask = false;
    Dataset driving = load_dataset(driving_dir, lo);
    if (driving.manifest.resolution != cfg.gen.resolution)
        throw ShapeError("driving resolution " + std::to_string(driving.manifest.resolution) +
                         " does not match checkpoint resolution " +
                         std::to_string(cfg.gen.resolution));

    Tensor<float> background;
    if (!opts.composite_background.empty()) {
        background = read_png(opts.composite_background);
        if (background.shape() != Shape{3, cfg.gen.resolution, cfg.gen.resolution})
            throw ShapeError("composite background must match the checkpoint resolution");
    }

    std::error_code ec;
    std::filesystem::create_directories(out / "frames", ec);
    if (ec && !std::filesystem::is_directory(out / "frames"))
        throw IoError("cannot create " + out.string());

    const auto& pipe = state.pipeline();
    auto leaves = make_leaves(state.params(), false);
    auto noise_face = pipe.stored_noise(state.params(), "face");
    auto noise_bg = pipe.stored_noise(state.params(), "background");
    auto noise_avatar = pipe.stored_noise(state.params(), "avatar");

    // canvases once; latents and noise are frozen at their checkpoint values
    Tensor<float> face_canvas =
        pipe.face_net().forward(leaves, leaf_at(leaves, "latent.face"), noise_face).val();
    Tensor<float> background_canvas =
        pipe.background_net()
            .forward(leaves, leaf_at(leaves, "latent.background"), noise_bg)
            .val();

    std::vector<double> latencies;
    latencies.reserve(driving.frames.size());
    for (const auto& frame : driving.frames) {
        if (frame.render_image.empty() || frame.uv_image.empty())
            throw IntegrityError("driving frame " + std::to_string(frame.frame_id) +
                                 " is missing render or uv");
        auto t0 = std::chrono::steady_clock::now();
        Var<float> cond = condition_stack(constant(face_canvas), constant(background_canvas),
                                          to_model_range(constant(frame.render_image)),
                                          to_model_range(constant(frame.uv_image)));
        auto gen = pipe.avatar_net().forward(leaves, cond, leaf_at(leaves, "latent.avatar"),
                                             noise_avatar);
        auto t1 = std::chrono::steady_clock::now();
        latencies.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());

        const Tensor<float>& avatar = gen.avatar.val();
        const Tensor<float>& mask = gen.mask.val();
        if (!avatar.all_finite() || !mask.all_finite())
            throw TrainError("non-finite generator output at frame " +
                             std::to_string(frame.frame_id));
        write_png(out / "frames" / frame_file_name(frame.frame_id, "avatar"), avatar);
        write_png(out / "frames" / frame_file_name(frame.frame_id, "mask"), mask);
        if (!background.empty())
            write_png(out / "frames" / frame_file_name(frame.frame_id, "composite"),
                      composite(avatar, mask, background));
    }

    ReenactReport rep;
    rep.frame_count = static_cast<int>(driving.frames.size());
    double total = 0;
    for (double v : latencies) total += v;
    rep.mean_latency_ms = latencies.empty() ? 0 : total / latencies.size();
    std::vector<double> sorted = latencies;
    std::sort(sorted.begin(), sorted.end());
    rep.p50_ms = percentile(sorted, 0.50);
    rep.p90_ms = percentile(sorted, 0.90);
    rep.p99_ms = percentile(sorted, 0.99);
    rep.fps = rep.mean_latency_ms > 0 ? 1000.0 / rep.mean_latency_ms : 0;
    rep.mode = opts.mode;
    rep.output_dir = out.string();

    std::ofstream rf(out / "report.json");
    if (!rf) throw IoError("cannot write report.json in " + out.string());
    rf << rep.to_json().dump(2) << "\n";
    return rep;
}

}  // namespace avk
