#include "avatarkit/dataio.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "avatarkit/errors.hpp"
#include "avatarkit/png_io.hpp"
#include "avatarkit/rng.hpp"
#include "json.hpp"

namespace avk {

using nlohmann::json;

namespace {

bool is_pow2(int v) { return v > 0 && (v & (v - 1)) == 0; }

constexpr float kFaceColor[3] = {0.75f, 0.55f, 0.45f};
constexpr float kShoulderColor[3] = {0.30f, 0.34f, 0.52f};

struct Pose {
    double cx, cy, rx, ry, cos_t, sin_t;
    // normalized local coordinates of a pixel; inside the head iff |n| <= 1
    void local(double px, double py, double& nx, double& ny) const {
        double dx = px - cx, dy = py - cy;
        double lx = cos_t * dx + sin_t * dy;
        double ly = -sin_t * dx + cos_t * dy;
        nx = lx / rx;
        ny = ly / ry;
    }
};

double hash_dither(int64_t seed, int frame, int y, int x, int chan) {
    uint64_t h = detail::fmix64(static_cast<uint64_t>(seed) ^ 0x6a09e667f3bcc908ULL);
    h = detail::fmix64(h ^ (static_cast<uint64_t>(y) << 32 | static_cast<uint64_t>(x)));
    h = detail::fmix64(h ^ static_cast<uint64_t>(chan * 7919 + frame * 0));
    return static_cast<double>(h >> 11) * 0x1.0p-53;  // [0,1)
}

}  // namespace

std::string frame_file_name(int frame_id, const char* kind) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%06d_%s.png", frame_id, kind);
    return buf;
}

void DatasetManifest::validate() const {
    if (!is_pow2(resolution) || resolution < 32 || resolution > 512)
        throw FormatError("manifest resolution must be a power of two in [32,512], got " +
                          std::to_string(resolution));
    if (frame_count < 1) throw FormatError("manifest frame_count must be >= 1");
    if (fps <= 0) throw FormatError("manifest fps must be positive");
}

void SynthConfig::validate() const {
    if (frame_count < 2) throw ValueError("synth frame_count must be >= 2");
    if (!is_pow2(resolution) || resolution < 32 || resolution > 512)
        throw ValueError("synth resolution must be a power of two in [32,512]");
    if (fps <= 0) throw ValueError("synth fps must be positive");
}

void write_manifest(const DatasetManifest& m, const std::filesystem::path& dir) {
    json j;
    j["resolution"] = m.resolution;
    j["frame_count"] = m.frame_count;
    j["fps"] = m.fps;
    j["identity_tag"] = m.identity_tag;
    if (m.seed) j["seed"] = *m.seed;
    std::ofstream f(dir / "manifest.json");
    if (!f) throw IoError("cannot write manifest in " + dir.string());
    f << j.dump(2) << "\n";
}

DatasetManifest read_manifest(const std::filesystem::path& dir) {
    std::ifstream f(dir / "manifest.json");
    if (!f) throw FormatError("missing manifest.json in " + dir.string());
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad manifest.json: ") + e.what());
    }
    DatasetManifest m;
    try {
        m.resolution = j.at("resolution").get<int>();
        m.frame_count = j.at("frame_count").get<int>();
        m.fps = j.at("fps").get<double>();
        m.identity_tag = j.at("identity_tag").get<std::string>();
        if (j.contains("seed")) m.seed = j["seed"].get<int64_t>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad manifest.json: ") + e.what());
    }
    m.validate();
    return m;
}

std::vector<std::string> validate_sample(const FrameSample& s) {
    std::vector<std::string> out;
    if (s.render_image.empty() || s.uv_image.empty()) {
        out.push_back("missing render or uv raster");
        return out;
    }
    if (s.render_image.rank() != 3 || s.render_image.dim(0) != 3)
        out.push_back("render_image must be {3,H,W}");
    if (s.uv_image.rank() != 3 || s.uv_image.dim(0) != 3) out.push_back("uv_image must be {3,H,W}");
    if (!s.real_image.empty() && (s.real_image.rank() != 3 || s.real_image.dim(0) != 3))
        out.push_back("real_image must be {3,H,W}");
    if (!s.background_mask.empty() &&
        (s.background_mask.rank() != 3 || s.background_mask.dim(0) != 1))
        out.push_back("background_mask must be {1,H,W}");
    if (!out.empty()) return out;

    int H = s.render_image.dim(1), W = s.render_image.dim(2);
    auto same_hw = [&](const Tensor<float>& t) {
        return t.empty() || (t.dim(1) == H && t.dim(2) == W);
    };
    if (!same_hw(s.uv_image) || !same_hw(s.real_image) || !same_hw(s.background_mask))
        out.push_back("rasters do not share HxW");

    auto in_range = [](const Tensor<float>& t) {
        for (int64_t i = 0; i < t.numel(); ++i)
            if (!(t[i] >= 0.0f && t[i] <= 1.0f)) return false;
        return true;
    };
    if (!in_range(s.render_image)) out.push_back("render_image values outside [0,1]");
    if (!in_range(s.uv_image)) out.push_back("uv_image values outside [0,1]");
    if (!s.real_image.empty() && !in_range(s.real_image))
        out.push_back("real_image values outside [0,1]");
    if (!s.background_mask.empty() && !in_range(s.background_mask))
        out.push_back("background_mask values outside [0,1]");
    if (!out.empty()) return out;

    // validity is 0 exactly where the render is background-colored (black)
    int bad_bg = 0, bad_fg = 0;
    if (s.uv_image.dim(1) == H && s.uv_image.dim(2) == W) {
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                bool bg = s.render_image.at(0, y, x) == 0.0f &&
                          s.render_image.at(1, y, x) == 0.0f && s.render_image.at(2, y, x) == 0.0f;
                bool valid = s.uv_image.at(2, y, x) > 0.0f;
                if (bg && valid) ++bad_bg;
                if (!bg && !valid) ++bad_fg;
            }
    }
    if (bad_bg > 0)
        out.push_back("uv validity nonzero on " + std::to_string(bad_bg) +
                      " background-colored render pixels");
    if (bad_fg > 0)
        out.push_back("uv validity zero on " + std::to_string(bad_fg) +
                      " face-rendered pixels");
    return out;
}

DatasetManifest synthesize_dataset(const SynthConfig& cfg, const std::filesystem::path& out) {
    cfg.validate();
    std::error_code ec;
    std::filesystem::create_directories(out / "frames", ec);
    if (ec || !std::filesystem::is_directory(out / "frames"))
        throw IoError("cannot create output directory " + out.string());

    const int R = cfg.resolution;
    const double res = R;

    // fixed scene parameters, derived once from the seed
    RandomStream scene(static_cast<uint64_t>(cfg.seed), "synth/scene");
    double bg_fx[3], bg_fy[3], bg_phase[3];
    for (int c = 0; c < 3; ++c) {
        bg_fx[c] = scene.uniform(5.0, 11.0);
        bg_fy[c] = scene.uniform(5.0, 11.0);
        bg_phase[c] = scene.uniform(0.0, 6.283185307179586);
    }
    const double cx = 0.50 * res, cy = 0.42 * res;
    const double rx = 0.26 * res, ry = 0.34 * res;
    const double sh_x0 = 0.16 * res, sh_x1 = 0.84 * res, sh_y0 = 0.78 * res;

    for (int t = 0; t < cfg.frame_count; ++t) {
        double theta = cfg.motion_amplitude * std::sin(2.0 * M_PI * t / cfg.frame_count);
        Pose pose{cx, cy, rx, ry, std::cos(theta), std::sin(theta)};

        Tensor<float> real(Shape{3, R, R}), render(Shape{3, R, R}), uv(Shape{3, R, R}),
            mask(Shape{1, R, R});

        for (int y = 0; y < R; ++y)
            for (int x = 0; x < R; ++x) {
                double px = x + 0.5, py = y + 0.5;
                double nx, ny;
                pose.local(px, py, nx, ny);
                bool in_head = nx * nx + ny * ny <= 1.0;
                bool in_shoulders = px >= sh_x0 && px < sh_x1 && py >= sh_y0;

                // background texture, fixed across frames
                double bg[3];
                for (int c = 0; c < 3; ++c) {
                    double v = 0.55 + 0.22 * std::sin(2.0 * M_PI *
                                                          (bg_fx[c] * px + bg_fy[c] * py) / res +
                                                      bg_phase[c]);
                    v += 0.06 * (hash_dither(cfg.seed, 0, y, x, c) - 0.5);
                    bg[c] = v;
                }

                if (in_head) {
                    double stripe = 0.10 * std::sin(2.0 * M_PI * cfg.texture_frequency * nx) +
                                    0.05 * std::sin(2.0 * M_PI * cfg.texture_frequency * 1.7 * ny);
                    for (int c = 0; c < 3; ++c) {
                        render.at(c, y, x) = kFaceColor[c];
                        real.at(c, y, x) =
                            static_cast<float>(std::clamp(kFaceColor[c] + stripe, 0.0, 1.0));
                    }
                    uv.at(0, y, x) = static_cast<float>(std::clamp((nx + 1.0) / 2.0, 0.0, 1.0));
                    uv.at(1, y, x) = static_cast<float>(std::clamp((ny + 1.0) / 2.0, 0.0, 1.0));
                    uv.at(2, y, x) = 1.0f;
                    mask.at(0, y, x) = 0.0f;
                } else if (in_shoulders) {
                    double shade = 1.0 - 0.25 * (py - sh_y0) / (res - sh_y0);
                    for (int c = 0; c < 3; ++c)
                        real.at(c, y, x) =
                            static_cast<float>(std::clamp(kShoulderColor[c] * shade, 0.0, 1.0));
                    mask.at(0, y, x) = 0.0f;
                } else {
                    for (int c = 0; c < 3; ++c)
                        real.at(c, y, x) = static_cast<float>(std::clamp(bg[c], 0.0, 1.0));
                    mask.at(0, y, x) = 1.0f;
                }
            }

        const auto dir = out / "frames";
        write_png(dir / frame_file_name(t, "real"), real);
        write_png(dir / frame_file_name(t, "render"), render);
        write_png(dir / frame_file_name(t, "uv"), uv);
        write_png(dir / frame_file_name(t, "mask"), mask);
    }

    DatasetManifest m;
    m.resolution = cfg.resolution;
    m.frame_count = cfg.frame_count;
    m.fps = cfg.fps;
    m.identity_tag = cfg.identity_tag;
    m.seed = cfg.seed;
    write_manifest(m, out);
    return m;
}

namespace {

FrameSample load_frame(const std::filesystem::path& dir, int id, int resolution,
                       const LoadOptions& opts) {
    FrameSample s;
    s.frame_id = id;
    auto frames = dir / "frames";
    auto read_required = [&](const char* kind) {
        auto p = frames / frame_file_name(id, kind);
        if (!std::filesystem::exists(p))
            throw IntegrityError("frame " + std::to_string(id) + " is missing its " + kind +
                                 " raster");
        return read_png(p);
    };
    s.render_image = read_required("render");
    s.uv_image = read_required("uv");
    if (opts.require_real || std::filesystem::exists(frames / frame_file_name(id, "real")))
        s.real_image = read_required("real");
    if (opts.require_mask || std::filesystem::exists(frames / frame_file_name(id, "mask")))
        s.background_mask = read_required("mask");

    auto check_res = [&](const Tensor<float>& t, const char* kind) {
        if (t.empty()) return;
        if (t.dim(1) != resolution || t.dim(2) != resolution)
            throw IntegrityError("frame " + std::to_string(id) + " " + kind + " raster is " +
                                 std::to_string(t.dim(2)) + "x" + std::to_string(t.dim(1)) +
                                 ", manifest says " + std::to_string(resolution));
    };
    check_res(s.render_image, "render");
    check_res(s.uv_image, "uv");
    check_res(s.real_image, "real");
    check_res(s.background_mask, "mask");

    auto violations = validate_sample(s);
    if (!violations.empty()) {
        std::string msg = "frame " + std::to_string(id) + " violates the dataset contract:";
        for (const auto& v : violations) msg += " " + v + ";";
        throw IntegrityError(msg);
    }
    return s;
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& dir, const LoadOptions& opts) {
    Dataset ds;
    ds.manifest = read_manifest(dir);
    const int n = ds.manifest.frame_count;
    ds.frames.resize(static_cast<size_t>(n));

    // prefetch on two workers; placement by frame index keeps order deterministic
    int workers = n >= 16 ? 2 : 1;
    std::exception_ptr err;
    std::mutex err_mu;
    auto run = [&](int w) {
        for (int i = w; i < n; i += workers) {
            try {
                ds.frames[static_cast<size_t>(i)] =
                    load_frame(dir, i, ds.manifest.resolution, opts);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mu);
                if (!err) err = std::current_exception();
                return;
            }
        }
    };
    if (workers == 1) {
        run(0);
    } else {
        std::thread t1(run, 0);
        run(1);
        t1.join();
    }
    if (err) std::rethrow_exception(err);
    return ds;
}

}  // namespace avk
