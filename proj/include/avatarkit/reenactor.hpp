#pragma once

#include <filesystem>
#include <string>

#include "avatarkit/tensor.hpp"
#include "json.hpp"

namespace avk {

struct ReenactReport {
    int frame_count = 0;
    double mean_latency_ms = 0;
    double p50_ms = 0, p90_ms = 0, p99_ms = 0;
    double fps = 0;
    std::string mode;  // "self" or "cross"
    std::string output_dir;

    nlohmann::json to_json() const;
};

struct ReenactOptions {
    std::string mode = "self";
    // optional background plate; when set, frames/%06d_composite.png is
    // written next to the avatar/mask outputs
    std::filesystem::path composite_background;
};

// Drives a trained checkpoint with a dataset's render/uv streams. The face
// and background canvases are generated once from the frozen latents and
// stored noise; per-frame latency covers avatar generation only.
ReenactReport reenact(const std::filesystem::path& checkpoint_path,
                      const std::filesystem::path& driving_dir, const ReenactOptions& opts,
                      const std::filesystem::path& out);

// mask (.) avatar + (1 - mask) (.) background, clamped to [0,1]
Tensor<float> composite(const Tensor<float>& avatar, const Tensor<float>& mask,
                        const Tensor<float>& background);

}  // namespace avk
