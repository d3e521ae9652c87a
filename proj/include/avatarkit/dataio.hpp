#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "avatarkit/tensor.hpp"

namespace avk {

// One tracked frame. Rasters are float CHW in [0,1]:
//   real_image      {3,H,W}  the frame itself
//   render_image    {3,H,W}  flat 3-D face render, black background
//   uv_image        {3,H,W}  face coordinates in R,G; validity in B
//   background_mask {1,H,W}  1 = background pixel
// real_image and background_mask may be absent when a dataset is loaded as a
// cross-reenactment driver.
struct FrameSample {
    int frame_id = 0;
    Tensor<float> real_image;
    Tensor<float> render_image;
    Tensor<float> uv_image;
    Tensor<float> background_mask;
};

struct DatasetManifest {
    int resolution = 0;
    int frame_count = 0;
    double fps = 25.0;
    std::string identity_tag;
    std::optional<int64_t> seed;

    void validate() const;  // throws FormatError
};

struct SynthConfig {
    int64_t seed = 1;
    int resolution = 64;
    int frame_count = 8;
    double motion_amplitude = 0.5;   // radians
    double texture_frequency = 6.0;  // stripe cycles per face width
    double fps = 25.0;
    std::string identity_tag = "synthetic";

    void validate() const;  // throws ValueError
};

struct LoadOptions {
    bool require_real = true;
    bool require_mask = true;
};

struct Dataset {
    DatasetManifest manifest;
    std::vector<FrameSample> frames;
};

// Directory layout: <dir>/manifest.json + <dir>/frames/%06d_{real,render,uv,mask}.png
Dataset load_dataset(const std::filesystem::path& dir, const LoadOptions& opts = {});

DatasetManifest synthesize_dataset(const SynthConfig& cfg, const std::filesystem::path& out);

// Lists every violated FrameSample invariant; empty result means valid.
std::vector<std::string> validate_sample(const FrameSample& s);

void write_manifest(const DatasetManifest& m, const std::filesystem::path& dir);
DatasetManifest read_manifest(const std::filesystem::path& dir);

std::string frame_file_name(int frame_id, const char* kind);

}  // namespace avk
