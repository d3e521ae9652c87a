#pragma once

#include <filesystem>

#include "avatarkit/tensor.hpp"

namespace avk {

// 8-bit PNG <-> float CHW raster in [0,1]. Grayscale files load as {1,H,W},
// RGB as {3,H,W}; palettes and 16-bit depths are converted on read. Writes
// use fixed encoder settings so identical rasters produce identical bytes.
Tensor<float> read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Tensor<float>& raster);

}  // namespace avk
