#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "avatarkit/backbones.hpp"
#include "avatarkit/tensor.hpp"
#include "json.hpp"

namespace avk {

struct GaussianStats {
    Tensor<double> mean;        // {d}
    Tensor<double> covariance;  // {d,d}, symmetric

    void validate() const;
    int dim() const { return mean.dim(0); }
};

struct MetricReport {
    double ssim = 0;
    double psnr_db = 0;
    bool psnr_infinite = false;
    double perceptual = 0;
    double fid = 0;
    int frame_count = 0;
    std::string backbone_hash;

    nlohmann::json to_json() const;
};

// 10*log10(1/MSE) for [0,1] rasters; +infinity when the images are identical
double psnr(const Tensor<double>& a, const Tensor<double>& b);

// windowed SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, unit
// dynamic range, valid windows only, mean over windows and channels
double ssim(const Tensor<double>& a, const Tensor<double>& b);

// per tap: channel-unit-normalized features, mean squared difference over
// space and channels, unit layer weights, summed over taps
double perceptual_distance(const Tensor<double>& a, const Tensor<double>& b,
                           const Backbone<double>& backbone);

// sample mean and unbiased sample covariance, symmetrized
GaussianStats fit_gaussian(const std::vector<Tensor<double>>& embeddings);

// squared Frechet distance between Gaussians:
//   |mu1-mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))
double frechet_distance(const GaussianStats& s1, const GaussianStats& s2);

// Pairs prediction frames against reference frames by id and aggregates all
// four metrics. pred holds frames/%06d_avatar.png (reenactment output), ref
// holds frames/%06d_real.png (dataset layout).
MetricReport evaluate_dirs(const std::filesystem::path& pred, const std::filesystem::path& ref,
                           const Backbone<double>& backbone);

}  // namespace avk
