#include "avatarkit/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "avatarkit/errors.hpp"
#include "avatarkit/png_io.hpp"

namespace avk {

using nlohmann::json;

void GaussianStats::validate() const {
    if (mean.rank() != 1 || covariance.rank() != 2) throw ShapeError("gaussian stats shapes");
    int d = mean.dim(0);
    if (covariance.dim(0) != d || covariance.dim(1) != d)
        throw ShapeError("gaussian covariance dimension mismatch");
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
            if (std::abs(covariance.at(i, j) - covariance.at(j, i)) > 1e-8)
                throw ValueError("gaussian covariance not symmetric");
}

json MetricReport::to_json() const {
    json j;
    j["ssim"] = ssim;
    if (psnr_infinite)
        j["psnr_db"] = nullptr;
    else
        j["psnr_db"] = psnr_db;
    j["psnr_infinite"] = psnr_infinite;
    j["perceptual"] = perceptual;
    j["fid"] = fid;
    j["frame_count"] = frame_count;
    j["backbone_hash"] = backbone_hash;
    return j;
}

double psnr(const Tensor<double>& a, const Tensor<double>& b) {
    if (a.shape() != b.shape()) throw ShapeError("psnr shape mismatch");
    double mse = 0;
    for (int64_t i = 0; i < a.numel(); ++i) mse += (a[i] - b[i]) * (a[i] - b[i]);
    mse /= static_cast<double>(a.numel());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

namespace {

constexpr int kWin = 11;

const double* gaussian_window() {
    static double w[kWin * kWin];
    static bool ready = false;
    if (!ready) {
        double sigma = 1.5, sum = 0;
        double g1[kWin];
        for (int i = 0; i < kWin; ++i) {
            double d = i - (kWin - 1) / 2.0;
            g1[i] = std::exp(-d * d / (2 * sigma * sigma));
        }
        for (int i = 0; i < kWin; ++i)
            for (int j = 0; j < kWin; ++j) {
                w[i * kWin + j] = g1[i] * g1[j];
                sum += w[i * kWin + j];
            }
        for (int i = 0; i < kWin * kWin; ++i) w[i] /= sum;
        ready = true;
    }
    return w;
}

}  // namespace

double ssim(const Tensor<double>& a, const Tensor<double>& b) {
    if (a.shape() != b.shape()) throw ShapeError("ssim shape mismatch");
    if (a.rank() != 3) throw ShapeError("ssim expects CHW rasters");
    int C = a.dim(0), H = a.dim(1), W = a.dim(2);
    if (H < kWin || W < kWin)
        throw ShapeError("ssim needs min side >= 11, got " + shape_str(a.shape()));

    const double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
    const double* w = gaussian_window();
    double acc = 0;
    int64_t count = 0;
    for (int c = 0; c < C; ++c)
        for (int y = 0; y + kWin <= H; ++y)
            for (int x = 0; x + kWin <= W; ++x) {
                double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
                for (int i = 0; i < kWin; ++i)
                    for (int j = 0; j < kWin; ++j) {
                        double wa = w[i * kWin + j];
                        double va = a.at(c, y + i, x + j);
                        double vb = b.at(c, y + i, x + j);
                        ma += wa * va;
                        mb += wa * vb;
                        saa += wa * va * va;
                        sbb += wa * vb * vb;
                        sab += wa * va * vb;
                    }
                double var_a = saa - ma * ma;
                double var_b = sbb - mb * mb;
                double cov = sab - ma * mb;
                double num = (2 * ma * mb + C1) * (2 * cov + C2);
                double den = (ma * ma + mb * mb + C1) * (var_a + var_b + C2);
                acc += num / den;
                ++count;
            }
    return acc / static_cast<double>(count);
}

double perceptual_distance(const Tensor<double>& a, const Tensor<double>& b,
                           const Backbone<double>& backbone) {
    if (a.shape() != b.shape()) throw ShapeError("perceptual_distance shape mismatch");
    auto fa = backbone.extract_features(a);
    auto fb = backbone.extract_features(b);
    double total = 0;
    for (size_t l = 0; l < fa.maps.size(); ++l) {
        const auto& ta = fa.maps[l];
        const auto& tb = fb.maps[l];
        int C = ta.dim(0), H = ta.dim(1), W = ta.dim(2);
        double layer = 0;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double na = 0, nb = 0;
                for (int c = 0; c < C; ++c) {
                    na += ta.at(c, y, x) * ta.at(c, y, x);
                    nb += tb.at(c, y, x) * tb.at(c, y, x);
                }
                na = std::sqrt(na) + 1e-8;
                nb = std::sqrt(nb) + 1e-8;
                for (int c = 0; c < C; ++c) {
                    double d = ta.at(c, y, x) / na - tb.at(c, y, x) / nb;
                    layer += d * d;
                }
            }
        total += layer / (static_cast<double>(C) * H * W);
    }
    return total;
}

GaussianStats fit_gaussian(const std::vector<Tensor<double>>& embeddings) {
    if (embeddings.size() < 2)
        throw DegenerateInputError("fit_gaussian needs at least 2 embedding vectors");
    int d = embeddings[0].dim(0);
    for (const auto& e : embeddings)
        if (e.rank() != 1 || e.dim(0) != d) throw ShapeError("embedding dimension mismatch");
    int n = static_cast<int>(embeddings.size());

    GaussianStats s;
    s.mean = Tensor<double>(Shape{d});
    for (const auto& e : embeddings)
        for (int i = 0; i < d; ++i) s.mean[i] += e[i];
    for (int i = 0; i < d; ++i) s.mean[i] /= n;

    s.covariance = Tensor<double>(Shape{d, d});
    for (const auto& e : embeddings)
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                s.covariance.at(i, j) += (e[i] - s.mean[i]) * (e[j] - s.mean[j]);
    for (int64_t k = 0; k < s.covariance.numel(); ++k) s.covariance[k] /= (n - 1);
    // enforce exact symmetry
    for (int i = 0; i < d; ++i)
        for (int j = i + 1; j < d; ++j) {
            double v = 0.5 * (s.covariance.at(i, j) + s.covariance.at(j, i));
            s.covariance.at(i, j) = v;
            s.covariance.at(j, i) = v;
        }
    return s;
}

double frechet_distance(const GaussianStats& s1, const GaussianStats& s2) {
    s1.validate();
    s2.validate();
    if (s1.dim() != s2.dim()) throw ShapeError("frechet_distance dimension mismatch");
    const int d = s1.dim();
    using Mat = Eigen::MatrixXd;
    Eigen::Map<const Mat> c1(s1.covariance.data(), d, d);
    Eigen::Map<const Mat> c2(s2.covariance.data(), d, d);

    auto psd_eigen = [](const Mat& m, const char* what) {
        Eigen::SelfAdjointEigenSolver<Mat> es(m);
        if (es.info() != Eigen::Success) throw ValueError("eigendecomposition failed");
        Eigen::VectorXd ev = es.eigenvalues();
        for (int i = 0; i < ev.size(); ++i) {
            if (ev[i] < -1e-6)
                throw ValueError(std::string(what) + " is not PSD within tolerance (eigenvalue " +
                                 std::to_string(ev[i]) + ")");
            if (ev[i] < 0) ev[i] = 0;
        }
        return std::make_pair(es.eigenvectors(), ev);
    };

    // sqrt(S1) via eigendecomposition, then the symmetrized product
    auto [q1, e1] = psd_eigen(c1, "covariance 1");
    Mat root1 = q1 * e1.cwiseSqrt().asDiagonal() * q1.transpose();
    Mat prod = root1 * c2 * root1;
    prod = 0.5 * (prod + prod.transpose());
    auto [qp, ep] = psd_eigen(prod, "covariance product");
    double tr_sqrt = ep.cwiseSqrt().sum();

    double mu2 = 0;
    for (int i = 0; i < d; ++i) {
        double diff = s1.mean[i] - s2.mean[i];
        mu2 += diff * diff;
    }
    double dist = mu2 + c1.trace() + c2.trace() - 2.0 * tr_sqrt;
    return dist < 0 ? 0.0 : dist;
}

namespace {

std::map<int, std::filesystem::path> index_frames(const std::filesystem::path& dir,
                                                  const std::string& suffix) {
    namespace fs = std::filesystem;
    std::map<int, fs::path> out;
    fs::path frames = dir / "frames";
    if (!fs::is_directory(frames)) throw FormatError("no frames/ directory under " + dir.string());
    for (const auto& e : fs::directory_iterator(frames)) {
        std::string name = e.path().filename().string();
        if (name.size() < suffix.size() + 6) continue;
        if (name.substr(6) != suffix) continue;
        out[std::stoi(name.substr(0, 6))] = e.path();
    }
    return out;
}

}  // namespace

MetricReport evaluate_dirs(const std::filesystem::path& pred, const std::filesystem::path& ref,
                           const Backbone<double>& backbone) {
    auto pred_frames = index_frames(pred, "_avatar.png");
    if (pred_frames.empty()) pred_frames = index_frames(pred, "_real.png");
    auto ref_frames = index_frames(ref, "_real.png");
    if (pred_frames.empty() || ref_frames.empty())
        throw FormatError("no frames to evaluate under " + pred.string() + " / " + ref.string());

    MetricReport r;
    r.backbone_hash = backbone.provenance_hash();
    std::vector<Tensor<double>> pred_emb, ref_emb;
    double ssim_acc = 0, psnr_acc = 0, perc_acc = 0;
    int psnr_finite = 0;
    for (const auto& [id, ppath] : pred_frames) {
        auto rit = ref_frames.find(id);
        if (rit == ref_frames.end()) continue;
        Tensor<double> p = cast<double>(read_png(ppath));
        Tensor<double> q = cast<double>(read_png(rit->second));
        ssim_acc += ssim(p, q);
        double ps = psnr(p, q);
        if (std::isinf(ps))
            r.psnr_infinite = true;
        else {
            psnr_acc += ps;
            ++psnr_finite;
        }
        perc_acc += perceptual_distance(p, q, backbone);
        pred_emb.push_back(backbone.final_embedding_value(p));
        ref_emb.push_back(backbone.final_embedding_value(q));
        ++r.frame_count;
    }
    if (r.frame_count == 0) throw FormatError("prediction and reference frame ids do not overlap");
    r.ssim = ssim_acc / r.frame_count;
    r.psnr_db = psnr_finite > 0 ? psnr_acc / psnr_finite : std::numeric_limits<double>::infinity();
    if (psnr_finite == 0) r.psnr_infinite = true;
    r.perceptual = perc_acc / r.frame_count;
    r.fid = frechet_distance(fit_gaussian(pred_emb), fit_gaussian(ref_emb));
    return r;
}

}  // namespace avk
