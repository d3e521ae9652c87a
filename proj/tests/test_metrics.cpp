#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>

#include "avatarkit/dataio.hpp"
#include "avatarkit/metrics.hpp"
#include "avatarkit/png_io.hpp"
#include "oracles.hpp"
#include "testutil.hpp"

using namespace avk;
using testutil::random_tensor;
using testutil::random_uniform_tensor;

namespace {

BackboneSpec metric_spec() {
    BackboneSpec s;
    s.seed = 21;
    s.stages = {{8, 2}, {12, 2}};
    s.tap_layers = {0, 1};
    return s;
}

// extended-precision reference for the Frechet distance
double frechet_longdouble(const GaussianStats& s1, const GaussianStats& s2) {
    using Mat = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
    int d = s1.dim();
    Mat c1(d, d), c2(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
            c1(i, j) = static_cast<long double>(s1.covariance.at(i, j));
            c2(i, j) = static_cast<long double>(s2.covariance.at(i, j));
        }
    Eigen::SelfAdjointEigenSolver<Mat> es1(c1);
    Mat root = es1.eigenvectors() *
               es1.eigenvalues().cwiseMax(0.0L).cwiseSqrt().asDiagonal() *
               es1.eigenvectors().transpose();
    Mat prod = root * c2 * root;
    prod = 0.5L * (prod + prod.transpose());
    Eigen::SelfAdjointEigenSolver<Mat> es2(prod);
    long double tr_sqrt = es2.eigenvalues().cwiseMax(0.0L).cwiseSqrt().sum();
    long double mu2 = 0;
    for (int i = 0; i < d; ++i) {
        long double diff = s1.mean[i] - s2.mean[i];
        mu2 += diff * diff;
    }
    long double dist = mu2 + c1.trace() + c2.trace() - 2.0L * tr_sqrt;
    return static_cast<double>(dist < 0 ? 0.0L : dist);
}

GaussianStats random_psd_stats(uint64_t seed, int d) {
    RandomStream rs(seed, "psd");
    GaussianStats s;
    s.mean = Tensor<double>(Shape{d});
    rs.fill_normal(s.mean);
    Tensor<double> a(Shape{d, d});
    rs.fill_normal(a);
    s.covariance = Tensor<double>(Shape{d, d});
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
            double acc = 0;
            for (int k = 0; k < d; ++k) acc += a.at(i, k) * a.at(j, k);
            s.covariance.at(i, j) = acc / d;
        }
    return s;
}

}  // namespace

TEST_CASE("psnr analytic cases and oracle") {
    auto a = random_uniform_tensor({3, 8, 8}, 1);
    CHECK(std::isinf(psnr(a, a)));

    Tensor<double> b = map1(a, [](double v) { return v + 0.1; });
    CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-9));

    auto c = random_uniform_tensor({3, 8, 8}, 2);
    double expect = 10.0 * std::log10(1.0 / oracles::mse_bruteforce(a, c));
    CHECK(psnr(a, c) == doctest::Approx(expect).epsilon(1e-9));

    Tensor<double> wrong(Shape{3, 4, 4});
    CHECK_THROWS_AS(psnr(a, wrong), ShapeError);
}

TEST_CASE("ssim identity is exactly 1") {
    auto a = random_uniform_tensor({3, 16, 16}, 3);
    CHECK(ssim(a, a) == 1.0);
}

TEST_CASE("ssim of a binary image against its inverse is negative") {
    Tensor<double> a(Shape{1, 16, 16});
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) a.at(0, y, x) = (x + y) % 2 ? 1.0 : 0.0;
    Tensor<double> inv = map1(a, [](double v) { return 1.0 - v; });
    CHECK(ssim(a, inv) < 0.0);
}

TEST_CASE("ssim constant-image closed form") {
    Tensor<double> a(Shape{1, 12, 12}, 0.3), b(Shape{1, 12, 12}, 0.7);
    const double C1 = 1e-4;
    double expect = (2 * 0.3 * 0.7 + C1) / (0.3 * 0.3 + 0.7 * 0.7 + C1);
    CHECK(ssim(a, b) == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("ssim channel permutation invariance and window minimum") {
    auto a = random_uniform_tensor({3, 16, 16}, 4);
    auto b = random_uniform_tensor({3, 16, 16}, 5);
    // permute channels 0->1->2->0 in both images
    auto permute = [](const Tensor<double>& t) {
        Tensor<double> out(t.shape());
        int H = t.dim(1), W = t.dim(2);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) out.at((c + 1) % 3, y, x) = t.at(c, y, x);
        return out;
    };
    CHECK(ssim(permute(a), permute(b)) == doctest::Approx(ssim(a, b)).epsilon(1e-12));

    Tensor<double> tiny(Shape{1, 8, 8}, 0.5);
    CHECK_THROWS_AS(ssim(tiny, tiny), ShapeError);
}

TEST_CASE("perceptual distance: identity, symmetry, oracle") {
    auto bb = Backbone<double>::build_surrogate(metric_spec());
    auto a = random_uniform_tensor({3, 16, 16}, 6);
    auto b = random_uniform_tensor({3, 16, 16}, 7);
    CHECK(perceptual_distance(a, a, bb) == doctest::Approx(0.0));
    CHECK(perceptual_distance(a, b, bb) ==
          doctest::Approx(perceptual_distance(b, a, bb)).epsilon(1e-9));

    // nested-loop reference
    auto fa = bb.extract_features(a);
    auto fb = bb.extract_features(b);
    double expect = 0;
    for (size_t l = 0; l < fa.maps.size(); ++l) {
        int C = fa.maps[l].dim(0), H = fa.maps[l].dim(1), W = fa.maps[l].dim(2);
        double layer = 0;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double na = 1e-8, nb = 1e-8;
                double sa = 0, sb = 0;
                for (int c = 0; c < C; ++c) {
                    sa += fa.maps[l].at(c, y, x) * fa.maps[l].at(c, y, x);
                    sb += fb.maps[l].at(c, y, x) * fb.maps[l].at(c, y, x);
                }
                na += std::sqrt(sa);
                nb += std::sqrt(sb);
                for (int c = 0; c < C; ++c) {
                    double d = fa.maps[l].at(c, y, x) / na - fb.maps[l].at(c, y, x) / nb;
                    layer += d * d;
                }
            }
        expect += layer / (static_cast<double>(C) * H * W);
    }
    CHECK(perceptual_distance(a, b, bb) == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("fit_gaussian hand case, duplication, naive oracle") {
    std::vector<Tensor<double>> two = {Tensor<double>(Shape{2}, {0.0, 0.0}),
                                       Tensor<double>(Shape{2}, {2.0, 0.0})};
    auto s = fit_gaussian(two);
    CHECK(s.mean[0] == doctest::Approx(1.0));
    CHECK(s.mean[1] == doctest::Approx(0.0));
    CHECK(s.covariance.at(0, 0) == doctest::Approx(2.0));
    CHECK(s.covariance.at(0, 1) == doctest::Approx(0.0));
    CHECK(s.covariance.at(1, 1) == doctest::Approx(0.0));

    std::vector<Tensor<double>> set;
    for (uint64_t i = 0; i < 6; ++i) set.push_back(random_tensor({3}, 100 + i));
    auto s1 = fit_gaussian(set);
    std::vector<Tensor<double>> doubled = set;
    // identical dataset again -> identical stats
    auto s2 = fit_gaussian(doubled);
    for (int i = 0; i < 3; ++i) CHECK(s1.mean[i] == doctest::Approx(s2.mean[i]));

    // two-pass naive oracle
    int n = static_cast<int>(set.size());
    for (int i = 0; i < 3; ++i) {
        double m = 0;
        for (const auto& e : set) m += e[i];
        m /= n;
        CHECK(s1.mean[i] == doctest::Approx(m).epsilon(1e-10));
        for (int j = 0; j < 3; ++j) {
            double mj = 0;
            for (const auto& e : set) mj += e[j];
            mj /= n;
            double cov = 0;
            for (const auto& e : set) cov += (e[i] - m) * (e[j] - mj);
            cov /= (n - 1);
            CHECK(s1.covariance.at(i, j) == doctest::Approx(cov).epsilon(1e-10));
        }
    }

    CHECK_THROWS_AS(fit_gaussian({set[0]}), DegenerateInputError);
}

TEST_CASE("frechet distance analytic and self cases") {
    GaussianStats a, b;
    a.mean = Tensor<double>(Shape{1}, {0.0});
    a.covariance = Tensor<double>(Shape{1, 1}, {1.0});
    b.mean = Tensor<double>(Shape{1}, {1.0});
    b.covariance = Tensor<double>(Shape{1, 1}, {1.0});
    CHECK(frechet_distance(a, b) == doctest::Approx(1.0).epsilon(1e-9));

    for (uint64_t seed = 0; seed < 20; ++seed) {
        auto s = random_psd_stats(seed, 4);
        CHECK(frechet_distance(s, s) <= 1e-6);
    }
}

TEST_CASE("frechet distance matches the extended-precision reference") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
        auto s1 = random_psd_stats(300 + seed, 4);
        auto s2 = random_psd_stats(400 + seed, 4);
        double got = frechet_distance(s1, s2);
        double expect = frechet_longdouble(s1, s2);
        CHECK(got == doctest::Approx(expect).epsilon(1e-6));
        // symmetry
        CHECK(frechet_distance(s2, s1) == doctest::Approx(got).epsilon(1e-8));
    }
}

TEST_CASE("frechet distance dimension mismatch") {
    auto s1 = random_psd_stats(1, 3);
    auto s2 = random_psd_stats(2, 4);
    CHECK_THROWS_AS(frechet_distance(s1, s2), ShapeError);
}

TEST_CASE("evaluate_dirs on a perfect prediction") {
    namespace fs = std::filesystem;
    auto base = fs::temp_directory_path() / "avk_eval";
    fs::remove_all(base);
    SynthConfig cfg;
    cfg.seed = 9;
    cfg.resolution = 32;
    cfg.frame_count = 4;
    synthesize_dataset(cfg, base / "ref");
    // predictions = the reference frames themselves
    fs::create_directories(base / "pred" / "frames");
    for (int t = 0; t < 4; ++t)
        fs::copy_file(base / "ref" / "frames" / frame_file_name(t, "real"),
                      base / "pred" / "frames" / frame_file_name(t, "avatar"));
    auto bb = Backbone<double>::build_surrogate(metric_spec());
    auto rep = evaluate_dirs(base / "pred", base / "ref", bb);
    CHECK(rep.frame_count == 4);
    CHECK(rep.ssim == doctest::Approx(1.0));
    CHECK(rep.psnr_infinite);
    CHECK(rep.perceptual == doctest::Approx(0.0));
    CHECK(rep.fid <= 1e-6);
    CHECK(rep.backbone_hash == bb.provenance_hash());
}
