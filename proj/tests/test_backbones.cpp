#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "avatarkit/backbones.hpp"
#include "testutil.hpp"

using namespace avk;
namespace fs = std::filesystem;

namespace {

BackboneSpec small_spec() {
    BackboneSpec s;
    s.seed = 5;
    s.stages = {{8, 2}, {16, 2}};
    s.tap_layers = {0, 1};
    return s;
}

}  // namespace

TEST_CASE("surrogate is a pure function of its spec") {
    auto b1 = Backbone<double>::build_surrogate(small_spec());
    auto b2 = Backbone<double>::build_surrogate(small_spec());
    auto img = testutil::random_uniform_tensor({3, 32, 32}, 1);
    auto p1 = b1.extract_features(img);
    auto p2 = b2.extract_features(img);
    REQUIRE(p1.maps.size() == 2);
    for (size_t l = 0; l < p1.maps.size(); ++l)
        for (int64_t i = 0; i < p1.maps[l].numel(); ++i)
            CHECK(p1.maps[l][i] == p2.maps[l][i]);
    CHECK(b1.provenance_hash() == b2.provenance_hash());
    CHECK(b1.weights_fingerprint() == b2.weights_fingerprint());
}

TEST_CASE("tap shapes follow the cumulative strides") {
    auto b = Backbone<double>::build_surrogate(small_spec());
    auto img = testutil::random_uniform_tensor({3, 32, 32}, 2);
    auto p = b.extract_features(img);
    CHECK(p.maps[0].shape() == Shape{8, 16, 16});
    CHECK(p.maps[1].shape() == Shape{16, 8, 8});
}

TEST_CASE("different seeds give different features") {
    auto s1 = small_spec();
    auto s2 = small_spec();
    s2.seed = 6;
    auto b1 = Backbone<double>::build_surrogate(s1);
    auto b2 = Backbone<double>::build_surrogate(s2);
    auto img = testutil::random_uniform_tensor({3, 16, 16}, 3);
    auto p1 = b1.extract_features(img);
    auto p2 = b2.extract_features(img);
    double diff = 0;
    for (int64_t i = 0; i < p1.maps[0].numel(); ++i)
        diff += std::abs(p1.maps[0][i] - p2.maps[0][i]);
    CHECK(diff > 1e-3);
    CHECK(b1.provenance_hash() != b2.provenance_hash());
}

TEST_CASE("identical inputs give identical pyramids; scaling changes outputs") {
    auto b = Backbone<double>::build_surrogate(small_spec());
    Tensor<double> zero(Shape{3, 16, 16});
    auto pa = b.extract_features(zero);
    auto pb = b.extract_features(zero);
    for (int64_t i = 0; i < pa.maps[0].numel(); ++i) CHECK(pa.maps[0][i] == pb.maps[0][i]);

    auto img = testutil::random_uniform_tensor({3, 16, 16}, 4, 0.0, 0.5);
    auto p1 = b.extract_features(img);
    Tensor<double> img2 = map1(img, [](double v) { return v * 2.0; });
    auto p2 = b.extract_features(img2);
    double diff = 0;
    for (int64_t i = 0; i < p1.maps[1].numel(); ++i)
        diff += std::abs(p1.maps[1][i] - p2.maps[1][i]);
    CHECK(diff > 1e-3);
}

TEST_CASE("feature gradients match finite differences on 8x8 inputs") {
    auto b = Backbone<double>::build_surrogate(small_spec());
    for (uint64_t seed : {10, 11, 12}) {
        auto img = testutil::random_uniform_tensor({3, 8, 8}, seed, 0.05, 0.95);
        double err = testutil::gradcheck(
            [&](const Var<double>& x) {
                auto taps = b.features(x);
                Var<double> s = sum_all(taps[0]);
                for (size_t i = 1; i < taps.size(); ++i) s = add(s, sum_all(taps[i]));
                return s;
            },
            img);
        CHECK(err < 1e-3);
    }
}

TEST_CASE("too-small input is a shape error") {
    auto b = Backbone<double>::build_surrogate(small_spec());
    Tensor<double> img(Shape{3, 2, 2}, 0.5);
    CHECK_THROWS_AS(b.extract_features(img), ShapeError);
}

TEST_CASE("invalid specs are construction errors") {
    BackboneSpec s = small_spec();
    s.stages.clear();
    CHECK_THROWS_AS(Backbone<double>::build_surrogate(s), ValueError);
    s = small_spec();
    s.stages[0].second = 3;
    CHECK_THROWS_AS(Backbone<double>::build_surrogate(s), ValueError);
    s = small_spec();
    s.tap_layers = {7};
    CHECK_THROWS_AS(Backbone<double>::build_surrogate(s), ValueError);
    s = small_spec();
    s.nonlinearity = "swish";
    CHECK_THROWS_AS(Backbone<double>::build_surrogate(s), ValueError);
}

TEST_CASE("save and load round-trips exactly") {
    auto dir = fs::temp_directory_path() / "avk_backbone_io";
    fs::create_directories(dir);
    auto b = Backbone<float>::build_surrogate(small_spec());
    b.save(dir / "bb.avkarch");
    auto b2 = Backbone<float>::load(dir / "bb.avkarch");
    auto img = cast<float>(testutil::random_uniform_tensor({3, 16, 16}, 8));
    auto p1 = b.extract_features(img);
    auto p2 = b2.extract_features(img);
    for (int64_t i = 0; i < p1.maps[0].numel(); ++i) CHECK(p1.maps[0][i] == p2.maps[0][i]);
    CHECK(b.provenance_hash() == b2.provenance_hash());
}

TEST_CASE("truncated archive is a format error") {
    auto dir = fs::temp_directory_path() / "avk_backbone_io";
    fs::create_directories(dir);
    auto b = Backbone<float>::build_surrogate(small_spec());
    b.save(dir / "full.avkarch");
    auto bytes = [&] {
        std::ifstream f(dir / "full.avkarch", std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    }();
    std::ofstream out(dir / "trunc.avkarch", std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    out.close();
    CHECK_THROWS_AS(Backbone<float>::load(dir / "trunc.avkarch"), FormatError);
}

TEST_CASE("archive with the wrong stage count is a format error") {
    auto dir = fs::temp_directory_path() / "avk_backbone_io";
    fs::create_directories(dir);
    auto b = Backbone<float>::build_surrogate(small_spec());
    b.save(dir / "orig.avkarch");
    // rewrite the header spec with an extra stage, keeping blobs unchanged
    auto a = read_blob_archive(dir / "orig.avkarch");
    auto spec = small_spec();
    spec.stages.push_back({32, 2});
    a.meta["spec"] = spec.to_json();
    write_blob_archive(dir / "bad.avkarch", a.meta, a.blobs);
    CHECK_THROWS_AS(Backbone<float>::load(dir / "bad.avkarch"), FormatError);
}

TEST_CASE("provenance hash is scalar-type independent") {
    auto bf = Backbone<float>::build_surrogate(small_spec());
    auto bd = Backbone<double>::build_surrogate(small_spec());
    CHECK(bf.provenance_hash() == bd.provenance_hash());
}
