#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "avatarkit/generators.hpp"
#include "testutil.hpp"

using namespace avk;
using testutil::random_tensor;
using testutil::random_uniform_tensor;

namespace {

GenConfig small_cfg() {
    GenConfig c;
    c.resolution = 32;
    c.latent_dim = 8;
    c.base_channels = 8;
    c.channel_cap = 32;
    return c;
}

struct Fixture {
    GenConfig cfg = small_cfg();
    AvatarPipeline<double> pipe{small_cfg()};
    ParamDict<double> params;
    LeafMap<double> leaves;
    Fixture() {
        pipe.register_params(params, 17);
        leaves = make_leaves(params, true);
    }
    std::vector<Tensor<double>> noise(const char* which) const {
        return pipe.stored_noise(params, which);
    }
};

}  // namespace

TEST_CASE("face generator: determinism, shape, tanh range") {
    Fixture f;
    auto nz = f.noise("face");
    auto z = leaf_at(f.leaves, "latent.face");
    auto a = f.pipe.face_net().forward(f.leaves, z, nz);
    auto b = f.pipe.face_net().forward(f.leaves, z, nz);
    REQUIRE(a.val().shape() == Shape{3, 32, 32});
    for (int64_t i = 0; i < a.val().numel(); ++i) {
        CHECK(a.val()[i] == b.val()[i]);
        CHECK(a.val()[i] >= -1.0);
        CHECK(a.val()[i] <= 1.0);
    }
}

TEST_CASE("face and background generators are independent") {
    Fixture f;
    auto bg1 = f.pipe.background_net().forward(f.leaves, leaf_at(f.leaves, "latent.background"),
                                               f.noise("background"));
    // perturb z_f and every face.* weight; the background must not move
    f.params.at("latent.face")[0] += 1.0;
    for (const auto& name : f.params.names())
        if (name.rfind("face.", 0) == 0) f.params.at(name)[0] += 0.5;
    auto leaves2 = make_leaves(f.params, true);
    auto bg2 = f.pipe.background_net().forward(leaves2, leaf_at(leaves2, "latent.background"),
                                               f.noise("background"));
    for (int64_t i = 0; i < bg1.val().numel(); ++i) CHECK(bg1.val()[i] == bg2.val()[i]);
}

TEST_CASE("gradient w.r.t. z is nonzero at random init") {
    Fixture f;
    auto z = leaf_at(f.leaves, "latent.face");
    auto out = f.pipe.face_net().forward(f.leaves, z, f.noise("face"));
    auto g = grad(mean_all(out), {z})[0].val();
    double norm = 0;
    for (int64_t i = 0; i < g.numel(); ++i) norm += g[i] * g[i];
    CHECK(norm > 0.0);

    // finite-difference agreement along a random direction
    auto dir = random_tensor({f.cfg.latent_dim}, 3);
    double ga_dot = 0;
    for (int64_t i = 0; i < g.numel(); ++i) ga_dot += g[i] * dir[i];
    double step = 1e-4;
    auto eval = [&](double sgn) {
        Tensor<double> z2 = f.params.at("latent.face");
        for (int64_t i = 0; i < z2.numel(); ++i) z2[i] += sgn * step * dir[i];
        return mean_all(f.pipe.face_net().forward(f.leaves, make_leaf(z2, false), f.noise("face")))
            .item();
    };
    double fd = (eval(1.0) - eval(-1.0)) / (2 * step);
    CHECK(ga_dot == doctest::Approx(fd).epsilon(1e-3));
}

TEST_CASE("latent dimension mismatch is a shape error") {
    Fixture f;
    auto zbad = make_leaf(Tensor<double>(Shape{5}, 0.1), false);
    CHECK_THROWS_AS(f.pipe.face_net().forward(f.leaves, zbad, f.noise("face")), ShapeError);
}

TEST_CASE("avatar generator: determinism, ranges, condition sensitivity") {
    Fixture f;
    auto render = random_uniform_tensor({3, 32, 32}, 5);
    auto uv = random_uniform_tensor({3, 32, 32}, 6);
    auto nf = f.noise("face"), nb = f.noise("background"), na = f.noise("avatar");

    auto r1 = f.pipe.forward(f.leaves, render, uv, nf, nb, na);
    auto r2 = f.pipe.forward(f.leaves, render, uv, nf, nb, na);
    REQUIRE(r1.out.avatar.val().shape() == Shape{3, 32, 32});
    REQUIRE(r1.out.mask.val().shape() == Shape{1, 32, 32});
    for (int64_t i = 0; i < r1.out.avatar.val().numel(); ++i) {
        CHECK(r1.out.avatar.val()[i] == r2.out.avatar.val()[i]);
        CHECK(r1.out.avatar.val()[i] >= 0.0);
        CHECK(r1.out.avatar.val()[i] <= 1.0);
    }
    for (int64_t i = 0; i < r1.out.mask.val().numel(); ++i) {
        CHECK(r1.out.mask.val()[i] >= 0.0);
        CHECK(r1.out.mask.val()[i] <= 1.0);
    }

    // the render condition path is live
    auto render2 = random_uniform_tensor({3, 32, 32}, 7);
    auto r3 = f.pipe.forward(f.leaves, render2, uv, nf, nb, na);
    double diff = 0;
    for (int64_t i = 0; i < r1.out.avatar.val().numel(); ++i)
        diff += std::abs(r1.out.avatar.val()[i] - r3.out.avatar.val()[i]);
    CHECK(diff > 1e-6);
}

TEST_CASE("condition resolution mismatch is a shape error") {
    Fixture f;
    auto render = random_uniform_tensor({3, 16, 16}, 8);
    auto uv = random_uniform_tensor({3, 16, 16}, 9);
    CHECK_THROWS_AS(
        f.pipe.forward(f.leaves, render, uv, f.noise("face"), f.noise("background"),
                       f.noise("avatar")),
        ShapeError);
}

TEST_CASE("joint differentiability: loss on (I_FM, I_A) reaches all latents and parameters") {
    Fixture f;
    auto render = random_uniform_tensor({3, 32, 32}, 10);
    auto uv = random_uniform_tensor({3, 32, 32}, 11);
    auto nf = f.noise("face"), nb = f.noise("background"), na = f.noise("avatar");

    auto fwd = [&](const LeafMap<double>& L) {
        auto r = f.pipe.forward(L, render, uv, nf, nb, na);
        return add(mean_all(mul(r.out.avatar, r.out.avatar)), mean_all(r.out.mask));
    };
    Var<double> loss = fwd(f.leaves);

    std::vector<std::string> names;
    std::vector<Var<double>> wrt;
    for (const auto& name : f.params.names()) {
        if (!AvatarPipeline<double>::is_trainable(name)) continue;
        names.push_back(name);
        wrt.push_back(f.leaves.at(name));
    }
    auto gs = grad(loss, wrt);

    for (const auto& g : gs) REQUIRE(g.val().all_finite());
    for (const char* zname : {"latent.face", "latent.background", "latent.avatar"}) {
        size_t idx = std::find(names.begin(), names.end(), zname) - names.begin();
        double nrm = 0;
        for (int64_t i = 0; i < gs[idx].val().numel(); ++i)
            nrm += gs[idx].val()[i] * gs[idx].val()[i];
        CHECK(nrm > 0.0);
    }

    // directional finite-difference check across the full parameter vector
    RandomStream dir_rs(77, "dir");
    std::unordered_map<std::string, Tensor<double>> dir;
    double ga_dot = 0;
    for (size_t k = 0; k < names.size(); ++k) {
        Tensor<double> d(f.params.at(names[k]).shape());
        dir_rs.fill_normal(d);
        dir.emplace(names[k], d);
        for (int64_t i = 0; i < d.numel(); ++i) ga_dot += gs[k].val()[i] * d[i];
    }
    double step = 1e-5;
    auto eval = [&](double sgn) {
        ParamDict<double> shifted = f.params.template cast_to<double>();
        for (const auto& [name, d] : dir) {
            auto& t = shifted.at(name);
            for (int64_t i = 0; i < t.numel(); ++i) t[i] += sgn * step * d[i];
        }
        auto L = make_leaves(shifted, false);
        return fwd(L).item();
    };
    double fd = (eval(1.0) - eval(-1.0)) / (2 * step);
    CHECK(ga_dot == doctest::Approx(fd).epsilon(1e-3));
}

TEST_CASE("zeroing all but the coarsest to-image branch still yields full-resolution output") {
    Fixture f;
    for (const auto& name : f.params.names()) {
        bool fine_rgb = false;
        for (int res : {8, 16, 32})
            for (const char* stem : {"face.rgb", "background.rgb", "avatar.out"})
                if (name.rfind(stem + std::to_string(res) + ".", 0) == 0) fine_rgb = true;
        if (fine_rgb && (name.ends_with(".weight") || name.ends_with(".bias")))
            fill_constant(f.params.at(name), 0.0);
    }
    auto leaves = make_leaves(f.params, false);
    auto render = random_uniform_tensor({3, 32, 32}, 12);
    auto uv = random_uniform_tensor({3, 32, 32}, 13);
    auto r = f.pipe.forward(leaves, render, uv, f.noise("face"), f.noise("background"),
                            f.noise("avatar"));
    REQUIRE(r.out.avatar.val().shape() == Shape{3, 32, 32});
    REQUIRE(r.out.mask.val().shape() == Shape{1, 32, 32});
    CHECK(r.out.avatar.val().all_finite());
    CHECK(r.out.mask.val().all_finite());
    // coarse content survives: output is not constant
    double mn = r.out.avatar.val().min(), mx = r.out.avatar.val().max();
    CHECK(mx - mn > 1e-9);
}

TEST_CASE("latent code validation") {
    Fixture f;
    LatentCode<double> code;
    code.z = f.params.at("latent.face");
    code.noise = f.noise("face");
    CHECK_NOTHROW(code.validate(f.pipe.face_net().noise_shapes()));

    LatentCode<double> bad = code;
    bad.noise.pop_back();
    CHECK_THROWS_AS(bad.validate(f.pipe.face_net().noise_shapes()), ShapeError);
    bad = code;
    bad.z[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(bad.validate(f.pipe.face_net().noise_shapes()), ValueError);
}

TEST_CASE("parameter counts are a pure function of the generator config") {
    ParamDict<double> p1, p2;
    AvatarPipeline<double>(small_cfg()).register_params(p1, 1);
    AvatarPipeline<double>(small_cfg()).register_params(p2, 999);
    CHECK(p1.total_elements() == p2.total_elements());
    CHECK(p1.names() == p2.names());

    GenConfig big;
    big.resolution = 64;
    big.latent_dim = 64;
    big.base_channels = 32;
    big.channel_cap = 128;
    ParamDict<double> p3;
    AvatarPipeline<double>(big).register_params(p3, 1);
    CHECK(p3.total_elements() > p1.total_elements());
    // pinned counts guard against accidental architecture drift
    CHECK(p1.total_elements() == 109908);
    CHECK(p3.total_elements() == 2400017);
}
