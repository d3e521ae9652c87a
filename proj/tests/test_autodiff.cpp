#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "avatarkit/ops.hpp"
#include "testutil.hpp"

using namespace avk;
using testutil::gradcheck;
using testutil::random_tensor;

TEST_CASE("elementwise forward values") {
    auto a = constant<double>(Tensor<double>(Shape{3}, {1.0, -2.0, 3.0}));
    auto b = constant<double>(Tensor<double>(Shape{3}, {4.0, 5.0, -6.0}));
    CHECK(add(a, b).val()[1] == doctest::Approx(3.0));
    CHECK(mul(a, b).val()[2] == doctest::Approx(-18.0));
    CHECK(sub(a, b).val()[0] == doctest::Approx(-3.0));
    CHECK(div(a, b).val()[1] == doctest::Approx(-0.4));
    CHECK(sum_all(a).item() == doctest::Approx(2.0));
    CHECK(mean_all(b).item() == doctest::Approx(1.0));
}

TEST_CASE("gradcheck: elementwise chains") {
    auto x0 = random_tensor({4, 5}, 11);
    CHECK(gradcheck([](const Var<double>& x) { return sum_all(mul(x, x)); }, x0) < 1e-6);
    CHECK(gradcheck([](const Var<double>& x) { return mean_all(tanh_(x)); }, x0) < 1e-6);
    CHECK(gradcheck([](const Var<double>& x) { return sum_all(sigmoid_(mul_scalar(x, 0.7))); },
                    x0) < 1e-6);
    CHECK(gradcheck([](const Var<double>& x) { return sum_all(softplus_(x)); }, x0) < 1e-6);
    CHECK(gradcheck(
              [](const Var<double>& x) { return sum_all(exp_(mul_scalar(x, 0.3))); }, x0) < 1e-6);
    CHECK(gradcheck([](const Var<double>& x) {
              return sum_all(log_(add_scalar(mul(x, x), 0.5)));
          }, x0) < 1e-6);
    CHECK(gradcheck([](const Var<double>& x) {
              return sum_all(sqrt_(add_scalar(mul(x, x), 1.0)));
          }, x0) < 1e-6);
    CHECK(gradcheck([](const Var<double>& x) {
              return sum_all(rsqrt_(add_scalar(mul(x, x), 1.0)));
          }, x0) < 1e-6);
    CHECK(gradcheck([](const Var<double>& x) { return sum_all(lrelu(x, 0.2)); }, x0) < 1e-6);
    CHECK(gradcheck([](const Var<double>& x) { return sum_all(abs_(x)); }, x0) < 1e-6);
}

TEST_CASE("gradcheck: matmul family") {
    auto a = random_tensor({3, 4}, 21);
    auto b = random_tensor({4, 5}, 22);
    CHECK(gradcheck(
              [&](const Var<double>& x) { return sum_all(matmul(x, constant(b))); }, a) < 1e-6);
    CHECK(gradcheck(
              [&](const Var<double>& x) { return sum_all(matmul(constant(a), x)); }, b) < 1e-6);
    auto c = random_tensor({4, 3}, 23);
    CHECK(gradcheck([&](const Var<double>& x) {
              return sum_all(mul(matmul_tn(x, constant(b)), matmul_tn(x, constant(b))));
          }, c) < 1e-6);
    auto d = random_tensor({5, 4}, 24);
    CHECK(gradcheck([&](const Var<double>& x) {
              return sum_all(matmul_nt(constant(a), x));
          }, d) < 1e-6);
}

TEST_CASE("gradcheck: linear") {
    auto x = random_tensor({6}, 31);
    auto w = random_tensor({4, 6}, 32);
    auto b = random_tensor({4}, 33);
    CHECK(gradcheck([&](const Var<double>& v) {
              return sum_all(tanh_(linear(v, constant(w), constant(b))));
          }, x) < 1e-6);
    CHECK(gradcheck([&](const Var<double>& v) {
              return sum_all(tanh_(linear(constant(x), v, constant(b))));
          }, w) < 1e-6);
}

TEST_CASE("conv2d forward matches a direct loop") {
    auto x = random_tensor({2, 5, 6}, 41);
    auto w = random_tensor({3, 2, 3, 3}, 42);
    auto y = conv2d(constant(x), constant(w), 1, 1).val();
    REQUIRE(y.shape() == Shape{3, 5, 6});
    for (int o = 0; o < 3; ++o)
        for (int i = 0; i < 5; ++i)
            for (int j = 0; j < 6; ++j) {
                double acc = 0;
                for (int c = 0; c < 2; ++c)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            int yy = i + ky - 1, xx = j + kx - 1;
                            if (yy < 0 || yy >= 5 || xx < 0 || xx >= 6) continue;
                            acc += x.at(c, yy, xx) * w[((o * 2 + c) * 3 + ky) * 3 + kx];
                        }
                CHECK(y.at(o, i, j) == doctest::Approx(acc).epsilon(1e-10));
            }
}

TEST_CASE("gradcheck: conv2d stride 1 and 2") {
    auto x = random_tensor({2, 6, 6}, 51);
    auto w = random_tensor({3, 2, 3, 3}, 52);
    for (int stride : {1, 2}) {
        CHECK(gradcheck([&, stride](const Var<double>& v) {
                  return sum_all(tanh_(conv2d(v, constant(w), stride, 1)));
              }, x) < 1e-5);
        CHECK(gradcheck([&, stride](const Var<double>& v) {
                  return sum_all(tanh_(conv2d(constant(x), v, stride, 1)));
              }, w) < 1e-5);
    }
}

TEST_CASE("gradcheck: upsample, slicing, bias, channel sums") {
    auto x = random_tensor({3, 4, 4}, 61);
    CHECK(gradcheck([](const Var<double>& v) {
              return sum_all(mul(upsample2x(v, true), upsample2x(v, true)));
          }, x) < 1e-6);
    CHECK(gradcheck([](const Var<double>& v) {
              return sum_all(mul(upsample2x(v, false), upsample2x(v, false)));
          }, x) < 1e-6);
    CHECK(gradcheck([](const Var<double>& v) {
              return sum_all(mul(slice_channels(v, 1, 3), slice_channels(v, 0, 2)));
          }, x) < 1e-6);
    auto b = random_tensor({3}, 62);
    CHECK(gradcheck([&](const Var<double>& v) {
              return sum_all(tanh_(add_channel_bias(v, constant(b))));
          }, x) < 1e-6);
    CHECK(gradcheck([&](const Var<double>& v) {
              return sum_all(mul(spatial_mean(v), spatial_mean(v)));
          }, x) < 1e-6);
    auto wt = random_tensor({3, 2, 3, 3}, 63);
    CHECK(gradcheck([&](const Var<double>& v) {
              return sum_all(mul(out_channel_sum(v), out_channel_sum(v)));
          }, wt) < 1e-6);
    CHECK(gradcheck([&](const Var<double>& v) {
              return sum_all(mul(in_channel_sum(v), in_channel_sum(v)));
          }, wt) < 1e-6);
    auto s = random_tensor({2}, 64);
    CHECK(gradcheck([&](const Var<double>& v) {
              return sum_all(mul(v, in_channel_broadcast(constant(s), wt.shape())));
          }, wt) < 1e-6);
    CHECK(gradcheck([&](const Var<double>& v) {
              return sum_all(mul(in_channel_broadcast(v, wt.shape()), constant(wt)));
          }, s) < 1e-6);
}

TEST_CASE("gradcheck: concat and unfold") {
    auto x = random_tensor({2, 4, 4}, 71);
    auto y = random_tensor({3, 4, 4}, 72);
    CHECK(gradcheck([&](const Var<double>& v) {
              auto c = concat_channels<double>({v, constant(y)});
              return sum_all(mul(c, c));
          }, x) < 1e-6);
    CHECK(gradcheck([](const Var<double>& v) {
              auto u = unfold3x3(v);
              return sum_all(mul(u, u));
          }, x) < 1e-6);
}

TEST_CASE("gradcheck: row/col selection ops") {
    auto m = random_tensor({5, 4}, 81);
    CHECK(gradcheck([](const Var<double>& v) {
              return sum_all(mul(rowwise_sum(v), rowwise_sum(v)));
          }, m) < 1e-6);
    CHECK(gradcheck([](const Var<double>& v) {
              auto e = rowwise_exclusive_max(v);
              return sum_all(mul(e, e));
          }, m) < 1e-5);
    CHECK(gradcheck([](const Var<double>& v) {
              auto c = colwise_max(v);
              return sum_all(mul(c, c));
          }, m) < 1e-5);
}

TEST_CASE("rowwise_exclusive_max values") {
    // row: [3, 1, 2] -> excl max for col0 = 2, col1 = 3, col2 = 3
    auto m = constant<double>(Tensor<double>(Shape{1, 3}, {3.0, 1.0, 2.0}));
    auto e = rowwise_exclusive_max(m).val();
    CHECK(e.at(0, 0) == doctest::Approx(2.0));
    CHECK(e.at(0, 1) == doctest::Approx(3.0));
    CHECK(e.at(0, 2) == doctest::Approx(3.0));
}

TEST_CASE("grad of grad: matches finite differences of the gradient norm") {
    // scalar field s(x) = sum(tanh(W x)); r(x) = ||ds/dx||^2; check dr/dW
    auto w0 = random_tensor({3, 4}, 91, "w", 0.7);
    auto x0 = random_tensor({4}, 92, "x", 0.9);

    auto r_of = [&](const Tensor<double>& wt) {
        Var<double> w = make_leaf(wt, true);
        Var<double> x = make_leaf(x0, true);
        Var<double> s = sum_all(tanh_(reshape(matmul(w, reshape(x, Shape{4, 1})), Shape{3})));
        Var<double> gx = grad(s, {x})[0];
        return sum_all(mul(gx, gx));
    };

    Var<double> w = make_leaf(w0, true);
    Var<double> x = make_leaf(x0, true);
    Var<double> s = sum_all(tanh_(reshape(matmul(w, reshape(x, Shape{4, 1})), Shape{3})));
    Var<double> gx = grad(s, {x})[0];
    Var<double> r = sum_all(mul(gx, gx));
    Tensor<double> gw = grad(r, {w})[0].val();

    double step = 1e-5;
    for (int64_t i = 0; i < w0.numel(); ++i) {
        Tensor<double> wp = w0, wm = w0;
        wp[i] += step;
        wm[i] -= step;
        double fd = (r_of(wp).item() - r_of(wm).item()) / (2 * step);
        CHECK(gw[i] == doctest::Approx(fd).epsilon(1e-4));
    }
}

TEST_CASE("grad of grad through conv") {
    auto w0 = random_tensor({1, 1, 3, 3}, 95, "w", 0.5);
    auto x0 = random_tensor({1, 4, 4}, 96, "x", 0.8);

    auto r_of = [&](const Tensor<double>& wt) {
        Var<double> w = make_leaf(wt, true);
        Var<double> x = make_leaf(x0, true);
        Var<double> s = sum_all(tanh_(conv2d(x, w, 1, 1)));
        Var<double> gx = grad(s, {x})[0];
        return sum_all(mul(gx, gx));
    };

    Tensor<double> ga;
    {
        Var<double> w = make_leaf(w0, true);
        Var<double> x = make_leaf(x0, true);
        Var<double> s = sum_all(tanh_(conv2d(x, w, 1, 1)));
        Var<double> gx = grad(s, {x})[0];
        Var<double> r = sum_all(mul(gx, gx));
        ga = grad(r, {w})[0].val();
    }
    double step = 1e-5;
    for (int64_t i = 0; i < w0.numel(); ++i) {
        Tensor<double> wp = w0, wm = w0;
        wp[i] += step;
        wm[i] -= step;
        double fd = (r_of(wp).item() - r_of(wm).item()) / (2 * step);
        CHECK(ga[i] == doctest::Approx(fd).epsilon(1e-4));
    }
}

TEST_CASE("grad w.r.t. an unused leaf is zero") {
    auto x = make_leaf(Tensor<double>(Shape{3}, {1, 2, 3}), true);
    auto y = make_leaf(Tensor<double>(Shape{2}, {4, 5}), true);
    auto loss = sum_all(mul(x, x));
    auto gs = grad(loss, {x, y});
    CHECK(gs[1].val()[0] == 0.0);
    CHECK(gs[1].val()[1] == 0.0);
}

TEST_CASE("diamond-shaped graph accumulates both paths") {
    auto x = make_leaf(Tensor<double>::scalar(3.0), true);
    auto y = add(mul(x, x), mul_scalar(x, 2.0));  // x^2 + 2x, dy/dx = 2x + 2 = 8
    auto g = grad(y, {x})[0];
    CHECK(g.val()[0] == doctest::Approx(8.0));
}
