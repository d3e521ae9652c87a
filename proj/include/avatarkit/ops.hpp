#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "avatarkit/autodiff.hpp"

namespace avk {

template <typename T>
using EigenMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<EigenMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const EigenMatrix<T>>;

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    return make_op<T>("add", map2(a.val(), b.val(), [](T x, T y) { return x + y; }), {a, b},
                      [](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{g, g};
                      });
}

template <typename T>
Var<T> add_grads(const Var<T>& a, const Var<T>& b) {
    return add(a, b);
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> neg(const Var<T>& a) {
    return make_op<T>("neg", map1(a.val(), [](T x) { return -x; }), {a},
                      [](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{neg(g)};
                      });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    return make_op<T>("sub", map2(a.val(), b.val(), [](T x, T y) { return x - y; }), {a, b},
                      [](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{g, neg(g)};
                      });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    return make_op<T>("mul", map2(a.val(), b.val(), [](T x, T y) { return x * y; }), {a, b},
                      [](const std::vector<Var<T>>& in, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{mul(g, in[1]), mul(g, in[0])};
                      });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
    return make_op<T>("div", map2(a.val(), b.val(), [](T x, T y) { return x / y; }), {a, b},
                      [](const std::vector<Var<T>>& in, const Var<T>&, const Var<T>& g) {
                          Var<T> ga = div(g, in[1]);
                          Var<T> gb = neg(div(mul(g, in[0]), mul(in[1], in[1])));
                          return std::vector<Var<T>>{ga, gb};
                      });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T c) {
    return make_op<T>("add_scalar", map1(a.val(), [c](T x) { return x + c; }), {a},
                      [](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{g};
                      });
}

template <typename T>
Var<T> mul_scalar(const Var<T>& a, T c) {
    return make_op<T>("mul_scalar", map1(a.val(), [c](T x) { return x * c; }), {a},
                      [c](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{mul_scalar(g, c)};
                      });
}

// broadcast multiply by a scalar variable (shape {1})
template <typename T>
Var<T> scale(const Var<T>& a, const Var<T>& s) {
    if (s.val().numel() != 1) throw ShapeError("scale: scalar var expected");
    T sv = s.val()[0];
    return make_op<T>("scale", map1(a.val(), [sv](T x) { return x * sv; }), {a, s},
                      [](const std::vector<Var<T>>& in, const Var<T>&, const Var<T>& g) {
                          Var<T> ga = scale(g, in[1]);
                          Var<T> gs = sum_all(mul(g, in[0]));
                          return std::vector<Var<T>>{ga, gs};
                      });
}

// ---------------------------------------------------------------------------
// pointwise nonlinearities
// ---------------------------------------------------------------------------

template <typename T>
Var<T> tanh_(const Var<T>& a) {
    return make_op<T>("tanh", map1(a.val(), [](T x) { return std::tanh(x); }), {a},
                      [](const std::vector<Var<T>>&, const Var<T>& y, const Var<T>& g) {
                          Var<T> one_minus_y2 = add_scalar(neg(mul(y, y)), T(1));
                          return std::vector<Var<T>>{mul(g, one_minus_y2)};
                      });
}

template <typename T>
Var<T> sigmoid_(const Var<T>& a) {
    auto f = [](T x) {
        return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
    };
    return make_op<T>("sigmoid", map1(a.val(), f), {a},
                      [](const std::vector<Var<T>>&, const Var<T>& y, const Var<T>& g) {
                          Var<T> dy = mul(y, add_scalar(neg(y), T(1)));
                          return std::vector<Var<T>>{mul(g, dy)};
                      });
}

template <typename T>
Var<T> softplus_(const Var<T>& a) {
    auto f = [](T x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); };
    return make_op<T>("softplus", map1(a.val(), f), {a},
                      [](const std::vector<Var<T>>& in, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{mul(g, sigmoid_(in[0]))};
                      });
}

template <typename T>
Var<T> exp_(const Var<T>& a) {
    return make_op<T>("exp", map1(a.val(), [](T x) { return std::exp(x); }), {a},
                      [](const std::vector<Var<T>>&, const Var<T>& y, const Var<T>& g) {
                          return std::vector<Var<T>>{mul(g, y)};
                      });
}

template <typename T>
Var<T> log_(const Var<T>& a) {
    return make_op<T>("log", map1(a.val(), [](T x) { return std::log(x); }), {a},
                      [](const std::vector<Var<T>>& in, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{div(g, in[0])};
                      });
}

template <typename T>
Var<T> sqrt_(const Var<T>& a) {
    return make_op<T>("sqrt", map1(a.val(), [](T x) { return std::sqrt(x); }), {a},
                      [](const std::vector<Var<T>>&, const Var<T>& y, const Var<T>& g) {
                          return std::vector<Var<T>>{mul_scalar(div(g, y), T(0.5))};
                      });
}

template <typename T>
Var<T> rsqrt_(const Var<T>& a) {
    return make_op<T>("rsqrt", map1(a.val(), [](T x) { return T(1) / std::sqrt(x); }), {a},
                      [](const std::vector<Var<T>>&, const Var<T>& y, const Var<T>& g) {
                          Var<T> y3 = mul(y, mul(y, y));
                          return std::vector<Var<T>>{mul_scalar(mul(g, y3), T(-0.5))};
                      });
}

// |x|; subgradient 0 at 0
template <typename T>
Var<T> abs_(const Var<T>& a) {
    Tensor<T> sign(a.shape());
    for (int64_t i = 0; i < sign.numel(); ++i)
        sign[i] = a.val()[i] > 0 ? T(1) : (a.val()[i] < 0 ? T(-1) : T(0));
    return make_op<T>("abs", map1(a.val(), [](T x) { return std::abs(x); }), {a},
                      [sign](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{mul(g, constant<T>(sign))};
                      });
}

template <typename T>
Var<T> lrelu(const Var<T>& a, T slope) {
    Tensor<T> mask(a.shape());
    for (int64_t i = 0; i < mask.numel(); ++i) mask[i] = a.val()[i] > 0 ? T(1) : slope;
    Tensor<T> out(a.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] * mask[i];
    return make_op<T>("lrelu", std::move(out), {a},
                      [mask](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{mul(g, constant<T>(mask))};
                      });
}

// ---------------------------------------------------------------------------
// reductions & broadcasts
// ---------------------------------------------------------------------------

template <typename T>
Var<T> broadcast_to(const Var<T>& s, const Shape& shape);

template <typename T>
Var<T> sum_all(const Var<T>& a) {
    T acc = 0;
    for (int64_t i = 0; i < a.val().numel(); ++i) acc += a.val()[i];
    Shape in_shape = a.shape();
    return make_op<T>("sum_all", Tensor<T>::scalar(acc), {a},
                      [in_shape](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{broadcast_to(g, in_shape)};
                      });
}

template <typename T>
Var<T> broadcast_to(const Var<T>& s, const Shape& shape) {
    if (s.val().numel() != 1) throw ShapeError("broadcast_to expects scalar");
    return make_op<T>("broadcast_to", Tensor<T>::full(shape, s.val()[0]), {s},
                      [](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{sum_all(g)};
                      });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
    return mul_scalar(sum_all(a), T(1) / T(a.val().numel()));
}

// sum over H,W of a CHW tensor -> {C}
template <typename T>
Var<T> broadcast_spatial(const Var<T>& c, int H, int W);

template <typename T>
Var<T> spatial_sum(const Var<T>& a) {
    const Tensor<T>& x = a.val();
    int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    Tensor<T> out(Shape{C});
    for (int c = 0; c < C; ++c) {
        T acc = 0;
        const T* p = x.data() + static_cast<int64_t>(c) * H * W;
        for (int i = 0; i < H * W; ++i) acc += p[i];
        out[c] = acc;
    }
    return make_op<T>("spatial_sum", std::move(out), {a},
                      [H, W](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{broadcast_spatial(g, H, W)};
                      });
}

template <typename T>
Var<T> broadcast_spatial(const Var<T>& c, int H, int W) {
    const Tensor<T>& v = c.val();
    int C = v.dim(0);
    Tensor<T> out(Shape{C, H, W});
    for (int ch = 0; ch < C; ++ch)
        std::fill_n(out.data() + static_cast<int64_t>(ch) * H * W, H * W, v[ch]);
    return make_op<T>("broadcast_spatial", std::move(out), {c},
                      [](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{spatial_sum(g)};
                      });
}

template <typename T>
Var<T> spatial_mean(const Var<T>& a) {
    int H = a.val().dim(1), W = a.val().dim(2);
    return mul_scalar(spatial_sum(a), T(1) / T(H * W));
}

// per-out-channel sum over (Ci,kh,kw) of a 4D weight tensor -> {Co}
template <typename T>
Var<T> out_channel_broadcast(const Var<T>& d, const Shape& wshape);

template <typename T>
Var<T> out_channel_sum(const Var<T>& w) {
    const Tensor<T>& x = w.val();
    int Co = x.dim(0);
    int64_t inner = x.numel() / Co;
    Tensor<T> out(Shape{Co});
    for (int o = 0; o < Co; ++o) {
        T acc = 0;
        const T* p = x.data() + o * inner;
        for (int64_t i = 0; i < inner; ++i) acc += p[i];
        out[o] = acc;
    }
    Shape ws = x.shape();
    return make_op<T>("out_channel_sum", std::move(out), {w},
                      [ws](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{out_channel_broadcast(g, ws)};
                      });
}

template <typename T>
Var<T> out_channel_broadcast(const Var<T>& d, const Shape& wshape) {
    const Tensor<T>& v = d.val();
    int Co = wshape[0];
    int64_t inner = numel_of(wshape) / Co;
    Tensor<T> out(wshape);
    for (int o = 0; o < Co; ++o) std::fill_n(out.data() + o * inner, inner, v[o]);
    return make_op<T>("out_channel_broadcast", std::move(out), {d},
                      [](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{out_channel_sum(g)};
                      });
}

// per-in-channel broadcast of s{Ci} over a {Co,Ci,kh,kw} weight shape
template <typename T>
Var<T> in_channel_sum(const Var<T>& w);

template <typename T>
Var<T> in_channel_broadcast(const Var<T>& s, const Shape& wshape) {
    const Tensor<T>& v = s.val();
    int Co = wshape[0], Ci = wshape[1];
    int64_t kk = numel_of(wshape) / (static_cast<int64_t>(Co) * Ci);
    Tensor<T> out(wshape);
    T* p = out.data();
    for (int o = 0; o < Co; ++o)
        for (int c = 0; c < Ci; ++c) {
            std::fill_n(p, kk, v[c]);
            p += kk;
        }
    return make_op<T>("in_channel_broadcast", std::move(out), {s},
                      [](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{in_channel_sum(g)};
                      });
}

template <typename T>
Var<T> in_channel_sum(const Var<T>& w) {
    const Tensor<T>& x = w.val();
    int Co = x.dim(0), Ci = x.dim(1);
    int64_t kk = x.numel() / (static_cast<int64_t>(Co) * Ci);
    Tensor<T> out(Shape{Ci});
    const T* p = x.data();
    for (int o = 0; o < Co; ++o)
        for (int c = 0; c < Ci; ++c) {
            T acc = 0;
            for (int64_t i = 0; i < kk; ++i) acc += p[i];
            out[c] += acc;
            p += kk;
        }
    Shape ws = x.shape();
    return make_op<T>("in_channel_sum", std::move(out), {w},
                      [ws](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{in_channel_broadcast(g, ws)};
                      });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& a, Shape s) {
    Shape orig = a.shape();
    return make_op<T>("reshape", a.val().reshaped(std::move(s)), {a},
                      [orig](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{reshape(g, orig)};
                      });
}

template <typename T>
Var<T> channel_pad(const Var<T>& a, int c0, int c_total);

template <typename T>
Var<T> slice_channels(const Var<T>& a, int c0, int c1) {
    const Tensor<T>& x = a.val();
    int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (c0 < 0 || c1 > C || c0 >= c1) throw ShapeError("slice_channels range");
    Tensor<T> out(Shape{c1 - c0, H, W});
    std::copy_n(x.data() + static_cast<int64_t>(c0) * H * W,
                static_cast<int64_t>(c1 - c0) * H * W, out.data());
    return make_op<T>("slice_channels", std::move(out), {a},
                      [c0, C](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{channel_pad(g, c0, C)};
                      });
}

template <typename T>
Var<T> channel_pad(const Var<T>& a, int c0, int c_total) {
    const Tensor<T>& x = a.val();
    int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    Tensor<T> out(Shape{c_total, H, W});
    std::copy_n(x.data(), x.numel(), out.data() + static_cast<int64_t>(c0) * H * W);
    return make_op<T>("channel_pad", std::move(out), {a},
                      [c0, C](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{slice_channels(g, c0, c0 + C)};
                      });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
    int H = parts.at(0).val().dim(1), W = parts[0].val().dim(2);
    int C = 0;
    for (const auto& p : parts) C += p.val().dim(0);
    Tensor<T> out(Shape{C, H, W});
    std::vector<int> offsets;
    int off = 0;
    for (const auto& p : parts) {
        if (p.val().dim(1) != H || p.val().dim(2) != W)
            throw ShapeError("concat_channels spatial mismatch");
        offsets.push_back(off);
        std::copy_n(p.val().data(), p.val().numel(), out.data() + static_cast<int64_t>(off) * H * W);
        off += p.val().dim(0);
    }
    std::vector<int> sizes;
    for (const auto& p : parts) sizes.push_back(p.val().dim(0));
    return make_op<T>("concat_channels", std::move(out), parts,
                      [offsets, sizes](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          std::vector<Var<T>> gs;
                          for (size_t i = 0; i < offsets.size(); ++i)
                              gs.push_back(slice_channels(g, offsets[i], offsets[i] + sizes[i]));
                          return gs;
                      });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
    const Tensor<T>& x = a.val();
    if (x.rank() != 2) throw ShapeError("transpose expects a matrix");
    int m = x.dim(0), n = x.dim(1);
    Tensor<T> out(Shape{n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(j, i) = x.at(i, j);
    return make_op<T>("transpose", std::move(out), {a},
                      [](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{transpose(g)};
                      });
}

// ---------------------------------------------------------------------------
// matmul family (2-D, row-major)
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul_tn(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    const Tensor<T>&A = a.val(), &B = b.val();
    if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) throw ShapeError("matmul shapes");
    Tensor<T> out(Shape{A.dim(0), B.dim(1)});
    ConstMatMap<T> ma(A.data(), A.dim(0), A.dim(1)), mb(B.data(), B.dim(0), B.dim(1));
    MatMap<T>(out.data(), A.dim(0), B.dim(1)).noalias() = ma * mb;
    return make_op<T>("matmul", std::move(out), {a, b},
                      [](const std::vector<Var<T>>& in, const Var<T>&, const Var<T>& g) {
                          Var<T> ga, gb;
                          if (in[0].requires_grad()) ga = matmul_nt(g, in[1]);
                          if (in[1].requires_grad()) gb = matmul_tn(in[0], g);
                          return std::vector<Var<T>>{ga, gb};
                      });
}

// A^T * B with A{k,m}, B{k,n} -> {m,n}
template <typename T>
Var<T> matmul_tn(const Var<T>& a, const Var<T>& b) {
    const Tensor<T>&A = a.val(), &B = b.val();
    if (A.rank() != 2 || B.rank() != 2 || A.dim(0) != B.dim(0)) throw ShapeError("matmul_tn shapes");
    Tensor<T> out(Shape{A.dim(1), B.dim(1)});
    ConstMatMap<T> ma(A.data(), A.dim(0), A.dim(1)), mb(B.data(), B.dim(0), B.dim(1));
    MatMap<T>(out.data(), A.dim(1), B.dim(1)).noalias() = ma.transpose() * mb;
    return make_op<T>("matmul_tn", std::move(out), {a, b},
                      [](const std::vector<Var<T>>& in, const Var<T>&, const Var<T>& g) {
                          Var<T> ga, gb;
                          if (in[0].requires_grad()) ga = matmul_nt(in[1], g);
                          if (in[1].requires_grad()) gb = matmul(in[0], g);
                          return std::vector<Var<T>>{ga, gb};
                      });
}

// A * B^T with A{m,k}, B{n,k} -> {m,n}
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
    const Tensor<T>&A = a.val(), &B = b.val();
    if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(1)) throw ShapeError("matmul_nt shapes");
    Tensor<T> out(Shape{A.dim(0), B.dim(0)});
    ConstMatMap<T> ma(A.data(), A.dim(0), A.dim(1)), mb(B.data(), B.dim(0), B.dim(1));
    MatMap<T>(out.data(), A.dim(0), B.dim(0)).noalias() = ma * mb.transpose();
    return make_op<T>("matmul_nt", std::move(out), {a, b},
                      [](const std::vector<Var<T>>& in, const Var<T>&, const Var<T>& g) {
                          Var<T> ga, gb;
                          if (in[0].requires_grad()) ga = matmul(g, in[1]);
                          if (in[1].requires_grad()) gb = matmul_tn(g, in[0]);
                          return std::vector<Var<T>>{ga, gb};
                      });
}

// y = W x + b with x{k}, W{m,k}, b{m}
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    const Tensor<T>&X = x.val(), &W = w.val(), &B = b.val();
    if (X.rank() != 1 || W.rank() != 2 || W.dim(1) != X.dim(0) || B.dim(0) != W.dim(0))
        throw ShapeError("linear shapes");
    int m = W.dim(0), k = W.dim(1);
    Tensor<T> out(Shape{m});
    ConstMatMap<T> mw(W.data(), m, k);
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> vx(X.data(), k);
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> vo(out.data(), m);
    vo.noalias() = mw * vx;
    for (int i = 0; i < m; ++i) out[i] += B[i];
    return make_op<T>("linear", std::move(out), {x, w, b},
                      [m, k](const std::vector<Var<T>>& in, const Var<T>&, const Var<T>& g) {
                          Var<T> gx, gw;
                          if (in[0].requires_grad())
                              gx = reshape(matmul_tn(in[1], reshape(g, Shape{m, 1})), Shape{k});
                          if (in[1].requires_grad())
                              gw = matmul(reshape(g, Shape{m, 1}), reshape(in[0], Shape{1, k}));
                          return std::vector<Var<T>>{gx, gw, g};
                      });
}

// ---------------------------------------------------------------------------
// convolution (CHW, square padding)
// ---------------------------------------------------------------------------

namespace detail {

struct ConvDims {
    int Ci, H, W, Co, kh, kw, stride, pad, Ho, Wo;
};

inline ConvDims conv_dims(const Shape& xs, const Shape& ws, int stride, int pad) {
    ConvDims d;
    d.Ci = xs[0];
    d.H = xs[1];
    d.W = xs[2];
    d.Co = ws[0];
    d.kh = ws[2];
    d.kw = ws[3];
    d.stride = stride;
    d.pad = pad;
    if (ws[1] != d.Ci) throw ShapeError("conv2d channel mismatch");
    d.Ho = (d.H + 2 * pad - d.kh) / stride + 1;
    d.Wo = (d.W + 2 * pad - d.kw) / stride + 1;
    if (d.Ho <= 0 || d.Wo <= 0) throw ShapeError("conv2d input too small");
    return d;
}

template <typename T>
void im2col(const Tensor<T>& x, const ConvDims& d, Tensor<T>& col) {
    // col {Ci*kh*kw, Ho*Wo}
    const int HW = d.Ho * d.Wo;
    T* cp = col.data();
    for (int c = 0; c < d.Ci; ++c) {
        const T* xc = x.data() + static_cast<int64_t>(c) * d.H * d.W;
        for (int ky = 0; ky < d.kh; ++ky)
            for (int kx = 0; kx < d.kw; ++kx) {
                for (int ho = 0; ho < d.Ho; ++ho) {
                    int iy = ho * d.stride + ky - d.pad;
                    T* dst = cp + static_cast<int64_t>(ho) * d.Wo;
                    if (iy < 0 || iy >= d.H) {
                        std::fill_n(dst, d.Wo, T(0));
                        continue;
                    }
                    const T* src = xc + static_cast<int64_t>(iy) * d.W;
                    if (d.stride == 1) {
                        // contiguous row shifted by kx-pad, zero-padded ends
                        int shift = kx - d.pad;
                        int begin = std::max(0, -shift);
                        int end = std::min(d.Wo, d.W - shift);
                        if (begin > 0) std::fill_n(dst, begin, T(0));
                        if (end > begin) std::copy_n(src + shift + begin, end - begin, dst + begin);
                        if (end < d.Wo) std::fill_n(dst + std::max(end, 0), d.Wo - std::max(end, 0), T(0));
                        continue;
                    }
                    for (int wo = 0; wo < d.Wo; ++wo) {
                        int ix = wo * d.stride + kx - d.pad;
                        dst[wo] = (ix >= 0 && ix < d.W) ? src[ix] : T(0);
                    }
                }
                cp += HW;
            }
    }
}

template <typename T>
void col2im(const Tensor<T>& col, const ConvDims& d, Tensor<T>& x) {
    const int HW = d.Ho * d.Wo;
    std::fill_n(x.data(), x.numel(), T(0));
    const T* cp = col.data();
    for (int c = 0; c < d.Ci; ++c) {
        T* xc = x.data() + static_cast<int64_t>(c) * d.H * d.W;
        for (int ky = 0; ky < d.kh; ++ky)
            for (int kx = 0; kx < d.kw; ++kx) {
                for (int ho = 0; ho < d.Ho; ++ho) {
                    int iy = ho * d.stride + ky - d.pad;
                    if (iy < 0 || iy >= d.H) continue;
                    const T* src = cp + static_cast<int64_t>(ho) * d.Wo;
                    T* dst = xc + static_cast<int64_t>(iy) * d.W;
                    if (d.stride == 1) {
                        int shift = kx - d.pad;
                        int begin = std::max(0, -shift);
                        int end = std::min(d.Wo, d.W - shift);
                        for (int wo = begin; wo < end; ++wo) dst[wo + shift] += src[wo];
                        continue;
                    }
                    for (int wo = 0; wo < d.Wo; ++wo) {
                        int ix = wo * d.stride + kx - d.pad;
                        if (ix >= 0 && ix < d.W) dst[ix] += src[wo];
                    }
                }
                cp += HW;
            }
    }
}

template <typename T>
Tensor<T> conv2d_fwd(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad) {
    ConvDims d = conv_dims(x.shape(), w.shape(), stride, pad);
    Tensor<T> col(Shape{d.Ci * d.kh * d.kw, d.Ho * d.Wo});
    im2col(x, d, col);
    Tensor<T> out(Shape{d.Co, d.Ho, d.Wo});
    ConstMatMap<T> mw(w.data(), d.Co, d.Ci * d.kh * d.kw);
    ConstMatMap<T> mc(col.data(), d.Ci * d.kh * d.kw, d.Ho * d.Wo);
    MatMap<T>(out.data(), d.Co, d.Ho * d.Wo).noalias() = mw * mc;
    return out;
}

template <typename T>
Tensor<T> conv2d_input_grad_fwd(const Tensor<T>& g, const Tensor<T>& w, int stride, int pad, int H,
                                int W) {
    ConvDims d = conv_dims(Shape{w.shape()[1], H, W}, w.shape(), stride, pad);
    Tensor<T> gcol(Shape{d.Ci * d.kh * d.kw, d.Ho * d.Wo});
    ConstMatMap<T> mw(w.data(), d.Co, d.Ci * d.kh * d.kw);
    ConstMatMap<T> mg(g.data(), d.Co, d.Ho * d.Wo);
    MatMap<T>(gcol.data(), d.Ci * d.kh * d.kw, d.Ho * d.Wo).noalias() = mw.transpose() * mg;
    Tensor<T> gx(Shape{d.Ci, H, W});
    col2im(gcol, d, gx);
    return gx;
}

template <typename T>
Tensor<T> conv2d_weight_grad_fwd(const Tensor<T>& x, const Tensor<T>& g, int stride, int pad,
                                 int kh, int kw) {
    ConvDims d;
    d.Ci = x.dim(0);
    d.H = x.dim(1);
    d.W = x.dim(2);
    d.Co = g.dim(0);
    d.kh = kh;
    d.kw = kw;
    d.stride = stride;
    d.pad = pad;
    d.Ho = g.dim(1);
    d.Wo = g.dim(2);
    Tensor<T> col(Shape{d.Ci * kh * kw, d.Ho * d.Wo});
    im2col(x, d, col);
    Tensor<T> gw(Shape{d.Co, d.Ci, kh, kw});
    ConstMatMap<T> mg(g.data(), d.Co, d.Ho * d.Wo);
    ConstMatMap<T> mc(col.data(), d.Ci * kh * kw, d.Ho * d.Wo);
    MatMap<T>(gw.data(), d.Co, d.Ci * kh * kw).noalias() = mg * mc.transpose();
    return gw;
}

}  // namespace detail

template <typename T>
Var<T> conv2d_input_grad(const Var<T>& g, const Var<T>& w, int stride, int pad, int H, int W);
template <typename T>
Var<T> conv2d_weight_grad(const Var<T>& x, const Var<T>& g, int stride, int pad, int kh, int kw);

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, int stride = 1, int pad = 1) {
    Tensor<T> out = detail::conv2d_fwd(x.val(), w.val(), stride, pad);
    int H = x.val().dim(1), W = x.val().dim(2);
    int kh = w.val().dim(2), kw = w.val().dim(3);
    return make_op<T>(
        "conv2d", std::move(out), {x, w},
        [stride, pad, H, W, kh, kw](const std::vector<Var<T>>& in, const Var<T>&, const Var<T>& g) {
            Var<T> gx, gw;
            if (in[0].requires_grad()) gx = conv2d_input_grad(g, in[1], stride, pad, H, W);
            if (in[1].requires_grad()) gw = conv2d_weight_grad(in[0], g, stride, pad, kh, kw);
            return std::vector<Var<T>>{gx, gw};
        });
}

template <typename T>
Var<T> conv2d_input_grad(const Var<T>& g, const Var<T>& w, int stride, int pad, int H, int W) {
    Tensor<T> out = detail::conv2d_input_grad_fwd(g.val(), w.val(), stride, pad, H, W);
    int kh = w.val().dim(2), kw = w.val().dim(3);
    return make_op<T>(
        "conv2d_input_grad", std::move(out), {g, w},
        [stride, pad, kh, kw](const std::vector<Var<T>>& in, const Var<T>&, const Var<T>& u) {
            Var<T> gg, gw;
            if (in[0].requires_grad()) gg = conv2d(u, in[1], stride, pad);
            if (in[1].requires_grad()) gw = conv2d_weight_grad(u, in[0], stride, pad, kh, kw);
            return std::vector<Var<T>>{gg, gw};
        });
}

template <typename T>
Var<T> conv2d_weight_grad(const Var<T>& x, const Var<T>& g, int stride, int pad, int kh, int kw) {
    Tensor<T> out = detail::conv2d_weight_grad_fwd(x.val(), g.val(), stride, pad, kh, kw);
    int H = x.val().dim(1), W = x.val().dim(2);
    return make_op<T>(
        "conv2d_weight_grad", std::move(out), {x, g},
        [stride, pad, H, W](const std::vector<Var<T>>& in, const Var<T>&, const Var<T>& u) {
            Var<T> gx, gg;
            if (in[0].requires_grad()) gx = conv2d_input_grad(in[1], u, stride, pad, H, W);
            if (in[1].requires_grad()) gg = conv2d(in[0], u, stride, pad);
            return std::vector<Var<T>>{gx, gg};
        });
}

// ---------------------------------------------------------------------------
// resampling
// ---------------------------------------------------------------------------

namespace detail {

// per output index: two source taps + weights (bilinear, half-pixel centers)
inline void up2_taps(int i, int n, bool linear, int& i0, int& i1, double& w0, double& w1) {
    if (!linear) {
        i0 = i1 = i / 2;
        w0 = 1.0;
        w1 = 0.0;
        return;
    }
    double y = (i + 0.5) / 2.0 - 0.5;
    double f = std::floor(y);
    i0 = static_cast<int>(f);
    i1 = i0 + 1;
    w1 = y - f;
    w0 = 1.0 - w1;
    i0 = std::clamp(i0, 0, n - 1);
    i1 = std::clamp(i1, 0, n - 1);
}

}  // namespace detail

template <typename T>
Var<T> upsample2x_adjoint(const Var<T>& g, bool linear, int H, int W);

namespace detail {

struct Up2Table {
    std::vector<int> i0, i1;
    std::vector<double> w0, w1;
    explicit Up2Table(int n, bool linear) : i0(2 * n), i1(2 * n), w0(2 * n), w1(2 * n) {
        for (int i = 0; i < 2 * n; ++i) up2_taps(i, n, linear, i0[i], i1[i], w0[i], w1[i]);
    }
};

}  // namespace detail

template <typename T>
Var<T> upsample2x(const Var<T>& a, bool linear = true) {
    const Tensor<T>& x = a.val();
    int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    detail::Up2Table ty(H, linear), tx(W, linear);
    Tensor<T> out(Shape{C, 2 * H, 2 * W});
    for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < 2 * H; ++oy) {
            const T* r0 = &x.at(c, ty.i0[oy], 0);
            const T* r1 = &x.at(c, ty.i1[oy], 0);
            double wy0 = ty.w0[oy], wy1 = ty.w1[oy];
            T* dst = &out.at(c, oy, 0);
            for (int ox = 0; ox < 2 * W; ++ox) {
                double v = wy0 * (tx.w0[ox] * r0[tx.i0[ox]] + tx.w1[ox] * r0[tx.i1[ox]]) +
                           wy1 * (tx.w0[ox] * r1[tx.i0[ox]] + tx.w1[ox] * r1[tx.i1[ox]]);
                dst[ox] = static_cast<T>(v);
            }
        }
    return make_op<T>("upsample2x", std::move(out), {a},
                      [linear, H, W](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{upsample2x_adjoint(g, linear, H, W)};
                      });
}

template <typename T>
Var<T> upsample2x_adjoint(const Var<T>& a, bool linear, int H, int W) {
    const Tensor<T>& g = a.val();
    int C = g.dim(0);
    detail::Up2Table ty(H, linear), tx(W, linear);
    Tensor<T> out(Shape{C, H, W});
    for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < 2 * H; ++oy) {
            T* r0 = &out.at(c, ty.i0[oy], 0);
            T* r1 = &out.at(c, ty.i1[oy], 0);
            double wy0 = ty.w0[oy], wy1 = ty.w1[oy];
            const T* src = &g.at(c, oy, 0);
            for (int ox = 0; ox < 2 * W; ++ox) {
                T v = src[ox];
                r0[tx.i0[ox]] += static_cast<T>(wy0 * tx.w0[ox] * v);
                r0[tx.i1[ox]] += static_cast<T>(wy0 * tx.w1[ox] * v);
                r1[tx.i0[ox]] += static_cast<T>(wy1 * tx.w0[ox] * v);
                r1[tx.i1[ox]] += static_cast<T>(wy1 * tx.w1[ox] * v);
            }
        }
    return make_op<T>("upsample2x_adjoint", std::move(out), {a},
                      [linear](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{upsample2x(g, linear)};
                      });
}

// ---------------------------------------------------------------------------
// patch matrices (3x3, pad 1, stride 1): {C,H,W} -> {C*9, H*W}
// ---------------------------------------------------------------------------

template <typename T>
Var<T> fold3x3(const Var<T>& col, int C, int H, int W);

template <typename T>
Var<T> unfold3x3(const Var<T>& a) {
    const Tensor<T>& x = a.val();
    int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    detail::ConvDims d{C, H, W, 1, 3, 3, 1, 1, H, W};
    Tensor<T> col(Shape{C * 9, H * W});
    detail::im2col(x, d, col);
    return make_op<T>("unfold3x3", std::move(col), {a},
                      [C, H, W](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{fold3x3(g, C, H, W)};
                      });
}

template <typename T>
Var<T> fold3x3(const Var<T>& colv, int C, int H, int W) {
    detail::ConvDims d{C, H, W, 1, 3, 3, 1, 1, H, W};
    Tensor<T> x(Shape{C, H, W});
    detail::col2im(colv.val(), d, x);
    return make_op<T>("fold3x3", std::move(x), {colv},
                      [](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{unfold3x3(g)};
                      });
}

// ---------------------------------------------------------------------------
// indexed row/col selections on 2-D matrices (used by the patch loss)
// ---------------------------------------------------------------------------

template <typename T>
Var<T> rowwise_sum(const Var<T>& m);  // {V,S} -> {V}
template <typename T>
Var<T> rowwise_broadcast(const Var<T>& v, int S);  // {V} -> {V,S}

template <typename T>
Var<T> rowwise_sum(const Var<T>& m) {
    const Tensor<T>& x = m.val();
    int V = x.dim(0), S = x.dim(1);
    Tensor<T> out(Shape{V});
    for (int v = 0; v < V; ++v) {
        T acc = 0;
        for (int s = 0; s < S; ++s) acc += x.at(v, s);
        out[v] = acc;
    }
    return make_op<T>("rowwise_sum", std::move(out), {m},
                      [S](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{rowwise_broadcast(g, S)};
                      });
}

template <typename T>
Var<T> rowwise_broadcast(const Var<T>& a, int S) {
    const Tensor<T>& v = a.val();
    int V = v.dim(0);
    Tensor<T> out(Shape{V, S});
    for (int i = 0; i < V; ++i) std::fill_n(out.data() + static_cast<int64_t>(i) * S, S, v[i]);
    return make_op<T>("rowwise_broadcast", std::move(out), {a},
                      [](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{rowwise_sum(g)};
                      });
}

// O[v][s] = M[v][idx[v*S+s]]
template <typename T>
Var<T> scatter_cols(const Var<T>& g, const std::vector<int>& idx, int S);

template <typename T>
Var<T> select_cols(const Var<T>& m, const std::vector<int>& idx) {
    const Tensor<T>& x = m.val();
    int V = x.dim(0), S = x.dim(1);
    Tensor<T> out(Shape{V, S});
    for (int v = 0; v < V; ++v)
        for (int s = 0; s < S; ++s) out.at(v, s) = x.at(v, idx[static_cast<size_t>(v) * S + s]);
    return make_op<T>("select_cols", std::move(out), {m},
                      [idx, S](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{scatter_cols(g, idx, S)};
                      });
}

template <typename T>
Var<T> scatter_cols(const Var<T>& gv, const std::vector<int>& idx, int S) {
    const Tensor<T>& g = gv.val();
    int V = g.dim(0);
    Tensor<T> out(Shape{V, S});
    for (int v = 0; v < V; ++v)
        for (int s = 0; s < S; ++s) out.at(v, idx[static_cast<size_t>(v) * S + s]) += g.at(v, s);
    return make_op<T>("scatter_cols", std::move(out), {gv},
                      [idx](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{select_cols(g, idx)};
                      });
}

// per row v: max over columns r != s, for every s. Ties resolve to the first
// maximal column in scan order.
template <typename T>
Var<T> rowwise_exclusive_max(const Var<T>& m) {
    const Tensor<T>& x = m.val();
    int V = x.dim(0), S = x.dim(1);
    if (S < 2) throw DegenerateInputError("exclusive max needs at least 2 columns");
    std::vector<int> idx(static_cast<size_t>(V) * S);
    for (int v = 0; v < V; ++v) {
        int a1 = 0;
        for (int s = 1; s < S; ++s)
            if (x.at(v, s) > x.at(v, a1)) a1 = s;
        int a2 = a1 == 0 ? 1 : 0;
        for (int s = 0; s < S; ++s)
            if (s != a1 && x.at(v, s) > x.at(v, a2)) a2 = s;
        for (int s = 0; s < S; ++s) idx[static_cast<size_t>(v) * S + s] = (s == a1) ? a2 : a1;
    }
    return select_cols(m, idx);
}

// per column s: max over rows v -> {S}; ties resolve to the first maximal row.
template <typename T>
Var<T> scatter_rows(const Var<T>& g, const std::vector<int>& idx, int V);

template <typename T>
Var<T> colwise_max(const Var<T>& m) {
    const Tensor<T>& x = m.val();
    int V = x.dim(0), S = x.dim(1);
    std::vector<int> idx(S);
    Tensor<T> out(Shape{S});
    for (int s = 0; s < S; ++s) {
        int best = 0;
        for (int v = 1; v < V; ++v)
            if (x.at(v, s) > x.at(best, s)) best = v;
        idx[s] = best;
        out[s] = x.at(best, s);
    }
    return make_op<T>("colwise_max", std::move(out), {m},
                      [idx, V](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{scatter_rows(g, idx, V)};
                      });
}

template <typename T>
Var<T> select_rows(const Var<T>& m, const std::vector<int>& idx);

template <typename T>
Var<T> scatter_rows(const Var<T>& gv, const std::vector<int>& idx, int V) {
    const Tensor<T>& g = gv.val();
    int S = g.dim(0);
    Tensor<T> out(Shape{V, S});
    for (int s = 0; s < S; ++s) out.at(idx[s], s) += g[s];
    return make_op<T>("scatter_rows", std::move(out), {gv},
                      [idx](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{select_rows(g, idx)};
                      });
}

template <typename T>
Var<T> select_rows(const Var<T>& m, const std::vector<int>& idx) {
    const Tensor<T>& x = m.val();
    int V = x.dim(0);
    int S = x.dim(1);
    Tensor<T> out(Shape{S});
    for (int s = 0; s < S; ++s) out[s] = x.at(idx[s], s);
    return make_op<T>("select_rows", std::move(out), {m},
                      [idx, V](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{scatter_rows(g, idx, V)};
                      });
}

// ---------------------------------------------------------------------------
// small conveniences
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& b) {
    const Tensor<T>& xv = x.val();
    int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    if (b.val().dim(0) != C) throw ShapeError("bias channels");
    Tensor<T> out = xv;
    for (int c = 0; c < C; ++c) {
        T* p = out.data() + static_cast<int64_t>(c) * H * W;
        T bv = b.val()[c];
        for (int i = 0; i < H * W; ++i) p[i] += bv;
    }
    return make_op<T>("add_channel_bias", std::move(out), {x, b},
                      [](const std::vector<Var<T>>&, const Var<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{g, spatial_sum(g)};
                      });
}

template <typename T>
Var<T> dot(const Var<T>& a, const Var<T>& b) {
    return sum_all(mul(a, b));
}

template <typename T>
Var<T> l2_norm(const Var<T>& a) {
    return sqrt_(sum_all(mul(a, a)));
}

template <typename T>
Var<T> mean_abs_diff(const Var<T>& a, const Var<T>& b) {
    return mean_all(abs_(sub(a, b)));
}

}  // namespace avk
