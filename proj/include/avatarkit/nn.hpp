#pragma once

#include <string>
#include <unordered_map>

#include "avatarkit/ops.hpp"
#include "avatarkit/params.hpp"
#include "avatarkit/rng.hpp"

namespace avk {

template <typename T>
using LeafMap = std::unordered_map<std::string, Var<T>>;

// Wraps parameter tensors as graph leaves. Leaves share no storage with the
// dict, so a later optimizer update does not mutate live graphs.
template <typename T>
LeafMap<T> make_leaves(const ParamDict<T>& params, bool requires_grad) {
    LeafMap<T> out;
    for (const auto& name : params.names())
        out.emplace(name, make_leaf(params.at(name), requires_grad));
    return out;
}

template <typename T>
LeafMap<T> make_leaves_prefix(const ParamDict<T>& params, const std::string& prefix,
                              bool requires_grad) {
    LeafMap<T> out;
    for (const auto& name : params.names())
        if (name.rfind(prefix, 0) == 0) out.emplace(name, make_leaf(params.at(name), requires_grad));
    return out;
}

template <typename T>
const Var<T>& leaf_at(const LeafMap<T>& leaves, const std::string& name) {
    auto it = leaves.find(name);
    if (it == leaves.end()) throw ValueError("missing parameter leaf " + name);
    return it->second;
}

// fan-in scaled normal init for a conv/linear weight
template <typename T>
void init_fan_in(Tensor<T>& w, uint64_t seed, const std::string& name) {
    int64_t fan_in = w.numel() / w.dim(0);
    RandomStream rs(seed, ("init/" + name).c_str());
    rs.fill_normal(w, 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

// equalized learning rate: weights are stored unit-variance and scaled by
// 1/sqrt(fan_in) at use, so Adam's scale-free steps stay proportionate
template <typename T>
void init_unit(Tensor<T>& w, uint64_t seed, const std::string& name) {
    RandomStream rs(seed, ("init/" + name).c_str());
    rs.fill_normal(w, 1.0);
}

template <typename T>
T fan_in_gain(const Shape& wshape) {
    int64_t fan_in = numel_of(wshape) / wshape[0];
    return static_cast<T>(1.0 / std::sqrt(static_cast<double>(fan_in)));
}

template <typename T>
Var<T> runtime_scaled(const Var<T>& w) {
    return mul_scalar(w, fan_in_gain<T>(w.val().shape()));
}

template <typename T>
void fill_constant(Tensor<T>& t, T v) {
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = v;
}

// StyleGAN2-style modulated convolution for a single sample: the style vector
// scales input channels, then each output filter is renormalized to unit
// L2 norm (demodulation).
template <typename T>
Var<T> modulated_conv(const Var<T>& x, const Var<T>& w, const Var<T>& style, bool demodulate,
                      int pad) {
    Var<T> wm = mul(w, in_channel_broadcast(style, w.val().shape()));
    if (demodulate) {
        Var<T> ssq = out_channel_sum(mul(wm, wm));
        Var<T> d = rsqrt_(add_scalar(ssq, static_cast<T>(1e-8)));
        wm = mul(wm, out_channel_broadcast(d, w.val().shape()));
    }
    return conv2d(x, wm, 1, pad);
}

// broadcast a single-channel noise map across C channels as a constant
template <typename T>
Tensor<T> tile_noise(const Tensor<T>& noise, int C) {
    int H = noise.dim(1), W = noise.dim(2);
    Tensor<T> out(Shape{C, H, W});
    for (int c = 0; c < C; ++c)
        std::copy_n(noise.data(), static_cast<int64_t>(H) * W,
                    out.data() + static_cast<int64_t>(c) * H * W);
    return out;
}

}  // namespace avk
