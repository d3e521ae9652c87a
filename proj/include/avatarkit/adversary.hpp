#pragma once

#include <string>

#include "avatarkit/generators.hpp"
#include "avatarkit/nn.hpp"

namespace avk {

// Strided conv pyramid down to 4x4, then a dense head producing one realness
// logit per image. Operates on [-1,1] rasters.
template <typename T>
class Discriminator {
public:
    Discriminator(int resolution, int base_channels, int channel_cap,
                  std::string prefix = "disc")
        : resolution_(resolution),
          base_(base_channels),
          cap_(channel_cap),
          prefix_(std::move(prefix)) {
        if (resolution_ < 8 || (resolution_ & (resolution_ - 1)) != 0)
            throw ValueError("discriminator resolution must be a power of two >= 8");
        if (base_ < 1 || cap_ < base_) throw ValueError("discriminator channel plan invalid");
    }

    static Discriminator from_gen_config(const GenConfig& cfg, std::string prefix = "disc") {
        return Discriminator(cfg.resolution, cfg.base_channels, cfg.channel_cap,
                             std::move(prefix));
    }

    void register_params(ParamDict<T>& params, uint64_t seed) const {
        std::string fn = prefix_ + ".from";
        init_unit(params.create(fn + ".weight", Shape{ch(resolution_), 3, 3, 3}), seed,
                  fn + ".weight");
        params.create(fn + ".bias", Shape{ch(resolution_)});
        for (int res = resolution_; res > 4; res /= 2) {
            std::string n = down_name(res);
            init_unit(params.create(n + ".weight", Shape{ch(res / 2), ch(res), 3, 3}), seed,
                      n + ".weight");
            params.create(n + ".bias", Shape{ch(res / 2)});
        }
        std::string mid = prefix_ + ".mid";
        init_unit(params.create(mid + ".weight", Shape{ch(4), ch(4), 3, 3}), seed,
                  mid + ".weight");
        params.create(mid + ".bias", Shape{ch(4)});
        std::string f1 = prefix_ + ".fc";
        init_unit(params.create(f1 + ".weight", Shape{ch(4), ch(4) * 16}), seed, f1 + ".weight");
        params.create(f1 + ".bias", Shape{ch(4)});
        std::string f2 = prefix_ + ".fc_out";
        init_unit(params.create(f2 + ".weight", Shape{1, ch(4)}), seed, f2 + ".weight");
        params.create(f2 + ".bias", Shape{1});
    }

    // image in [-1,1], {3,R,R} -> scalar logit {1}
    Var<T> forward(const LeafMap<T>& P, const Var<T>& image_m) const {
        if (image_m.val().shape() != Shape{3, resolution_, resolution_})
            throw ShapeError(prefix_ + ": expected {3," + std::to_string(resolution_) + "," +
                             std::to_string(resolution_) + "}, got " +
                             shape_str(image_m.val().shape()));
        Var<T> x = lrelu(
            add_channel_bias(conv2d(image_m, runtime_scaled(leaf_at(P, prefix_ + ".from.weight")), 1, 1),
                             leaf_at(P, prefix_ + ".from.bias")),
            T(0.2));
        for (int res = resolution_; res > 4; res /= 2) {
            std::string n = down_name(res);
            x = lrelu(add_channel_bias(conv2d(x, runtime_scaled(leaf_at(P, n + ".weight")), 2, 1),
                                       leaf_at(P, n + ".bias")),
                      T(0.2));
        }
        x = lrelu(
            add_channel_bias(conv2d(x, runtime_scaled(leaf_at(P, prefix_ + ".mid.weight")), 1, 1),
                             leaf_at(P, prefix_ + ".mid.bias")),
            T(0.2));
        Var<T> flat = reshape(x, Shape{ch(4) * 16});
        Var<T> h = lrelu(linear(flat, runtime_scaled(leaf_at(P, prefix_ + ".fc.weight")),
                                leaf_at(P, prefix_ + ".fc.bias")),
                         T(0.2));
        return linear(h, runtime_scaled(leaf_at(P, prefix_ + ".fc_out.weight")),
                      leaf_at(P, prefix_ + ".fc_out.bias"));
    }

    int resolution() const { return resolution_; }
    const std::string& prefix() const { return prefix_; }

private:
    int ch(int res) const { return std::min(cap_, base_ * (resolution_ / res)); }
    std::string down_name(int res) const { return prefix_ + ".down" + std::to_string(res); }

    int resolution_;
    int base_;
    int cap_;
    std::string prefix_;
};

// non-saturating generator loss: mean softplus(-logit)
template <typename T>
Var<T> loss_g(const Var<T>& fake_logits) {
    if (!fake_logits.val().all_finite()) throw ValueError("loss_g: non-finite logits");
    return mean_all(softplus_(neg(fake_logits)));
}

// logistic discriminator loss with R1: mean softplus(fake) + mean
// softplus(-real) + (gamma/2) * r1_penalty
template <typename T>
Var<T> loss_d(const Var<T>& real_logits, const Var<T>& fake_logits, const Var<T>& r1_penalty,
              double gamma = 1.0) {
    if (!real_logits.val().all_finite() || !fake_logits.val().all_finite())
        throw ValueError("loss_d: non-finite logits");
    Var<T> base = add(mean_all(softplus_(fake_logits)), mean_all(softplus_(neg(real_logits))));
    return add(base, mul_scalar(mean_all(r1_penalty), static_cast<T>(gamma / 2)));
}

// squared gradient norm of the realness logit w.r.t. the input image; stays
// attached to the graph so it can train the discriminator
template <typename T>
Var<T> r1_penalty(const Discriminator<T>& disc, const LeafMap<T>& P, const Tensor<T>& real_m) {
    Var<T> x = make_leaf(real_m, true);
    Var<T> logit = disc.forward(P, x);
    Var<T> gx = grad(logit, {x})[0];
    return sum_all(mul(gx, gx));
}

template <typename T>
T loss_g_value(const Tensor<T>& fake_logits) {
    return loss_g(constant(fake_logits)).item();
}

template <typename T>
T loss_d_value(const Tensor<T>& real_logits, const Tensor<T>& fake_logits, T r1, double gamma = 1.0) {
    return loss_d(constant(real_logits), constant(fake_logits), constant(Tensor<T>::scalar(r1)),
                  gamma)
        .item();
}

}  // namespace avk
