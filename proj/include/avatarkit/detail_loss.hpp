#pragma once

#include <functional>
#include <vector>

#include "avatarkit/backbones.hpp"
#include "avatarkit/ops.hpp"

namespace avk {

// Loss weights; defaults follow the training setup this pipeline was tuned
// with. The generator side combines mask/mrf/l1/cos/g; the discriminator side
// takes d alone.
struct LossWeights {
    double lambda_mask = 3.0;
    double lambda_mrf = 5e-2;
    double lambda_l1 = 1.0;
    double lambda_cos = 1.0;
    double lambda_d = 1.0;
    double lambda_g = 1.0;

    void validate() const {
        for (double v : {lambda_mask, lambda_mrf, lambda_l1, lambda_cos, lambda_d, lambda_g})
            if (!(v >= 0.0) || !std::isfinite(v))
                throw ValueError("loss weights must be finite and >= 0");
    }
};

struct LossBreakdown {
    double mask = 0, mrf = 0, l1 = 0, cos = 0, g = 0, d = 0;
    double total = 0;

    bool all_finite() const {
        for (double v : {mask, mrf, l1, cos, g, d, total})
            if (!std::isfinite(v)) return false;
        return true;
    }

    // name of the first non-finite term, or nullptr
    const char* first_non_finite() const {
        if (!std::isfinite(mask)) return "mask";
        if (!std::isfinite(mrf)) return "mrf";
        if (!std::isfinite(l1)) return "l1";
        if (!std::isfinite(cos)) return "cos";
        if (!std::isfinite(g)) return "g";
        if (!std::isfinite(d)) return "d";
        return nullptr;
    }
};

// (generator_total, discriminator_total); also updates nothing.
inline std::pair<double, double> total_loss(const LossBreakdown& b, const LossWeights& w) {
    w.validate();
    double gen = w.lambda_mask * b.mask + w.lambda_mrf * b.mrf + w.lambda_l1 * b.l1 +
                 w.lambda_cos * b.cos + w.lambda_g * b.g;
    double disc = w.lambda_d * b.d;
    return {gen, disc};
}

struct IdMrfConfig {
    double bandwidth = 0.5;  // h
    double epsilon = 1e-5;
    int patch_size = 1;                 // 1 or 3
    std::vector<double> layer_weights;  // per backbone tap; empty = all ones

    void validate() const {
        if (!(bandwidth > 0)) throw ValueError("idmrf bandwidth must be > 0");
        if (!(epsilon > 0)) throw ValueError("idmrf epsilon must be > 0");
        if (patch_size != 1 && patch_size != 3) throw ValueError("idmrf patch_size must be 1 or 3");
        for (double w : layer_weights)
            if (!(w >= 0)) throw ValueError("idmrf layer weights must be >= 0");
    }
};

// mean |I_FM - (1 - I_back)|
template <typename T>
Var<T> loss_mask(const Var<T>& foreground_mask, const Var<T>& background_mask) {
    Var<T> target = add_scalar(neg(background_mask), T(1));
    return mean_abs_diff(foreground_mask, target);
}

template <typename T>
Var<T> loss_l1(const Var<T>& a, const Var<T>& b) {
    return mean_abs_diff(a, b);
}

// feature map {C,H,W} -> patch rows {P, C*patch^2}
template <typename T>
Var<T> patch_matrix(const Var<T>& feat, int patch_size) {
    const Shape& s = feat.val().shape();
    if (patch_size == 1) return transpose(reshape(feat, Shape{s[0], s[1] * s[2]}));
    return transpose(unfold3x3(feat));
}

// Relative-similarity patch loss on one feature layer. fake rows are the
// queried patches v, real rows are the candidate set Y = {s}.
template <typename T>
Var<T> idmrf_layer(const Var<T>& fake_patches, const Var<T>& real_patches,
                   const IdMrfConfig& cfg) {
    const int V = fake_patches.val().dim(0);
    const int S = real_patches.val().dim(0);
    if (S < 2)
        throw DegenerateInputError("idmrf needs at least 2 real patches, got " +
                                   std::to_string(S));
    if (V < 1) throw DegenerateInputError("idmrf needs at least 1 fake patch");
    const T eps = static_cast<T>(cfg.epsilon);

    Var<T> dots = matmul_nt(fake_patches, real_patches);  // {V,S}
    Var<T> nf = add_scalar(sqrt_(rowwise_sum(mul(fake_patches, fake_patches))), eps);
    Var<T> nr = add_scalar(sqrt_(rowwise_sum(mul(real_patches, real_patches))), eps);
    Var<T> denom = matmul(reshape(nf, Shape{V, 1}), reshape(nr, Shape{1, S}));
    Var<T> mu = div(dots, denom);

    Var<T> excl = rowwise_exclusive_max(mu);
    Var<T> rs = exp_(mul_scalar(div(mu, add_scalar(excl, eps)), static_cast<T>(1.0 / cfg.bandwidth)));
    Var<T> rs_others = sub(rowwise_broadcast(rowwise_sum(rs), S), rs);
    Var<T> rs_bar = div(rs, rs_others);
    Var<T> best = colwise_max(rs_bar);  // max over v for each s
    return neg(log_(mul_scalar(sum_all(best), static_cast<T>(1.0 / S))));
}

// weighted sum of per-tap layer losses on feature pyramids
template <typename T>
Var<T> idmrf_from_features(const std::vector<Var<T>>& fake_feats,
                           const std::vector<Var<T>>& real_feats, const IdMrfConfig& cfg) {
    cfg.validate();
    if (fake_feats.size() != real_feats.size() || fake_feats.empty())
        throw ShapeError("idmrf expects matching nonempty feature lists");
    if (!cfg.layer_weights.empty() && cfg.layer_weights.size() != fake_feats.size())
        throw ValueError("idmrf layer_weights size must match tap count");
    Var<T> total;
    for (size_t l = 0; l < fake_feats.size(); ++l) {
        double w = cfg.layer_weights.empty() ? 1.0 : cfg.layer_weights[l];
        Var<T> layer = idmrf_layer(patch_matrix(fake_feats[l], cfg.patch_size),
                                   patch_matrix(real_feats[l], cfg.patch_size), cfg);
        Var<T> term = mul_scalar(layer, static_cast<T>(w));
        total = total ? add(total, term) : term;
    }
    return total;
}

// fake_fg = I_FM (.) I_A, real_fg = (1 - I_back) (.) I_RA, both [0,1] rasters
template <typename T>
Var<T> loss_idmrf(const Var<T>& fake_fg, const Var<T>& real_fg, const Backbone<T>& backbone,
                  const IdMrfConfig& cfg) {
    if (fake_fg.val().shape() != real_fg.val().shape())
        throw ShapeError("idmrf foregrounds must share a resolution");
    return idmrf_from_features(backbone.features(fake_fg), backbone.features(real_fg), cfg);
}

template <typename T>
using EmbedFn = std::function<std::vector<Var<T>>(const Var<T>& image01)>;

template <typename T>
EmbedFn<T> backbone_embedder(const Backbone<T>& b) {
    return [&b](const Var<T>& img) { return b.pooled_embeddings(img); };
}

// mean over embedding taps of (1 - cosine similarity); range [0,2]
template <typename T>
Var<T> loss_cos(const Var<T>& a, const Var<T>& b, const EmbedFn<T>& embed) {
    auto ea = embed(a);
    auto eb = embed(b);
    if (ea.size() != eb.size() || ea.empty())
        throw ShapeError("embedder returned mismatched embedding sets");
    Var<T> total;
    for (size_t i = 0; i < ea.size(); ++i) {
        Var<T> denom = add_scalar(mul(l2_norm(ea[i]), l2_norm(eb[i])), static_cast<T>(1e-8));
        Var<T> cosv = div(dot(ea[i], eb[i]), denom);
        Var<T> term = add_scalar(neg(cosv), T(1));
        total = total ? add(total, term) : term;
    }
    return mul_scalar(total, static_cast<T>(1.0 / ea.size()));
}

// value-level helpers

template <typename T>
T loss_mask_value(const Tensor<T>& fm, const Tensor<T>& back) {
    return loss_mask(constant(fm), constant(back)).item();
}

template <typename T>
T loss_l1_value(const Tensor<T>& a, const Tensor<T>& b) {
    return loss_l1(constant(a), constant(b)).item();
}

template <typename T>
T loss_idmrf_value(const Tensor<T>& fake_fg, const Tensor<T>& real_fg, const Backbone<T>& bb,
                   const IdMrfConfig& cfg) {
    return loss_idmrf(constant(fake_fg), constant(real_fg), bb, cfg).item();
}

template <typename T>
T loss_cos_value(const Tensor<T>& a, const Tensor<T>& b, const Backbone<T>& bb) {
    return loss_cos(constant(a), constant(b), backbone_embedder(bb)).item();
}

}  // namespace avk
