#pragma once

#include <optional>
#include <string>
#include <vector>

#include "avatarkit/nn.hpp"
#include "json.hpp"

namespace avk {

struct NetOverrides {
    std::optional<int> base_channels;
    std::optional<int> mapping_layers;
};

struct GenConfig {
    int resolution = 64;
    int latent_dim = 64;
    int base_channels = 32;
    int mapping_layers = 2;
    int channel_cap = 128;
    NetOverrides face, background, avatar;

    void validate() const {
        if (resolution < 32 || (resolution & (resolution - 1)) != 0)
            throw ValueError("gen resolution must be a power of two >= 32");
        if (base_channels < 8) throw ValueError("gen base_channels must be >= 8");
        if (latent_dim < 1) throw ValueError("gen latent_dim must be >= 1");
        if (mapping_layers < 1) throw ValueError("gen mapping_layers must be >= 1");
        if (channel_cap < base_channels) throw ValueError("gen channel_cap below base_channels");
    }

    // channels at spatial size `res`: doubles as resolution halves, capped
    int channels(int res, int base) const {
        return std::min(channel_cap, base * (resolution / res));
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["resolution"] = resolution;
        j["latent_dim"] = latent_dim;
        j["base_channels"] = base_channels;
        j["mapping_layers"] = mapping_layers;
        j["channel_cap"] = channel_cap;
        auto dump_ov = [](const NetOverrides& o) {
            nlohmann::json v;
            if (o.base_channels) v["base_channels"] = *o.base_channels;
            if (o.mapping_layers) v["mapping_layers"] = *o.mapping_layers;
            return v;
        };
        j["face"] = dump_ov(face);
        j["background"] = dump_ov(background);
        j["avatar"] = dump_ov(avatar);
        return j;
    }

    static GenConfig from_json(const nlohmann::json& j) {
        GenConfig c;
        c.resolution = j.value("resolution", c.resolution);
        c.latent_dim = j.value("latent_dim", c.latent_dim);
        c.base_channels = j.value("base_channels", c.base_channels);
        c.mapping_layers = j.value("mapping_layers", c.mapping_layers);
        c.channel_cap = j.value("channel_cap", c.channel_cap);
        auto load_ov = [](const nlohmann::json& v) {
            NetOverrides o;
            if (v.contains("base_channels")) o.base_channels = v["base_channels"].get<int>();
            if (v.contains("mapping_layers")) o.mapping_layers = v["mapping_layers"].get<int>();
            return o;
        };
        if (j.contains("face")) c.face = load_ov(j["face"]);
        if (j.contains("background")) c.background = load_ov(j["background"]);
        if (j.contains("avatar")) c.avatar = load_ov(j["avatar"]);
        c.validate();
        return c;
    }
};

// z plus one single-channel noise map per synthesis layer
template <typename T>
struct LatentCode {
    Tensor<T> z;
    std::vector<Tensor<T>> noise;

    void validate(const std::vector<Shape>& expected_noise_shapes) const {
        if (!z.all_finite()) throw ValueError("latent z contains non-finite values");
        if (noise.size() != expected_noise_shapes.size())
            throw ShapeError("latent noise stack has wrong depth");
        for (size_t i = 0; i < noise.size(); ++i) {
            if (noise[i].shape() != expected_noise_shapes[i])
                throw ShapeError("latent noise layer " + std::to_string(i) +
                                 " has wrong resolution");
            if (!noise[i].all_finite())
                throw ValueError("latent noise contains non-finite values");
        }
    }
};

template <typename T>
struct GeneratorOutput {
    Var<T> avatar_internal;  // tanh range [-1,1]
    Var<T> avatar;           // rescaled to [0,1]
    Var<T> mask;             // sigmoid range [0,1]
};

namespace nnutil {

template <typename T>
Var<T> run_mapping(const LeafMap<T>& P, const std::string& prefix, int layers, const Var<T>& z) {
    Var<T> w = z;
    for (int i = 0; i < layers; ++i) {
        std::string n = prefix + ".mapping" + std::to_string(i);
        w = lrelu(linear(w, runtime_scaled(leaf_at(P, n + ".weight")), leaf_at(P, n + ".bias")),
                  T(0.2));
    }
    return w;
}

template <typename T>
void register_mapping(ParamDict<T>& params, uint64_t seed, const std::string& prefix, int layers,
                      int dim) {
    for (int i = 0; i < layers; ++i) {
        std::string n = prefix + ".mapping" + std::to_string(i);
        init_unit(params.create(n + ".weight", Shape{dim, dim}), seed, n + ".weight");
        params.create(n + ".bias", Shape{dim});
    }
}

// style = affine(w); bias starts at 1 so modulation is neutral at init
template <typename T>
void register_affine(ParamDict<T>& params, uint64_t seed, const std::string& n, int out_dim,
                     int in_dim) {
    init_unit(params.create(n + ".weight", Shape{out_dim, in_dim}), seed, n + ".weight");
    fill_constant(params.create(n + ".bias", Shape{out_dim}), T(1));
}

template <typename T>
Var<T> styled_conv(const LeafMap<T>& P, const std::string& n, const Var<T>& x, const Var<T>& w,
                   const Tensor<T>& noise, bool demod, int pad) {
    Var<T> style = linear(w, runtime_scaled(leaf_at(P, n + ".affine.weight")),
                          leaf_at(P, n + ".affine.bias"));
    Var<T> y = modulated_conv(x, runtime_scaled(leaf_at(P, n + ".weight")), style, demod, pad);
    if (!noise.empty()) {
        Var<T> bc = constant(tile_noise(noise, y.val().dim(0)));
        y = add(y, scale(bc, leaf_at(P, n + ".noise_strength")));
    }
    return add_channel_bias(y, leaf_at(P, n + ".bias"));
}

}  // namespace nnutil

// Unconditional synthesis network (the face and background generators).
// Learned 4x4 constant, one modulated conv per resolution, per-resolution
// to-rgb skips summed over an upsampling pyramid, tanh head.
template <typename T>
class SynthesisNet {
public:
    SynthesisNet(GenConfig cfg, std::string prefix, const NetOverrides& ov)
        : cfg_(cfg),
          prefix_(std::move(prefix)),
          base_(ov.base_channels.value_or(cfg.base_channels)),
          mapping_layers_(ov.mapping_layers.value_or(cfg.mapping_layers)) {
        cfg_.validate();
    }

    const std::string& prefix() const { return prefix_; }

    std::vector<int> levels() const {
        std::vector<int> out;
        for (int res = 4; res <= cfg_.resolution; res *= 2) out.push_back(res);
        return out;
    }

    std::vector<Shape> noise_shapes() const {
        std::vector<Shape> out;
        for (int res : levels()) out.push_back(Shape{1, res, res});
        return out;
    }

    void register_params(ParamDict<T>& params, uint64_t seed) const {
        const int D = cfg_.latent_dim;
        nnutil::register_mapping(params, seed, prefix_, mapping_layers_, D);
        auto& cst = params.create(prefix_ + ".const", Shape{ch(4), 4, 4});
        RandomStream cs(seed, ("init/" + prefix_ + ".const").c_str());
        cs.fill_normal(cst, 1.0);
        int prev = ch(4);
        for (int res : levels()) {
            std::string n = layer_name(res);
            init_unit(params.create(n + ".weight", Shape{ch(res), prev, 3, 3}), seed,
                      n + ".weight");
            params.create(n + ".bias", Shape{ch(res)});
            params.create(n + ".noise_strength", Shape{1});
            nnutil::register_affine(params, seed, n + ".affine", prev, D);
            std::string rn = rgb_name(res);
            init_unit(params.create(rn + ".weight", Shape{3, ch(res), 1, 1}), seed,
                      rn + ".weight");
            params.create(rn + ".bias", Shape{3});
            nnutil::register_affine(params, seed, rn + ".affine", ch(res), D);
            prev = ch(res);
        }
    }

    // output in [-1,1]
    Var<T> forward(const LeafMap<T>& P, const Var<T>& z,
                   const std::vector<Tensor<T>>& noise) const {
        if (z.val().shape() != Shape{cfg_.latent_dim})
            throw ShapeError(prefix_ + ": latent dimension mismatch, expected " +
                             std::to_string(cfg_.latent_dim));
        Var<T> w = nnutil::run_mapping(P, prefix_, mapping_layers_, z);
        Var<T> x = leaf_at(P, prefix_ + ".const");
        Var<T> rgb;
        auto lv = levels();
        for (size_t i = 0; i < lv.size(); ++i) {
            int res = lv[i];
            if (res > 4) x = upsample2x(x, true);
            const Tensor<T>& nz = i < noise.size() ? noise[i] : Tensor<T>();
            x = lrelu(nnutil::styled_conv(P, layer_name(res), x, w, nz, true, 1), T(0.2));
            Var<T> t = nnutil::styled_conv(P, rgb_name(res), x, w, Tensor<T>(), false, 0);
            rgb = rgb ? add(upsample2x(rgb, true), t) : t;
        }
        return tanh_(rgb);
    }

private:
    int ch(int res) const { return cfg_.channels(res, base_); }
    std::string layer_name(int res) const { return prefix_ + ".b" + std::to_string(res); }
    std::string rgb_name(int res) const { return prefix_ + ".rgb" + std::to_string(res); }

    GenConfig cfg_;
    std::string prefix_;
    int base_;
    int mapping_layers_;
};

// Condition-driven composite generator: encodes the 12-channel condition
// stack down to 4x4, then decodes with style-modulated convs, encoder skip
// additions, and a 4-channel to-output pyramid (3 avatar + 1 mask).
template <typename T>
class AvatarNet {
public:
    AvatarNet(GenConfig cfg, std::string prefix, const NetOverrides& ov)
        : cfg_(cfg),
          prefix_(std::move(prefix)),
          base_(ov.base_channels.value_or(cfg.base_channels)),
          mapping_layers_(ov.mapping_layers.value_or(cfg.mapping_layers)) {
        cfg_.validate();
    }

    static constexpr int kCondChannels = 12;

    std::vector<int> levels() const {
        std::vector<int> out;
        for (int res = 4; res <= cfg_.resolution; res *= 2) out.push_back(res);
        return out;
    }

    std::vector<Shape> noise_shapes() const {
        std::vector<Shape> out;
        for (int res : levels()) out.push_back(Shape{1, res, res});
        return out;
    }

    void register_params(ParamDict<T>& params, uint64_t seed) const {
        const int D = cfg_.latent_dim;
        nnutil::register_mapping(params, seed, prefix_, mapping_layers_, D);
        const int R = cfg_.resolution;
        std::string fn = prefix_ + ".enc_from";
        init_unit(params.create(fn + ".weight", Shape{ch(R), kCondChannels, 3, 3}), seed,
                  fn + ".weight");
        params.create(fn + ".bias", Shape{ch(R)});
        for (int res = R; res > 4; res /= 2) {
            std::string n = enc_name(res);
            init_unit(params.create(n + ".weight", Shape{ch(res / 2), ch(res), 3, 3}), seed,
                      n + ".weight");
            params.create(n + ".bias", Shape{ch(res / 2)});
        }
        std::string mid = prefix_ + ".enc_mid";
        init_unit(params.create(mid + ".weight", Shape{ch(4), ch(4), 3, 3}), seed,
                  mid + ".weight");
        params.create(mid + ".bias", Shape{ch(4)});

        int prev = ch(4);
        for (int res : levels()) {
            std::string n = dec_name(res);
            init_unit(params.create(n + ".weight", Shape{ch(res), prev, 3, 3}), seed,
                      n + ".weight");
            params.create(n + ".bias", Shape{ch(res)});
            params.create(n + ".noise_strength", Shape{1});
            nnutil::register_affine(params, seed, n + ".affine", prev, D);
            std::string on = out_name(res);
            init_unit(params.create(on + ".weight", Shape{4, ch(res), 1, 1}), seed,
                      on + ".weight");
            params.create(on + ".bias", Shape{4});
            nnutil::register_affine(params, seed, on + ".affine", ch(res), D);
            prev = ch(res);
        }
    }

    // condition stack {12,R,R} in [-1,1]
    GeneratorOutput<T> forward(const LeafMap<T>& P, const Var<T>& cond, const Var<T>& z,
                               const std::vector<Tensor<T>>& noise) const {
        const int R = cfg_.resolution;
        if (cond.val().shape() != Shape{kCondChannels, R, R})
            throw ShapeError(prefix_ + ": condition stack must be {12," + std::to_string(R) + "," +
                             std::to_string(R) + "}, got " + shape_str(cond.val().shape()));
        if (z.val().shape() != Shape{cfg_.latent_dim})
            throw ShapeError(prefix_ + ": latent dimension mismatch");

        Var<T> w = nnutil::run_mapping(P, prefix_, mapping_layers_, z);

        // encoder
        std::unordered_map<int, Var<T>> skips;
        Var<T> x = lrelu(
            add_channel_bias(conv2d(cond, runtime_scaled(leaf_at(P, prefix_ + ".enc_from.weight")), 1, 1),
                             leaf_at(P, prefix_ + ".enc_from.bias")),
            T(0.2));
        skips.emplace(R, x);
        for (int res = R; res > 4; res /= 2) {
            std::string n = enc_name(res);
            x = lrelu(add_channel_bias(conv2d(x, runtime_scaled(leaf_at(P, n + ".weight")), 2, 1),
                                       leaf_at(P, n + ".bias")),
                      T(0.2));
            skips.emplace(res / 2, x);
        }
        x = lrelu(
            add_channel_bias(conv2d(x, runtime_scaled(leaf_at(P, prefix_ + ".enc_mid.weight")), 1, 1),
                             leaf_at(P, prefix_ + ".enc_mid.bias")),
            T(0.2));

        // decoder with to-output skip summation
        Var<T> out;
        auto lv = levels();
        for (size_t i = 0; i < lv.size(); ++i) {
            int res = lv[i];
            if (res > 4) x = upsample2x(x, true);
            const Tensor<T>& nz = i < noise.size() ? noise[i] : Tensor<T>();
            x = lrelu(nnutil::styled_conv(P, dec_name(res), x, w, nz, true, 1), T(0.2));
            if (res > 4) x = add(x, skips.at(res));
            Var<T> t = nnutil::styled_conv(P, out_name(res), x, w, Tensor<T>(), false, 0);
            out = out ? add(upsample2x(out, true), t) : t;
        }

        GeneratorOutput<T> result;
        result.avatar_internal = tanh_(slice_channels(out, 0, 3));
        result.avatar = mul_scalar(add_scalar(result.avatar_internal, T(1)), T(0.5));
        result.mask = sigmoid_(slice_channels(out, 3, 4));
        return result;
    }

private:
    int ch(int res) const { return cfg_.channels(res, base_); }
    std::string enc_name(int res) const { return prefix_ + ".enc" + std::to_string(res); }
    std::string dec_name(int res) const { return prefix_ + ".dec" + std::to_string(res); }
    std::string out_name(int res) const { return prefix_ + ".out" + std::to_string(res); }

    GenConfig cfg_;
    std::string prefix_;
    int base_;
    int mapping_layers_;
};

// [0,1] raster -> [-1,1] condition channel
template <typename T>
Var<T> to_model_range(const Var<T>& img01) {
    return add_scalar(mul_scalar(img01, T(2)), T(-1));
}

template <typename T>
Var<T> condition_stack(const Var<T>& face_canvas, const Var<T>& background_canvas,
                       const Var<T>& render_m, const Var<T>& uv_m) {
    return concat_channels<T>({face_canvas, background_canvas, render_m, uv_m});
}

// The three generation networks plus their global latents and the stored
// inference noise buffers, registered under fixed names:
//   face.* background.* avatar.*   network weights
//   latent.{face,background,avatar}
//   noise.{face,background,avatar}.<layer>   frozen inference noise
template <typename T>
class AvatarPipeline {
public:
    explicit AvatarPipeline(const GenConfig& cfg)
        : cfg_(cfg),
          face_(cfg, "face", cfg.face),
          background_(cfg, "background", cfg.background),
          avatar_(cfg, "avatar", cfg.avatar) {
        cfg_.validate();
    }

    const GenConfig& config() const { return cfg_; }
    const SynthesisNet<T>& face_net() const { return face_; }
    const SynthesisNet<T>& background_net() const { return background_; }
    const AvatarNet<T>& avatar_net() const { return avatar_; }

    void register_params(ParamDict<T>& params, uint64_t seed) const {
        face_.register_params(params, seed);
        background_.register_params(params, seed);
        avatar_.register_params(params, seed);
        for (const char* which : {"face", "background", "avatar"}) {
            auto& z = params.create(std::string("latent.") + which, Shape{cfg_.latent_dim});
            RandomStream zs(seed, (std::string("init/latent.") + which).c_str());
            zs.fill_normal(z, 1.0);
        }
        register_noise(params, seed, "face", face_.noise_shapes());
        register_noise(params, seed, "background", background_.noise_shapes());
        register_noise(params, seed, "avatar", avatar_.noise_shapes());
    }

    // stored inference noise for one network
    std::vector<Tensor<T>> stored_noise(const ParamDict<T>& params, const char* which) const {
        std::vector<Tensor<T>> out;
        size_t n = which == std::string("avatar") ? avatar_.noise_shapes().size()
                                                  : face_.noise_shapes().size();
        for (size_t i = 0; i < n; ++i)
            out.push_back(params.at(noise_name(which, i)));
        return out;
    }

    // fresh per-step training noise from the counter-based stream
    std::vector<Tensor<T>> fresh_noise(uint64_t seed, uint64_t step, uint64_t sample,
                                       const char* which) const {
        std::vector<Shape> shapes = which == std::string("avatar") ? avatar_.noise_shapes()
                                                                   : face_.noise_shapes();
        std::vector<Tensor<T>> out;
        for (size_t i = 0; i < shapes.size(); ++i) {
            RandomStream rs(seed, (std::string("noise/") + which + "/" + std::to_string(i)).c_str(),
                            step, sample);
            Tensor<T> t(shapes[i]);
            rs.fill_normal(t);
            out.push_back(std::move(t));
        }
        return out;
    }

    struct ForwardResult {
        Var<T> face_canvas;        // F_fa in [-1,1]
        Var<T> background_canvas;  // F_b in [-1,1]
        GeneratorOutput<T> out;
    };

    // full conditional synthesis; render01/uv01 are [0,1] rasters
    ForwardResult forward(const LeafMap<T>& P, const Tensor<T>& render01, const Tensor<T>& uv01,
                          const std::vector<Tensor<T>>& noise_face,
                          const std::vector<Tensor<T>>& noise_background,
                          const std::vector<Tensor<T>>& noise_avatar) const {
        ForwardResult r;
        r.face_canvas = face_.forward(P, leaf_at(P, "latent.face"), noise_face);
        r.background_canvas =
            background_.forward(P, leaf_at(P, "latent.background"), noise_background);
        Var<T> cond = condition_stack(r.face_canvas, r.background_canvas,
                                      to_model_range(constant(render01)),
                                      to_model_range(constant(uv01)));
        r.out = avatar_.forward(P, cond, leaf_at(P, "latent.avatar"), noise_avatar);
        return r;
    }

    static std::string noise_name(const std::string& which, size_t layer) {
        return "noise." + which + "." + std::to_string(layer);
    }

    // generator-side trainable parameters: everything except stored noise
    static bool is_trainable(const std::string& name) {
        return name.rfind("noise.", 0) != 0;
    }

private:
    void register_noise(ParamDict<T>& params, uint64_t seed, const char* which,
                        const std::vector<Shape>& shapes) const {
        for (size_t i = 0; i < shapes.size(); ++i) {
            auto& t = params.create(noise_name(which, i), shapes[i]);
            RandomStream rs(seed, ("init/" + noise_name(which, i)).c_str());
            rs.fill_normal(t);
        }
    }

    GenConfig cfg_;
    SynthesisNet<T> face_;
    SynthesisNet<T> background_;
    AvatarNet<T> avatar_;
};

}  // namespace avk
