#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "avatarkit/checkpoint.hpp"
#include "avatarkit/ops.hpp"
#include "avatarkit/params.hpp"
#include "avatarkit/rng.hpp"

namespace avk {

// Frozen multi-layer feature extractor. Weights come from a fixed-seed
// stream, so the same spec always yields the same network; no pretrained
// weights are involved. Taps are 0-based stage indices.
struct BackboneSpec {
    uint64_t seed = 77;
    std::vector<std::pair<int, int>> stages = {{16, 2}, {32, 2}, {64, 2}, {128, 2}};
    std::string nonlinearity = "lrelu:0.2";
    std::vector<int> tap_layers = {1, 2};

    void validate() const {
        if (stages.empty()) throw ValueError("backbone spec: stages must be nonempty");
        for (auto [ch, st] : stages) {
            if (ch < 1) throw ValueError("backbone spec: channels must be >= 1");
            if (st != 1 && st != 2) throw ValueError("backbone spec: strides must be 1 or 2");
        }
        if (tap_layers.empty()) throw ValueError("backbone spec: at least one tap layer");
        for (int t : tap_layers)
            if (t < 0 || t >= static_cast<int>(stages.size()))
                throw ValueError("backbone spec: tap layer out of range");
        parse_nonlinearity(nonlinearity);
    }

    static double parse_nonlinearity(const std::string& name) {
        if (name.rfind("lrelu:", 0) == 0) {
            double slope = std::stod(name.substr(6));
            if (!(slope >= 0.0 && slope < 1.0))
                throw ValueError("backbone spec: lrelu slope out of range");
            return slope;
        }
        if (name == "relu") return 0.0;
        throw ValueError("backbone spec: unknown nonlinearity '" + name + "'");
    }

    int min_input_side() const {
        int p = 1;
        for (auto [ch, st] : stages) p *= st;
        return p;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["seed"] = seed;
        j["stages"] = nlohmann::json::array();
        for (auto [ch, st] : stages) j["stages"].push_back({ch, st});
        j["nonlinearity"] = nonlinearity;
        j["tap_layers"] = tap_layers;
        return j;
    }

    static BackboneSpec from_json(const nlohmann::json& j) {
        BackboneSpec s;
        s.seed = j.at("seed").get<uint64_t>();
        s.stages.clear();
        for (const auto& e : j.at("stages"))
            s.stages.emplace_back(e.at(0).get<int>(), e.at(1).get<int>());
        s.nonlinearity = j.at("nonlinearity").get<std::string>();
        s.tap_layers = j.at("tap_layers").get<std::vector<int>>();
        s.validate();
        return s;
    }
};

template <typename T>
struct FeaturePyramid {
    std::vector<Tensor<T>> maps;  // one per tap layer
    std::string provenance;       // backbone hash

    void validate() const {
        for (const auto& m : maps)
            if (!m.all_finite()) throw ValueError("feature pyramid contains non-finite values");
    }
};

template <typename T>
class Backbone {
public:
    static Backbone build_surrogate(const BackboneSpec& spec) {
        spec.validate();
        Backbone b;
        b.spec_ = spec;
        int cin = 3;
        for (size_t i = 0; i < spec.stages.size(); ++i) {
            auto [ch, st] = spec.stages[i];
            auto& w = b.weights_.create(stage_name(i) + ".weight", Shape{ch, cin, 3, 3});
            RandomStream ws(spec.seed, ("backbone/" + stage_name(i) + "/weight").c_str());
            ws.fill_normal(w, 1.0 / std::sqrt(static_cast<double>(cin) * 9.0));
            b.weights_.create(stage_name(i) + ".bias", Shape{ch});  // zeros
            cin = ch;
        }
        b.finish_hash();
        return b;
    }

    static Backbone load(const std::filesystem::path& path) {
        BlobArchive a = read_blob_archive(path);
        if (!a.meta.contains("kind") || a.meta["kind"] != "backbone")
            throw FormatError("archive is not a backbone archive: " + path.string());
        BackboneSpec spec = BackboneSpec::from_json(a.meta.at("spec"));
        Backbone b;
        b.spec_ = spec;
        int cin = 3;
        for (size_t i = 0; i < spec.stages.size(); ++i) {
            auto [ch, st] = spec.stages[i];
            Shape wshape{ch, cin, 3, 3};
            std::string wn = stage_name(i) + ".weight", bn = stage_name(i) + ".bias";
            if (!a.blobs.contains(wn) || !a.blobs.contains(bn))
                throw FormatError("backbone archive is missing blobs for " + stage_name(i));
            if (a.blobs.at(wn).shape() != wshape || a.blobs.at(bn).shape() != Shape{ch})
                throw FormatError("backbone blob shape mismatch at " + stage_name(i));
            b.weights_.put(wn, cast<T>(a.blobs.at(wn)));
            b.weights_.put(bn, cast<T>(a.blobs.at(bn)));
            cin = ch;
        }
        if (a.blobs.size() != 2 * spec.stages.size())
            throw FormatError("backbone archive has unexpected extra blobs");
        b.finish_hash();
        return b;
    }

    void save(const std::filesystem::path& path) const {
        nlohmann::json meta;
        meta["kind"] = "backbone";
        meta["spec"] = spec_.to_json();
        write_blob_archive(path, meta, weights_.template cast_to<float>());
    }

    // taps, differentiable wrt image; image is a [0,1] raster {3,H,W}
    std::vector<Var<T>> features(const Var<T>& image01) const {
        auto stage_outs = run(image01);
        std::vector<Var<T>> taps;
        for (int t : spec_.tap_layers) taps.push_back(stage_outs[static_cast<size_t>(t)]);
        return taps;
    }

    FeaturePyramid<T> extract_features(const Tensor<T>& image01) const {
        auto taps = features(constant(image01));
        FeaturePyramid<T> p;
        for (const auto& t : taps) p.maps.push_back(t.val());
        p.provenance = hash_;
        p.validate();
        return p;
    }

    // per-tap globally pooled vectors; the multi-scale embedding set
    std::vector<Var<T>> pooled_embeddings(const Var<T>& image01) const {
        std::vector<Var<T>> out;
        for (const auto& t : features(image01)) out.push_back(spatial_mean(t));
        return out;
    }

    // last-stage pooled vector; the identity embedding used for FID
    Var<T> final_embedding(const Var<T>& image01) const {
        auto stage_outs = run(image01);
        return spatial_mean(stage_outs.back());
    }

    Tensor<T> final_embedding_value(const Tensor<T>& image01) const {
        return final_embedding(constant(image01)).val();
    }

    int embedding_dim() const { return spec_.stages.back().first; }
    const BackboneSpec& spec() const { return spec_; }
    const std::string& provenance_hash() const { return hash_; }
    uint64_t weights_fingerprint() const { return weights_.fingerprint(); }

private:
    static std::string stage_name(size_t i) { return "stage" + std::to_string(i); }

    std::vector<Var<T>> run(const Var<T>& image01) const {
        const auto& shape = image01.val().shape();
        if (shape.size() != 3 || shape[0] != 3)
            throw ShapeError("backbone expects a {3,H,W} raster, got " + shape_str(shape));
        int min_side = std::min(shape[1], shape[2]);
        if (min_side < spec_.min_input_side())
            throw ShapeError("backbone input " + shape_str(shape) + " smaller than stride product " +
                             std::to_string(spec_.min_input_side()));
        double slope = BackboneSpec::parse_nonlinearity(spec_.nonlinearity);

        // map [0,1] to [-1,1] for zero-centered inputs
        Var<T> x = add_scalar(mul_scalar(image01, T(2)), T(-1));
        std::vector<Var<T>> outs;
        for (size_t i = 0; i < spec_.stages.size(); ++i) {
            auto [ch, st] = spec_.stages[i];
            x = conv2d(x, constant(weights_.at(stage_name(i) + ".weight")), st, 1);
            x = add_channel_bias(x, constant(weights_.at(stage_name(i) + ".bias")));
            x = lrelu(x, T(slope));
            outs.push_back(x);
        }
        return outs;
    }

    void finish_hash() {
        // float32 view makes the hash identical across scalar instantiations
        auto f32 = weights_.template cast_to<float>();
        Sha256 h;
        std::string spec_str = spec_.to_json().dump();
        h.update(spec_str.data(), spec_str.size());
        for (const auto& name : f32.names()) {
            const auto& t = f32.at(name);
            h.update(t.data(), static_cast<size_t>(t.numel()) * 4);
        }
        hash_ = h.hex_digest();
    }

    BackboneSpec spec_;
    ParamDict<T> weights_;
    std::string hash_;
};

}  // namespace avk
