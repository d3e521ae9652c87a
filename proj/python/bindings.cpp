#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "avatarkit/adversary.hpp"
#include "avatarkit/config.hpp"
#include "avatarkit/dataio.hpp"
#include "avatarkit/detail_loss.hpp"
#include "avatarkit/metrics.hpp"
#include "avatarkit/reenactor.hpp"
#include "avatarkit/trainer.hpp"

namespace py = pybind11;
using namespace avk;

namespace {

using Arr = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor<double> tensor_from(const Arr& a) {
    Shape shape;
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape.push_back(static_cast<int>(a.shape(i)));
    Tensor<double> t(shape);
    std::copy_n(a.data(), t.numel(), t.data());
    return t;
}

py::array_t<double> array_from(const Tensor<double>& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<double> out(shape);
    std::copy_n(t.data(), t.numel(), out.mutable_data());
    return out;
}

py::array_t<float> array_from_f(const Tensor<float>& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<float> out(shape);
    std::copy_n(t.data(), t.numel(), out.mutable_data());
    return out;
}

py::dict manifest_dict(const DatasetManifest& m) {
    py::dict d;
    d["resolution"] = m.resolution;
    d["frame_count"] = m.frame_count;
    d["fps"] = m.fps;
    d["identity_tag"] = m.identity_tag;
    if (m.seed) d["seed"] = *m.seed;
    return d;
}

py::dict json_to_dict(const nlohmann::json& j) {
    py::module_ jsonmod = py::module_::import("json");
    return jsonmod.attr("loads")(j.dump());
}

IdMrfConfig mrf_config(double bandwidth, double epsilon, int patch_size,
                       const std::vector<double>& layer_weights) {
    IdMrfConfig cfg;
    cfg.bandwidth = bandwidth;
    cfg.epsilon = epsilon;
    cfg.patch_size = patch_size;
    cfg.layer_weights = layer_weights;
    cfg.validate();
    return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "head avatar reenactment pipeline (C++ core)";

    py::register_exception<UsageError>(m, "UsageError");
    py::register_exception<Error>(m, "AvatarkitError");

    py::class_<Backbone<double>>(m, "Backbone")
        .def_static(
            "surrogate",
            [](uint64_t seed, std::vector<std::pair<int, int>> stages, std::vector<int> taps) {
                BackboneSpec spec;
                spec.seed = seed;
                if (!stages.empty()) spec.stages = std::move(stages);
                if (!taps.empty()) spec.tap_layers = std::move(taps);
                return Backbone<double>::build_surrogate(spec);
            },
            py::arg("seed") = 77, py::arg("stages") = std::vector<std::pair<int, int>>{},
            py::arg("tap_layers") = std::vector<int>{})
        .def_static("load", [](const std::string& p) { return Backbone<double>::load(p); })
        .def("save", [](const Backbone<double>& b, const std::string& p) { b.save(p); })
        .def("extract_features",
             [](const Backbone<double>& b, const Arr& img) {
                 auto pyr = b.extract_features(tensor_from(img));
                 py::list out;
                 for (const auto& f : pyr.maps) out.append(array_from(f));
                 return out;
             })
        .def("final_embedding",
             [](const Backbone<double>& b, const Arr& img) {
                 return array_from(b.final_embedding_value(tensor_from(img)));
             })
        .def_property_readonly("provenance_hash",
                               [](const Backbone<double>& b) { return b.provenance_hash(); })
        .def_property_readonly("embedding_dim",
                               [](const Backbone<double>& b) { return b.embedding_dim(); });

    m.def(
        "synthesize_dataset",
        [](const std::string& out, int64_t seed, int resolution, int frame_count,
           double motion_amplitude, double texture_frequency) {
            SynthConfig cfg;
            cfg.seed = seed;
            cfg.resolution = resolution;
            cfg.frame_count = frame_count;
            cfg.motion_amplitude = motion_amplitude;
            cfg.texture_frequency = texture_frequency;
            return manifest_dict(synthesize_dataset(cfg, out));
        },
        py::arg("out"), py::arg("seed") = 1, py::arg("resolution") = 64,
        py::arg("frame_count") = 8, py::arg("motion_amplitude") = 0.5,
        py::arg("texture_frequency") = 6.0);

    m.def(
        "load_dataset",
        [](const std::string& dir, bool require_real, bool require_mask) {
            LoadOptions opts;
            opts.require_real = require_real;
            opts.require_mask = require_mask;
            Dataset ds = load_dataset(dir, opts);
            py::list frames;
            for (const auto& f : ds.frames) {
                py::dict fd;
                fd["frame_id"] = f.frame_id;
                if (!f.real_image.empty()) fd["real"] = array_from_f(f.real_image);
                fd["render"] = array_from_f(f.render_image);
                fd["uv"] = array_from_f(f.uv_image);
                if (!f.background_mask.empty()) fd["mask"] = array_from_f(f.background_mask);
                frames.append(fd);
            }
            return py::make_tuple(manifest_dict(ds.manifest), frames);
        },
        py::arg("dir"), py::arg("require_real") = true, py::arg("require_mask") = true);

    m.def("validate_sample", [](const Arr& real, const Arr& render, const Arr& uv,
                                const Arr& mask) {
        FrameSample s;
        s.real_image = cast<float>(tensor_from(real));
        s.render_image = cast<float>(tensor_from(render));
        s.uv_image = cast<float>(tensor_from(uv));
        s.background_mask = cast<float>(tensor_from(mask));
        return validate_sample(s);
    });

    m.def("loss_mask", [](const Arr& fm, const Arr& back) {
        return loss_mask_value(tensor_from(fm), tensor_from(back));
    });
    m.def("loss_l1",
          [](const Arr& a, const Arr& b) { return loss_l1_value(tensor_from(a), tensor_from(b)); });
    m.def(
        "loss_idmrf",
        [](const Arr& fake_fg, const Arr& real_fg, const Backbone<double>& bb, double bandwidth,
           double epsilon, int patch_size, const std::vector<double>& layer_weights) {
            return loss_idmrf_value(tensor_from(fake_fg), tensor_from(real_fg), bb,
                                    mrf_config(bandwidth, epsilon, patch_size, layer_weights));
        },
        py::arg("fake_fg"), py::arg("real_fg"), py::arg("backbone"), py::arg("bandwidth") = 0.5,
        py::arg("epsilon") = 1e-5, py::arg("patch_size") = 1,
        py::arg("layer_weights") = std::vector<double>{});
    m.def("loss_cos", [](const Arr& a, const Arr& b, const Backbone<double>& bb) {
        return loss_cos_value(tensor_from(a), tensor_from(b), bb);
    });
    m.def(
        "loss_g", [](const Arr& logits) { return loss_g_value(tensor_from(logits)); },
        py::arg("fake_logits"));
    m.def(
        "loss_d",
        [](const Arr& real, const Arr& fake, double r1, double gamma) {
            return loss_d_value(tensor_from(real), tensor_from(fake), r1, gamma);
        },
        py::arg("real_logits"), py::arg("fake_logits"), py::arg("r1_penalty") = 0.0,
        py::arg("gamma") = 1.0);

    m.def(
        "total_loss",
        [](const py::dict& breakdown, const py::dict& weights) {
            LossBreakdown b;
            b.mask = breakdown.contains("mask") ? breakdown["mask"].cast<double>() : 0.0;
            b.mrf = breakdown.contains("mrf") ? breakdown["mrf"].cast<double>() : 0.0;
            b.l1 = breakdown.contains("l1") ? breakdown["l1"].cast<double>() : 0.0;
            b.cos = breakdown.contains("cos") ? breakdown["cos"].cast<double>() : 0.0;
            b.g = breakdown.contains("g") ? breakdown["g"].cast<double>() : 0.0;
            b.d = breakdown.contains("d") ? breakdown["d"].cast<double>() : 0.0;
            LossWeights w;
            if (weights.contains("lambda_mask")) w.lambda_mask = weights["lambda_mask"].cast<double>();
            if (weights.contains("lambda_mrf")) w.lambda_mrf = weights["lambda_mrf"].cast<double>();
            if (weights.contains("lambda_l1")) w.lambda_l1 = weights["lambda_l1"].cast<double>();
            if (weights.contains("lambda_cos")) w.lambda_cos = weights["lambda_cos"].cast<double>();
            if (weights.contains("lambda_d")) w.lambda_d = weights["lambda_d"].cast<double>();
            if (weights.contains("lambda_g")) w.lambda_g = weights["lambda_g"].cast<double>();
            auto [g, d] = total_loss(b, w);
            return py::make_tuple(g, d);
        },
        py::arg("breakdown"), py::arg("weights") = py::dict());

    m.def("psnr", [](const Arr& a, const Arr& b) { return psnr(tensor_from(a), tensor_from(b)); });
    m.def("ssim", [](const Arr& a, const Arr& b) { return ssim(tensor_from(a), tensor_from(b)); });
    m.def("perceptual_distance", [](const Arr& a, const Arr& b, const Backbone<double>& bb) {
        return perceptual_distance(tensor_from(a), tensor_from(b), bb);
    });
    m.def("frechet_distance", [](const Arr& mu1, const Arr& cov1, const Arr& mu2, const Arr& cov2) {
        GaussianStats s1{tensor_from(mu1), tensor_from(cov1)};
        GaussianStats s2{tensor_from(mu2), tensor_from(cov2)};
        return frechet_distance(s1, s2);
    });
    m.def("fit_gaussian", [](const std::vector<Arr>& embeddings) {
        std::vector<Tensor<double>> vs;
        for (const auto& e : embeddings) vs.push_back(tensor_from(e));
        auto s = fit_gaussian(vs);
        return py::make_tuple(array_from(s.mean), array_from(s.covariance));
    });
    m.def("evaluate_dirs",
          [](const std::string& pred, const std::string& ref, const Backbone<double>& bb) {
              return json_to_dict(evaluate_dirs(pred, ref, bb).to_json());
          });

    m.def(
        "train_json",
        [](const std::string& config_json, const std::string& dataset_dir,
           const std::string& out) {
            TrainConfig cfg = TrainConfig::from_json(nlohmann::json::parse(config_json));
            Dataset ds = load_dataset(dataset_dir);
            auto manifest = train(ds, cfg, out);
            py::dict d;
            d["step"] = manifest.step;
            d["content_hash"] = manifest.content_hash;
            d["checkpoint"] = manifest.path.string();
            return d;
        },
        py::arg("config_json"), py::arg("dataset"), py::arg("out"));

    m.def(
        "reenact",
        [](const std::string& checkpoint, const std::string& driving, const std::string& out,
           const std::string& mode) {
            ReenactOptions opts;
            opts.mode = mode;
            return json_to_dict(reenact(checkpoint, driving, opts, out).to_json());
        },
        py::arg("checkpoint"), py::arg("driving"), py::arg("out"), py::arg("mode") = "self");

    m.def("default_train_config", [] { return json_to_dict(TrainConfig().to_json()); });
}
