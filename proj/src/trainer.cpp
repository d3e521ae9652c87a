#include "avatarkit/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <thread>

#include "avatarkit/checkpoint.hpp"
#include "avatarkit/errors.hpp"

namespace avk {

using nlohmann::json;

void TrainConfig::validate() const {
    if (steps < 1) throw ValueError("trainer steps must be >= 1");
    if (batch_size < 1) throw ValueError("trainer batch_size must be >= 1");
    if (!(lr_g >= 0) || !(lr_d >= 0)) throw ValueError("learning rates must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
        throw ValueError("adam moment coefficients must be in [0,1)");
    if (!(r1_gamma >= 0)) throw ValueError("r1_gamma must be >= 0");
    if (checkpoint_every < 1) throw ValueError("checkpoint_every must be >= 1");
    if (num_threads < 0) throw ValueError("num_threads must be >= 0");
    weights.validate();
    gen.validate();
    mrf.validate();
    backbone.validate();
}

json TrainConfig::to_json() const {
    json j;
    j["steps"] = steps;
    j["batch_size"] = batch_size;
    j["lr_g"] = lr_g;
    j["lr_d"] = lr_d;
    j["beta1"] = beta1;
    j["beta2"] = beta2;
    j["adam_eps"] = adam_eps;
    j["seed"] = seed;
    j["use_mrf"] = use_mrf;
    j["use_cos"] = use_cos;
    j["deterministic"] = deterministic;
    j["r1_gamma"] = r1_gamma;
    j["checkpoint_every"] = checkpoint_every;
    j["num_threads"] = num_threads;
    j["resume"] = resume;
    j["weights"] = {{"lambda_mask", weights.lambda_mask}, {"lambda_mrf", weights.lambda_mrf},
                    {"lambda_l1", weights.lambda_l1},     {"lambda_cos", weights.lambda_cos},
                    {"lambda_d", weights.lambda_d},       {"lambda_g", weights.lambda_g}};
    j["gen"] = gen.to_json();
    j["mrf"] = {{"bandwidth", mrf.bandwidth},
                {"epsilon", mrf.epsilon},
                {"patch_size", mrf.patch_size},
                {"layer_weights", mrf.layer_weights}};
    j["backbone"] = backbone.to_json();
    return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
    TrainConfig c;
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr_g = j.value("lr_g", c.lr_g);
    c.lr_d = j.value("lr_d", c.lr_d);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.seed = j.value("seed", c.seed);
    c.use_mrf = j.value("use_mrf", c.use_mrf);
    c.use_cos = j.value("use_cos", c.use_cos);
    c.deterministic = j.value("deterministic", c.deterministic);
    c.r1_gamma = j.value("r1_gamma", c.r1_gamma);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.num_threads = j.value("num_threads", c.num_threads);
    c.resume = j.value("resume", c.resume);
    if (j.contains("weights")) {
        const auto& w = j["weights"];
        c.weights.lambda_mask = w.value("lambda_mask", c.weights.lambda_mask);
        c.weights.lambda_mrf = w.value("lambda_mrf", c.weights.lambda_mrf);
        c.weights.lambda_l1 = w.value("lambda_l1", c.weights.lambda_l1);
        c.weights.lambda_cos = w.value("lambda_cos", c.weights.lambda_cos);
        c.weights.lambda_d = w.value("lambda_d", c.weights.lambda_d);
        c.weights.lambda_g = w.value("lambda_g", c.weights.lambda_g);
    }
    if (j.contains("gen")) c.gen = GenConfig::from_json(j["gen"]);
    if (j.contains("mrf")) {
        const auto& m = j["mrf"];
        c.mrf.bandwidth = m.value("bandwidth", c.mrf.bandwidth);
        c.mrf.epsilon = m.value("epsilon", c.mrf.epsilon);
        c.mrf.patch_size = m.value("patch_size", c.mrf.patch_size);
        if (m.contains("layer_weights"))
            c.mrf.layer_weights = m["layer_weights"].get<std::vector<double>>();
    }
    if (j.contains("backbone")) c.backbone = BackboneSpec::from_json(j["backbone"]);
    c.validate();
    return c;
}

json StepRecord::to_json() const {
    json j;
    j["step"] = step;
    j["mask"] = loss.mask;
    j["mrf"] = loss.mrf;
    j["l1"] = loss.l1;
    j["cos"] = loss.cos;
    j["g"] = loss.g;
    j["d"] = loss.d;
    j["total"] = loss.total;
    j["generator_total"] = generator_total;
    j["discriminator_total"] = discriminator_total;
    j["wall_ms"] = wall_ms;
    return j;
}

bool TrainState::is_generator_param(const std::string& name) {
    return name.rfind("face.", 0) == 0 || name.rfind("background.", 0) == 0 ||
           name.rfind("avatar.", 0) == 0 || name.rfind("latent.", 0) == 0;
}

bool TrainState::is_discriminator_param(const std::string& name) {
    return name.rfind("disc.", 0) == 0;
}

TrainState::TrainState(TrainConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    pipe_ = std::make_unique<AvatarPipeline<float>>(cfg_.gen);
    disc_ = std::make_unique<Discriminator<float>>(cfg_.gen.resolution, cfg_.gen.base_channels,
                                                   cfg_.gen.channel_cap);
    backbone_ = std::make_unique<Backbone<float>>(Backbone<float>::build_surrogate(cfg_.backbone));
}

TrainState TrainState::initialize(const TrainConfig& cfg) {
    TrainState s(cfg);
    s.pipe_->register_params(s.params_, cfg.seed);
    s.disc_->register_params(s.params_, cfg.seed);
    for (const auto& name : s.params_.names()) {
        if (is_generator_param(name)) s.gen_names_.push_back(name);
        if (is_discriminator_param(name)) s.disc_names_.push_back(name);
    }
    // adam moments, zero-initialized, serialized with everything else
    std::vector<std::string> trainable = s.gen_names_;
    trainable.insert(trainable.end(), s.disc_names_.begin(), s.disc_names_.end());
    for (const auto& name : trainable) {
        s.params_.create("adam.m." + name, s.params_.at(name).shape());
        s.params_.create("adam.v." + name, s.params_.at(name).shape());
    }
    return s;
}

TrainState TrainState::load_checkpoint(const std::filesystem::path& path) {
    BlobArchive a = read_blob_archive(path);
    if (!a.meta.contains("kind") || a.meta["kind"] != "checkpoint")
        throw FormatError("archive is not a training checkpoint: " + path.string());
    TrainConfig cfg = TrainConfig::from_json(a.meta.at("config"));
    TrainState s = initialize(cfg);
    s.step_ = a.meta.at("step").get<int>();
    // every expected blob must exist with the same shape, nothing extra
    if (a.blobs.size() != s.params_.size())
        throw FormatError("checkpoint blob count mismatch in " + path.string());
    for (const auto& name : s.params_.names()) {
        if (!a.blobs.contains(name))
            throw FormatError("checkpoint is missing blob " + name);
        if (a.blobs.at(name).shape() != s.params_.at(name).shape())
            throw FormatError("checkpoint blob " + name + " has shape " +
                              shape_str(a.blobs.at(name).shape()) + ", expected " +
                              shape_str(s.params_.at(name).shape()));
        s.params_.at(name) = a.blobs.at(name);
    }
    return s;
}

TrainState TrainState::load_checkpoint(const std::filesystem::path& path,
                                       const TrainConfig& expected) {
    BlobArchive a = read_blob_archive(path);
    if (!a.meta.contains("kind") || a.meta["kind"] != "checkpoint")
        throw FormatError("archive is not a training checkpoint: " + path.string());
    TrainConfig cfg = TrainConfig::from_json(a.meta.at("config"));
    if (cfg.gen.to_json() != expected.gen.to_json())
        throw FormatError("checkpoint generator config does not match the requested config");
    return load_checkpoint(path);
}

void TrainState::save_checkpoint(const std::filesystem::path& path) const {
    json meta;
    meta["kind"] = "checkpoint";
    meta["config"] = cfg_.to_json();
    meta["step"] = step_;
    write_blob_archive(path, meta, params_);
}

std::string TrainState::content_hash() const {
    Sha256 h;
    for (const auto& name : params_.names()) {
        const auto& t = params_.at(name);
        h.update(t.data(), static_cast<size_t>(t.numel()) * 4);
    }
    return h.hex_digest();
}

uint64_t TrainState::generator_fingerprint() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& name : gen_names_) {
        const auto& t = params_.at(name);
        h = fnv1a_bytes(t.data(), static_cast<size_t>(t.numel()) * 4, h);
    }
    return h;
}

uint64_t TrainState::discriminator_fingerprint() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& name : disc_names_) {
        const auto& t = params_.at(name);
        h = fnv1a_bytes(t.data(), static_cast<size_t>(t.numel()) * 4, h);
    }
    return h;
}

void TrainState::adam_update(const std::vector<std::string>& names,
                             const std::vector<Tensor<float>>& grads, double lr) {
    const double t = step_ + 1;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
    const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
    for (size_t k = 0; k < names.size(); ++k) {
        auto& p = params_.at(names[k]);
        auto& m = params_.at("adam.m." + names[k]);
        auto& v = params_.at("adam.v." + names[k]);
        const auto& g = grads[k];
        for (int64_t i = 0; i < p.numel(); ++i) {
            m[i] = b1 * m[i] + (1.0f - b1) * g[i];
            v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
            float mhat = static_cast<float>(m[i] / bc1);
            float vhat = static_cast<float>(v[i] / bc2);
            p[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + cfg_.adam_eps));
        }
    }
}

namespace {

// strided parallel-for over batch samples; exceptions propagate
void parallel_samples(int n, int threads, const std::function<void(int)>& fn) {
    threads = std::max(1, std::min(threads, n));
    if (threads == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::exception_ptr err;
    std::mutex err_mu;
    auto run = [&](int w) {
        for (int i = w; i < n; i += threads) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mu);
                if (!err) err = std::current_exception();
                return;
            }
        }
    };
    for (int w = 1; w < threads; ++w) pool.emplace_back(run, w);
    run(0);
    for (auto& t : pool) t.join();
    if (err) std::rethrow_exception(err);
}

Tensor<float> to_model_range_tensor(const Tensor<float>& img01) {
    return map1(img01, [](float v) { return 2.0f * v - 1.0f; });
}

}  // namespace

StepRecord TrainState::step(const std::vector<const FrameSample*>& batch) {
    auto t0 = std::chrono::steady_clock::now();
    const int B = static_cast<int>(batch.size());
    if (B < 1) throw ValueError("empty batch");
    const int R = cfg_.gen.resolution;
    for (const auto* s : batch) {
        if (!s || s->real_image.empty() || s->background_mask.empty())
            throw IntegrityError("training requires complete frame samples");
        if (s->real_image.dim(1) != R || s->real_image.dim(2) != R)
            throw ShapeError("batch raster resolution does not match the generator config");
    }
    const uint64_t step_key = static_cast<uint64_t>(step_);
    const int threads = cfg_.num_threads == 0
                            ? static_cast<int>(std::thread::hardware_concurrency())
                            : cfg_.num_threads;

    // ---- phase A: per-sample synthesis graphs (generator leaves shared) ----
    LeafMap<float> gen_leaves;
    for (const auto& name : params_.names())
        if (is_generator_param(name)) gen_leaves.emplace(name, make_leaf(params_.at(name), true));
    for (const auto& name : params_.names())
        if (name.rfind("noise.", 0) == 0) gen_leaves.emplace(name, make_leaf(params_.at(name), false));

    std::vector<AvatarPipeline<float>::ForwardResult> fakes(static_cast<size_t>(B));
    parallel_samples(B, threads, [&](int i) {
        const FrameSample& s = *batch[static_cast<size_t>(i)];
        auto nf = pipe_->fresh_noise(cfg_.seed, step_key, static_cast<uint64_t>(i), "face");
        auto nb = pipe_->fresh_noise(cfg_.seed, step_key, static_cast<uint64_t>(i), "background");
        auto na = pipe_->fresh_noise(cfg_.seed, step_key, static_cast<uint64_t>(i), "avatar");
        fakes[static_cast<size_t>(i)] =
            pipe_->forward(gen_leaves, s.render_image, s.uv_image, nf, nb, na);
    });

    // ---- phase B: discriminator update on real vs detached fakes (+R1) ----
    LeafMap<float> disc_leaves;
    for (const auto& name : disc_names_) disc_leaves.emplace(name, make_leaf(params_.at(name), true));
    std::vector<Var<float>> disc_wrt;
    for (const auto& name : disc_names_) disc_wrt.push_back(disc_leaves.at(name));

    std::vector<std::vector<Tensor<float>>> dgrads(static_cast<size_t>(B));
    std::vector<double> d_losses(static_cast<size_t>(B));
    parallel_samples(B, threads, [&](int i) {
        const FrameSample& s = *batch[static_cast<size_t>(i)];
        Tensor<float> real_m = to_model_range_tensor(s.real_image);
        Var<float> x = make_leaf(real_m, true);
        Var<float> real_logit = disc_->forward(disc_leaves, x);
        Var<float> r1 = cfg_.r1_gamma > 0
                            ? [&] {
                                  Var<float> gx = grad(real_logit, {x})[0];
                                  return sum_all(mul(gx, gx));
                              }()
                            : constant<float>(0.0f);
        Var<float> fake_logit =
            disc_->forward(disc_leaves, detach(fakes[static_cast<size_t>(i)].out.avatar_internal));
        Var<float> dl = loss_d(real_logit, fake_logit, r1, cfg_.r1_gamma);
        d_losses[static_cast<size_t>(i)] = dl.item();
        auto gs = grad(dl, disc_wrt);
        auto& store = dgrads[static_cast<size_t>(i)];
        store.reserve(gs.size());
        for (auto& g : gs) store.push_back(g.val());
    });

    double d_mean = 0;
    for (double v : d_losses) d_mean += v;
    d_mean /= B;

    // ordered reduction over samples keeps the result thread-count independent
    std::vector<Tensor<float>> dacc;
    for (size_t k = 0; k < disc_names_.size(); ++k) {
        Tensor<float> acc(params_.at(disc_names_[k]).shape());
        for (int i = 0; i < B; ++i) {
            const auto& g = dgrads[static_cast<size_t>(i)][k];
            for (int64_t j = 0; j < acc.numel(); ++j) acc[j] += g[j];
        }
        for (int64_t j = 0; j < acc.numel(); ++j) acc[j] /= static_cast<float>(B);
        dacc.push_back(std::move(acc));
    }
    if (!std::isfinite(d_mean)) throw TrainError("non-finite loss term: d at step " +
                                                 std::to_string(step_ + 1));
    adam_update(disc_names_, dacc, cfg_.lr_d);

    // ---- phase C: generator update through the updated discriminator ----
    LeafMap<float> disc_frozen;
    for (const auto& name : disc_names_)
        disc_frozen.emplace(name, make_leaf(params_.at(name), false));
    std::vector<std::string> gen_order = gen_names_;
    std::vector<Var<float>> gen_wrt;
    for (const auto& name : gen_order) gen_wrt.push_back(gen_leaves.at(name));

    std::vector<std::vector<Tensor<float>>> ggrads(static_cast<size_t>(B));
    std::vector<LossBreakdown> parts(static_cast<size_t>(B));
    parallel_samples(B, threads, [&](int i) {
        const FrameSample& s = *batch[static_cast<size_t>(i)];
        const auto& fwd = fakes[static_cast<size_t>(i)];
        Var<float> back01 = constant(s.background_mask);
        Var<float> real01 = constant(s.real_image);

        Var<float> lmask = loss_mask(fwd.out.mask, back01);
        Var<float> ll1 = loss_l1(fwd.out.avatar, real01);
        Var<float> fake_logit = disc_->forward(disc_frozen, fwd.out.avatar_internal);
        Var<float> lg = loss_g(fake_logit);

        Var<float> total = add(add(mul_scalar(lmask, static_cast<float>(cfg_.weights.lambda_mask)),
                                   mul_scalar(ll1, static_cast<float>(cfg_.weights.lambda_l1))),
                               mul_scalar(lg, static_cast<float>(cfg_.weights.lambda_g)));

        LossBreakdown& b = parts[static_cast<size_t>(i)];
        b.mask = lmask.item();
        b.l1 = ll1.item();
        b.g = lg.item();

        if (cfg_.use_mrf) {
            Var<float> mask3 = concat_channels<float>({fwd.out.mask, fwd.out.mask, fwd.out.mask});
            Var<float> fake_fg = mul(fwd.out.avatar, mask3);
            Tensor<float> real_fg(s.real_image.shape());
            for (int c = 0; c < 3; ++c)
                for (int64_t j = 0; j < s.background_mask.numel(); ++j) {
                    int64_t off = c * s.background_mask.numel() + j;
                    real_fg[off] = s.real_image[off] * (1.0f - s.background_mask[j]);
                }
            Var<float> lmrf = loss_idmrf(fake_fg, constant(real_fg), *backbone_, cfg_.mrf);
            b.mrf = lmrf.item();
            total = add(total, mul_scalar(lmrf, static_cast<float>(cfg_.weights.lambda_mrf)));
        }
        if (cfg_.use_cos) {
            Var<float> lcos = loss_cos(fwd.out.avatar, real01, backbone_embedder(*backbone_));
            b.cos = lcos.item();
            total = add(total, mul_scalar(lcos, static_cast<float>(cfg_.weights.lambda_cos)));
        }

        auto gs = grad(total, gen_wrt);
        auto& store = ggrads[static_cast<size_t>(i)];
        store.reserve(gs.size());
        for (auto& g : gs) store.push_back(g.val());
    });

    LossBreakdown mean;
    for (int i = 0; i < B; ++i) {
        mean.mask += parts[static_cast<size_t>(i)].mask / B;
        mean.mrf += parts[static_cast<size_t>(i)].mrf / B;
        mean.l1 += parts[static_cast<size_t>(i)].l1 / B;
        mean.cos += parts[static_cast<size_t>(i)].cos / B;
        mean.g += parts[static_cast<size_t>(i)].g / B;
    }
    mean.d = d_mean;

    LossWeights effective = cfg_.weights;
    if (!cfg_.use_mrf) effective.lambda_mrf = 0;
    if (!cfg_.use_cos) effective.lambda_cos = 0;
    auto [gen_total, disc_total] = total_loss(mean, effective);
    mean.total = gen_total + disc_total;
    if (const char* term = mean.first_non_finite())
        throw TrainError("non-finite loss term: " + std::string(term) + " at step " +
                         std::to_string(step_ + 1));

    std::vector<Tensor<float>> gacc;
    for (size_t k = 0; k < gen_order.size(); ++k) {
        Tensor<float> acc(params_.at(gen_order[k]).shape());
        for (int i = 0; i < B; ++i) {
            const auto& g = ggrads[static_cast<size_t>(i)][k];
            for (int64_t j = 0; j < acc.numel(); ++j) acc[j] += g[j];
        }
        for (int64_t j = 0; j < acc.numel(); ++j) acc[j] /= static_cast<float>(B);
        gacc.push_back(std::move(acc));
    }
    adam_update(gen_order, gacc, cfg_.lr_g);

    ++step_;
    StepRecord rec;
    rec.step = step_;
    rec.loss = mean;
    rec.generator_total = gen_total;
    rec.discriminator_total = disc_total;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                      .count();
    return rec;
}

CheckpointManifest train(const Dataset& dataset, const TrainConfig& cfg,
                         const std::filesystem::path& out) {
    cfg.validate();
    if (dataset.frames.empty()) throw IntegrityError("training dataset has no frames");
    if (dataset.manifest.resolution != cfg.gen.resolution)
        throw ShapeError("dataset resolution " + std::to_string(dataset.manifest.resolution) +
                         " does not match generator resolution " +
                         std::to_string(cfg.gen.resolution));
    std::error_code ec;
    std::filesystem::create_directories(out, ec);

    TrainState state = cfg.resume.empty() ? TrainState::initialize(cfg)
                                          : TrainState::load_checkpoint(cfg.resume, cfg);

    std::ofstream log(out / "steplog.ndjson", std::ios::app);
    if (!log) throw IoError("cannot write step log in " + out.string());

    const int N = static_cast<int>(dataset.frames.size());
    char namebuf[64];
    while (state.current_step() < cfg.steps) {
        int t = state.current_step();
        std::vector<const FrameSample*> batch;
        for (int i = 0; i < cfg.batch_size; ++i)
            batch.push_back(&dataset.frames[static_cast<size_t>(
                (static_cast<int64_t>(t) * cfg.batch_size + i) % N)]);
        StepRecord rec = state.step(batch);
        log << rec.to_json().dump() << "\n";
        if (rec.step % cfg.checkpoint_every == 0 && rec.step != cfg.steps) {
            std::snprintf(namebuf, sizeof(namebuf), "checkpoint_%06d.avkarch", rec.step);
            state.save_checkpoint(out / namebuf);
        }
    }
    log.flush();

    auto final_path = out / "checkpoint_final.avkarch";
    state.save_checkpoint(final_path);

    CheckpointManifest m;
    m.config = cfg.to_json();
    m.step = state.current_step();
    m.content_hash = state.content_hash();
    m.path = final_path;
    return m;
}

std::vector<StepRecord> read_step_log(const std::filesystem::path& file) {
    std::ifstream f(file);
    if (!f) throw IoError("cannot read step log " + file.string());
    std::vector<StepRecord> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        StepRecord r;
        r.step = j.at("step").get<int>();
        r.loss.mask = j.at("mask").get<double>();
        r.loss.mrf = j.at("mrf").get<double>();
        r.loss.l1 = j.at("l1").get<double>();
        r.loss.cos = j.at("cos").get<double>();
        r.loss.g = j.at("g").get<double>();
        r.loss.d = j.at("d").get<double>();
        r.loss.total = j.at("total").get<double>();
        r.generator_total = j.at("generator_total").get<double>();
        r.discriminator_total = j.at("discriminator_total").get<double>();
        r.wall_ms = j.at("wall_ms").get<double>();
        out.push_back(r);
    }
    return out;
}

}  // namespace avk
