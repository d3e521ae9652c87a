#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "avatarkit/adversary.hpp"
#include "avatarkit/backbones.hpp"
#include "avatarkit/dataio.hpp"
#include "avatarkit/detail_loss.hpp"
#include "avatarkit/generators.hpp"
#include "json.hpp"

namespace avk {

struct TrainConfig {
    int steps = 2000;
    int batch_size = 4;
    double lr_g = 2e-3;
    double lr_d = 2e-3;
    double beta1 = 0.0;
    double beta2 = 0.99;
    double adam_eps = 1e-8;
    uint64_t seed = 1;
    bool use_mrf = true;
    bool use_cos = true;
    bool deterministic = true;
    double r1_gamma = 1.0;
    int checkpoint_every = 500;
    int num_threads = 2;
    LossWeights weights;
    GenConfig gen;
    IdMrfConfig mrf;
    BackboneSpec backbone;
    std::string resume;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

struct StepRecord {
    int step = 0;  // 1-based
    LossBreakdown loss;
    double generator_total = 0;
    double discriminator_total = 0;
    double wall_ms = 0;

    nlohmann::json to_json() const;
};

struct CheckpointManifest {
    nlohmann::json config;
    int step = 0;
    std::string content_hash;
    std::filesystem::path path;
};

// Owns all mutable training state: network parameters, latents, stored
// inference noise, and Adam moments. One logical thread drives step();
// batch samples fan out to workers and reduce in sample order, so results
// do not depend on the thread count.
class TrainState {
public:
    static TrainState initialize(const TrainConfig& cfg);
    static TrainState load_checkpoint(const std::filesystem::path& path);
    // as above, but requires the archived generator config to match
    static TrainState load_checkpoint(const std::filesystem::path& path,
                                      const TrainConfig& expected);

    void save_checkpoint(const std::filesystem::path& path) const;

    StepRecord step(const std::vector<const FrameSample*>& batch);

    int current_step() const { return step_; }
    const TrainConfig& config() const { return cfg_; }
    const ParamDict<float>& params() const { return params_; }
    const Backbone<float>& backbone() const { return *backbone_; }
    const AvatarPipeline<float>& pipeline() const { return *pipe_; }

    std::string content_hash() const;  // sha256 over all blobs in order
    uint64_t generator_fingerprint() const;
    uint64_t discriminator_fingerprint() const;
    uint64_t backbone_fingerprint() const { return backbone_->weights_fingerprint(); }

    static bool is_generator_param(const std::string& name);
    static bool is_discriminator_param(const std::string& name);

private:
    TrainState(TrainConfig cfg);

    void adam_update(const std::vector<std::string>& names,
                     const std::vector<Tensor<float>>& grads, double lr);

    TrainConfig cfg_;
    std::unique_ptr<AvatarPipeline<float>> pipe_;
    std::unique_ptr<Discriminator<float>> disc_;
    std::unique_ptr<Backbone<float>> backbone_;
    ParamDict<float> params_;
    std::vector<std::string> gen_names_;
    std::vector<std::string> disc_names_;
    int step_ = 0;
};

// Runs cfg.steps optimization steps over the dataset (cycling frames),
// writing periodic checkpoints and an ndjson step log into `out`.
CheckpointManifest train(const Dataset& dataset, const TrainConfig& cfg,
                         const std::filesystem::path& out);

std::vector<StepRecord> read_step_log(const std::filesystem::path& file);

}  // namespace avk
