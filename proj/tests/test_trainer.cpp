#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "avatarkit/trainer.hpp"

using namespace avk;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config() {
    TrainConfig c;
    c.steps = 2;
    c.batch_size = 2;
    c.seed = 5;
    c.gen.resolution = 32;
    c.gen.latent_dim = 8;
    c.gen.base_channels = 8;
    c.gen.channel_cap = 32;
    c.backbone.seed = 7;
    c.backbone.stages = {{8, 2}, {12, 2}};
    c.backbone.tap_layers = {0, 1};
    c.checkpoint_every = 1;
    c.num_threads = 2;
    return c;
}

const Dataset& tiny_dataset() {
    static Dataset ds = [] {
        auto dir = fs::temp_directory_path() / "avk_trainer_ds";
        fs::remove_all(dir);
        SynthConfig s;
        s.seed = 11;
        s.resolution = 32;
        s.frame_count = 6;
        synthesize_dataset(s, dir);
        return load_dataset(dir);
    }();
    return ds;
}

std::vector<const FrameSample*> batch_of(const Dataset& ds, int n) {
    std::vector<const FrameSample*> out;
    for (int i = 0; i < n; ++i) out.push_back(&ds.frames[static_cast<size_t>(i) % ds.frames.size()]);
    return out;
}

}  // namespace

TEST_CASE("config invariants") {
    TrainConfig c = tiny_config();
    c.steps = 0;
    CHECK_THROWS_AS(c.validate(), ValueError);
    c = tiny_config();
    c.lr_g = -1;
    CHECK_THROWS_AS(c.validate(), ValueError);
    c = tiny_config();
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), ValueError);
}

TEST_CASE("one step trains both partitions and leaves the backbone frozen") {
    auto cfg = tiny_config();
    auto state = TrainState::initialize(cfg);
    auto g0 = state.generator_fingerprint();
    auto d0 = state.discriminator_fingerprint();
    auto b0 = state.backbone_fingerprint();

    auto rec = state.step(batch_of(tiny_dataset(), cfg.batch_size));
    CHECK(rec.step == 1);
    CHECK(rec.loss.all_finite());
    CHECK(state.generator_fingerprint() != g0);
    CHECK(state.discriminator_fingerprint() != d0);
    CHECK(state.backbone_fingerprint() == b0);

    // reported total equals the weighted recombination of its parts
    auto [gt, dt] = total_loss(rec.loss, cfg.weights);
    CHECK(rec.loss.total == doctest::Approx(gt + dt).epsilon(1e-6));
    CHECK(rec.generator_total == doctest::Approx(gt).epsilon(1e-9));
}

TEST_CASE("zero learning rates leave parameters unchanged, losses still reported") {
    auto cfg = tiny_config();
    cfg.lr_g = 0.0;
    cfg.lr_d = 0.0;
    auto state = TrainState::initialize(cfg);
    auto g0 = state.generator_fingerprint();
    auto d0 = state.discriminator_fingerprint();
    auto rec = state.step(batch_of(tiny_dataset(), cfg.batch_size));
    CHECK(rec.loss.all_finite());
    CHECK(rec.loss.total > 0.0);
    CHECK(state.generator_fingerprint() == g0);
    CHECK(state.discriminator_fingerprint() == d0);
}

TEST_CASE("one-sided updates never touch the other partition") {
    auto cfg = tiny_config();
    cfg.lr_g = 0.0;  // only the discriminator moves
    auto state = TrainState::initialize(cfg);
    auto g0 = state.generator_fingerprint();
    auto d0 = state.discriminator_fingerprint();
    state.step(batch_of(tiny_dataset(), cfg.batch_size));
    CHECK(state.generator_fingerprint() == g0);
    CHECK(state.discriminator_fingerprint() != d0);

    auto cfg2 = tiny_config();
    cfg2.lr_d = 0.0;  // only the generator moves
    auto state2 = TrainState::initialize(cfg2);
    auto g2 = state2.generator_fingerprint();
    auto d2 = state2.discriminator_fingerprint();
    state2.step(batch_of(tiny_dataset(), cfg2.batch_size));
    CHECK(state2.generator_fingerprint() != g2);
    CHECK(state2.discriminator_fingerprint() == d2);
}

TEST_CASE("deterministic mode: identical runs produce identical state") {
    auto cfg = tiny_config();
    auto s1 = TrainState::initialize(cfg);
    auto s2 = TrainState::initialize(cfg);
    for (int i = 0; i < 2; ++i) {
        s1.step(batch_of(tiny_dataset(), cfg.batch_size));
        s2.step(batch_of(tiny_dataset(), cfg.batch_size));
    }
    CHECK(s1.content_hash() == s2.content_hash());

    // thread count must not matter: ordered reduction
    auto cfg1 = tiny_config();
    cfg1.num_threads = 1;
    auto s3 = TrainState::initialize(cfg1);
    for (int i = 0; i < 2; ++i) s3.step(batch_of(tiny_dataset(), cfg1.batch_size));
    CHECK(s3.content_hash() == s1.content_hash());
}

TEST_CASE("ablation flags zero the corresponding terms and exclude them from the total") {
    auto cfg = tiny_config();
    cfg.use_mrf = false;
    auto state = TrainState::initialize(cfg);
    auto rec = state.step(batch_of(tiny_dataset(), cfg.batch_size));
    CHECK(rec.loss.mrf == 0.0);
    double manual = cfg.weights.lambda_mask * rec.loss.mask + cfg.weights.lambda_l1 * rec.loss.l1 +
                    cfg.weights.lambda_cos * rec.loss.cos + cfg.weights.lambda_g * rec.loss.g;
    CHECK(rec.generator_total == doctest::Approx(manual).epsilon(1e-9));

    auto cfg2 = tiny_config();
    cfg2.use_cos = false;
    auto state2 = TrainState::initialize(cfg2);
    auto rec2 = state2.step(batch_of(tiny_dataset(), cfg2.batch_size));
    CHECK(rec2.loss.cos == 0.0);
}

TEST_CASE("checkpoint save/load round trip is exact") {
    auto dir = fs::temp_directory_path() / "avk_trainer_ckpt";
    fs::create_directories(dir);
    auto cfg = tiny_config();
    auto state = TrainState::initialize(cfg);
    state.step(batch_of(tiny_dataset(), cfg.batch_size));
    state.save_checkpoint(dir / "a.avkarch");
    auto loaded = TrainState::load_checkpoint(dir / "a.avkarch");
    CHECK(loaded.current_step() == 1);
    CHECK(loaded.content_hash() == state.content_hash());
    loaded.save_checkpoint(dir / "b.avkarch");
    // byte-identical archives
    auto slurp = [](const fs::path& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    };
    CHECK(slurp(dir / "a.avkarch") == slurp(dir / "b.avkarch"));
}

TEST_CASE("flipped byte in a checkpoint is a corruption error") {
    auto dir = fs::temp_directory_path() / "avk_trainer_ckpt";
    fs::create_directories(dir);
    auto cfg = tiny_config();
    auto state = TrainState::initialize(cfg);
    state.save_checkpoint(dir / "c.avkarch");
    auto bytes = [&] {
        std::ifstream f(dir / "c.avkarch", std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    }();
    bytes[bytes.size() - 5] = static_cast<char>(bytes[bytes.size() - 5] ^ 0x40);
    std::ofstream out(dir / "c_bad.avkarch", std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.close();
    CHECK_THROWS_AS(TrainState::load_checkpoint(dir / "c_bad.avkarch"), CorruptionError);
}

TEST_CASE("loading into a mismatched generator config is a format error") {
    auto dir = fs::temp_directory_path() / "avk_trainer_ckpt";
    fs::create_directories(dir);
    auto cfg = tiny_config();
    auto state = TrainState::initialize(cfg);
    state.save_checkpoint(dir / "d.avkarch");
    TrainConfig other = cfg;
    other.gen.base_channels = 16;
    CHECK_THROWS_AS(TrainState::load_checkpoint(dir / "d.avkarch", other), FormatError);
}

TEST_CASE("train() writes a step log, periodic checkpoints, and a final checkpoint") {
    auto dir = fs::temp_directory_path() / "avk_trainer_run";
    fs::remove_all(dir);
    auto cfg = tiny_config();
    cfg.steps = 3;
    cfg.checkpoint_every = 2;
    auto manifest = train(tiny_dataset(), cfg, dir);
    CHECK(manifest.step == 3);
    CHECK(fs::exists(dir / "checkpoint_000002.avkarch"));
    CHECK(fs::exists(dir / "checkpoint_final.avkarch"));
    auto records = read_step_log(dir / "steplog.ndjson");
    REQUIRE(records.size() == 3);
    for (const auto& r : records) {
        CHECK(r.loss.all_finite());
        auto [gt, dt] = total_loss(r.loss, cfg.weights);
        CHECK(r.loss.total == doctest::Approx(gt + dt).epsilon(1e-6));
    }

    // steps=1 produces exactly one checkpoint and one record
    auto dir1 = fs::temp_directory_path() / "avk_trainer_run1";
    fs::remove_all(dir1);
    auto cfg1 = tiny_config();
    cfg1.steps = 1;
    train(tiny_dataset(), cfg1, dir1);
    int ckpts = 0;
    for (auto& e : fs::directory_iterator(dir1))
        if (e.path().extension() == ".avkarch") ++ckpts;
    CHECK(ckpts == 1);
    CHECK(read_step_log(dir1 / "steplog.ndjson").size() == 1);
}

TEST_CASE("resume reproduces the uninterrupted run bit-exactly") {
    auto dir_a = fs::temp_directory_path() / "avk_resume_a";
    auto dir_b = fs::temp_directory_path() / "avk_resume_b";
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
    auto cfg = tiny_config();
    cfg.steps = 4;
    cfg.checkpoint_every = 2;
    auto full = train(tiny_dataset(), cfg, dir_a);

    auto cfg2 = cfg;
    cfg2.resume = (dir_a / "checkpoint_000002.avkarch").string();
    auto resumed = train(tiny_dataset(), cfg2, dir_b);
    CHECK(resumed.content_hash == full.content_hash);
}

TEST_CASE("dataset/generator resolution mismatch is rejected") {
    auto cfg = tiny_config();
    cfg.gen.resolution = 64;
    CHECK_THROWS_AS(train(tiny_dataset(), cfg, fs::temp_directory_path() / "avk_mismatch"),
                    ShapeError);
}
