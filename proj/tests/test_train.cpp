#include <catch_amalgamated.hpp>

#include <cstring>
#include <fstream>
#include <set>

#include "latent_relight/train.hpp"
#include "test_util.hpp"

using namespace latent_relight;

namespace {

ModelConfig small_model() {
    ModelConfig c;
    c.base_resolution = 16;
    c.channels_per_level = {4, 8, 8};
    c.blocks_per_level = {1, 1, 1};
    c.injection_mlp_hidden = 8;
    c.extrinsic_head_hidden = 8;
    c.seed = 5;
    return c;
}

TrainConfig small_train(std::int64_t steps) {
    TrainConfig t;
    t.batch_size = 4;
    t.max_steps = steps;
    t.learning_rate = 1e-3;
    t.seed = 9;
    return t;
}

const std::vector<SceneRecord>& small_scenes() {
    static test_util::TempDir dir("train_data");
    static const std::vector<SceneRecord> scenes = [] {
        SyntheticSceneSpec spec;
        spec.n_scenes = 4;
        spec.n_lights = 3;
        spec.image_size = 24;
        spec.seed = 2;
        return generate_synthetic_dataset(spec, dir.path());
    }();
    return scenes;
}

std::vector<std::string> breakdown_log(const ModelConfig& m, const TrainConfig& t, FitOptions o = {}) {
    std::vector<std::string> rows;
    o.on_step = [&](const StepReport& r) { rows.push_back(nlohmann::json(r.breakdown).dump()); };
    fit(m, t, small_scenes(), o);
    return rows;
}

std::vector<PairSample> small_batch(std::uint64_t seed) {
    Rng rng(seed);
    TrainConfig t = small_train(1);
    return make_batch(small_scenes(), t, 16, rng, load_image);
}

} // namespace

TEST_CASE("adamw_update follows the decoupled rule", "[train]") {
    Weights w;
    w.params.emplace("p", Tensor<float>({2}, std::vector<float>{0.5f, -1.0f}));
    OptimizerState state = OptimizerState::zeros_like(w);
    TrainConfig cfg;
    cfg.learning_rate = 0.1;
    cfg.weight_decay = 0.01;
    ParameterMap<float> g;
    g.emplace("p", Tensor<float>({2}, std::vector<float>{0.2f, -0.4f}));

    double p = 0.5, m = 0, v = 0;
    for (int t = 1; t <= 3; ++t) {
        adamw_update(w, state, g, cfg);
        const double gi = static_cast<double>(0.2f);
        m = 0.9 * m + 0.1 * gi;
        v = 0.999 * v + 0.001 * gi * gi;
        const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
        p = p - 0.1 * (mh / (std::sqrt(vh) + 1e-8) + 0.01 * p);
        p = static_cast<float>(p);
        m = static_cast<float>(m);
        v = static_cast<float>(v);
        REQUIRE(state.t == t);
        REQUIRE(w.params.at("p")[0] == Catch::Approx(p).epsilon(1e-6));
    }
    // The first bias-corrected step moves each parameter by about lr against its gradient sign.
    Weights fresh;
    fresh.params.emplace("p", Tensor<float>({1}, std::vector<float>{0.0f}));
    OptimizerState s2 = OptimizerState::zeros_like(fresh);
    ParameterMap<float> g2;
    g2.emplace("p", Tensor<float>({1}, std::vector<float>{-3.0f}));
    adamw_update(fresh, s2, g2, cfg);
    REQUIRE(fresh.params.at("p")[0] == Catch::Approx(0.1).epsilon(1e-6));
}

TEST_CASE("train_step", "[train]") {
    const ModelConfig mc = small_model();
    UniformityTarget target(1);
    SECTION("zero learning rate leaves weights bitwise unchanged") {
        Weights w = init_model(mc);
        const Weights before = w;
        OptimizerState s = OptimizerState::zeros_like(w);
        TrainConfig t = small_train(1);
        t.learning_rate = 0.0;
        Rng rng(3);
        const StepReport r = train_step(w, s, small_batch(1), t, target, 0.1, rng);
        REQUIRE(test_util::same_weights(w, before));
        REQUIRE(r.breakdown.all_finite());
        REQUIRE(s.t == 1);
    }
    SECTION("noise flag follows the warm-up fraction") {
        TrainConfig t = small_train(1);
        for (double f : {0.0, 0.2, 0.399, 0.4, 0.7}) {
            Weights w = init_model(mc);
            OptimizerState s = OptimizerState::zeros_like(w);
            Rng rng(4);
            const StepReport r = train_step(w, s, small_batch(2), t, target, f, rng);
            REQUIRE(r.noise_active == (f < 0.4));
            if (!r.noise_active) REQUIRE(r.mean_sigma == 0.0);
            else REQUIRE(r.mean_sigma > 0.0);
        }
    }
    SECTION("a step changes the weights and reports finite terms") {
        Weights w = init_model(mc);
        const Weights before = w;
        OptimizerState s = OptimizerState::zeros_like(w);
        Rng rng(5);
        const StepReport r = train_step(w, s, small_batch(3), small_train(1), target, 0.5, rng);
        REQUIRE_FALSE(test_util::same_weights(w, before));
        REQUIRE(std::abs(r.breakdown.sum_terms() - r.breakdown.total) <= 1e-9);
    }
    SECTION("non-finite loss aborts with the breakdown") {
        Weights w = init_model(mc);
        for (auto& v : w.params.at("decoder.out.conv.bias").data) v = std::numeric_limits<float>::quiet_NaN();
        OptimizerState s = OptimizerState::zeros_like(w);
        Rng rng(6);
        try {
            train_step(w, s, small_batch(4), small_train(1), target, 0.5, rng);
            FAIL("expected NonFiniteLoss");
        } catch (const NonFiniteLoss& e) {
            REQUIRE_FALSE(e.breakdown.all_finite());
            REQUIRE(std::string(e.what()).find("relit_l2") != std::string::npos);
        }
    }
    SECTION("empty batch is rejected") {
        Weights w = init_model(mc);
        OptimizerState s = OptimizerState::zeros_like(w);
        Rng rng(7);
        REQUIRE_THROWS_AS(train_step(w, s, {}, small_train(1), target, 0.5, rng), std::invalid_argument);
    }
}

TEST_CASE("fit", "[train]") {
    const ModelConfig mc = small_model();
    SECTION("no epochs returns the initialization") {
        TrainConfig t = small_train(0);
        t.epochs = 0;
        const Checkpoint ck = fit(mc, t, small_scenes());
        REQUIRE(ck.step == 0);
        REQUIRE(test_util::same_weights(ck.weights, init_model(mc)));
        REQUIRE(ck.optimizer == OptimizerState::zeros_like(ck.weights));
    }
    SECTION("same seed gives the same breakdown sequence") {
        const auto a = breakdown_log(mc, small_train(6));
        const auto b = breakdown_log(mc, small_train(6));
        REQUIRE(a.size() == 6);
        REQUIRE(a == b);
        TrainConfig other = small_train(6);
        other.seed = 10;
        REQUIRE(breakdown_log(mc, other) != a);
    }
    SECTION("resuming from a mid-run checkpoint matches an uninterrupted run") {
        test_util::TempDir dir("resume");
        const TrainConfig t = small_train(6);
        const Checkpoint full = fit(mc, t, small_scenes());
        FitOptions first;
        first.stop_at_step = 3;
        first.checkpoint_dir = dir.path();
        const Checkpoint half = fit(mc, t, small_scenes(), first);
        REQUIRE(half.step == 3);
        FitOptions second;
        second.resume = load_checkpoint(dir / "final.ckpt");
        const Checkpoint resumed = fit(mc, t, small_scenes(), second);
        REQUIRE(resumed.step == 6);
        REQUIRE(test_util::same_weights(resumed.weights, full.weights));
        REQUIRE(resumed.optimizer == full.optimizer);
    }
    SECTION("metrics log has one row per step and periodic checkpoints appear") {
        test_util::TempDir dir("metrics");
        TrainConfig t = small_train(5);
        t.eval_every = 2;
        FitOptions o;
        o.metrics_path = dir / "metrics.jsonl";
        o.checkpoint_dir = dir / "ckpt";
        fit(mc, t, small_scenes(), o);
        std::ifstream in(dir / "metrics.jsonl");
        std::string line;
        std::int64_t rows = 0;
        while (std::getline(in, line)) {
            const auto j = nlohmann::json::parse(line);
            REQUIRE(j.at("step").get<std::int64_t>() == rows);
            REQUIRE(j.contains("noise_active"));
            REQUIRE(j.contains("wall_time"));
            REQUIRE(j.contains("total"));
            ++rows;
        }
        REQUIRE(rows == 5);
        REQUIRE(fs::exists(dir / "ckpt" / "step_2.ckpt"));
        REQUIRE(fs::exists(dir / "ckpt" / "step_4.ckpt"));
        REQUIRE(fs::exists(dir / "ckpt" / "final.ckpt"));
    }
    SECTION("pixel terms fall over fifty steps") {
        TrainConfig t = small_train(50);
        t.noise.enabled = false;
        t.learning_rate = 2e-3;
        std::vector<double> pixel;
        FitOptions o;
        o.on_step = [&](const StepReport& r) { pixel.push_back(r.breakdown.pixel_terms()); };
        fit(mc, t, small_scenes(), o);
        REQUIRE(pixel.size() == 50);
        double late = 0;
        for (int i = 40; i < 50; ++i) late += pixel[i] / 10;
        REQUIRE(late < pixel[0]);
    }
    SECTION("epochs define the step count when max_steps is unset") {
        TrainConfig t = small_train(0);
        t.epochs = 2;
        REQUIRE(steps_per_epoch(small_scenes(), 4) == 3);
        REQUIRE(total_steps(small_scenes(), t) == 6);
    }
    SECTION("bad inputs are rejected") {
        REQUIRE_THROWS_AS(fit(mc, small_train(1), {}), std::invalid_argument);
        TrainConfig t = small_train(1);
        t.batch_size = 0;
        REQUIRE_THROWS_AS(fit(mc, t, small_scenes()), std::invalid_argument);
        t = small_train(1);
        t.crop_ratio_min = 0.0;
        REQUIRE_THROWS_AS(fit(mc, t, small_scenes()), std::invalid_argument);
    }
    SECTION("resume refuses a different model or seed") {
        FitOptions o;
        o.resume = fit(mc, small_train(1), small_scenes());
        ModelConfig other = mc;
        other.alpha = 1e-3;
        REQUIRE_THROWS_AS(fit(other, small_train(2), small_scenes(), o), CheckpointError);
        TrainConfig t = small_train(2);
        t.seed = 1;
        REQUIRE_THROWS_AS(fit(mc, t, small_scenes(), o), CheckpointError);
    }
}

TEST_CASE("checkpoint files", "[train]") {
    test_util::TempDir dir("ckpt");
    const Checkpoint trained = fit(small_model(), small_train(2), small_scenes());
    const fs::path path = dir / "a.ckpt";
    save_checkpoint(path, trained);

    SECTION("round trip is bitwise") {
        const Checkpoint back = load_checkpoint(path);
        REQUIRE(back.step == trained.step);
        REQUIRE(back.model_config == trained.model_config);
        REQUIRE(back.train_config == trained.train_config);
        REQUIRE(back.rng_seed == trained.rng_seed);
        REQUIRE(back.rng_next_stream == trained.rng_next_stream);
        REQUIRE(test_util::same_weights(back.weights, trained.weights));
        REQUIRE(back.optimizer == trained.optimizer);
        save_checkpoint(dir / "b.ckpt", back);
        REQUIRE(test_util::read_bytes(dir / "b.ckpt") == test_util::read_bytes(path));
    }
    SECTION("array names match the initialized model") {
        std::set<std::string> stored, expected;
        for (const auto& [n, _] : load_checkpoint(path).weights.params) stored.insert(n);
        for (const auto& [n, _] : init_model(small_model()).params) expected.insert(n);
        REQUIRE(stored == expected);
    }
    auto corrupt = [&](auto&& edit) {
        std::string bytes = test_util::read_bytes(path);
        edit(bytes);
        const fs::path bad = dir / "bad.ckpt";
        std::ofstream(bad, std::ios::binary) << bytes;
        return bad;
    };
    SECTION("flipped version byte is an incompatibility") {
        const fs::path bad = corrupt([](std::string& b) { b[8] = static_cast<char>(b[8] ^ 0x01); });
        REQUIRE_THROWS_AS(load_checkpoint(bad), CheckpointVersionError);
    }
    SECTION("truncation is an integrity failure") {
        const fs::path bad = corrupt([](std::string& b) { b.resize(b.size() - 7); });
        REQUIRE_THROWS_AS(load_checkpoint(bad), CheckpointIntegrityError);
        const fs::path stub = corrupt([](std::string& b) { b.resize(10); });
        REQUIRE_THROWS_AS(load_checkpoint(stub), CheckpointIntegrityError);
    }
    SECTION("payload damage fails the checksum") {
        const fs::path bad = corrupt([](std::string& b) { b[b.size() - 3] = static_cast<char>(b[b.size() - 3] ^ 0x40); });
        REQUIRE_THROWS_WITH(load_checkpoint(bad), Catch::Matchers::ContainsSubstring("checksum"));
    }
    SECTION("foreign files and missing paths are rejected") {
        const fs::path bad = corrupt([](std::string& b) { b[0] = 'X'; });
        REQUIRE_THROWS_AS(load_checkpoint(bad), CheckpointError);
        REQUIRE_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), IoError);
    }
}

TEST_CASE("train config serialization", "[train]") {
    TrainConfig t = small_train(17);
    t.noise.warmup_fraction = 0.25;
    t.losses.w_ssim = 0.3;
    t.out_dir = "elsewhere";
    REQUIRE(nlohmann::json(t).get<TrainConfig>() == t);
}
