#include <catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <functional>
#include <set>

#include "latent_relight/model.hpp"
#include "test_util.hpp"

using namespace latent_relight;

namespace {

using Tensord = Tensor<double>;
using OpFn = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

Tensord random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensord t(std::move(s));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

double weighted_sum(const Tensord& out, const Tensord& w) {
    double s = 0;
    for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * w[i];
    return s;
}

// Worst relative error between the tape gradient of sum(op(inputs) * R) and
// central differences, over up to `probes` entries per input.
double gradient_error(const OpFn& op, std::vector<Tensord> inputs, std::uint64_t seed, int probes = 40, double h = 1e-6) {
    Rng rng(seed);
    Tensord probe;
    std::vector<Tensord> analytic;
    {
        Tape<double> tape;
        std::vector<Var> vars;
        for (auto& t : inputs) vars.push_back(tape.leaf_ref(t, true));
        Var out = op(tape, vars);
        probe = random_tensor(tape.shape(out), rng);
        tape.accumulate_grad(out, probe);
        tape.backward();
        for (Var v : vars) analytic.push_back(tape.has_grad(v) ? tape.grad(v) : Tensord(tape.shape(v)));
    }
    auto eval = [&] {
        Tape<double> tape(false);
        std::vector<Var> vars;
        for (auto& t : inputs) vars.push_back(tape.leaf_ref(t, false));
        return weighted_sum(tape.value(op(tape, vars)), probe);
    };
    double worst = 0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const std::size_t n = inputs[k].size();
        for (int p = 0; p < probes && p < static_cast<int>(n); ++p) {
            const std::size_t i = n <= static_cast<std::size_t>(probes) ? p : rng.below(n);
            const double saved = inputs[k][i];
            inputs[k][i] = saved + h;
            const double up = eval();
            inputs[k][i] = saved - h;
            const double down = eval();
            inputs[k][i] = saved;
            const double numeric = (up - down) / (2 * h);
            const double a = analytic[k][i];
            worst = std::max(worst, std::abs(a - numeric) / (1e-2 + std::abs(a) + std::abs(numeric)));
        }
    }
    return worst;
}

ModelConfig tiny_config(std::uint64_t seed = 0) {
    ModelConfig c;
    c.base_resolution = 16;
    c.channels_per_level = {4, 8, 8};
    c.blocks_per_level = {1, 1, 1};
    c.injection_mlp_hidden = 8;
    c.extrinsic_head_hidden = 8;
    c.extrinsic_dim = 4;
    c.seed = seed;
    return c;
}

ModelConfig desk_config() {
    ModelConfig c;
    c.base_resolution = 64;
    c.channels_per_level = {8, 16, 16, 32};
    c.blocks_per_level = {1, 1, 1, 1};
    return c;
}

ExtrinsicCode random_code(int dim, Rng& rng) {
    ExtrinsicCode c;
    double sq = 0;
    for (int i = 0; i < dim; ++i) {
        c.code.push_back(static_cast<float>(rng.normal()));
        sq += c.code.back() * c.code.back();
    }
    for (float& v : c.code) v = static_cast<float>(v / std::sqrt(sq));
    return c;
}

} // namespace

TEST_CASE("op gradients match central differences in double precision", "[model][grad]") {
    Rng rng(1);
    constexpr double tol = 1e-6;
    SECTION("conv2d 3x3 stride 1") {
        auto op = [](Tape<double>& t, const std::vector<Var>& v) { return ops::conv2d(t, v[0], v[1], v[2], 1, 1); };
        REQUIRE(gradient_error(op, {random_tensor({2, 3, 5, 6}, rng), random_tensor({4, 3, 3, 3}, rng), random_tensor({4}, rng)}, 2) < tol);
    }
    SECTION("conv2d 3x3 stride 2") {
        auto op = [](Tape<double>& t, const std::vector<Var>& v) { return ops::conv2d(t, v[0], v[1], v[2], 2, 1); };
        REQUIRE(gradient_error(op, {random_tensor({2, 2, 6, 6}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)}, 3) < tol);
    }
    SECTION("conv2d 1x1") {
        auto op = [](Tape<double>& t, const std::vector<Var>& v) { return ops::conv2d(t, v[0], v[1], v[2], 1, 0); };
        REQUIRE(gradient_error(op, {random_tensor({2, 3, 4, 4}, rng), random_tensor({5, 3, 1, 1}, rng), random_tensor({5}, rng)}, 4) < tol);
    }
    SECTION("group_norm") {
        auto op = [](Tape<double>& t, const std::vector<Var>& v) { return ops::group_norm(t, v[0], v[1], v[2], 2); };
        REQUIRE(gradient_error(op, {random_tensor({2, 4, 3, 3}, rng), random_tensor({4}, rng), random_tensor({4}, rng)}, 5) < tol);
    }
    SECTION("silu") {
        auto op = [](Tape<double>& t, const std::vector<Var>& v) { return ops::silu(t, v[0]); };
        REQUIRE(gradient_error(op, {random_tensor({2, 3, 4, 4}, rng, -4, 4)}, 6) < tol);
    }
    SECTION("add") {
        auto op = [](Tape<double>& t, const std::vector<Var>& v) { return ops::add(t, v[0], v[1]); };
        REQUIRE(gradient_error(op, {random_tensor({2, 2, 3, 3}, rng), random_tensor({2, 2, 3, 3}, rng)}, 7) < tol);
    }
    SECTION("nearest upsampling") {
        auto op = [](Tape<double>& t, const std::vector<Var>& v) { return ops::upsample_nearest2x(t, v[0]); };
        REQUIRE(gradient_error(op, {random_tensor({2, 3, 3, 2}, rng)}, 8) < tol);
    }
    SECTION("channel concatenation") {
        auto op = [](Tape<double>& t, const std::vector<Var>& v) { return ops::concat_channels(t, v[0], v[1]); };
        REQUIRE(gradient_error(op, {random_tensor({2, 2, 3, 3}, rng), random_tensor({2, 3, 3, 3}, rng)}, 9) < tol);
    }
    SECTION("channel L2 normalization, spatial and flat") {
        auto op = [](Tape<double>& t, const std::vector<Var>& v) { return ops::l2_normalize_channels(t, v[0]); };
        REQUIRE(gradient_error(op, {random_tensor({2, 5, 3, 3}, rng)}, 10) < tol);
        REQUIRE(gradient_error(op, {random_tensor({3, 6}, rng)}, 11) < tol);
    }
    SECTION("linear") {
        auto op = [](Tape<double>& t, const std::vector<Var>& v) { return ops::linear(t, v[0], v[1], v[2]); };
        REQUIRE(gradient_error(op, {random_tensor({4, 5}, rng), random_tensor({3, 5}, rng), random_tensor({3}, rng)}, 12) < tol);
    }
    SECTION("row flattening and group means") {
        auto op = [](Tape<double>& t, const std::vector<Var>& v) { return ops::mean_row_groups(t, ops::nchw_to_rows(t, v[0]), 2); };
        REQUIRE(gradient_error(op, {random_tensor({2, 3, 2, 3}, rng)}, 13) < tol);
    }
    SECTION("constrained scaling") {
        auto op = [](Tape<double>& t, const std::vector<Var>& v) { return ops::constrained_scale(t, v[0], v[1], 0.3); };
        REQUIRE(gradient_error(op, {random_tensor({2, 3, 3, 3}, rng), random_tensor({2, 3}, rng, -2, 2)}, 14) < tol);
    }
    SECTION("batch gather and slice") {
        auto gather = [](Tape<double>& t, const std::vector<Var>& v) { return ops::gather_batch(t, v[0], {2, 0, 2, 1}); };
        REQUIRE(gradient_error(gather, {random_tensor({3, 4}, rng)}, 15) < tol);
        auto slice = [](Tape<double>& t, const std::vector<Var>& v) { return ops::slice_batch(t, v[0], 1, 2); };
        REQUIRE(gradient_error(slice, {random_tensor({4, 2, 2, 2}, rng)}, 16) < tol);
    }
}

TEST_CASE("clamp passes gradients straight through", "[model][grad]") {
    Tape<double> tape;
    Tensord x({1, 1, 1, 4}, std::vector<double>{-0.5, 0.2, 0.9, 1.7});
    Var v = tape.leaf_ref(x, true);
    Var y = ops::clamp01_straight_through(tape, v);
    REQUIRE(tape.value(y).data == Tensord({1, 1, 1, 4}, std::vector<double>{0.0, 0.2, 0.9, 1.0}).data);
    tape.accumulate_grad(y, Tensord({1, 1, 1, 4}, std::vector<double>{1, 2, 3, 4}));
    tape.backward();
    REQUIRE(tape.grad(v).data == Tensord({1, 1, 1, 4}, std::vector<double>{1, 2, 3, 4}).data);
}

TEST_CASE("full network gradient matches central differences", "[model][grad]") {
    ModelConfig cfg = tiny_config(3);
    cfg.alpha = 0.2;
    ModelWeights<double> w = init_model<double>(cfg);
    // Move the output away from the clamp boundaries so the check is smooth.
    for (auto& v : w.params.at("decoder.out.conv.weight").data) v *= 0.5;
    Rng rng(4);
    const Tensord images = random_tensor({2, 3, 16, 16}, rng, 0.2, 0.8);
    Tensord probe;

    auto forward = [&](Tape<double>& tape, ParamBinder<double>& p) {
        Var x = tape.leaf_ref(images, false);
        EncoderVars enc = encode_vars(tape, p, x);
        Var codes = ops::gather_batch(tape, enc.extrinsic, {1, 0});
        return decode_vars(tape, p, enc.intrinsics, codes, cfg.alpha);
    };
    ParameterMap<double> grads;
    {
        Tape<double> tape;
        ParamBinder<double> p(tape, w, true);
        Var out = forward(tape, p);
        probe = random_tensor(tape.shape(out), rng);
        tape.accumulate_grad(out, probe);
        tape.backward();
        grads = p.gradients();
    }
    auto loss = [&] {
        Tape<double> tape(false);
        ParamBinder<double> p(tape, w, false);
        return weighted_sum(tape.value(forward(tape, p)), probe);
    };
    int checked = 0;
    double worst = 0;
    for (const char* name : {"encoder.stem.weight", "encoder.level1.down.weight", "encoder.level2.block0.conv1.weight",
                             "extrinsic_head.fc1.weight", "extrinsic_head.fc3.bias", "decoder.level2.fuse.weight",
                             "decoder.level1.inject.fc2.weight", "decoder.level0.block0.norm1.weight", "decoder.out.conv.bias"}) {
        auto& t = w.params.at(name);
        for (int k = 0; k < 4; ++k) {
            const std::size_t i = rng.below(t.size());
            const double saved = t[i];
            t[i] = saved + 1e-6;
            const double up = loss();
            t[i] = saved - 1e-6;
            const double down = loss();
            t[i] = saved;
            const double numeric = (up - down) / 2e-6;
            const double a = grads.at(name)[i];
            worst = std::max(worst, std::abs(a - numeric) / std::max(1e-7, std::abs(a) + std::abs(numeric)));
            ++checked;
        }
    }
    REQUIRE(checked == 36);
    REQUIRE(worst < 1e-4);
}

TEST_CASE("init_model", "[model]") {
    SECTION("default config has six encoder and six decoder levels") {
        const Weights w = init_model(ModelConfig{});
        std::set<std::string> enc, dec;
        for (const auto& [name, _] : w.params) {
            if (name.rfind("encoder.level", 0) == 0) enc.insert(name.substr(0, name.find('.', 8)));
            if (name.rfind("decoder.level", 0) == 0) dec.insert(name.substr(0, name.find('.', 8)));
        }
        REQUIRE(enc == std::set<std::string>{"encoder.level0", "encoder.level1", "encoder.level2", "encoder.level3", "encoder.level4", "encoder.level5"});
        REQUIRE(dec.size() == 6);
        int enc_blocks = 0;
        for (const auto& [name, _] : w.params)
            if (name.rfind("encoder.", 0) == 0 && name.find(".conv1.weight") != std::string::npos) ++enc_blocks;
        REQUIRE(enc_blocks == 1 + 2 + 2 + 4 + 4 + 4);
    }
    SECTION("same config gives identical bytes, other seeds differ") {
        const Weights a = init_model(desk_config());
        const Weights b = init_model(desk_config());
        REQUIRE(a.params.size() == b.params.size());
        for (const auto& [name, t] : a.params) {
            REQUIRE(t.shape == b.params.at(name).shape);
            REQUIRE(std::memcmp(t.ptr(), b.params.at(name).ptr(), t.size() * sizeof(float)) == 0);
        }
        ModelConfig other = desk_config();
        other.seed = 1;
        REQUIRE(init_model(other).params.at("encoder.stem.weight").data != a.params.at("encoder.stem.weight").data);
    }
    SECTION("desk-scale config stays under two million parameters") {
        const Weights w = init_model(desk_config());
        std::size_t total = 0;
        for (const auto& [_, t] : w.params) total += shape_numel(t.shape);
        REQUIRE(total == w.parameter_count());
        REQUIRE(total < 2'000'000);
        for (const auto& [_, t] : w.params)
            for (float v : t.data) REQUIRE(std::isfinite(v));
    }
    SECTION("name set depends only on the architecture") {
        ModelConfig a = desk_config(), b = desk_config();
        b.seed = 99;
        b.alpha = 0.1;
        std::set<std::string> na, nb;
        for (const auto& [n, _] : init_model(a).params) na.insert(n);
        for (const auto& [n, _] : init_model(b).params) nb.insert(n);
        REQUIRE(na == nb);
    }
    SECTION("inconsistent configs are rejected") {
        ModelConfig c = desk_config();
        c.blocks_per_level = {1, 1, 1};
        REQUIRE_THROWS_AS(init_model(c), std::invalid_argument);
        c = desk_config();
        c.base_resolution = 60;
        REQUIRE_THROWS_AS(init_model(c), std::invalid_argument);
        c = desk_config();
        c.alpha = -1e-3;
        REQUIRE_THROWS_AS(init_model(c), std::invalid_argument);
        c = desk_config();
        c.channels_per_level = {8};
        c.blocks_per_level = {1};
        REQUIRE_THROWS_AS(init_model(c), std::invalid_argument);
    }
    SECTION("config survives a JSON round trip") {
        ModelConfig c = desk_config();
        c.alpha = 1e-3;
        c.seed = 17;
        REQUIRE(nlohmann::json(c).get<ModelConfig>() == c);
    }
}

TEST_CASE("encode", "[model]") {
    SECTION("default config exposes five intrinsic levels") {
        const Weights w = init_model(ModelConfig{});
        Rng rng(2);
        const auto [feats, code] = encode(w, test_util::random_image(256, 256, rng));
        REQUIRE(feats.levels.size() == 5);
        const std::vector<int> res{128, 64, 32, 16, 8}, ch{64, 128, 128, 256, 512};
        for (int i = 0; i < 5; ++i) REQUIRE(feats.levels[i].shape == Shape{ch[i], res[i], res[i]});
        REQUIRE(code.code.size() == 16);
    }
    const Weights w = init_model(desk_config());
    Rng rng(5);
    SECTION("outputs are unit-normalized and finite") {
        for (int trial = 0; trial < 3; ++trial) {
            const auto [feats, code] = encode(w, test_util::random_image(64, 64, rng));
            double sq = 0;
            for (float v : code.code) sq += double(v) * v;
            REQUIRE(std::abs(std::sqrt(sq) - 1.0) <= 1e-5);
            for (const auto& level : feats.levels) {
                const int c = level.dim(0), hw = level.dim(1) * level.dim(2);
                for (int p = 0; p < hw; ++p) {
                    double s = 0;
                    for (int k = 0; k < c; ++k) {
                        const float v = level[static_cast<std::size_t>(k) * hw + p];
                        REQUIRE(std::isfinite(v));
                        s += double(v) * v;
                    }
                    REQUIRE(std::abs(std::sqrt(s) - 1.0) <= 1e-5);
                }
            }
        }
    }
    SECTION("encoding is deterministic") {
        const ImageBuffer img = test_util::random_image(64, 64, rng);
        const auto a = encode(w, img);
        const auto b = encode(w, img);
        REQUIRE(a.second.code == b.second.code);
        for (std::size_t l = 0; l < a.first.levels.size(); ++l) REQUIRE(a.first.levels[l].data == b.first.levels[l].data);
    }
    SECTION("wrong input size is rejected") {
        REQUIRE_THROWS_AS(encode(w, ImageBuffer(32, 32)), std::invalid_argument);
        REQUIRE_THROWS_AS(encode(w, ImageBuffer(64, 48)), std::invalid_argument);
    }
}

TEST_CASE("constrained_scale", "[model]") {
    Rng rng(8);
    const int dim = 16, hidden = 32, channels = 6;
    auto make = [&](Shape s, double scale) {
        Tensor<float> t(std::move(s));
        for (auto& v : t.data) v = static_cast<float>(rng.normal() * scale);
        return t;
    };
    Tensor<float> fc1_w = make({hidden, dim}, 0.5), fc1_b = make({hidden}, 0.1);
    Tensor<float> fc2_w = make({channels, hidden}, 0.5), fc2_b = make({channels}, 0.1);
    const Tensor<float> feature = make({channels, 5, 4}, 1.0);

    SECTION("alpha zero is the exact identity") {
        for (int i = 0; i < 20; ++i) {
            const Tensor<float> f = make({channels, 3, 3}, 2.0);
            REQUIRE(constrained_scale(f, random_code(dim, rng), 0.0, fc1_w, fc1_b, fc2_w, fc2_b).data == f.data);
        }
    }
    SECTION("a zero head output leaves the map unchanged") {
        Tensor<float> zw({channels, hidden}), zb({channels});
        REQUIRE(constrained_scale(feature, random_code(dim, rng), 5e-3, fc1_w, fc1_b, zw, zb).data == feature.data);
    }
    SECTION("saturated head scales ones by 1 + alpha") {
        Tensor<float> zw({channels, hidden}), big({channels}, 50.0f);
        const Tensor<float> ones({channels, 2, 2}, 1.0f);
        const Tensor<float> out = constrained_scale(ones, random_code(dim, rng), 5e-3, fc1_w, fc1_b, zw, big);
        for (float v : out.data) REQUIRE(v == Catch::Approx(1.005).epsilon(1e-7));
    }
    SECTION("modulation never exceeds alpha") {
        for (double alpha : {5e-4, 1e-3, 5e-3, 1e-2, 0.5}) {
            for (int i = 0; i < 10; ++i) {
                const Tensor<float> out = constrained_scale(feature, random_code(dim, rng), alpha, fc1_w, fc1_b, fc2_w, fc2_b);
                for (std::size_t k = 0; k < out.size(); ++k)
                    REQUIRE(std::abs(double(out[k]) - double(feature[k])) <= alpha * std::abs(double(feature[k])));
            }
        }
    }
    SECTION("channel mismatch and negative alpha are rejected") {
        const Tensor<float> wrong = make({channels + 1, 3, 3}, 1.0);
        REQUIRE_THROWS_AS(constrained_scale(wrong, random_code(dim, rng), 5e-3, fc1_w, fc1_b, fc2_w, fc2_b), std::invalid_argument);
        REQUIRE_THROWS_AS(constrained_scale(feature, random_code(dim, rng), -1.0, fc1_w, fc1_b, fc2_w, fc2_b), std::invalid_argument);
    }
}

TEST_CASE("decode, relight and albedo", "[model]") {
    const Weights w = init_model(desk_config());
    Rng rng(13);
    const ImageBuffer img = test_util::random_image(64, 64, rng);
    const ImageBuffer other = test_util::random_image(64, 64, rng);
    const auto [feats, code] = encode(w, img);

    SECTION("decoded images have model resolution and lie in [0,1]") {
        const ImageBuffer out = decode(w, feats, code);
        REQUIRE(out.height == 64);
        REQUIRE(out.width == 64);
        for (float v : out.pixels) REQUIRE((v >= 0.0f && v <= 1.0f));
        const ImageBuffer rel = relight(w, img, other);
        for (float v : rel.pixels) REQUIRE((v >= 0.0f && v <= 1.0f));
    }
    SECTION("alpha zero ignores the code") {
        const ImageBuffer base = decode(w, feats, code, 0.0);
        for (int i = 0; i < 10; ++i) REQUIRE(decode(w, feats, random_code(16, rng), 0.0).pixels == base.pixels);
        REQUIRE(estimate_albedo(w, img).pixels == base.pixels);
    }
    SECTION("relighting with the input as reference reproduces the reconstruction") {
        REQUIRE(relight(w, img, img).pixels == reconstruct(w, img).pixels);
        REQUIRE(relight(w, img, other).pixels == decode(w, feats, encode(w, other).second).pixels);
    }
    SECTION("mismatched inputs are rejected") {
        IntrinsicFeatures broken = feats;
        broken.levels.pop_back();
        REQUIRE_THROWS_AS(decode(w, broken, code), std::invalid_argument);
        broken = feats;
        broken.levels[0] = Tensor<float>({16, 16, 16});
        REQUIRE_THROWS_AS(decode(w, broken, code), std::invalid_argument);
        REQUIRE_THROWS_AS(decode(w, feats, ExtrinsicCode{{1.0f, 0.0f}}), std::invalid_argument);
        REQUIRE_THROWS_AS(relight(w, img, ImageBuffer(32, 32)), std::invalid_argument);
    }
}

TEST_CASE("interpolate_extrinsics", "[model]") {
    Rng rng(21);
    const ExtrinsicCode a = random_code(16, rng), b = random_code(16, rng);
    REQUIRE(interpolate_extrinsics(a, b, 0.0).code == a.code);
    REQUIRE(interpolate_extrinsics(a, b, 1.0).code == b.code);

    ExtrinsicCode e0{std::vector<float>(16, 0.0f)}, e1{std::vector<float>(16, 0.0f)};
    e0.code[0] = 1.0f;
    e1.code[1] = 1.0f;
    const ExtrinsicCode mid = interpolate_extrinsics(e0, e1, 0.5);
    double dot0 = 0, dot1 = 0, sq = 0;
    for (int i = 0; i < 16; ++i) {
        dot0 += mid.code[i] * e0.code[i];
        dot1 += mid.code[i] * e1.code[i];
        sq += mid.code[i] * mid.code[i];
    }
    REQUIRE(std::abs(dot0 - std::sqrt(0.5)) <= 1e-6);
    REQUIRE(std::abs(dot1 - std::sqrt(0.5)) <= 1e-6);
    REQUIRE(std::abs(sq - 1.0) <= 1e-6);

    for (double t : {0.1, 0.37, 0.8}) {
        const ExtrinsicCode c = interpolate_extrinsics(a, b, t);
        double n = 0;
        for (float v : c.code) n += double(v) * v;
        REQUIRE(std::abs(std::sqrt(n) - 1.0) <= 1e-6);
    }

    ExtrinsicCode neg = e0;
    neg.code[0] = -1.0f;
    REQUIRE_THROWS_AS(interpolate_extrinsics(e0, neg, 0.5), DegenerateInterpolation);
    REQUIRE_THROWS_AS(interpolate_extrinsics(a, b, 1.5), std::invalid_argument);
    REQUIRE_THROWS_AS(interpolate_extrinsics(a, ExtrinsicCode{{1.0f}}, 0.5), std::invalid_argument);
}
