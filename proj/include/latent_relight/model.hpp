#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "image.hpp"
#include "rng.hpp"
#include "tape.hpp"
#include "tensor.hpp"

namespace latent_relight {

struct ModelConfig {
    int base_resolution = 256;
    std::vector<int> blocks_per_level{1, 2, 2, 4, 4, 4};
    std::vector<int> channels_per_level{32, 64, 128, 128, 256, 512};
    int extrinsic_dim = 16;
    double alpha = 5e-3;
    int injection_mlp_hidden = 256;
    int extrinsic_head_hidden = 256;
    std::uint64_t seed = 0;

    int levels() const { return static_cast<int>(channels_per_level.size()); }
    int resolution(int level) const { return base_resolution >> level; }

    // Throws std::invalid_argument describing the first violated constraint.
    void validate() const {
        if (channels_per_level.empty()) throw std::invalid_argument("model config: at least one level required");
        if (blocks_per_level.size() != channels_per_level.size())
            throw std::invalid_argument("model config: blocks_per_level and channels_per_level lengths differ");
        if (levels() < 2) throw std::invalid_argument("model config: need at least two levels (one intrinsic level)");
        for (int b : blocks_per_level)
            if (b < 0) throw std::invalid_argument("model config: negative block count");
        for (int c : channels_per_level)
            if (c < 1) throw std::invalid_argument("model config: channel counts must be positive");
        if (base_resolution < 1 || base_resolution % (1 << (levels() - 1)) != 0)
            throw std::invalid_argument("model config: base_resolution must be divisible by 2^(levels-1)");
        if (extrinsic_dim < 1) throw std::invalid_argument("model config: extrinsic_dim must be positive");
        if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw std::invalid_argument("model config: alpha must be finite and >= 0");
        if (injection_mlp_hidden < 1 || extrinsic_head_hidden < 1)
            throw std::invalid_argument("model config: MLP widths must be positive");
    }

    bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"base_resolution", c.base_resolution},
                       {"blocks_per_level", c.blocks_per_level},
                       {"channels_per_level", c.channels_per_level},
                       {"extrinsic_dim", c.extrinsic_dim},
                       {"alpha", c.alpha},
                       {"injection_mlp_hidden", c.injection_mlp_hidden},
                       {"extrinsic_head_hidden", c.extrinsic_head_hidden},
                       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.base_resolution = j.value("base_resolution", d.base_resolution);
    c.blocks_per_level = j.value("blocks_per_level", d.blocks_per_level);
    c.channels_per_level = j.value("channels_per_level", d.channels_per_level);
    c.extrinsic_dim = j.value("extrinsic_dim", d.extrinsic_dim);
    c.alpha = j.value("alpha", d.alpha);
    c.injection_mlp_hidden = j.value("injection_mlp_hidden", d.injection_mlp_hidden);
    c.extrinsic_head_hidden = j.value("extrinsic_head_hidden", d.extrinsic_head_hidden);
    c.seed = j.value("seed", d.seed);
}

template <typename T>
using ParameterMap = std::map<std::string, Tensor<T>>;

template <typename T>
struct ModelWeights {
    ModelConfig config;
    ParameterMap<T> params;

    const Tensor<T>& at(const std::string& name) const {
        auto it = params.find(name);
        if (it == params.end()) throw std::out_of_range("missing parameter " + name);
        return it->second;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [_, t] : params) n += t.size();
        return n;
    }
};

using Weights = ModelWeights<float>;

// One code vector per image, unit L2 norm.
struct ExtrinsicCode {
    std::vector<float> code;
};

// Level i holds a C_i x H_i x W_i map with unit-norm channel vectors,
// ordered from base/2 resolution down to the bottleneck.
struct IntrinsicFeatures {
    std::vector<Tensor<float>> levels;
};

namespace detail {

inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

inline int group_count(int channels) {
    int g = std::min(32, channels);
    while (channels % g != 0) --g;
    return g;
}

inline std::string block_prefix(const std::string& stage, int level, int block) {
    return stage + ".level" + std::to_string(level) + ".block" + std::to_string(block);
}

inline std::string level_prefix(const std::string& stage, int level) {
    return stage + ".level" + std::to_string(level);
}

// Parameter specs in a fixed order: name, shape, init kind.
enum class Init { HeConv, HeLinear, Zeros, Ones, SmallConv, Constant };

struct ParamSpec {
    std::string name;
    Shape shape;
    Init init;
    double value = 0.0;
};

inline void add_conv(std::vector<ParamSpec>& out, const std::string& p, int cout, int cin, int k, Init init = Init::HeConv) {
    out.push_back({p + ".weight", {cout, cin, k, k}, init});
    out.push_back({p + ".bias", {cout}, Init::Zeros});
}

inline void add_linear(std::vector<ParamSpec>& out, const std::string& p, int out_dim, int in_dim) {
    out.push_back({p + ".weight", {out_dim, in_dim}, Init::HeLinear});
    out.push_back({p + ".bias", {out_dim}, Init::Zeros});
}

inline void add_norm(std::vector<ParamSpec>& out, const std::string& p, int c) {
    out.push_back({p + ".weight", {c}, Init::Ones});
    out.push_back({p + ".bias", {c}, Init::Zeros});
}

inline void add_block(std::vector<ParamSpec>& out, const std::string& p, int c) {
    add_norm(out, p + ".norm1", c);
    add_conv(out, p + ".conv1", c, c, 3);
    add_norm(out, p + ".norm2", c);
    add_conv(out, p + ".conv2", c, c, 3, Init::SmallConv);
}

inline std::vector<ParamSpec> parameter_specs(const ModelConfig& cfg) {
    std::vector<ParamSpec> out;
    const auto& ch = cfg.channels_per_level;
    const int levels = cfg.levels();
    add_conv(out, "encoder.stem", ch[0], 3, 3);
    for (int i = 0; i < levels; ++i) {
        if (i > 0) add_conv(out, level_prefix("encoder", i) + ".down", ch[i], ch[i - 1], 3);
        for (int b = 0; b < cfg.blocks_per_level[i]; ++b) add_block(out, block_prefix("encoder", i, b), ch[i]);
    }
    add_linear(out, "extrinsic_head.fc1", cfg.extrinsic_head_hidden, ch[levels - 1]);
    add_linear(out, "extrinsic_head.fc2", cfg.extrinsic_head_hidden, cfg.extrinsic_head_hidden);
    add_linear(out, "extrinsic_head.fc3", cfg.extrinsic_dim, cfg.extrinsic_head_hidden);
    for (int i = levels - 1; i >= 0; --i) {
        const std::string lp = level_prefix("decoder", i);
        if (i == levels - 1) {
            add_conv(out, lp + ".fuse", ch[i], ch[i], 1);
        } else {
            add_conv(out, lp + ".up", ch[i], ch[i + 1], 3);
            if (i > 0) add_conv(out, lp + ".fuse", ch[i], 2 * ch[i], 1);
        }
        add_linear(out, lp + ".inject.fc1", cfg.injection_mlp_hidden, cfg.extrinsic_dim);
        add_linear(out, lp + ".inject.fc2", ch[i], cfg.injection_mlp_hidden);
        for (int b = 0; b < cfg.blocks_per_level[i]; ++b) add_block(out, block_prefix("decoder", i, b), ch[i]);
    }
    add_norm(out, "decoder.out.norm", ch[0]);
    out.push_back({"decoder.out.conv.weight", {3, ch[0], 3, 3}, Init::SmallConv});
    out.push_back({"decoder.out.conv.bias", {3}, Init::Constant, 0.5});
    return out;
}

} // namespace detail

// Deterministic in config.seed. Each array draws from its own stream keyed by
// its name, so values do not depend on declaration order.
template <typename T = float>
ModelWeights<T> init_model(const ModelConfig& config) {
    config.validate();
    ModelWeights<T> w;
    w.config = config;
    for (const auto& spec : detail::parameter_specs(config)) {
        Tensor<T> t(spec.shape);
        Rng rng = Rng::derive(config.seed, detail::fnv1a(spec.name));
        const std::size_t fan_in = spec.shape.size() > 1 ? shape_numel(spec.shape) / spec.shape[0] : 1;
        switch (spec.init) {
        case detail::Init::Zeros: break;
        case detail::Init::Ones: std::fill(t.data.begin(), t.data.end(), T(1)); break;
        case detail::Init::Constant: std::fill(t.data.begin(), t.data.end(), static_cast<T>(spec.value)); break;
        case detail::Init::HeConv:
        case detail::Init::HeLinear:
        case detail::Init::SmallConv: {
            double std = std::sqrt(2.0 / static_cast<double>(fan_in));
            if (spec.init == detail::Init::SmallConv) std *= 0.1;
            for (auto& v : t.data) v = static_cast<T>(rng.normal(0.0, std));
            break;
        }
        }
        w.params.emplace(spec.name, std::move(t));
    }
    return w;
}

// Binds named parameters to tape leaves on first use and remembers the mapping
// so gradients can be collected afterwards.
template <typename T>
class ParamBinder {
public:
    ParamBinder(Tape<T>& tape, const ModelWeights<T>& weights, bool requires_grad)
        : tape_(tape), weights_(weights), requires_grad_(requires_grad) {}

    Var operator()(const std::string& name) {
        auto it = bound_.find(name);
        if (it != bound_.end()) return it->second;
        Var v = tape_.leaf_ref(weights_.at(name), requires_grad_);
        bound_.emplace(name, v);
        return v;
    }

    // Gradient per parameter; zero tensors for parameters that were not reached.
    ParameterMap<T> gradients() {
        ParameterMap<T> out;
        for (const auto& [name, t] : weights_.params) {
            auto it = bound_.find(name);
            if (it != bound_.end() && tape_.has_grad(it->second))
                out.emplace(name, tape_.grad(it->second));
            else
                out.emplace(name, Tensor<T>(t.shape));
        }
        return out;
    }

    const ModelConfig& config() const { return weights_.config; }

private:
    Tape<T>& tape_;
    const ModelWeights<T>& weights_;
    bool requires_grad_;
    std::map<std::string, Var> bound_;
};

struct EncoderVars {
    std::vector<Var> intrinsics; // one per intrinsic level, N x C_i x H_i x W_i, unit channel vectors
    Var extrinsic;               // N x extrinsic_dim, unit rows
};

namespace nn {

template <typename T>
Var conv(Tape<T>& tape, ParamBinder<T>& p, const std::string& name, Var x, int stride = 1) {
    const int k = tape.shape(p(name + ".weight"))[2];
    return ops::conv2d(tape, x, p(name + ".weight"), p(name + ".bias"), stride, k / 2);
}

template <typename T>
Var norm(Tape<T>& tape, ParamBinder<T>& p, const std::string& name, Var x) {
    return ops::group_norm(tape, x, p(name + ".weight"), p(name + ".bias"), detail::group_count(tape.shape(x)[1]));
}

template <typename T>
Var dense(Tape<T>& tape, ParamBinder<T>& p, const std::string& name, Var x) {
    return ops::linear(tape, x, p(name + ".weight"), p(name + ".bias"));
}

// x + conv2(silu(norm2(conv1(silu(norm1(x))))))
template <typename T>
Var residual_block(Tape<T>& tape, ParamBinder<T>& p, const std::string& prefix, Var x) {
    Var h = ops::silu(tape, norm(tape, p, prefix + ".norm1", x));
    h = conv(tape, p, prefix + ".conv1", h);
    h = ops::silu(tape, norm(tape, p, prefix + ".norm2", h));
    h = conv(tape, p, prefix + ".conv2", h);
    return ops::add(tape, x, h);
}

} // namespace nn

// images: N x 3 x R x R with R = base_resolution.
template <typename T>
EncoderVars encode_vars(Tape<T>& tape, ParamBinder<T>& p, Var images) {
    const ModelConfig& cfg = p.config();
    const auto& s = tape.shape(images);
    if (s.size() != 4 || s[1] != 3 || s[2] != cfg.base_resolution || s[3] != cfg.base_resolution)
        throw std::invalid_argument("encode: expected N x 3 x " + std::to_string(cfg.base_resolution) + " x " +
                                    std::to_string(cfg.base_resolution) + " input, got " + shape_str(s));
    const int n = s[0];
    EncoderVars out;
    Var h = nn::conv(tape, p, "encoder.stem", images);
    for (int i = 0; i < cfg.levels(); ++i) {
        if (i > 0) h = nn::conv(tape, p, detail::level_prefix("encoder", i) + ".down", h, 2);
        for (int b = 0; b < cfg.blocks_per_level[i]; ++b) h = nn::residual_block(tape, p, detail::block_prefix("encoder", i, b), h);
        if (i > 0) out.intrinsics.push_back(ops::l2_normalize_channels(tape, h));
    }
    Var rows = ops::nchw_to_rows(tape, h);
    rows = ops::silu(tape, nn::dense(tape, p, "extrinsic_head.fc1", rows));
    rows = ops::silu(tape, nn::dense(tape, p, "extrinsic_head.fc2", rows));
    rows = nn::dense(tape, p, "extrinsic_head.fc3", rows);
    out.extrinsic = ops::l2_normalize_channels(tape, ops::mean_row_groups(tape, rows, n));
    return out;
}

// Decoder over intrinsic levels (base/2 .. bottleneck) and one code row per sample.
template <typename T>
Var decode_vars(Tape<T>& tape, ParamBinder<T>& p, const std::vector<Var>& intrinsics, Var codes, double alpha) {
    const ModelConfig& cfg = p.config();
    const int levels = cfg.levels();
    if (static_cast<int>(intrinsics.size()) != levels - 1)
        throw std::invalid_argument("decode: expected " + std::to_string(levels - 1) + " intrinsic levels, got " +
                                    std::to_string(intrinsics.size()));
    const int n = tape.shape(intrinsics.front())[0];
    for (int i = 1; i < levels; ++i) {
        const Shape expect{n, cfg.channels_per_level[i], cfg.resolution(i), cfg.resolution(i)};
        if (tape.shape(intrinsics[i - 1]) != expect)
            throw std::invalid_argument("decode: intrinsic level " + std::to_string(i - 1) + " has shape " +
                                        shape_str(tape.shape(intrinsics[i - 1])) + ", expected " + shape_str(expect));
    }
    if (tape.shape(codes) != Shape{n, cfg.extrinsic_dim})
        throw std::invalid_argument("decode: code batch shape " + shape_str(tape.shape(codes)));

    Var h;
    for (int i = levels - 1; i >= 0; --i) {
        const std::string lp = detail::level_prefix("decoder", i);
        Var fused;
        if (i == levels - 1) {
            fused = nn::conv(tape, p, lp + ".fuse", intrinsics[i - 1]);
        } else {
            Var up = nn::conv(tape, p, lp + ".up", ops::upsample_nearest2x(tape, h));
            fused = i > 0 ? nn::conv(tape, p, lp + ".fuse", ops::concat_channels(tape, up, intrinsics[i - 1])) : up;
        }
        Var m = ops::silu(tape, nn::dense(tape, p, lp + ".inject.fc1", codes));
        m = nn::dense(tape, p, lp + ".inject.fc2", m);
        h = ops::constrained_scale(tape, fused, m, alpha);
        for (int b = 0; b < cfg.blocks_per_level[i]; ++b) h = nn::residual_block(tape, p, detail::block_prefix("decoder", i, b), h);
    }
    h = ops::silu(tape, nn::norm(tape, p, "decoder.out.norm", h));
    h = nn::conv(tape, p, "decoder.out.conv", h);
    return ops::clamp01_straight_through(tape, h);
}

namespace detail {

inline void require_model_input(const ModelConfig& cfg, const ImageBuffer& img, const char* what) {
    if (img.height != cfg.base_resolution || img.width != cfg.base_resolution)
        throw std::invalid_argument(std::string(what) + ": image is " + std::to_string(img.height) + "x" +
                                    std::to_string(img.width) + ", model expects " + std::to_string(cfg.base_resolution) +
                                    "x" + std::to_string(cfg.base_resolution));
}

inline Tensor<float> single(const Tensor<float>& batch, int n) {
    Shape s(batch.shape.begin() + 1, batch.shape.end());
    const std::size_t stride = shape_numel(s);
    Tensor<float> out(s);
    std::copy_n(batch.ptr() + n * stride, stride, out.ptr());
    return out;
}

inline Tensor<float> batch_of_one(const Tensor<float>& t) {
    Shape s{1};
    s.insert(s.end(), t.shape.begin(), t.shape.end());
    Tensor<float> out = t;
    out.shape = std::move(s);
    return out;
}

} // namespace detail

// Read-only over weights.
inline std::pair<IntrinsicFeatures, ExtrinsicCode> encode(const Weights& weights, const ImageBuffer& image) {
    detail::require_model_input(weights.config, image, "encode");
    Tape<float> tape(false);
    ParamBinder<float> p(tape, weights, false);
    Var x = tape.leaf(images_to_tensor<float>({image}));
    EncoderVars ev = encode_vars(tape, p, x);
    IntrinsicFeatures feats;
    for (Var v : ev.intrinsics) feats.levels.push_back(detail::single(tape.value(v), 0));
    return {std::move(feats), ExtrinsicCode{{tape.value(ev.extrinsic).data.begin(), tape.value(ev.extrinsic).data.end()}}};
}

// alpha_override replaces config.alpha; 0 disables the extrinsic pathway.
inline ImageBuffer decode(const Weights& weights, const IntrinsicFeatures& intrinsics, const ExtrinsicCode& code,
                          std::optional<double> alpha_override = std::nullopt) {
    const ModelConfig& cfg = weights.config;
    if (static_cast<int>(code.code.size()) != cfg.extrinsic_dim)
        throw std::invalid_argument("decode: code has " + std::to_string(code.code.size()) + " entries, expected " +
                                    std::to_string(cfg.extrinsic_dim));
    Tape<float> tape(false);
    ParamBinder<float> p(tape, weights, false);
    std::vector<Var> levels;
    for (const auto& l : intrinsics.levels) levels.push_back(tape.leaf(detail::batch_of_one(l)));
    Var c = tape.leaf(Tensor<float>({1, cfg.extrinsic_dim}, code.code));
    Var out = decode_vars(tape, p, levels, c, alpha_override.value_or(cfg.alpha));
    ImageBuffer img = tensor_to_image(tape.value(out), 0);
    return img;
}

inline ImageBuffer reconstruct(const Weights& weights, const ImageBuffer& image) {
    auto [feats, code] = encode(weights, image);
    return decode(weights, feats, code);
}

inline ImageBuffer relight(const Weights& weights, const ImageBuffer& input, const ImageBuffer& reference) {
    detail::require_model_input(weights.config, input, "relight input");
    detail::require_model_input(weights.config, reference, "relight reference");
    auto feats = encode(weights, input).first;
    auto code = encode(weights, reference).second;
    return decode(weights, feats, code);
}

inline ImageBuffer estimate_albedo(const Weights& weights, const ImageBuffer& image) {
    auto [feats, code] = encode(weights, image);
    return decode(weights, feats, code, 0.0);
}

class DegenerateInterpolation : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

// Linear blend renormalized to unit length; endpoints return the inputs unchanged.
inline ExtrinsicCode interpolate_extrinsics(const ExtrinsicCode& a, const ExtrinsicCode& b, double t) {
    if (a.code.size() != b.code.size()) throw std::invalid_argument("interpolate_extrinsics: code length mismatch");
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("interpolate_extrinsics: t must lie in [0,1]");
    if (t == 0.0) return a;
    if (t == 1.0) return b;
    std::vector<double> blend(a.code.size());
    double sq = 0;
    for (std::size_t i = 0; i < blend.size(); ++i) {
        blend[i] = (1.0 - t) * a.code[i] + t * b.code[i];
        sq += blend[i] * blend[i];
    }
    const double norm = std::sqrt(sq);
    if (!(norm > 1e-12)) throw DegenerateInterpolation("interpolate_extrinsics: blend is the zero vector");
    ExtrinsicCode out;
    out.code.resize(blend.size());
    for (std::size_t i = 0; i < blend.size(); ++i) out.code[i] = static_cast<float>(blend[i] / norm);
    return out;
}

// Single-map form of the modulation used inside the decoder. feature: C x H x W;
// the head maps the code through fc1 -> SiLU -> fc2 to C channels.
inline Tensor<float> constrained_scale(const Tensor<float>& feature, const ExtrinsicCode& code, double alpha,
                                       const Tensor<float>& fc1_weight, const Tensor<float>& fc1_bias,
                                       const Tensor<float>& fc2_weight, const Tensor<float>& fc2_bias) {
    if (feature.rank() != 3) throw std::invalid_argument("constrained_scale: expected C x H x W feature map");
    if (fc2_weight.rank() != 2 || fc2_weight.dim(0) != feature.dim(0))
        throw std::invalid_argument("constrained_scale: head outputs " + std::to_string(fc2_weight.rank() == 2 ? fc2_weight.dim(0) : -1) +
                                    " channels, feature map has " + std::to_string(feature.dim(0)));
    Tape<float> tape(false);
    Var f = tape.leaf(detail::batch_of_one(feature));
    Var c = tape.leaf(Tensor<float>({1, static_cast<int>(code.code.size())}, code.code));
    Var m = ops::silu(tape, ops::linear(tape, c, tape.leaf_ref(fc1_weight, false), tape.leaf_ref(fc1_bias, false)));
    m = ops::linear(tape, m, tape.leaf_ref(fc2_weight, false), tape.leaf_ref(fc2_bias, false));
    return detail::single(tape.value(ops::constrained_scale(tape, f, m, alpha)), 0);
}

} // namespace latent_relight
