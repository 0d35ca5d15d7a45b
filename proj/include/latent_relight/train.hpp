#pragma once

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>
#include <zlib.h>
#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "data.hpp"
#include "losses.hpp"
#include "model.hpp"

namespace latent_relight {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

struct TrainConfig {
    int batch_size = 256;
    int epochs = 1000;
    // Overrides epochs when > 0.
    std::int64_t max_steps = 0;
    double learning_rate = 2e-4;
    double weight_decay = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    NoiseSchedule noise{};
    LossWeights losses{};
    double crop_ratio_min = 0.2;
    double crop_ratio_max = 1.0;
    std::uint64_t seed = 0;
    // Checkpoint period in steps; 0 writes only the final checkpoint.
    std::int64_t eval_every = 0;
    std::string out_dir = "run";

    void validate() const {
        if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
        if (epochs < 0) throw std::invalid_argument("train config: epochs must be >= 0");
        if (max_steps < 0) throw std::invalid_argument("train config: max_steps must be >= 0");
        if (!(learning_rate >= 0.0)) throw std::invalid_argument("train config: learning_rate must be >= 0");
        if (!(weight_decay >= 0.0)) throw std::invalid_argument("train config: weight_decay must be >= 0");
        if (!(crop_ratio_min > 0.0 && crop_ratio_max <= 1.0 && crop_ratio_min <= crop_ratio_max))
            throw std::invalid_argument("train config: crop ratios must satisfy 0 < min <= max <= 1");
        noise.validate();
        losses.validate();
    }
    bool operator==(const TrainConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"batch_size", c.batch_size},
                       {"epochs", c.epochs},
                       {"max_steps", c.max_steps},
                       {"learning_rate", c.learning_rate},
                       {"weight_decay", c.weight_decay},
                       {"beta1", c.beta1},
                       {"beta2", c.beta2},
                       {"adam_eps", c.adam_eps},
                       {"noise", c.noise},
                       {"losses", c.losses},
                       {"crop_ratio_min", c.crop_ratio_min},
                       {"crop_ratio_max", c.crop_ratio_max},
                       {"seed", c.seed},
                       {"eval_every", c.eval_every},
                       {"out_dir", c.out_dir}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    TrainConfig d;
    c.batch_size = j.value("batch_size", d.batch_size);
    c.epochs = j.value("epochs", d.epochs);
    c.max_steps = j.value("max_steps", d.max_steps);
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.beta1 = j.value("beta1", d.beta1);
    c.beta2 = j.value("beta2", d.beta2);
    c.adam_eps = j.value("adam_eps", d.adam_eps);
    c.noise = j.value("noise", d.noise);
    c.losses = j.value("losses", d.losses);
    c.crop_ratio_min = j.value("crop_ratio_min", d.crop_ratio_min);
    c.crop_ratio_max = j.value("crop_ratio_max", d.crop_ratio_max);
    c.seed = j.value("seed", d.seed);
    c.eval_every = j.value("eval_every", d.eval_every);
    c.out_dir = j.value("out_dir", d.out_dir);
}

// AdamW moments, keyed like the weights.
struct OptimizerState {
    std::int64_t t = 0;
    ParameterMap<float> m;
    ParameterMap<float> v;

    static OptimizerState zeros_like(const Weights& w) {
        OptimizerState s;
        for (const auto& [name, t] : w.params) {
            s.m.emplace(name, Tensor<float>(t.shape));
            s.v.emplace(name, Tensor<float>(t.shape));
        }
        return s;
    }
    bool operator==(const OptimizerState& o) const {
        if (t != o.t || m.size() != o.m.size() || v.size() != o.v.size()) return false;
        for (const auto& [k, a] : m) {
            auto it = o.m.find(k);
            if (it == o.m.end() || it->second.data != a.data) return false;
        }
        for (const auto& [k, a] : v) {
            auto it = o.v.find(k);
            if (it == o.v.end() || it->second.data != a.data) return false;
        }
        return true;
    }
};

// Decoupled weight decay, bias-corrected moments.
inline void adamw_update(Weights& weights, OptimizerState& state, const ParameterMap<float>& grads, const TrainConfig& cfg) {
    state.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (auto& [name, p] : weights.params) {
        const Tensor<float>& g = grads.at(name);
        Tensor<float>& m = state.m.at(name);
        Tensor<float>& v = state.v.at(name);
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = g[i];
            const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            if (cfg.learning_rate == 0.0) continue;
            const double update = (mi / bc1) / (std::sqrt(vi / bc2) + cfg.adam_eps) + cfg.weight_decay * p[i];
            p[i] = static_cast<float>(p[i] - cfg.learning_rate * update);
        }
    }
}

class NonFiniteLoss : public std::runtime_error {
public:
    NonFiniteLoss(const std::string& what, LossBreakdown b) : std::runtime_error(what), breakdown(b) {}
    LossBreakdown breakdown;
};

struct StepReport {
    std::int64_t step = 0;
    LossBreakdown breakdown;
    bool noise_active = false;
    double mean_sigma = 0.0;
    double wall_seconds = 0.0;
};

inline void to_json(nlohmann::json& j, const StepReport& r) {
    j = nlohmann::json(r.breakdown);
    j["step"] = r.step;
    j["noise_active"] = r.noise_active;
    j["sigma"] = r.mean_sigma;
    j["wall_time"] = r.wall_seconds;
}

namespace detail {

inline Tensor<double> rows_to_double(const Tensor<float>& t, int begin, int count) {
    Shape s = t.shape;
    const std::size_t stride = shape_numel(s) / s[0];
    s[0] = count;
    Tensor<double> out(s);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = t[begin * stride + i];
    return out;
}

// Stacks per-half gradients (double) back into one float batch gradient.
inline Tensor<float> stack_to_float(const Shape& shape, const Tensor<double>* first, const Tensor<double>* second) {
    Tensor<float> out(shape);
    std::size_t off = 0;
    for (const Tensor<double>* part : {first, second}) {
        if (part) {
            for (std::size_t i = 0; i < part->size(); ++i) out[off + i] = static_cast<float>((*part)[i]);
            off += part->size();
        } else {
            off += shape_numel(shape) / 2;
        }
    }
    return out;
}

inline std::string describe(const LossBreakdown& b) { return nlohmann::json(b).dump(); }

} // namespace detail

// One optimization step on B pairs. Encoder inputs carry warm-up noise; all
// pixel losses target the clean second image of each pair.
inline StepReport train_step(Weights& weights, OptimizerState& state, const std::vector<PairSample>& batch,
                             const TrainConfig& cfg, UniformityTarget& target, double epoch_fraction, Rng& rng) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    const int b = static_cast<int>(batch.size());
    StepReport report;
    report.noise_active = cfg.noise.active(epoch_fraction);

    std::vector<ImageBuffer> inputs, targets;
    inputs.reserve(2 * b);
    double sigma_sum = 0;
    for (const auto& pair : batch) {
        double sigma = 0;
        inputs.push_back(apply_noise(pair.image_a, cfg.noise, epoch_fraction, rng, &sigma));
        sigma_sum += sigma;
    }
    for (const auto& pair : batch) {
        double sigma = 0;
        inputs.push_back(apply_noise(pair.image_b, cfg.noise, epoch_fraction, rng, &sigma));
        sigma_sum += sigma;
        targets.push_back(pair.image_b);
    }
    report.mean_sigma = sigma_sum / (2.0 * b);

    Tape<float> tape(true);
    ParamBinder<float> params(tape, weights, true);
    Var x = tape.leaf(images_to_tensor<float>(inputs));
    EncoderVars enc = encode_vars(tape, params, x);
    std::vector<int> code_rows(2 * b);
    for (int i = 0; i < b; ++i) code_rows[i] = code_rows[b + i] = b + i;
    Var codes = ops::gather_batch(tape, enc.extrinsic, code_rows);
    Var out = decode_vars(tape, params, enc.intrinsics, codes, weights.config.alpha);

    BatchOutputs bo;
    const Tensor<float>& outv = tape.value(out);
    bo.relit = detail::rows_to_double(outv, 0, b);
    bo.recon = detail::rows_to_double(outv, b, b);
    bo.target = images_to_tensor<double>(targets);
    for (Var lv : enc.intrinsics) {
        bo.intrinsics_a.push_back(detail::rows_to_double(tape.value(lv), 0, b));
        bo.intrinsics_b.push_back(detail::rows_to_double(tape.value(lv), b, b));
    }
    bo.codes = detail::rows_to_double(tape.value(enc.extrinsic), 0, b);

    TotalLoss loss = total_loss(bo, cfg.losses, target, true);
    report.breakdown = loss.breakdown;
    if (!loss.breakdown.all_finite())
        throw NonFiniteLoss("non-finite loss: " + detail::describe(loss.breakdown), loss.breakdown);

    tape.accumulate_grad(out, detail::stack_to_float(outv.shape, &loss.grads.relit, &loss.grads.recon));
    for (std::size_t i = 0; i < enc.intrinsics.size(); ++i)
        tape.accumulate_grad(enc.intrinsics[i], detail::stack_to_float(tape.shape(enc.intrinsics[i]), &loss.grads.intrinsics_a[i],
                                                                       &loss.grads.intrinsics_b[i]));
    tape.accumulate_grad(enc.extrinsic, detail::stack_to_float(tape.shape(enc.extrinsic), &loss.grads.codes, nullptr));
    tape.backward();
    adamw_update(weights, state, params.gradients(), cfg);
    return report;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr char kCheckpointMagic[8] = {'L', 'R', 'E', 'L', 'C', 'K', 'P', 'T'};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class CheckpointVersionError : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};

class CheckpointIntegrityError : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};

struct Checkpoint {
    std::uint32_t format_version = kCheckpointVersion;
    ModelConfig model_config;
    TrainConfig train_config;
    std::int64_t step = 0;
    Weights weights;
    OptimizerState optimizer;
    // Step batches draw from streams derived from (seed, step), so the seed
    // plus the step counter is the complete sampling state.
    std::uint64_t rng_seed = 0;
    std::int64_t rng_next_stream = 0;
};

namespace detail {

inline std::uint32_t crc_of(const Tensor<float>& t) {
    return static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(t.ptr()), static_cast<uInt>(t.size() * sizeof(float))));
}

template <typename Int>
void put_le(std::string& out, Int v) {
    for (std::size_t i = 0; i < sizeof(Int); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <typename Int>
Int get_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(Int); ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return static_cast<Int>(v);
}

} // namespace detail

// Layout: 8-byte magic, u32 version, u64 header length, JSON header, then raw
// little-endian float32 arrays at the offsets listed in the header.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    std::vector<std::pair<std::string, const Tensor<float>*>> arrays;
    for (const auto& [name, t] : ck.weights.params) arrays.emplace_back("weights/" + name, &t);
    for (const auto& [name, t] : ck.optimizer.m) arrays.emplace_back("adam_m/" + name, &t);
    for (const auto& [name, t] : ck.optimizer.v) arrays.emplace_back("adam_v/" + name, &t);

    nlohmann::json header;
    header["format_version"] = ck.format_version;
    header["model_config"] = ck.model_config;
    header["train_config"] = ck.train_config;
    header["step"] = ck.step;
    header["optimizer"] = {{"t", ck.optimizer.t},
                           {"beta1", ck.train_config.beta1},
                           {"beta2", ck.train_config.beta2},
                           {"eps", ck.train_config.adam_eps}};
    header["rng"] = {{"seed", ck.rng_seed}, {"next_stream", ck.rng_next_stream}};
    nlohmann::json table = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : arrays) {
        const std::uint64_t bytes = t->size() * sizeof(float);
        table.push_back({{"name", name}, {"shape", t->shape}, {"offset", offset}, {"bytes", bytes}, {"crc32", detail::crc_of(*t)}});
        offset += bytes;
    }
    header["arrays"] = table;
    header["payload_bytes"] = offset;
    const std::string header_text = header.dump();

    std::string prefix(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::put_le<std::uint32_t>(prefix, ck.format_version);
    detail::put_le<std::uint64_t>(prefix, header_text.size());

    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open checkpoint for writing: " + tmp.string());
        out.write(prefix.data(), static_cast<std::streamsize>(prefix.size()));
        out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
        for (const auto& [_, t] : arrays)
            out.write(reinterpret_cast<const char*>(t->ptr()), static_cast<std::streamsize>(t->size() * sizeof(float)));
        out.flush();
        if (!out) throw IoError("failed writing checkpoint " + tmp.string() + " (disk full?)");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
    constexpr std::size_t prefix_len = sizeof kCheckpointMagic + 4 + 8;
    if (bytes.size() < prefix_len) throw CheckpointIntegrityError("checkpoint truncated before header: " + path.string());
    if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
        throw CheckpointError("not a checkpoint file (bad magic): " + path.string());
    const auto version = detail::get_le<std::uint32_t>(raw + 8);
    if (version != kCheckpointVersion)
        throw CheckpointVersionError("incompatible checkpoint format version " + std::to_string(version) + " (expected " +
                                     std::to_string(kCheckpointVersion) + "): " + path.string());
    const auto header_len = detail::get_le<std::uint64_t>(raw + 12);
    if (bytes.size() < prefix_len + header_len) throw CheckpointIntegrityError("checkpoint truncated in header: " + path.string());
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + prefix_len, bytes.begin() + static_cast<std::ptrdiff_t>(prefix_len + header_len));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointIntegrityError("corrupt checkpoint header in " + path.string() + ": " + e.what());
    }
    if (header.at("format_version").get<std::uint32_t>() != version)
        throw CheckpointVersionError("checkpoint header version disagrees with file prefix: " + path.string());
    const std::size_t payload_begin = prefix_len + header_len;
    const auto payload_bytes = header.at("payload_bytes").get<std::uint64_t>();
    if (bytes.size() != payload_begin + payload_bytes)
        throw CheckpointIntegrityError("checkpoint payload length " + std::to_string(bytes.size() - payload_begin) + " != expected " +
                                       std::to_string(payload_bytes) + ": " + path.string());

    Checkpoint ck;
    ck.format_version = version;
    ck.model_config = header.at("model_config").get<ModelConfig>();
    ck.train_config = header.at("train_config").get<TrainConfig>();
    ck.step = header.at("step").get<std::int64_t>();
    ck.optimizer.t = header.at("optimizer").at("t").get<std::int64_t>();
    ck.rng_seed = header.at("rng").at("seed").get<std::uint64_t>();
    ck.rng_next_stream = header.at("rng").at("next_stream").get<std::int64_t>();
    ck.weights.config = ck.model_config;
    for (const auto& entry : header.at("arrays")) {
        const auto name = entry.at("name").get<std::string>();
        const auto shape = entry.at("shape").get<Shape>();
        const auto offset = entry.at("offset").get<std::uint64_t>();
        const auto nbytes = entry.at("bytes").get<std::uint64_t>();
        if (nbytes != shape_numel(shape) * sizeof(float) || offset + nbytes > payload_bytes)
            throw CheckpointIntegrityError("checkpoint array table entry out of range: " + name);
        Tensor<float> t(shape);
        std::memcpy(t.ptr(), bytes.data() + payload_begin + offset, nbytes);
        if (detail::crc_of(t) != entry.at("crc32").get<std::uint32_t>())
            throw CheckpointIntegrityError("checksum mismatch for array " + name + " in " + path.string());
        const auto slash = name.find('/');
        const std::string kind = name.substr(0, slash), key = name.substr(slash + 1);
        if (kind == "weights")
            ck.weights.params.emplace(key, std::move(t));
        else if (kind == "adam_m")
            ck.optimizer.m.emplace(key, std::move(t));
        else if (kind == "adam_v")
            ck.optimizer.v.emplace(key, std::move(t));
        else
            throw CheckpointIntegrityError("unknown array kind in checkpoint: " + name);
    }
    // The stored arrays must match what the stored config would build.
    std::set<std::string> expected, found;
    for (const auto& s : detail::parameter_specs(ck.model_config)) expected.insert(s.name);
    for (const auto& [k, _] : ck.weights.params) found.insert(k);
    if (expected != found) throw CheckpointError("checkpoint weights do not match its model config: " + path.string());
    for (const auto& s : detail::parameter_specs(ck.model_config))
        if (ck.weights.params.at(s.name).shape != s.shape)
            throw CheckpointError("checkpoint array " + s.name + " has the wrong shape for its model config");
    return ck;
}

// Throws CheckpointError when a checkpoint cannot continue a run with these configs.
inline void require_compatible(const Checkpoint& ck, const ModelConfig& model, const TrainConfig& train) {
    if (!(ck.model_config == model)) throw CheckpointError("checkpoint model config differs from the requested one");
    if (ck.train_config.seed != train.seed) throw CheckpointError("checkpoint seed differs from the requested run seed");
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct FitOptions {
    std::optional<Checkpoint> resume;
    // Stop (and checkpoint) after this global step even if the schedule continues.
    std::optional<std::int64_t> stop_at_step;
    std::optional<std::filesystem::path> metrics_path; // JSON lines, appended
    std::optional<std::filesystem::path> checkpoint_dir;
    std::function<void(const StepReport&)> on_step;
};

inline std::int64_t steps_per_epoch(const std::vector<SceneRecord>& scenes, int batch_size) {
    std::int64_t images = 0;
    for (const auto& s : scenes) images += static_cast<std::int64_t>(s.images.size());
    return (images + batch_size - 1) / batch_size;
}

inline std::int64_t total_steps(const std::vector<SceneRecord>& scenes, const TrainConfig& cfg) {
    if (cfg.max_steps > 0) return cfg.max_steps;
    return static_cast<std::int64_t>(cfg.epochs) * steps_per_epoch(scenes, cfg.batch_size);
}

// Decoded-image cache; training sets at desk scale fit in memory.
class ImageCache {
public:
    const ImageBuffer& get(const std::filesystem::path& p) {
        auto it = cache_.find(p.string());
        if (it != cache_.end()) return it->second;
        return cache_.emplace(p.string(), read_png(p)).first->second;
    }
    ImageLoader loader() {
        return [this](const std::filesystem::path& p) { return get(p); };
    }

private:
    std::unordered_map<std::string, ImageBuffer> cache_;
};

namespace detail {

// Large per-step tensors are otherwise mmap'd and unmapped every step, paying
// page faults each time.
inline void keep_freed_memory() {
#ifdef __GLIBC__
    static const bool done = [] {
        mallopt(M_MMAP_THRESHOLD, 32 << 20);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
        mallopt(M_TOP_PAD, 64 << 20);
        return true;
    }();
    (void)done;
#endif
}

} // namespace detail

// Pure function of the rng state and the scene list.
inline std::vector<PairSample> make_batch(const std::vector<SceneRecord>& scenes, const TrainConfig& cfg, int out_size, Rng& rng,
                                          const ImageLoader& loader) {
    std::vector<PairSample> batch;
    batch.reserve(cfg.batch_size);
    for (int i = 0; i < cfg.batch_size; ++i)
        batch.push_back(paired_crop_resize(sample_training_pair(scenes, rng, loader), cfg.crop_ratio_min, cfg.crop_ratio_max, out_size, rng));
    return batch;
}

inline Checkpoint fit(const ModelConfig& model_config, const TrainConfig& train_config, const std::vector<SceneRecord>& scenes,
                      const FitOptions& options = {}) {
    model_config.validate();
    train_config.validate();
    if (scenes.empty()) throw std::invalid_argument("fit: no training scenes");
    detail::keep_freed_memory();

    Checkpoint ck;
    if (options.resume) {
        require_compatible(*options.resume, model_config, train_config);
        ck = *options.resume;
        ck.train_config = train_config;
    } else {
        ck.model_config = model_config;
        ck.train_config = train_config;
        ck.weights = init_model(model_config);
        ck.optimizer = OptimizerState::zeros_like(ck.weights);
        ck.rng_seed = train_config.seed;
    }

    const std::int64_t total = total_steps(scenes, train_config);
    const std::int64_t stop = options.stop_at_step ? std::min(*options.stop_at_step, total) : total;
    UniformityTarget target(train_config.seed);
    ImageCache cache;
    const auto loader = cache.loader();
    std::ofstream metrics;
    if (options.metrics_path) {
        metrics.open(*options.metrics_path, std::ios::app);
        if (!metrics) throw IoError("cannot open metrics log " + options.metrics_path->string());
    }
    if (options.checkpoint_dir) std::filesystem::create_directories(*options.checkpoint_dir);
    const auto start = std::chrono::steady_clock::now();

    auto write_checkpoint = [&](const std::string& name) {
        if (options.checkpoint_dir) save_checkpoint(*options.checkpoint_dir / name, ck);
    };

    for (std::int64_t step = ck.step; step < stop; ++step) {
        Rng rng = Rng::derive(train_config.seed, static_cast<std::uint64_t>(step));
        const double fraction = total > 0 ? static_cast<double>(step) / static_cast<double>(total) : 1.0;
        auto batch = make_batch(scenes, train_config, model_config.base_resolution, rng, loader);
        StepReport report = train_step(ck.weights, ck.optimizer, batch, train_config, target, fraction, rng);
        report.step = step;
        report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        ck.step = step + 1;
        ck.rng_next_stream = step + 1;
        if (metrics) {
            metrics << nlohmann::json(report).dump() << '\n';
            metrics.flush();
        }
        if (options.on_step) options.on_step(report);
        if (train_config.eval_every > 0 && ck.step % train_config.eval_every == 0 && ck.step < stop)
            write_checkpoint("step_" + std::to_string(ck.step) + ".ckpt");
    }
    write_checkpoint("final.ckpt");
    return ck;
}

} // namespace latent_relight
