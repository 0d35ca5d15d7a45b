#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "image.hpp"
#include "rng.hpp"

namespace latent_relight {

namespace fs = std::filesystem;

struct SceneRecord {
    std::string scene_id;
    std::map<std::string, fs::path> images; // lighting id -> path, sorted by id
    std::optional<fs::path> gt_albedo;

    std::vector<std::string> lighting_ids() const {
        std::vector<std::string> ids;
        for (const auto& [id, _] : images) ids.push_back(id);
        return ids;
    }
    bool operator==(const SceneRecord&) const = default;
};

struct PairSample {
    ImageBuffer image_a;
    ImageBuffer image_b;
    std::string scene_id;
    std::string lighting_a;
    std::string lighting_b;
};

// Scans <root>/<scene_id>/<lighting_id>.png; albedo.png is ground truth, not a lighting.
inline std::vector<SceneRecord> load_multi_illum(const fs::path& root, std::ostream* warnings = &std::cerr) {
    if (!fs::exists(root) || !fs::is_directory(root)) throw IoError("dataset root does not exist: " + root.string());
    std::vector<fs::path> dirs;
    for (const auto& entry : fs::directory_iterator(root))
        if (entry.is_directory()) dirs.push_back(entry.path());
    std::sort(dirs.begin(), dirs.end());

    std::vector<SceneRecord> scenes;
    for (const auto& dir : dirs) {
        SceneRecord rec;
        rec.scene_id = dir.filename().string();
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(dir))
            if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
        std::sort(files.begin(), files.end());
        std::optional<PngInfo> dims;
        for (const auto& f : files) {
            const PngInfo info = read_png_info(f);
            if (dims && (info.height != dims->height || info.width != dims->width))
                throw IoError("image dimensions differ within scene " + rec.scene_id + ": " + f.string());
            dims = info;
            const std::string stem = f.stem().string();
            if (stem == "albedo")
                rec.gt_albedo = f;
            else
                rec.images.emplace(stem, f);
        }
        if (rec.images.size() < 2) {
            if (warnings)
                *warnings << "warning: skipping scene " << rec.scene_id << " with " << rec.images.size() << " lighting(s)\n";
            continue;
        }
        scenes.push_back(std::move(rec));
    }
    return scenes;
}

// Source of decoded images; the default reads from disk every time.
using ImageLoader = std::function<ImageBuffer(const fs::path&)>;

inline ImageBuffer load_image(const fs::path& p) { return read_png(p); }

// Uniform scene, then an ordered pair of distinct lightings.
inline PairSample sample_training_pair(const std::vector<SceneRecord>& scenes, Rng& rng,
                                       const ImageLoader& loader = load_image) {
    std::vector<const SceneRecord*> eligible;
    for (const auto& s : scenes)
        if (s.images.size() >= 2) eligible.push_back(&s);
    if (eligible.empty()) throw std::invalid_argument("sample_training_pair: no scene with at least two lightings");
    const SceneRecord& scene = *eligible[rng.below(eligible.size())];
    const auto ids = scene.lighting_ids();
    const std::size_t i = rng.below(ids.size());
    std::size_t j = rng.below(ids.size() - 1);
    if (j >= i) ++j;
    PairSample out;
    out.scene_id = scene.scene_id;
    out.lighting_a = ids[i];
    out.lighting_b = ids[j];
    out.image_a = loader(scene.images.at(ids[i]));
    out.image_b = loader(scene.images.at(ids[j]));
    require_same_size(out.image_a, out.image_b, "sample_training_pair");
    return out;
}

struct CropWindow {
    int top = 0, left = 0, side = 0;
};

inline CropWindow sample_crop_window(int height, int width, double ratio_min, double ratio_max, Rng& rng) {
    if (!(ratio_min > 0.0 && ratio_max <= 1.0 && ratio_min <= ratio_max))
        throw std::invalid_argument("crop ratios must satisfy 0 < min <= max <= 1");
    const double ratio = ratio_min == ratio_max ? ratio_min : rng.uniform(ratio_min, ratio_max);
    const int side = static_cast<int>(std::lround(ratio * std::min(height, width)));
    if (side < 1) throw std::invalid_argument("crop side is smaller than one pixel");
    CropWindow w;
    w.side = side;
    w.top = rng.uniform_int(0, height - side);
    w.left = rng.uniform_int(0, width - side);
    return w;
}

// One square window shared by both images, then bilinear resize to out_size.
inline PairSample paired_crop_resize(const PairSample& pair, double ratio_min, double ratio_max, int out_size, Rng& rng) {
    if (out_size < 8) throw std::invalid_argument("paired_crop_resize: out_size must be >= 8");
    require_same_size(pair.image_a, pair.image_b, "paired_crop_resize");
    const CropWindow w = sample_crop_window(pair.image_a.height, pair.image_a.width, ratio_min, ratio_max, rng);
    PairSample out = pair;
    out.image_a = resize_bilinear(crop(pair.image_a, w.top, w.left, w.side, w.side), out_size, out_size);
    out.image_b = resize_bilinear(crop(pair.image_b, w.top, w.left, w.side, w.side), out_size, out_size);
    return out;
}

struct NoiseSchedule {
    double warmup_fraction = 0.4;
    double log_mean = -1.2;
    double log_std = 1.2;
    bool enabled = true;

    void validate() const {
        if (!(log_std > 0.0)) throw std::invalid_argument("noise schedule: log_std must be > 0");
        if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0))
            throw std::invalid_argument("noise schedule: warmup_fraction must lie in [0,1]");
    }
    bool active(double epoch_fraction) const { return enabled && epoch_fraction < warmup_fraction; }
    bool operator==(const NoiseSchedule&) const = default;
};

inline void to_json(nlohmann::json& j, const NoiseSchedule& s) {
    j = nlohmann::json{{"warmup_fraction", s.warmup_fraction},
                       {"log_mean", s.log_mean},
                       {"log_std", s.log_std},
                       {"enabled", s.enabled}};
}

inline void from_json(const nlohmann::json& j, NoiseSchedule& s) {
    NoiseSchedule d;
    s.warmup_fraction = j.value("warmup_fraction", d.warmup_fraction);
    s.log_mean = j.value("log_mean", d.log_mean);
    s.log_std = j.value("log_std", d.log_std);
    s.enabled = j.value("enabled", d.enabled);
}

// ln(sigma) ~ Normal(log_mean, log_std^2).
inline double sample_noise_sigma(const NoiseSchedule& schedule, Rng& rng) {
    return std::exp(rng.normal(schedule.log_mean, schedule.log_std));
}

// Adds sigma * N(0,1) per pixel-channel while warm-up is active; identity otherwise.
inline ImageBuffer apply_noise(const ImageBuffer& image, const NoiseSchedule& schedule, double epoch_fraction, Rng& rng,
                               double* sigma_out = nullptr) {
    if (!(epoch_fraction >= 0.0 && epoch_fraction <= 1.0))
        throw std::invalid_argument("apply_noise: epoch_fraction must lie in [0,1]");
    if (sigma_out) *sigma_out = 0.0;
    if (!schedule.active(epoch_fraction)) return image;
    const double sigma = sample_noise_sigma(schedule, rng);
    if (sigma_out) *sigma_out = sigma;
    ImageBuffer out = image;
    for (float& v : out.pixels) v = static_cast<float>(v + sigma * rng.normal());
    out.noisy = true;
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic multi-illumination scenes
// ---------------------------------------------------------------------------

struct SyntheticSceneSpec {
    int n_scenes = 32;
    int n_lights = 8;
    int image_size = 64;
    int n_albedo_regions = 6;
    double ambient = 0.2;
    std::uint64_t seed = 0;
    // Fixes every light color to white when set.
    bool white_lights = false;

    void validate() const {
        if (n_scenes < 1) throw std::invalid_argument("synthetic spec: n_scenes must be >= 1");
        if (n_lights < 2) throw std::invalid_argument("synthetic spec: n_lights must be >= 2");
        if (image_size < 16) throw std::invalid_argument("synthetic spec: image_size must be >= 16");
        if (n_albedo_regions < 0) throw std::invalid_argument("synthetic spec: n_albedo_regions must be >= 0");
        if (!(ambient >= 0.0 && ambient <= 1.0)) throw std::invalid_argument("synthetic spec: ambient must lie in [0,1]");
    }
};

inline void to_json(nlohmann::json& j, const SyntheticSceneSpec& s) {
    j = nlohmann::json{{"n_scenes", s.n_scenes},   {"n_lights", s.n_lights}, {"image_size", s.image_size},
                       {"n_albedo_regions", s.n_albedo_regions}, {"ambient", s.ambient}, {"seed", s.seed},
                       {"white_lights", s.white_lights}};
}

struct DirectionalLight {
    std::array<double, 3> direction; // unit, pointing from surface toward the light
    std::array<double, 3> color;     // each channel in (0, 1]
};

struct SyntheticScene {
    ImageBuffer albedo;
    std::vector<std::array<double, 3>> normals; // per pixel, unit
    std::vector<ImageBuffer> lit;               // one per light
};

// Lights are shared by every scene so a lighting id means the same light
// across the dataset.
inline std::vector<DirectionalLight> synthetic_lights(const SyntheticSceneSpec& spec) {
    Rng rng = Rng::derive(spec.seed, 0xA11CEull);
    std::vector<DirectionalLight> lights(spec.n_lights);
    for (auto& l : lights) {
        const double z = rng.uniform(0.35, 0.95);
        const double phi = rng.uniform(0.0, 2.0 * M_PI);
        const double r = std::sqrt(1.0 - z * z);
        l.direction = {r * std::cos(phi), r * std::sin(phi), z};
        for (auto& c : l.color) c = spec.white_lights ? 1.0 : rng.uniform(0.55, 1.0);
    }
    return lights;
}

inline std::vector<double> box_blur(const std::vector<double>& in, int size, int radius) {
    std::vector<double> tmp(in.size()), out(in.size());
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            double acc = 0;
            int cnt = 0;
            for (int i = std::max(0, x - radius); i <= std::min(size - 1, x + radius); ++i, ++cnt) acc += in[y * size + i];
            tmp[y * size + x] = acc / cnt;
        }
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            double acc = 0;
            int cnt = 0;
            for (int i = std::max(0, y - radius); i <= std::min(size - 1, y + radius); ++i, ++cnt) acc += tmp[i * size + x];
            out[y * size + x] = acc / cnt;
        }
    return out;
}

inline SyntheticScene render_synthetic_scene(const SyntheticSceneSpec& spec, int scene_index,
                                             const std::vector<DirectionalLight>& lights) {
    const int n = spec.image_size;
    Rng rng = Rng::derive(spec.seed, 1000 + static_cast<std::uint64_t>(scene_index));
    SyntheticScene scene;

    // Albedo: random base color overpainted by rectangles and ellipses.
    scene.albedo = ImageBuffer(n, n);
    std::array<double, 3> base;
    for (auto& c : base) c = rng.uniform(0.25, 0.9);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x)
            for (int c = 0; c < 3; ++c) scene.albedo.at(y, x, c) = static_cast<float>(base[c]);
    for (int r = 0; r < spec.n_albedo_regions; ++r) {
        std::array<double, 3> color;
        for (auto& c : color) c = rng.uniform(0.1, 1.0);
        const bool ellipse = rng.uniform() < 0.5;
        const double cx = rng.uniform(0.0, n), cy = rng.uniform(0.0, n);
        const double rx = rng.uniform(0.08, 0.35) * n, ry = rng.uniform(0.08, 0.35) * n;
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
                const bool inside = ellipse ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
                if (inside)
                    for (int c = 0; c < 3; ++c) scene.albedo.at(y, x, c) = static_cast<float>(color[c]);
            }
    }
    // Snap to the 8-bit grid so the stored albedo is exactly what renders used.
    for (float& v : scene.albedo.pixels) v = quantize8(v) / 255.0f;

    // Normals from a smoothed random heightfield.
    std::vector<double> height(static_cast<std::size_t>(n) * n);
    for (auto& h : height) h = rng.normal();
    const int radius = std::max(1, n / 16);
    height = box_blur(box_blur(box_blur(height, n, radius), n, radius), n, radius);
    double hmax = 0;
    for (double h : height) hmax = std::max(hmax, std::abs(h));
    const double relief = rng.uniform(2.0, 5.0) * n / 64.0 / std::max(hmax, 1e-12);
    scene.normals.resize(height.size());
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            const auto hh = [&](int yy, int xx) {
                return height[std::clamp(yy, 0, n - 1) * n + std::clamp(xx, 0, n - 1)] * relief;
            };
            const double gx = 0.5 * (hh(y, x + 1) - hh(y, x - 1));
            const double gy = 0.5 * (hh(y + 1, x) - hh(y - 1, x));
            const double len = std::sqrt(gx * gx + gy * gy + 1.0);
            scene.normals[y * n + x] = {-gx / len, -gy / len, 1.0 / len};
        }

    for (const auto& light : lights) {
        ImageBuffer img(n, n);
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                const auto& nv = scene.normals[y * n + x];
                const double ndotl =
                    std::max(0.0, nv[0] * light.direction[0] + nv[1] * light.direction[1] + nv[2] * light.direction[2]);
                for (int c = 0; c < 3; ++c) {
                    const double shade = spec.ambient + (1.0 - spec.ambient) * ndotl * light.color[c];
                    img.at(y, x, c) = static_cast<float>(std::clamp(scene.albedo.at(y, x, c) * shade, 0.0, 1.0));
                }
            }
        scene.lit.push_back(std::move(img));
    }
    return scene;
}

inline std::string synthetic_scene_id(int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "scene_%04d", i);
    return buf;
}

inline std::string synthetic_lighting_id(int k) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "light_%02d", k);
    return buf;
}

// Writes <out>/<scene>/<light>.png plus albedo.png and returns the records.
inline std::vector<SceneRecord> generate_synthetic_dataset(const SyntheticSceneSpec& spec, const fs::path& out_path) {
    spec.validate();
    std::error_code ec;
    fs::create_directories(out_path, ec);
    if (ec) throw IoError("cannot create dataset directory " + out_path.string() + ": " + ec.message());
    const auto lights = synthetic_lights(spec);
    std::vector<SceneRecord> records;
    for (int s = 0; s < spec.n_scenes; ++s) {
        const SyntheticScene scene = render_synthetic_scene(spec, s, lights);
        SceneRecord rec;
        rec.scene_id = synthetic_scene_id(s);
        const fs::path dir = out_path / rec.scene_id;
        fs::create_directories(dir, ec);
        if (ec) throw IoError("cannot create scene directory " + dir.string() + ": " + ec.message());
        for (int k = 0; k < spec.n_lights; ++k) {
            const fs::path p = dir / (synthetic_lighting_id(k) + ".png");
            write_png(p, scene.lit[k]);
            rec.images.emplace(synthetic_lighting_id(k), p);
        }
        const fs::path ap = dir / "albedo.png";
        write_png(ap, scene.albedo);
        rec.gt_albedo = ap;
        records.push_back(std::move(rec));
    }
    return records;
}

// ---------------------------------------------------------------------------
// Pairwise lightness judgments
// ---------------------------------------------------------------------------

// Label names the lighter point; Equal means no noticeable difference.
enum class Lighter { First, Second, Equal };

inline const char* to_string(Lighter l) {
    switch (l) {
    case Lighter::First: return "1";
    case Lighter::Second: return "2";
    case Lighter::Equal: return "E";
    }
    return "?";
}

struct JudgmentPoint {
    std::int64_t id;
    double x; // relative column in [0,1]
    double y; // relative row in [0,1]
};

struct Comparison {
    std::int64_t point1;
    std::int64_t point2;
    Lighter label;
    double weight;
};

struct JudgmentSet {
    std::vector<JudgmentPoint> points;
    std::vector<Comparison> comparisons;

    const JudgmentPoint& point(std::int64_t id) const {
        for (const auto& p : points)
            if (p.id == id) return p;
        throw std::out_of_range("unknown judgment point " + std::to_string(id));
    }

    // Throws std::invalid_argument naming the first bad comparison.
    void validate() const {
        std::map<std::int64_t, int> ids;
        for (const auto& p : points) ids[p.id]++;
        for (std::size_t i = 0; i < comparisons.size(); ++i) {
            const auto& c = comparisons[i];
            if (!ids.count(c.point1) || !ids.count(c.point2))
                throw std::invalid_argument("judgments: comparison " + std::to_string(i) + " references an undeclared point");
            if (!(c.weight >= 0.0) || !std::isfinite(c.weight))
                throw std::invalid_argument("judgments: comparison " + std::to_string(i) + " has a negative or non-finite weight");
        }
    }
};

// IIW release schema. The file's "darker" field names the darker point, so
// "1" maps to Lighter::Second and "2" to Lighter::First.
inline JudgmentSet parse_iiw_judgments(const nlohmann::json& doc) {
    JudgmentSet set;
    for (const auto& p : doc.at("intrinsic_points"))
        set.points.push_back({p.at("id").get<std::int64_t>(), p.at("x").get<double>(), p.at("y").get<double>()});
    for (std::size_t i = 0; i < doc.at("intrinsic_comparisons").size(); ++i) {
        const auto& c = doc.at("intrinsic_comparisons")[i];
        const std::string darker = c.at("darker").get<std::string>();
        Lighter label;
        if (darker == "1")
            label = Lighter::Second;
        else if (darker == "2")
            label = Lighter::First;
        else if (darker == "E")
            label = Lighter::Equal;
        else
            throw std::invalid_argument("judgments: comparison " + std::to_string(i) + " has unknown label '" + darker + "'");
        set.comparisons.push_back(
            {c.at("point1").get<std::int64_t>(), c.at("point2").get<std::int64_t>(), label, c.at("darker_score").get<double>()});
    }
    set.validate();
    return set;
}

inline JudgmentSet load_iiw_judgments(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open judgment file: " + path.string());
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed judgment file " + path.string() + ": " + e.what());
    }
    try {
        return parse_iiw_judgments(doc);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("judgment file " + path.string() + " does not follow the IIW schema: " + e.what());
    }
}

} // namespace latent_relight
