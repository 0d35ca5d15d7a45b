#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "data.hpp"
#include "image.hpp"
#include "losses.hpp"
#include "model.hpp"
#include "rng.hpp"

namespace latent_relight {

inline double rmse(const ImageBuffer& pred, const ImageBuffer& target) {
    require_same_size(pred, target, "rmse");
    if (pred.size() == 0) throw std::invalid_argument("rmse: empty images");
    double se = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = static_cast<double>(pred.pixels[i]) - target.pixels[i];
        se += d * d;
    }
    return std::sqrt(se / pred.size());
}

// Per-channel least-squares gain k_c = <p_c, t_c> / <p_c, p_c>; an all-zero
// channel keeps gain 1. Output is not clamped.
inline ImageBuffer color_correct(const ImageBuffer& pred, const ImageBuffer& target) {
    require_same_size(pred, target, "color_correct");
    ImageBuffer out = pred;
    const std::size_t n = static_cast<std::size_t>(pred.height) * pred.width;
    for (int c = 0; c < 3; ++c) {
        double pt = 0, pp = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const double p = pred.pixels[3 * i + c];
            pt += p * target.pixels[3 * i + c];
            pp += p * p;
        }
        const double k = pp > 0 ? pt / pp : 1.0;
        for (std::size_t i = 0; i < n; ++i) out.pixels[3 * i + c] = static_cast<float>(k * pred.pixels[3 * i + c]);
    }
    out.noisy = false;
    return out;
}

// min over k >= 0 of ||k pred - gt|| / ||gt||.
inline double synthetic_albedo_error(const ImageBuffer& pred, const ImageBuffer& gt) {
    require_same_size(pred, gt, "synthetic_albedo_error");
    double pg = 0, pp = 0, gg = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double p = pred.pixels[i], g = gt.pixels[i];
        pg += p * g;
        pp += p * p;
        gg += g * g;
    }
    if (!(gg > 0)) throw std::invalid_argument("synthetic_albedo_error: ground truth is all zero");
    const double k = pp > 0 ? std::max(0.0, pg / pp) : 0.0;
    double se = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = k * pred.pixels[i] - gt.pixels[i];
        se += d * d;
    }
    return std::sqrt(se) / std::sqrt(gg);
}

// Mean over levels of the per-location L2 distance between channel vectors.
inline double intrinsic_feature_distance(const IntrinsicFeatures& a, const IntrinsicFeatures& b) {
    if (a.levels.size() != b.levels.size() || a.levels.empty())
        throw std::invalid_argument("intrinsic_feature_distance: level count mismatch");
    double total = 0;
    for (std::size_t l = 0; l < a.levels.size(); ++l) {
        const auto& fa = a.levels[l];
        const auto& fb = b.levels[l];
        require_same_shape(fa.shape, fb.shape, "intrinsic_feature_distance");
        const int c = fa.shape[0], hw = fa.shape[1] * fa.shape[2];
        double sum = 0;
        for (int i = 0; i < hw; ++i) {
            double d2 = 0;
            for (int ch = 0; ch < c; ++ch) {
                const double d = static_cast<double>(fa[static_cast<std::size_t>(ch) * hw + i]) - fb[static_cast<std::size_t>(ch) * hw + i];
                d2 += d * d;
            }
            sum += std::sqrt(d2);
        }
        total += sum / hw;
    }
    return total / static_cast<double>(a.levels.size());
}

// ---------------------------------------------------------------------------
// Relighting evaluation
// ---------------------------------------------------------------------------

struct RelightPair {
    int input_scene = 0;
    std::string input_lighting;
    int reference_scene = 0;
    std::string reference_lighting;
};

struct RelightRow {
    std::string scene;
    std::string input_lighting;
    std::string reference_scene;
    std::string reference_lighting;
    double raw_rmse = 0, raw_ssim = 0, corrected_rmse = 0, corrected_ssim = 0;
};

struct RelightReport {
    std::vector<RelightRow> rows;
    std::size_t skipped = 0;
    double mean_raw_rmse = 0, mean_raw_ssim = 0, mean_corrected_rmse = 0, mean_corrected_ssim = 0;
    int n_refs = 0;
    std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const RelightRow& r) {
    j = nlohmann::json{{"scene", r.scene},
                       {"input_lighting", r.input_lighting},
                       {"reference_scene", r.reference_scene},
                       {"reference_lighting", r.reference_lighting},
                       {"raw_rmse", r.raw_rmse},
                       {"raw_ssim", r.raw_ssim},
                       {"corrected_rmse", r.corrected_rmse},
                       {"corrected_ssim", r.corrected_ssim}};
}

inline void to_json(nlohmann::json& j, const RelightReport& r) {
    j = nlohmann::json{{"rows", r.rows},
                       {"skipped", r.skipped},
                       {"n_refs", r.n_refs},
                       {"seed", r.seed},
                       {"mean_raw_rmse", r.mean_raw_rmse},
                       {"mean_raw_ssim", r.mean_raw_ssim},
                       {"mean_corrected_rmse", r.mean_corrected_rmse},
                       {"mean_corrected_ssim", r.mean_corrected_ssim}};
}

// For every (scene, lighting) input: n_refs references from other scenes under
// a different lighting id. Depends only on (seed, scenes).
inline std::vector<RelightPair> make_relight_pairs(const std::vector<SceneRecord>& scenes, int n_refs, std::uint64_t seed) {
    if (n_refs < 1) throw std::invalid_argument("eval_relight: n_refs must be >= 1");
    if (scenes.size() < 2) throw std::invalid_argument("eval_relight: references need at least two scenes");
    Rng rng = Rng::derive(seed, 0x5E1EC7ull);
    std::vector<RelightPair> pairs;
    for (int s = 0; s < static_cast<int>(scenes.size()); ++s) {
        for (const auto& [lighting, _] : scenes[s].images) {
            for (int r = 0; r < n_refs; ++r) {
                int ref = static_cast<int>(rng.below(scenes.size() - 1));
                if (ref >= s) ++ref;
                std::vector<std::string> options;
                for (const auto& [id, __] : scenes[ref].images)
                    if (id != lighting) options.push_back(id);
                if (options.empty()) options = scenes[ref].lighting_ids();
                pairs.push_back({s, lighting, ref, options[rng.below(options.size())]});
            }
        }
    }
    return pairs;
}

using RelightFn = std::function<ImageBuffer(const ImageBuffer& input, const ImageBuffer& reference)>;

// Scores any relighting function on the fixed pair list. Images are resized to
// `resolution` before use. Pairs whose reference lighting is missing from the
// input scene are counted in `skipped`.
inline RelightReport eval_relight(const RelightFn& model, const std::vector<SceneRecord>& scenes, int n_refs, std::uint64_t seed,
                                  int resolution, const ImageLoader& loader = load_image) {
    RelightReport report;
    report.n_refs = n_refs;
    report.seed = seed;
    auto fetch = [&](const fs::path& p) {
        ImageBuffer img = loader(p);
        if (img.height != resolution || img.width != resolution) img = resize_bilinear(img, resolution, resolution);
        return img;
    };
    for (const auto& pair : make_relight_pairs(scenes, n_refs, seed)) {
        const SceneRecord& in_scene = scenes[pair.input_scene];
        const SceneRecord& ref_scene = scenes[pair.reference_scene];
        auto target_it = in_scene.images.find(pair.reference_lighting);
        if (target_it == in_scene.images.end()) {
            ++report.skipped;
            continue;
        }
        const ImageBuffer input = fetch(in_scene.images.at(pair.input_lighting));
        const ImageBuffer reference = fetch(ref_scene.images.at(pair.reference_lighting));
        const ImageBuffer target = fetch(target_it->second);
        const ImageBuffer pred = model(input, reference);
        const ImageBuffer corrected = color_correct(pred, target);
        RelightRow row{in_scene.scene_id, pair.input_lighting, ref_scene.scene_id, pair.reference_lighting,
                       rmse(pred, target), ssim(pred, target), rmse(corrected, target), ssim(corrected, target)};
        report.rows.push_back(row);
    }
    if (!report.rows.empty()) {
        for (const auto& r : report.rows) {
            report.mean_raw_rmse += r.raw_rmse;
            report.mean_raw_ssim += r.raw_ssim;
            report.mean_corrected_rmse += r.corrected_rmse;
            report.mean_corrected_ssim += r.corrected_ssim;
        }
        const double n = static_cast<double>(report.rows.size());
        report.mean_raw_rmse /= n;
        report.mean_raw_ssim /= n;
        report.mean_corrected_rmse /= n;
        report.mean_corrected_ssim /= n;
    }
    return report;
}

inline RelightReport eval_relight(const Weights& weights, const std::vector<SceneRecord>& scenes, int n_refs, std::uint64_t seed,
                                  const ImageLoader& loader = load_image) {
    return eval_relight([&](const ImageBuffer& in, const ImageBuffer& ref) { return relight(weights, in, ref); }, scenes, n_refs,
                        seed, weights.config.base_resolution, loader);
}

// ---------------------------------------------------------------------------
// WHDR
// ---------------------------------------------------------------------------

struct LightnessMap {
    int height = 0;
    int width = 0;
    std::vector<double> values; // row-major

    static LightnessMap from_image(const ImageBuffer& img) { return {img.height, img.width, lightness(img)}; }
    double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

struct WhdrResult {
    double whdr = 0;
    double delta = 0;
    std::size_t n_comparisons = 0;
    double total_weight = 0;
    double disagreement_weight = 0;
};

inline void to_json(nlohmann::json& j, const WhdrResult& r) {
    j = nlohmann::json{{"whdr", r.whdr},
                       {"delta", r.delta},
                       {"n_comparisons", r.n_comparisons},
                       {"total_weight", r.total_weight},
                       {"disagreement_weight", r.disagreement_weight}};
}

// Ratio test with threshold delta; a zero denominator counts as +infinity.
inline Lighter classify_lightness(double r1, double r2, double delta) {
    const double inf = std::numeric_limits<double>::infinity();
    const double ratio12 = r2 > 0 ? r1 / r2 : (r1 > 0 ? inf : 0.0);
    const double ratio21 = r1 > 0 ? r2 / r1 : (r2 > 0 ? inf : 0.0);
    if (ratio12 > 1.0 + delta) return Lighter::First;
    if (ratio21 > 1.0 + delta) return Lighter::Second;
    return Lighter::Equal;
}

// Nearest pixel for a relative coordinate in [0,1].
inline int relative_to_pixel(double rel, int extent, const char* axis) {
    if (!(rel >= 0.0 && rel <= 1.0))
        throw std::out_of_range(std::string("judgment point outside image along ") + axis + ": " + std::to_string(rel));
    return std::min(extent - 1, static_cast<int>(rel * extent));
}

inline WhdrResult whdr(const LightnessMap& map, const JudgmentSet& judgments, double delta) {
    if (!(delta >= 0.0)) throw std::invalid_argument("whdr: delta must be >= 0");
    if (map.height < 1 || map.width < 1) throw std::invalid_argument("whdr: empty lightness map");
    WhdrResult res;
    res.delta = delta;
    res.n_comparisons = judgments.comparisons.size();
    for (const auto& c : judgments.comparisons) {
        const JudgmentPoint& p1 = judgments.point(c.point1);
        const JudgmentPoint& p2 = judgments.point(c.point2);
        const double r1 = map.at(relative_to_pixel(p1.y, map.height, "y"), relative_to_pixel(p1.x, map.width, "x"));
        const double r2 = map.at(relative_to_pixel(p2.y, map.height, "y"), relative_to_pixel(p2.x, map.width, "x"));
        res.total_weight += c.weight;
        if (classify_lightness(r1, r2, delta) != c.label) res.disagreement_weight += c.weight;
    }
    res.whdr = res.total_weight > 0 ? res.disagreement_weight / res.total_weight : 0.0;
    return res;
}

inline std::vector<double> default_delta_grid() {
    std::vector<double> g;
    for (int k = 1; k <= 30; ++k) g.push_back(0.02 * k);
    return g;
}

// Pooled WHDR: total disagreeing weight over total weight across all sets.
inline double pooled_whdr(const std::vector<LightnessMap>& maps, const std::vector<JudgmentSet>& sets, double delta) {
    if (maps.size() != sets.size()) throw std::invalid_argument("pooled_whdr: maps and judgment sets are not aligned");
    double bad = 0, total = 0;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        const WhdrResult r = whdr(maps[i], sets[i], delta);
        bad += r.disagreement_weight;
        total += r.total_weight;
    }
    return total > 0 ? bad / total : 0.0;
}

// Grid value minimizing pooled disagreement; ties go to the smaller delta.
// Values within 1e-12 count as tied, since summation order can split equal sums.
inline double tune_delta(const std::vector<LightnessMap>& maps, const std::vector<JudgmentSet>& sets,
                         std::vector<double> grid = default_delta_grid()) {
    if (grid.empty()) throw std::invalid_argument("tune_delta: empty grid");
    if (maps.empty() || sets.empty()) throw std::invalid_argument("tune_delta: no albedo maps or judgments");
    if (maps.size() != sets.size()) throw std::invalid_argument("tune_delta: maps and judgment sets are not aligned");
    std::sort(grid.begin(), grid.end());
    double best_delta = grid.front();
    double best = std::numeric_limits<double>::infinity();
    for (double d : grid) {
        const double v = pooled_whdr(maps, sets, d);
        if (v < best - 1e-12) {
            best = v;
            best_delta = d;
        }
    }
    return best_delta;
}

} // namespace latent_relight
