#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "image.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace latent_relight {

struct LossWeights {
    double w_l2 = 10.0;
    double w_ssim = 0.1;
    double w_grad = 1.0;
    double w_intrinsic = 1e-1;
    double w_intrinsic_reg = 1e-3;
    double w_extrinsic = 1e-4;
    double lambda_distortion = 0.5;

    void validate() const {
        for (double w : {w_l2, w_ssim, w_grad, w_intrinsic, w_intrinsic_reg, w_extrinsic})
            if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("loss weights must be finite and >= 0");
        if (!(lambda_distortion > 0.0)) throw std::invalid_argument("lambda_distortion must be > 0");
    }

    bool operator==(const LossWeights&) const = default;
};

inline void to_json(nlohmann::json& j, const LossWeights& w) {
    j = nlohmann::json{{"w_l2", w.w_l2},
                       {"w_ssim", w.w_ssim},
                       {"w_grad", w.w_grad},
                       {"w_intrinsic", w.w_intrinsic},
                       {"w_intrinsic_reg", w.w_intrinsic_reg},
                       {"w_extrinsic", w.w_extrinsic},
                       {"lambda_distortion", w.lambda_distortion}};
}

inline void from_json(const nlohmann::json& j, LossWeights& w) {
    LossWeights d;
    w.w_l2 = j.value("w_l2", d.w_l2);
    w.w_ssim = j.value("w_ssim", d.w_ssim);
    w.w_grad = j.value("w_grad", d.w_grad);
    w.w_intrinsic = j.value("w_intrinsic", d.w_intrinsic);
    w.w_intrinsic_reg = j.value("w_intrinsic_reg", d.w_intrinsic_reg);
    w.w_extrinsic = j.value("w_extrinsic", d.w_extrinsic);
    w.lambda_distortion = j.value("lambda_distortion", d.lambda_distortion);
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

namespace ssim_detail {

constexpr int kRadius = 5; // 11 x 11 window
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

inline const std::array<double, 2 * kRadius + 1>& taps() {
    static const auto t = [] {
        std::array<double, 2 * kRadius + 1> a{};
        for (int i = -kRadius; i <= kRadius; ++i) a[i + kRadius] = std::exp(-(i * i) / (2.0 * kSigma * kSigma));
        return a;
    }();
    return t;
}

// Gaussian blur of one H x W plane. Windows are truncated at the border and
// renormalized over the taps that fall inside the image, so a constant plane
// stays constant.
class Blur {
public:
    Blur(int h, int w) : h_(h), w_(w), norm_y_(h), norm_x_(w) {
        fill_norms(norm_y_, h);
        fill_norms(norm_x_, w);
    }

    void apply(const double* in, double* out) const {
        std::vector<double> tmp(static_cast<std::size_t>(h_) * w_);
        const auto& g = taps();
        for (int y = 0; y < h_; ++y)
            for (int x = 0; x < w_; ++x) {
                double acc = 0;
                for (int i = std::max(-kRadius, -x); i <= std::min(kRadius, w_ - 1 - x); ++i)
                    acc += g[i + kRadius] * in[y * w_ + x + i];
                tmp[y * w_ + x] = acc / norm_x_[x];
            }
        for (int y = 0; y < h_; ++y)
            for (int x = 0; x < w_; ++x) {
                double acc = 0;
                for (int i = std::max(-kRadius, -y); i <= std::min(kRadius, h_ - 1 - y); ++i)
                    acc += g[i + kRadius] * tmp[(y + i) * w_ + x];
                out[y * w_ + x] = acc / norm_y_[y];
            }
    }

    // Adjoint of apply, accumulated into out.
    void apply_transpose_add(const double* in, double* out) const {
        std::vector<double> tmp(static_cast<std::size_t>(h_) * w_, 0.0);
        const auto& g = taps();
        for (int y = 0; y < h_; ++y)
            for (int x = 0; x < w_; ++x) {
                const double v = in[y * w_ + x] / norm_y_[y];
                for (int i = std::max(-kRadius, -y); i <= std::min(kRadius, h_ - 1 - y); ++i)
                    tmp[(y + i) * w_ + x] += g[i + kRadius] * v;
            }
        for (int y = 0; y < h_; ++y)
            for (int x = 0; x < w_; ++x) {
                const double v = tmp[y * w_ + x] / norm_x_[x];
                for (int i = std::max(-kRadius, -x); i <= std::min(kRadius, w_ - 1 - x); ++i)
                    out[y * w_ + x + i] += g[i + kRadius] * v;
            }
    }

private:
    static void fill_norms(std::vector<double>& norms, int n) {
        const auto& g = taps();
        for (int p = 0; p < n; ++p) {
            double s = 0;
            for (int i = std::max(-kRadius, -p); i <= std::min(kRadius, n - 1 - p); ++i) s += g[i + kRadius];
            norms[p] = s;
        }
    }

    int h_, w_;
    std::vector<double> norm_y_, norm_x_;
};

} // namespace ssim_detail

struct SsimResult {
    double value = 0.0;
    Tensor<double> grad_a; // d value / d a; empty unless requested
};

// Mean SSIM over all N x C planes of two N x C x H x W tensors (dynamic range 1).
inline SsimResult ssim_with_grad(const Tensor<double>& a, const Tensor<double>& b, bool want_grad) {
    require_same_shape(a.shape, b.shape, "ssim");
    if (a.rank() != 4) throw std::invalid_argument("ssim: expected N x C x H x W tensors");
    using namespace ssim_detail;
    const int planes = a.dim(0) * a.dim(1), h = a.dim(2), w = a.dim(3);
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    const double count = static_cast<double>(planes) * hw;
    const Blur blur(h, w);
    SsimResult res;
    if (want_grad) res.grad_a = Tensor<double>(a.shape);
    std::vector<double> sq_a(hw), sq_b(hw), prod(hw), ma(hw), mb(hw), qa(hw), qb(hw), qab(hw);
    std::vector<double> g_m(hw), g_qa(hw), g_qab(hw);
    double total = 0;
    for (int p = 0; p < planes; ++p) {
        const double* pa = a.ptr() + p * hw;
        const double* pb = b.ptr() + p * hw;
        for (std::size_t i = 0; i < hw; ++i) {
            sq_a[i] = pa[i] * pa[i];
            sq_b[i] = pb[i] * pb[i];
            prod[i] = pa[i] * pb[i];
        }
        blur.apply(pa, ma.data());
        blur.apply(pb, mb.data());
        blur.apply(sq_a.data(), qa.data());
        blur.apply(sq_b.data(), qb.data());
        blur.apply(prod.data(), qab.data());
        for (std::size_t i = 0; i < hw; ++i) {
            const double A1 = 2 * ma[i] * mb[i] + kC1;
            const double A2 = 2 * (qab[i] - ma[i] * mb[i]) + kC2;
            const double B1 = ma[i] * ma[i] + mb[i] * mb[i] + kC1;
            const double B2 = (qa[i] - ma[i] * ma[i]) + (qb[i] - mb[i] * mb[i]) + kC2;
            const double s = (A1 * A2) / (B1 * B2);
            total += s;
            if (want_grad) {
                const double inv = 1.0 / (count * B1 * B2);
                // Partials of s w.r.t. the blurred moments of a, scaled by d mean / d s.
                g_m[i] = inv * (2 * mb[i] * A2 - 2 * mb[i] * A1) - (s / count) * (2 * ma[i] / B1 - 2 * ma[i] / B2);
                g_qa[i] = -(s / count) / B2;
                g_qab[i] = 2 * A1 * inv;
            }
        }
        if (want_grad) {
            double* ga = res.grad_a.ptr() + p * hw;
            std::vector<double> t_qa(hw, 0.0), t_qab(hw, 0.0);
            blur.apply_transpose_add(g_m.data(), ga);
            blur.apply_transpose_add(g_qa.data(), t_qa.data());
            blur.apply_transpose_add(g_qab.data(), t_qab.data());
            for (std::size_t i = 0; i < hw; ++i) ga[i] += 2 * pa[i] * t_qa[i] + pb[i] * t_qab[i];
        }
    }
    res.value = total / count;
    return res;
}

inline Tensor<double> image_to_planes(const ImageBuffer& img) { return images_to_tensor<double>({img}); }

inline double ssim(const ImageBuffer& a, const ImageBuffer& b) {
    require_same_size(a, b, "ssim");
    return ssim_with_grad(image_to_planes(a), image_to_planes(b), false).value;
}

// ---------------------------------------------------------------------------
// Pixel loss
// ---------------------------------------------------------------------------

struct PixelLoss {
    double l2 = 0;   // weighted
    double ssim = 0; // weighted
    double grad = 0; // weighted
    Tensor<double> d_pred;
    double total() const { return l2 + ssim + grad; }
};

// w_l2 * MSE + w_ssim * (1 - SSIM) + w_grad * (mean dx^2 + mean dy^2) of the
// forward-difference residual, over N x C x H x W batches.
inline PixelLoss pixel_loss(const Tensor<double>& pred, const Tensor<double>& target, const LossWeights& w,
                            bool want_grad = false) {
    require_same_shape(pred.shape, target.shape, "pixel_loss");
    if (pred.rank() != 4) throw std::invalid_argument("pixel_loss: expected N x C x H x W tensors");
    const std::size_t count = pred.size();
    const int planes = pred.dim(0) * pred.dim(1), h = pred.dim(2), wd = pred.dim(3);
    PixelLoss out;
    if (want_grad) out.d_pred = Tensor<double>(pred.shape);

    double se = 0;
    for (std::size_t i = 0; i < count; ++i) {
        const double d = pred[i] - target[i];
        se += d * d;
        if (want_grad) out.d_pred[i] += w.w_l2 * 2.0 * d / count;
    }
    out.l2 = w.w_l2 * se / count;

    if (w.w_ssim != 0.0 || want_grad) {
        SsimResult s = ssim_with_grad(pred, target, want_grad && w.w_ssim != 0.0);
        out.ssim = w.w_ssim * (1.0 - s.value);
        if (want_grad && w.w_ssim != 0.0)
            for (std::size_t i = 0; i < count; ++i) out.d_pred[i] -= w.w_ssim * s.grad_a[i];
    }

    double gx = 0, gy = 0;
    for (int p = 0; p < planes; ++p) {
        const double* pp = pred.ptr() + static_cast<std::size_t>(p) * h * wd;
        const double* pt = target.ptr() + static_cast<std::size_t>(p) * h * wd;
        double* dp = want_grad ? out.d_pred.ptr() + static_cast<std::size_t>(p) * h * wd : nullptr;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < wd; ++x) {
                const int i = y * wd + x;
                if (x + 1 < wd) {
                    const double r = (pp[i + 1] - pp[i]) - (pt[i + 1] - pt[i]);
                    gx += r * r;
                    if (dp) {
                        const double g = w.w_grad * 2.0 * r / count;
                        dp[i + 1] += g;
                        dp[i] -= g;
                    }
                }
                if (y + 1 < h) {
                    const double r = (pp[i + wd] - pp[i]) - (pt[i + wd] - pt[i]);
                    gy += r * r;
                    if (dp) {
                        const double g = w.w_grad * 2.0 * r / count;
                        dp[i + wd] += g;
                        dp[i] -= g;
                    }
                }
            }
    }
    out.grad = w.w_grad * (gx + gy) / count;
    return out;
}

inline double pixel_loss(const ImageBuffer& pred, const ImageBuffer& target, const LossWeights& w) {
    require_same_size(pred, target, "pixel_loss");
    return pixel_loss(image_to_planes(pred), image_to_planes(target), w).total();
}

// ---------------------------------------------------------------------------
// Coding rate and uniformity regularizer
// ---------------------------------------------------------------------------

using Matrix = Eigen::MatrixXd;

// log det(I_d + d / (n lambda^2) S^T S) for S of shape n x d, via Cholesky.
// When grad is non-null it receives dR/dS = 2 a S (I + a S^T S)^-1.
inline double coding_rate(const Matrix& s, double lambda, Matrix* grad = nullptr) {
    if (s.rows() < 1 || s.cols() < 1) throw std::invalid_argument("coding_rate: empty matrix");
    if (!(lambda > 0.0)) throw std::invalid_argument("coding_rate: lambda must be > 0");
    if (!s.allFinite()) throw std::invalid_argument("coding_rate: non-finite input");
    const double n = static_cast<double>(s.rows()), d = static_cast<double>(s.cols());
    const double a = d / (n * lambda * lambda);
    Matrix m = Matrix::Identity(s.cols(), s.cols());
    m.selfadjointView<Eigen::Lower>().rankUpdate(s.transpose(), a);
    m.triangularView<Eigen::StrictlyUpper>() = m.transpose();
    Eigen::LLT<Matrix> llt(m);
    if (llt.info() != Eigen::Success) throw std::runtime_error("coding_rate: factorization failed");
    const Matrix& l = llt.matrixL();
    double logdet = 0;
    for (Eigen::Index i = 0; i < l.rows(); ++i) logdet += 2.0 * std::log(l(i, i));
    if (grad) {
        const Matrix inv = llt.solve(Matrix::Identity(s.cols(), s.cols()));
        *grad = 2.0 * a * s * inv;
    }
    return logdet;
}

// Rows drawn uniformly on the unit sphere S^{d-1}.
inline Matrix sample_hypersphere_rows(int n, int d, Rng& rng) {
    Matrix s(n, d);
    for (int i = 0; i < n; ++i) {
        double sq;
        do {
            sq = 0;
            for (int j = 0; j < d; ++j) {
                s(i, j) = rng.normal();
                sq += s(i, j) * s(i, j);
            }
        } while (sq <= 0.0);
        s.row(i) /= std::sqrt(sq);
    }
    return s;
}

// Reference coding rates R(S_hat), one hyperspherical sample per (n, d, lambda),
// drawn on first request from a stream keyed by the shape.
class UniformityTarget {
public:
    struct Entry {
        Matrix sample;
        double rate = 0;
    };

    explicit UniformityTarget(std::uint64_t seed = 0) : seed_(seed) {}

    const Entry& get(int n, int d, double lambda) {
        if (n < 1 || d < 1) throw std::invalid_argument("uniformity target: shape must be at least 1 x 1");
        const auto key = std::make_tuple(n, d, lambda);
        auto it = cache_.find(key);
        if (it != cache_.end()) return it->second;
        Rng rng = Rng::derive(seed_, (static_cast<std::uint64_t>(n) << 32) ^ static_cast<std::uint64_t>(d));
        Entry e;
        e.sample = sample_hypersphere_rows(n, d, rng);
        e.rate = coding_rate(e.sample, lambda);
        return cache_.emplace(key, std::move(e)).first->second;
    }

    std::uint64_t seed() const { return seed_; }
    std::size_t size() const { return cache_.size(); }

private:
    std::uint64_t seed_;
    std::map<std::tuple<int, int, double>, Entry> cache_;
};

// |R(S) - R(S_hat)|, with a subgradient of 0 at equality.
inline double uniformity_reg(const Matrix& s, UniformityTarget& target, double lambda, Matrix* grad = nullptr) {
    if (s.rows() < 1 || s.cols() < 1) throw std::invalid_argument("uniformity_reg: shape must be at least 1 x 1");
    const double ref = target.get(static_cast<int>(s.rows()), static_cast<int>(s.cols()), lambda).rate;
    Matrix g;
    const double r = coding_rate(s, lambda, grad ? &g : nullptr);
    const double diff = r - ref;
    if (grad) *grad = (diff > 0 ? 1.0 : diff < 0 ? -1.0 : 0.0) * g;
    return std::abs(diff);
}

// Level map (C x H x W slice of sample n) flattened to (H*W) x C rows.
inline Matrix flatten_level(const Tensor<double>& level, int n) {
    const int c = level.dim(1), hw = level.dim(2) * level.dim(3);
    Matrix s(hw, c);
    for (int ch = 0; ch < c; ++ch)
        for (int p = 0; p < hw; ++p) s(p, ch) = level[(static_cast<std::size_t>(n) * c + ch) * hw + p];
    return s;
}

// ---------------------------------------------------------------------------
// Intrinsic consistency
// ---------------------------------------------------------------------------

struct IntrinsicLoss {
    double distance = 0;   // sum over levels of mean channel-vector distance (unweighted)
    double regularizer = 0; // sum over levels of the uniformity term on side a (unweighted)
    std::vector<Tensor<double>> d_a, d_b;
    double total(const LossWeights& w) const { return distance + w.w_intrinsic_reg * regularizer; }
};

// Levels are N x C_i x H_i x W_i batches. Per level: mean over samples and
// locations of ||a - b||_2, plus the uniformity term of a averaged over samples.
inline IntrinsicLoss intrinsic_loss(const std::vector<Tensor<double>>& a, const std::vector<Tensor<double>>& b,
                                    UniformityTarget& target, const LossWeights& w, bool want_grad = false) {
    if (a.size() != b.size()) throw std::invalid_argument("intrinsic_loss: level count mismatch");
    IntrinsicLoss out;
    for (std::size_t li = 0; li < a.size(); ++li) {
        const Tensor<double>& la = a[li];
        const Tensor<double>& lb = b[li];
        require_same_shape(la.shape, lb.shape, "intrinsic_loss");
        if (la.rank() != 4) throw std::invalid_argument("intrinsic_loss: levels must be N x C x H x W");
        const int n = la.dim(0), c = la.dim(1), hw = la.dim(2) * la.dim(3);
        const double locations = static_cast<double>(n) * hw;
        Tensor<double> ga, gb;
        if (want_grad) {
            ga = Tensor<double>(la.shape);
            gb = Tensor<double>(lb.shape);
        }
        double dist = 0;
        for (int s = 0; s < n; ++s)
            for (int p = 0; p < hw; ++p) {
                double sq = 0;
                for (int ch = 0; ch < c; ++ch) {
                    const std::size_t i = (static_cast<std::size_t>(s) * c + ch) * hw + p;
                    const double d = la[i] - lb[i];
                    sq += d * d;
                }
                const double norm = std::sqrt(sq);
                dist += norm;
                if (want_grad && norm > 0) {
                    for (int ch = 0; ch < c; ++ch) {
                        const std::size_t i = (static_cast<std::size_t>(s) * c + ch) * hw + p;
                        const double g = (la[i] - lb[i]) / (norm * locations);
                        ga[i] += g;
                        gb[i] -= g;
                    }
                }
            }
        out.distance += dist / locations;

        double reg = 0;
        for (int s = 0; s < n; ++s) {
            Matrix g;
            reg += uniformity_reg(flatten_level(la, s), target, w.lambda_distortion, want_grad ? &g : nullptr);
            if (want_grad) {
                const double scale = w.w_intrinsic_reg / n;
                for (int ch = 0; ch < c; ++ch)
                    for (int p = 0; p < hw; ++p) ga[(static_cast<std::size_t>(s) * c + ch) * hw + p] += scale * g(p, ch);
            }
        }
        out.regularizer += reg / n;
        if (want_grad) {
            out.d_a.push_back(std::move(ga));
            out.d_b.push_back(std::move(gb));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Total objective
// ---------------------------------------------------------------------------

// Everything the objective needs for a batch of B pairs (a under l1, b under l2).
struct BatchOutputs {
    Tensor<double> relit;   // decode(intrinsics of a, code of b), B x 3 x H x W
    Tensor<double> recon;   // decode(intrinsics of b, code of b)
    Tensor<double> target;  // clean b
    std::vector<Tensor<double>> intrinsics_a;
    std::vector<Tensor<double>> intrinsics_b;
    Tensor<double> codes;   // B x extrinsic_dim
};

// Weighted contributions; they sum to total.
struct LossBreakdown {
    double relit_l2 = 0, relit_ssim = 0, relit_grad = 0;
    double recon_l2 = 0, recon_ssim = 0, recon_grad = 0;
    double intrinsic_distance = 0, intrinsic_reg = 0, extrinsic_reg = 0;
    double total = 0;

    double pixel_terms() const { return relit_l2 + relit_ssim + relit_grad + recon_l2 + recon_ssim + recon_grad; }
    double sum_terms() const { return pixel_terms() + intrinsic_distance + intrinsic_reg + extrinsic_reg; }
    bool all_finite() const {
        for (double v : {relit_l2, relit_ssim, relit_grad, recon_l2, recon_ssim, recon_grad, intrinsic_distance, intrinsic_reg,
                         extrinsic_reg, total})
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline void to_json(nlohmann::json& j, const LossBreakdown& b) {
    j = nlohmann::json{{"relit_l2", b.relit_l2},
                       {"relit_ssim", b.relit_ssim},
                       {"relit_grad", b.relit_grad},
                       {"recon_l2", b.recon_l2},
                       {"recon_ssim", b.recon_ssim},
                       {"recon_grad", b.recon_grad},
                       {"intrinsic_distance", b.intrinsic_distance},
                       {"intrinsic_reg", b.intrinsic_reg},
                       {"extrinsic_reg", b.extrinsic_reg},
                       {"total", b.total}};
}

struct LossGradients {
    Tensor<double> relit, recon;
    std::vector<Tensor<double>> intrinsics_a, intrinsics_b;
    Tensor<double> codes;
};

struct TotalLoss {
    LossBreakdown breakdown;
    LossGradients grads; // populated when requested
};

inline TotalLoss total_loss(const BatchOutputs& batch, const LossWeights& w, UniformityTarget& target,
                            bool want_grad = false) {
    w.validate();
    if (batch.relit.data.empty() || batch.recon.data.empty() || batch.target.data.empty())
        throw std::invalid_argument("total_loss: missing image component");
    if (batch.intrinsics_a.empty() || batch.intrinsics_b.empty())
        throw std::invalid_argument("total_loss: missing intrinsic features");
    if (batch.codes.data.empty() || batch.codes.rank() != 2) throw std::invalid_argument("total_loss: missing extrinsic codes");

    TotalLoss out;
    LossBreakdown& bd = out.breakdown;
    PixelLoss relit = pixel_loss(batch.relit, batch.target, w, want_grad);
    PixelLoss recon = pixel_loss(batch.recon, batch.target, w, want_grad);
    bd.relit_l2 = relit.l2;
    bd.relit_ssim = relit.ssim;
    bd.relit_grad = relit.grad;
    bd.recon_l2 = recon.l2;
    bd.recon_ssim = recon.ssim;
    bd.recon_grad = recon.grad;

    IntrinsicLoss il = intrinsic_loss(batch.intrinsics_a, batch.intrinsics_b, target, w, want_grad);
    bd.intrinsic_distance = w.w_intrinsic * il.distance;
    bd.intrinsic_reg = w.w_intrinsic * w.w_intrinsic_reg * il.regularizer;

    const int rows = batch.codes.dim(0), dims = batch.codes.dim(1);
    Matrix codes(rows, dims);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < dims; ++c) codes(r, c) = batch.codes[static_cast<std::size_t>(r) * dims + c];
    Matrix gcodes;
    bd.extrinsic_reg = w.w_extrinsic * uniformity_reg(codes, target, w.lambda_distortion, want_grad ? &gcodes : nullptr);
    bd.total = bd.sum_terms();

    if (want_grad) {
        LossGradients& g = out.grads;
        g.relit = std::move(relit.d_pred);
        g.recon = std::move(recon.d_pred);
        g.intrinsics_a = std::move(il.d_a);
        g.intrinsics_b = std::move(il.d_b);
        for (auto* levels : {&g.intrinsics_a, &g.intrinsics_b})
            for (auto& t : *levels)
                for (auto& v : t.data) v *= w.w_intrinsic;
        g.codes = Tensor<double>(batch.codes.shape);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < dims; ++c) g.codes[static_cast<std::size_t>(r) * dims + c] = w.w_extrinsic * gcodes(r, c);
    }
    return out;
}

} // namespace latent_relight
