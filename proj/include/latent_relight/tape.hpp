#pragma once

// Reverse-mode differentiation over NCHW tensors. Each op computes its value
// eagerly and, when gradients are enabled, records a closure that pushes the
// output gradient back into its inputs.

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "tensor.hpp"

namespace latent_relight {

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

template <typename T>
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }

    // Leaf that aliases caller-owned storage; the tensor must outlive the tape.
    Var leaf_ref(const Tensor<T>& value, bool requires_grad) {
        Node n;
        n.external = &value;
        n.requires_grad = requires_grad && grad_enabled_;
        return push(std::move(n));
    }

    Var leaf(Tensor<T> value, bool requires_grad = false) {
        Node n;
        n.owned = std::move(value);
        n.requires_grad = requires_grad && grad_enabled_;
        return push(std::move(n));
    }

    // Result of an op. The backward closure is dropped when no input needs a gradient.
    Var record(Tensor<T> value, std::initializer_list<Var> inputs, std::function<void(Tape&, int)> backward) {
        Node n;
        n.owned = std::move(value);
        bool any = false;
        for (Var v : inputs) any = any || nodes_.at(v.id).requires_grad;
        n.requires_grad = any && grad_enabled_;
        if (n.requires_grad) n.backward = std::move(backward);
        return push(std::move(n));
    }

    const Tensor<T>& value(Var v) const {
        const Node& n = nodes_.at(v.id);
        return n.external ? *n.external : n.owned;
    }
    const Shape& shape(Var v) const { return value(v).shape; }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

    bool has_grad(Var v) const { return !nodes_.at(v.id).grad.data.empty(); }

    // Gradient buffer, zero-initialized on first access.
    Tensor<T>& grad(Var v) {
        Node& n = nodes_.at(v.id);
        if (n.grad.data.empty()) n.grad = Tensor<T>(value(v).shape);
        return n.grad;
    }

    void accumulate_grad(Var v, const Tensor<T>& g) {
        if (!requires_grad(v)) return;
        Tensor<T>& dst = grad(v);
        require_same_shape(dst.shape, g.shape, "accumulate_grad");
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }

    // Runs every recorded closure in reverse creation order. Gradients must
    // already be seeded with accumulate_grad.
    void backward() {
        for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
            Node& n = nodes_[id];
            if (n.backward && !n.grad.data.empty()) n.backward(*this, id);
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor<T> owned;
        const Tensor<T>* external = nullptr;
        Tensor<T> grad;
        bool requires_grad = false;
        std::function<void(Tape&, int)> backward;
    };

    Var push(Node n) {
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    std::vector<Node> nodes_;
    bool grad_enabled_;
};

namespace ops {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

namespace detail {

struct ConvGeom {
    int n, cin, h, w, cout, k, stride, pad, ho, wo;
    int kdim() const { return cin * k * k; }
    int pdim() const { return ho * wo; }
};

// cols[(c*k + ky)*k + kx][oy*wo + ox] = x[c][oy*stride + ky - pad][ox*stride + kx - pad]
// Only in-bounds taps are written; padded entries must already hold zero,
// which stays true across images since the padding pattern is fixed.
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
    const int p = g.pdim();
    for (int c = 0; c < g.cin; ++c) {
        const T* xc = x + static_cast<std::size_t>(c) * g.h * g.w;
        for (int ky = 0; ky < g.k; ++ky) {
            for (int kx = 0; kx < g.k; ++kx) {
                T* row = cols + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * p;
                const int shift = kx - g.pad;
                for (int oy = 0; oy < g.ho; ++oy) {
                    const int iy = oy * g.stride + ky - g.pad;
                    if (iy < 0 || iy >= g.h) continue;
                    T* out = row + oy * g.wo;
                    const T* xrow = xc + static_cast<std::size_t>(iy) * g.w;
                    if (g.stride == 1) {
                        const int lo = std::max(0, -shift), hi = std::min(g.wo, g.w - shift);
                        for (int ox = lo; ox < hi; ++ox) out[ox] = xrow[ox + shift];
                    } else {
                        for (int ox = 0; ox < g.wo; ++ox) {
                            const int ix = ox * g.stride + shift;
                            if (ix >= 0 && ix < g.w) out[ox] = xrow[ix];
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, T* dx) {
    const int p = g.pdim();
    for (int c = 0; c < g.cin; ++c) {
        T* dxc = dx + static_cast<std::size_t>(c) * g.h * g.w;
        for (int ky = 0; ky < g.k; ++ky) {
            for (int kx = 0; kx < g.k; ++kx) {
                const T* row = cols + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * p;
                for (int oy = 0; oy < g.ho; ++oy) {
                    const int iy = oy * g.stride + ky - g.pad;
                    if (iy < 0 || iy >= g.h) continue;
                    T* drow = dxc + static_cast<std::size_t>(iy) * g.w;
                    const T* in = row + oy * g.wo;
                    if (g.stride == 1) {
                        const int shift = kx - g.pad;
                        const int lo = std::max(0, -shift), hi = std::min(g.wo, g.w - shift);
                        T* d = drow + shift;
                        for (int ox = lo; ox < hi; ++ox) d[ox] += in[ox];
                        continue;
                    }
                    for (int ox = 0; ox < g.wo; ++ox) {
                        const int ix = ox * g.stride + kx - g.pad;
                        if (ix >= 0 && ix < g.w) drow[ix] += in[ox];
                    }
                }
            }
        }
    }
}

template <typename T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

} // namespace detail

// 2-D convolution, square kernel, zero padding. x: N x Cin x H x W,
// weight: Cout x Cin x k x k, bias: Cout.
template <typename T>
Var conv2d(Tape<T>& tape, Var x, Var weight, Var bias, int stride, int pad) {
    const auto& xs = tape.shape(x);
    const auto& ws = tape.shape(weight);
    if (xs.size() != 4 || ws.size() != 4 || ws[1] != xs[1] || ws[2] != ws[3])
        throw std::invalid_argument("conv2d: incompatible shapes " + shape_str(xs) + " and " + shape_str(ws));
    if (tape.shape(bias) != Shape{ws[0]}) throw std::invalid_argument("conv2d: bias shape");
    detail::ConvGeom g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], stride, pad, 0, 0};
    g.ho = (g.h + 2 * pad - g.k) / stride + 1;
    g.wo = (g.w + 2 * pad - g.k) / stride + 1;
    const bool pointwise = g.k == 1 && stride == 1 && pad == 0;

    Tensor<T> out({g.n, g.cout, g.ho, g.wo});
    const Tensor<T>& xv = tape.value(x);
    ConstMapMat<T> wm(tape.value(weight).ptr(), g.cout, g.kdim());
    const auto bv = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(tape.value(bias).ptr(), g.cout);
    AlignedVector<T> cols(pointwise ? 0 : static_cast<std::size_t>(g.kdim()) * g.pdim());
    for (int n = 0; n < g.n; ++n) {
        const T* xn = xv.ptr() + static_cast<std::size_t>(n) * g.cin * g.h * g.w;
        const T* colp = xn;
        if (!pointwise) {
            detail::im2col(xn, g, cols.data());
            colp = cols.data();
        }
        ConstMapMat<T> cm(colp, g.kdim(), g.pdim());
        MapMat<T> om(out.ptr() + static_cast<std::size_t>(n) * g.cout * g.pdim(), g.cout, g.pdim());
        om.noalias() = wm * cm;
        om.colwise() += bv;
    }

    return tape.record(std::move(out), {x, weight, bias}, [x, weight, bias, g, pointwise](Tape<T>& t, int self) {
        const Tensor<T>& dy = t.grad(Var{self});
        const Tensor<T>& xv = t.value(x);
        ConstMapMat<T> wm(t.value(weight).ptr(), g.cout, g.kdim());
        const bool need_x = t.requires_grad(x), need_w = t.requires_grad(weight), need_b = t.requires_grad(bias);
        AlignedVector<T> cols(pointwise ? 0 : static_cast<std::size_t>(g.kdim()) * g.pdim());
        AlignedVector<T> dcols(pointwise ? 0 : static_cast<std::size_t>(g.kdim()) * g.pdim());
        RowMat<T> dw = RowMat<T>::Zero(g.cout, g.kdim());
        Eigen::Matrix<T, Eigen::Dynamic, 1> db = Eigen::Matrix<T, Eigen::Dynamic, 1>::Zero(g.cout);
        T* dx = need_x ? t.grad(x).ptr() : nullptr;
        for (int n = 0; n < g.n; ++n) {
            ConstMapMat<T> dym(dy.ptr() + static_cast<std::size_t>(n) * g.cout * g.pdim(), g.cout, g.pdim());
            const T* xn = xv.ptr() + static_cast<std::size_t>(n) * g.cin * g.h * g.w;
            if (need_w) {
                const T* colp = xn;
                if (!pointwise) {
                    detail::im2col(xn, g, cols.data());
                    colp = cols.data();
                }
                ConstMapMat<T> cm(colp, g.kdim(), g.pdim());
                dw.noalias() += dym * cm.transpose();
            }
            if (need_b) db += dym.rowwise().sum();
            if (need_x) {
                T* dxn = dx + static_cast<std::size_t>(n) * g.cin * g.h * g.w;
                if (pointwise) {
                    MapMat<T> dxm(dxn, g.cin, g.pdim());
                    dxm.noalias() += wm.transpose() * dym;
                } else {
                    MapMat<T> dcm(dcols.data(), g.kdim(), g.pdim());
                    dcm.noalias() = wm.transpose() * dym;
                    detail::col2im_add(dcols.data(), g, dxn);
                }
            }
        }
        if (need_w) {
            T* gw = t.grad(weight).ptr();
            for (Eigen::Index i = 0; i < dw.size(); ++i) gw[i] += dw.data()[i];
        }
        if (need_b) {
            T* gb = t.grad(bias).ptr();
            for (int i = 0; i < g.cout; ++i) gb[i] += db[i];
        }
    });
}

// Group normalization over (C/groups) x H x W per sample, with per-channel affine.
template <typename T>
Var group_norm(Tape<T>& tape, Var x, Var gamma, Var beta, int groups, double eps = 1e-5) {
    const auto& xs = tape.shape(x);
    if (xs.size() != 4) throw std::invalid_argument("group_norm: expected NCHW input");
    const int n = xs[0], c = xs[1], hw = xs[2] * xs[3];
    if (groups < 1 || c % groups != 0) throw std::invalid_argument("group_norm: channels not divisible by groups");
    if (tape.shape(gamma) != Shape{c} || tape.shape(beta) != Shape{c}) throw std::invalid_argument("group_norm: affine shape");
    const int cg = c / groups;
    const std::size_t gsize = static_cast<std::size_t>(cg) * hw;
    const Tensor<T>& xv = tape.value(x);
    const T* gm = tape.value(gamma).ptr();
    const T* bt = tape.value(beta).ptr();
    std::vector<T> mean(static_cast<std::size_t>(n) * groups), rstd(mean.size());
    Tensor<T> out(xs);
    for (int s = 0; s < n; ++s) {
        for (int gi = 0; gi < groups; ++gi) {
            const std::size_t base = (static_cast<std::size_t>(s) * c + gi * cg) * hw;
            double sum = 0, sq = 0;
            for (std::size_t i = 0; i < gsize; ++i) sum += xv[base + i];
            const double mu = sum / gsize;
            for (std::size_t i = 0; i < gsize; ++i) {
                const double d = xv[base + i] - mu;
                sq += d * d;
            }
            const double rs = 1.0 / std::sqrt(sq / gsize + eps);
            mean[s * groups + gi] = static_cast<T>(mu);
            rstd[s * groups + gi] = static_cast<T>(rs);
            for (int cc = 0; cc < cg; ++cc) {
                const int ch = gi * cg + cc;
                const T scale = static_cast<T>(rs) * gm[ch];
                const T shift = bt[ch] - static_cast<T>(mu) * scale;
                const std::size_t off = base + static_cast<std::size_t>(cc) * hw;
                for (int i = 0; i < hw; ++i) out[off + i] = xv[off + i] * scale + shift;
            }
        }
    }
    return tape.record(std::move(out), {x, gamma, beta},
                       [x, gamma, beta, n, c, hw, groups, cg, gsize, mean = std::move(mean),
                        rstd = std::move(rstd)](Tape<T>& t, int self) {
                           const Tensor<T>& dy = t.grad(Var{self});
                           const Tensor<T>& xv = t.value(x);
                           const T* gm = t.value(gamma).ptr();
                           const bool need_x = t.requires_grad(x);
                           std::vector<T> dgamma(c, T(0)), dbeta(c, T(0));
                           T* dx = need_x ? t.grad(x).ptr() : nullptr;
                           for (int s = 0; s < n; ++s) {
                               for (int gi = 0; gi < groups; ++gi) {
                                   const std::size_t base = (static_cast<std::size_t>(s) * c + gi * cg) * hw;
                                   const double mu = mean[s * groups + gi], rs = rstd[s * groups + gi];
                                   double sum_dxh = 0, sum_dxh_xh = 0;
                                   for (int cc = 0; cc < cg; ++cc) {
                                       const int ch = gi * cg + cc;
                                       const std::size_t off = base + static_cast<std::size_t>(cc) * hw;
                                       double dg = 0, dbsum = 0;
                                       for (int i = 0; i < hw; ++i) {
                                           const double xh = (xv[off + i] - mu) * rs;
                                           const double g = dy[off + i];
                                           dg += g * xh;
                                           dbsum += g;
                                       }
                                       dgamma[ch] += static_cast<T>(dg);
                                       dbeta[ch] += static_cast<T>(dbsum);
                                       sum_dxh += dbsum * gm[ch];
                                       sum_dxh_xh += dg * gm[ch];
                                   }
                                   if (!need_x) continue;
                                   const double m1 = sum_dxh / gsize, m2 = sum_dxh_xh / gsize;
                                   for (int cc = 0; cc < cg; ++cc) {
                                       const int ch = gi * cg + cc;
                                       const std::size_t off = base + static_cast<std::size_t>(cc) * hw;
                                       for (int i = 0; i < hw; ++i) {
                                           const double xh = (xv[off + i] - mu) * rs;
                                           dx[off + i] += static_cast<T>(rs * (dy[off + i] * gm[ch] - m1 - xh * m2));
                                       }
                                   }
                               }
                           }
                           if (t.requires_grad(gamma)) {
                               T* g = t.grad(gamma).ptr();
                               for (int i = 0; i < c; ++i) g[i] += dgamma[i];
                           }
                           if (t.requires_grad(beta)) {
                               T* g = t.grad(beta).ptr();
                               for (int i = 0; i < c; ++i) g[i] += dbeta[i];
                           }
                       });
}

template <typename T>
Var silu(Tape<T>& tape, Var x) {
    const Tensor<T>& xv = tape.value(x);
    Tensor<T> out(xv.shape);
    std::vector<T> sig(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        sig[i] = detail::sigmoid(xv[i]);
        out[i] = xv[i] * sig[i];
    }
    if (!tape.grad_enabled()) sig.clear();
    return tape.record(std::move(out), {x}, [x, sig = std::move(sig)](Tape<T>& t, int self) {
        const Tensor<T>& dy = t.grad(Var{self});
        const Tensor<T>& xv = t.value(x);
        Tensor<T>& dx = t.grad(x);
        for (std::size_t i = 0; i < xv.size(); ++i) dx[i] += dy[i] * sig[i] * (T(1) + xv[i] * (T(1) - sig[i]));
    });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
    const Tensor<T>& av = tape.value(a);
    const Tensor<T>& bv = tape.value(b);
    require_same_shape(av.shape, bv.shape, "add");
    Tensor<T> out(av.shape);
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
    return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, int self) {
        const Tensor<T>& dy = t.grad(Var{self});
        t.accumulate_grad(a, dy);
        t.accumulate_grad(b, dy);
    });
}

template <typename T>
Var upsample_nearest2x(Tape<T>& tape, Var x) {
    const auto& s = tape.shape(x);
    if (s.size() != 4) throw std::invalid_argument("upsample: expected NCHW input");
    const int nc = s[0] * s[1], h = s[2], w = s[3];
    const Tensor<T>& xv = tape.value(x);
    Tensor<T> out({s[0], s[1], 2 * h, 2 * w});
    for (int p = 0; p < nc; ++p)
        for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx)
                out[(static_cast<std::size_t>(p) * 2 * h + y) * 2 * w + xx] = xv[(static_cast<std::size_t>(p) * h + y / 2) * w + xx / 2];
    return tape.record(std::move(out), {x}, [x, nc, h, w](Tape<T>& t, int self) {
        const Tensor<T>& dy = t.grad(Var{self});
        Tensor<T>& dx = t.grad(x);
        for (int p = 0; p < nc; ++p)
            for (int y = 0; y < 2 * h; ++y)
                for (int xx = 0; xx < 2 * w; ++xx)
                    dx[(static_cast<std::size_t>(p) * h + y / 2) * w + xx / 2] += dy[(static_cast<std::size_t>(p) * 2 * h + y) * 2 * w + xx];
    });
}

template <typename T>
Var concat_channels(Tape<T>& tape, Var a, Var b) {
    const auto& as = tape.shape(a);
    const auto& bs = tape.shape(b);
    if (as.size() != 4 || bs.size() != 4 || as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3])
        throw std::invalid_argument("concat_channels: shape mismatch " + shape_str(as) + " vs " + shape_str(bs));
    const int n = as[0], ca = as[1], cb = bs[1];
    const std::size_t hw = static_cast<std::size_t>(as[2]) * as[3];
    Tensor<T> out({n, ca + cb, as[2], as[3]});
    const Tensor<T>& av = tape.value(a);
    const Tensor<T>& bv = tape.value(b);
    for (int s = 0; s < n; ++s) {
        std::copy_n(av.ptr() + s * ca * hw, ca * hw, out.ptr() + s * (ca + cb) * hw);
        std::copy_n(bv.ptr() + s * cb * hw, cb * hw, out.ptr() + (s * (ca + cb) + ca) * hw);
    }
    return tape.record(std::move(out), {a, b}, [a, b, n, ca, cb, hw](Tape<T>& t, int self) {
        const Tensor<T>& dy = t.grad(Var{self});
        if (t.requires_grad(a)) {
            Tensor<T>& da = t.grad(a);
            for (int s = 0; s < n; ++s)
                for (std::size_t i = 0; i < ca * hw; ++i) da[s * ca * hw + i] += dy[s * (ca + cb) * hw + i];
        }
        if (t.requires_grad(b)) {
            Tensor<T>& db = t.grad(b);
            for (int s = 0; s < n; ++s)
                for (std::size_t i = 0; i < cb * hw; ++i) db[s * cb * hw + i] += dy[(s * (ca + cb) + ca) * hw + i];
        }
    });
}

// Divides every channel vector (dim 1) by its L2 norm. Accepts N x C x H x W or N x C.
template <typename T>
Var l2_normalize_channels(Tape<T>& tape, Var x, double eps = 1e-12) {
    const auto& s = tape.shape(x);
    if (s.size() != 4 && s.size() != 2) throw std::invalid_argument("l2_normalize_channels: expected rank 2 or 4");
    const int n = s[0], c = s[1];
    const int hw = s.size() == 4 ? s[2] * s[3] : 1;
    const Tensor<T>& xv = tape.value(x);
    Tensor<T> out(s);
    std::vector<T> norms(static_cast<std::size_t>(n) * hw);
    for (int b = 0; b < n; ++b) {
        for (int p = 0; p < hw; ++p) {
            double sq = 0;
            for (int ch = 0; ch < c; ++ch) {
                const double v = xv[(static_cast<std::size_t>(b) * c + ch) * hw + p];
                sq += v * v;
            }
            const double nrm = std::max(std::sqrt(sq), eps);
            norms[static_cast<std::size_t>(b) * hw + p] = static_cast<T>(nrm);
            for (int ch = 0; ch < c; ++ch) {
                const std::size_t i = (static_cast<std::size_t>(b) * c + ch) * hw + p;
                out[i] = static_cast<T>(xv[i] / nrm);
            }
        }
    }
    return tape.record(std::move(out), {x}, [x, n, c, hw, norms = std::move(norms)](Tape<T>& t, int self) {
        const Tensor<T>& dy = t.grad(Var{self});
        const Tensor<T>& y = t.value(Var{self});
        Tensor<T>& dx = t.grad(x);
        for (int b = 0; b < n; ++b) {
            for (int p = 0; p < hw; ++p) {
                double dot = 0;
                for (int ch = 0; ch < c; ++ch) {
                    const std::size_t i = (static_cast<std::size_t>(b) * c + ch) * hw + p;
                    dot += static_cast<double>(y[i]) * dy[i];
                }
                const double nrm = norms[static_cast<std::size_t>(b) * hw + p];
                for (int ch = 0; ch < c; ++ch) {
                    const std::size_t i = (static_cast<std::size_t>(b) * c + ch) * hw + p;
                    dx[i] += static_cast<T>((dy[i] - y[i] * dot) / nrm);
                }
            }
        }
    });
}

// x: M x In, weight: Out x In, bias: Out -> M x Out.
template <typename T>
Var linear(Tape<T>& tape, Var x, Var weight, Var bias) {
    const auto& xs = tape.shape(x);
    const auto& ws = tape.shape(weight);
    if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1] || tape.shape(bias) != Shape{ws[0]})
        throw std::invalid_argument("linear: incompatible shapes " + shape_str(xs) + " and " + shape_str(ws));
    const int m = xs[0], in = xs[1], out_dim = ws[0];
    Tensor<T> out({m, out_dim});
    ConstMapMat<T> xm(tape.value(x).ptr(), m, in);
    ConstMapMat<T> wm(tape.value(weight).ptr(), out_dim, in);
    MapMat<T> om(out.ptr(), m, out_dim);
    om.noalias() = xm * wm.transpose();
    om.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(tape.value(bias).ptr(), out_dim);
    return tape.record(std::move(out), {x, weight, bias}, [x, weight, bias, m, in, out_dim](Tape<T>& t, int self) {
        ConstMapMat<T> dy(t.grad(Var{self}).ptr(), m, out_dim);
        if (t.requires_grad(x)) {
            MapMat<T> dx(t.grad(x).ptr(), m, in);
            dx.noalias() += dy * ConstMapMat<T>(t.value(weight).ptr(), out_dim, in);
        }
        if (t.requires_grad(weight)) {
            MapMat<T> dw(t.grad(weight).ptr(), out_dim, in);
            dw.noalias() += dy.transpose() * ConstMapMat<T>(t.value(x).ptr(), m, in);
        }
        if (t.requires_grad(bias)) {
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(t.grad(bias).ptr(), out_dim);
            db += dy.colwise().sum();
        }
    });
}

// N x C x H x W -> (N*H*W) x C, sample-major rows.
template <typename T>
Var nchw_to_rows(Tape<T>& tape, Var x) {
    const auto& s = tape.shape(x);
    if (s.size() != 4) throw std::invalid_argument("nchw_to_rows: expected NCHW input");
    const int n = s[0], c = s[1], hw = s[2] * s[3];
    const Tensor<T>& xv = tape.value(x);
    Tensor<T> out({n * hw, c});
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch)
            for (int p = 0; p < hw; ++p)
                out[(static_cast<std::size_t>(b) * hw + p) * c + ch] = xv[(static_cast<std::size_t>(b) * c + ch) * hw + p];
    return tape.record(std::move(out), {x}, [x, n, c, hw](Tape<T>& t, int self) {
        const Tensor<T>& dy = t.grad(Var{self});
        Tensor<T>& dx = t.grad(x);
        for (int b = 0; b < n; ++b)
            for (int ch = 0; ch < c; ++ch)
                for (int p = 0; p < hw; ++p)
                    dx[(static_cast<std::size_t>(b) * c + ch) * hw + p] += dy[(static_cast<std::size_t>(b) * hw + p) * c + ch];
    });
}

// (N*P) x D -> N x D, averaging each sample's P consecutive rows.
template <typename T>
Var mean_row_groups(Tape<T>& tape, Var x, int n) {
    const auto& s = tape.shape(x);
    if (s.size() != 2 || n < 1 || s[0] % n != 0) throw std::invalid_argument("mean_row_groups: bad shape");
    const int p = s[0] / n, d = s[1];
    const Tensor<T>& xv = tape.value(x);
    Tensor<T> out({n, d});
    for (int b = 0; b < n; ++b)
        for (int j = 0; j < d; ++j) {
            double acc = 0;
            for (int r = 0; r < p; ++r) acc += xv[(static_cast<std::size_t>(b) * p + r) * d + j];
            out[static_cast<std::size_t>(b) * d + j] = static_cast<T>(acc / p);
        }
    return tape.record(std::move(out), {x}, [x, n, p, d](Tape<T>& t, int self) {
        const Tensor<T>& dy = t.grad(Var{self});
        Tensor<T>& dx = t.grad(x);
        const T inv = T(1) / static_cast<T>(p);
        for (int b = 0; b < n; ++b)
            for (int r = 0; r < p; ++r)
                for (int j = 0; j < d; ++j) dx[(static_cast<std::size_t>(b) * p + r) * d + j] += dy[static_cast<std::size_t>(b) * d + j] * inv;
    });
}

// F (N x C x H x W) times (1 + alpha * tanh(m)), m: N x C broadcast over space.
template <typename T>
Var constrained_scale(Tape<T>& tape, Var feature, Var modulation, double alpha) {
    if (!(alpha >= 0.0)) throw std::invalid_argument("constrained_scale: alpha must be non-negative");
    const auto& fs = tape.shape(feature);
    const auto& ms = tape.shape(modulation);
    if (fs.size() != 4 || ms.size() != 2 || ms[0] != fs[0] || ms[1] != fs[1])
        throw std::invalid_argument("constrained_scale: channel mismatch " + shape_str(fs) + " vs " + shape_str(ms));
    const int n = fs[0], c = fs[1], hw = fs[2] * fs[3];
    const T a = static_cast<T>(alpha);
    const Tensor<T>& fv = tape.value(feature);
    const Tensor<T>& mv = tape.value(modulation);
    std::vector<T> th(mv.size());
    for (std::size_t i = 0; i < th.size(); ++i) th[i] = std::tanh(mv[i]);
    Tensor<T> out(fs);
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch) {
            const T s = T(1) + a * th[static_cast<std::size_t>(b) * c + ch];
            const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
            for (int p = 0; p < hw; ++p) {
                const T f = fv[off + p];
                T y = f * s;
                // Rounding of s and of the product can overshoot the bound by an ulp.
                while (std::abs(static_cast<double>(y) - f) > alpha * std::abs(static_cast<double>(f))) y = std::nextafter(y, f);
                out[off + p] = y;
            }
        }
    return tape.record(std::move(out), {feature, modulation},
                       [feature, modulation, n, c, hw, a, th = std::move(th)](Tape<T>& t, int self) {
                           const Tensor<T>& dy = t.grad(Var{self});
                           const Tensor<T>& fv = t.value(feature);
                           const bool need_f = t.requires_grad(feature), need_m = t.requires_grad(modulation);
                           for (int b = 0; b < n; ++b)
                               for (int ch = 0; ch < c; ++ch) {
                                   const std::size_t k = static_cast<std::size_t>(b) * c + ch;
                                   const T s = T(1) + a * th[k];
                                   const std::size_t off = k * hw;
                                   if (need_f) {
                                       T* df = t.grad(feature).ptr() + off;
                                       for (int p = 0; p < hw; ++p) df[p] += dy[off + p] * s;
                                   }
                                   if (need_m) {
                                       double acc = 0;
                                       for (int p = 0; p < hw; ++p) acc += static_cast<double>(dy[off + p]) * fv[off + p];
                                       t.grad(modulation)[k] += static_cast<T>(acc * a * (1.0 - th[k] * th[k]));
                                   }
                               }
                       });
}

// Clamp to [0,1] in the forward pass; gradient passes straight through.
template <typename T>
Var clamp01_straight_through(Tape<T>& tape, Var x) {
    const Tensor<T>& xv = tape.value(x);
    Tensor<T> out(xv.shape);
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::clamp(xv[i], T(0), T(1));
    return tape.record(std::move(out), {x}, [x](Tape<T>& t, int self) { t.accumulate_grad(x, t.grad(Var{self})); });
}

// Selects entries along dim 0; indices may repeat.
template <typename T>
Var gather_batch(Tape<T>& tape, Var x, std::vector<int> indices) {
    const auto& s = tape.shape(x);
    if (s.empty()) throw std::invalid_argument("gather_batch: scalar input");
    const std::size_t stride = shape_numel(s) / s[0];
    Shape os = s;
    os[0] = static_cast<int>(indices.size());
    const Tensor<T>& xv = tape.value(x);
    Tensor<T> out(os);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] < 0 || indices[i] >= s[0]) throw std::out_of_range("gather_batch: index out of range");
        std::copy_n(xv.ptr() + indices[i] * stride, stride, out.ptr() + i * stride);
    }
    return tape.record(std::move(out), {x}, [x, stride, indices = std::move(indices)](Tape<T>& t, int self) {
        const Tensor<T>& dy = t.grad(Var{self});
        Tensor<T>& dx = t.grad(x);
        for (std::size_t i = 0; i < indices.size(); ++i)
            for (std::size_t j = 0; j < stride; ++j) dx[indices[i] * stride + j] += dy[i * stride + j];
    });
}

template <typename T>
Var slice_batch(Tape<T>& tape, Var x, int begin, int count) {
    std::vector<int> idx(count);
    for (int i = 0; i < count; ++i) idx[i] = begin + i;
    return gather_batch(tape, x, std::move(idx));
}

} // namespace ops
} // namespace latent_relight
