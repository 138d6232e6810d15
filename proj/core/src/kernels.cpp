#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "mhmamba/kernels.hpp"

namespace mhm::kernels {

namespace {

// Max and min that let a NaN operand through instead of silently dropping it.
template <typename T>
T nan_max(T a, T b) {
    return (b > a || std::isnan(b)) ? b : a;
}

template <typename T>
T nan_min(T a, T b) {
    return (b < a || std::isnan(b)) ? b : a;
}

// Mirror index without repeating the edge sample; a unit-length axis maps to 0.
inline std::int64_t reflect(std::int64_t i, std::int64_t n) {
    if (n == 1) {
        return 0;
    }
    if (i < 0) {
        return -i;
    }
    if (i >= n) {
        return 2 * n - 2 - i;
    }
    return i;
}

struct Extent3 {
    std::int64_t d, h, w;
    std::int64_t size() const { return d * h * w; }
};

// out[i] = t0 * in[i-1] + t1 * in[i] + t2 * in[i+1] along one axis of a (d, h, w) block.
template <typename T>
void filter_axis(const T* in, T* out, const Extent3& e, int axis, const std::array<T, 3>& taps) {
    const std::int64_t n = axis == 0 ? e.d : axis == 1 ? e.h : e.w;
    const std::int64_t stride = axis == 0 ? e.h * e.w : axis == 1 ? e.w : 1;
    const std::int64_t outer = e.size() / n;
    for (std::int64_t o = 0; o < outer; ++o) {
        // Decompose o into the base offset of the line along `axis`.
        std::int64_t base;
        if (axis == 2) {
            base = o * e.w;
        } else if (axis == 1) {
            base = (o / e.w) * e.h * e.w + (o % e.w);
        } else {
            base = o;
        }
        for (std::int64_t i = 0; i < n; ++i) {
            out[base + i * stride] = taps[0] * in[base + reflect(i - 1, n) * stride] +
                                     taps[1] * in[base + i * stride] +
                                     taps[2] * in[base + reflect(i + 1, n) * stride];
        }
    }
}

template <typename T>
void filter_axis_adjoint(const T* gout, T* gin, const Extent3& e, int axis,
                         const std::array<T, 3>& taps) {
    const std::int64_t n = axis == 0 ? e.d : axis == 1 ? e.h : e.w;
    const std::int64_t stride = axis == 0 ? e.h * e.w : axis == 1 ? e.w : 1;
    const std::int64_t outer = e.size() / n;
    std::fill(gin, gin + e.size(), T(0));
    for (std::int64_t o = 0; o < outer; ++o) {
        std::int64_t base;
        if (axis == 2) {
            base = o * e.w;
        } else if (axis == 1) {
            base = (o / e.w) * e.h * e.w + (o % e.w);
        } else {
            base = o;
        }
        for (std::int64_t i = 0; i < n; ++i) {
            const T g = gout[base + i * stride];
            gin[base + reflect(i - 1, n) * stride] += taps[0] * g;
            gin[base + i * stride] += taps[1] * g;
            gin[base + reflect(i + 1, n) * stride] += taps[2] * g;
        }
    }
}

template <typename T>
constexpr std::array<T, 3> kDerivative{T(-1), T(0), T(1)};
template <typename T>
constexpr std::array<T, 3> kSmooth{T(1), T(2), T(1)};

// Applies the Sobel kernel differentiating along `dir` to one plane.
template <typename T>
void sobel_direction(const T* in, T* out, T* scratch, const Extent3& e, int dir) {
    filter_axis(in, scratch, e, 0, dir == 0 ? kDerivative<T> : kSmooth<T>);
    filter_axis(scratch, out, e, 1, dir == 1 ? kDerivative<T> : kSmooth<T>);
    filter_axis(out, scratch, e, 2, dir == 2 ? kDerivative<T> : kSmooth<T>);
    std::copy(scratch, scratch + e.size(), out);
}

template <typename T>
void sobel_direction_adjoint(const T* gout, T* gin, T* scratch, const Extent3& e, int dir) {
    filter_axis_adjoint(gout, scratch, e, 2, dir == 2 ? kDerivative<T> : kSmooth<T>);
    filter_axis_adjoint(scratch, gin, e, 1, dir == 1 ? kDerivative<T> : kSmooth<T>);
    filter_axis_adjoint(gin, scratch, e, 0, dir == 0 ? kDerivative<T> : kSmooth<T>);
    std::copy(scratch, scratch + e.size(), gin);
}

void require_affine(const Shape5& x, std::int64_t expected, std::int64_t gamma, std::int64_t beta,
                    const char* op) {
    if (gamma != expected || beta != expected) {
        throw ShapeError(std::string(op) + ": channel axis mismatch (affine parameters have " +
                         std::to_string(gamma) + "/" + std::to_string(beta) +
                         " entries, input has " + std::to_string(x[1]) + " channels)");
    }
}

// Upsamples one axis by two: (n) -> (2n).
template <typename T>
void upsample_axis(const Volume5<T>& in, Volume5<T>& out, int axis) {
    const Shape5& s = in.shape();
    const std::int64_t n = s[axis];
    std::int64_t inner = 1;
    for (int a = axis + 1; a < 5; ++a) {
        inner *= s[a];
    }
    std::int64_t outer = 1;
    for (int a = 0; a < axis; ++a) {
        outer *= s[a];
    }
    for (std::int64_t o = 0; o < outer; ++o) {
        const T* src = in.ptr() + o * n * inner;
        T* dst = out.ptr() + o * 2 * n * inner;
        for (std::int64_t j = 0; j < 2 * n; ++j) {
            T pos = (T(j) + T(0.5)) / T(2) - T(0.5);
            if (pos < T(0)) {
                pos = T(0);
            }
            const auto i0 = static_cast<std::int64_t>(pos);
            const std::int64_t i1 = std::min(i0 + 1, n - 1);
            const T frac = pos - T(i0);
            for (std::int64_t k = 0; k < inner; ++k) {
                dst[j * inner + k] = (T(1) - frac) * src[i0 * inner + k] + frac * src[i1 * inner + k];
            }
        }
    }
}

template <typename T>
void upsample_axis_adjoint(const Volume5<T>& gout, Volume5<T>& gin, int axis) {
    const Shape5& s = gin.shape();
    const std::int64_t n = s[axis];
    std::int64_t inner = 1;
    for (int a = axis + 1; a < 5; ++a) {
        inner *= s[a];
    }
    std::int64_t outer = 1;
    for (int a = 0; a < axis; ++a) {
        outer *= s[a];
    }
    gin.fill(T(0));
    for (std::int64_t o = 0; o < outer; ++o) {
        const T* src = gout.ptr() + o * 2 * n * inner;
        T* dst = gin.ptr() + o * n * inner;
        for (std::int64_t j = 0; j < 2 * n; ++j) {
            T pos = (T(j) + T(0.5)) / T(2) - T(0.5);
            if (pos < T(0)) {
                pos = T(0);
            }
            const auto i0 = static_cast<std::int64_t>(pos);
            const std::int64_t i1 = std::min(i0 + 1, n - 1);
            const T frac = pos - T(i0);
            for (std::int64_t k = 0; k < inner; ++k) {
                dst[i0 * inner + k] += (T(1) - frac) * src[j * inner + k];
                dst[i1 * inner + k] += frac * src[j * inner + k];
            }
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Sobel

template <typename T>
std::array<Volume5<T>, 3> sobel3d_components(const Volume5<T>& x) {
    const Shape5& s = x.shape();
    const Extent3 e{s[2], s[3], s[4]};
    std::array<Volume5<T>, 3> g{Volume5<T>(s), Volume5<T>(s), Volume5<T>(s)};
    std::vector<T> scratch(static_cast<std::size_t>(e.size()));
    for (std::int64_t b = 0; b < s[0]; ++b) {
        for (std::int64_t c = 0; c < s[1]; ++c) {
            const T* in = x.plane(b, c).data();
            for (int dir = 0; dir < 3; ++dir) {
                sobel_direction(in, g[static_cast<std::size_t>(dir)].plane(b, c).data(),
                                scratch.data(), e, dir);
            }
        }
    }
    return g;
}

template <typename T>
Volume5<T> sobel3d(const Volume5<T>& x) {
    auto g = sobel3d_components(x);
    Volume5<T> y(x.shape());
    for (std::int64_t i = 0; i < y.numel(); ++i) {
        y[i] = std::sqrt(g[0][i] * g[0][i] + g[1][i] * g[1][i] + g[2][i] * g[2][i]);
    }
    return y;
}

template <typename T>
void sobel3d_backward(const Volume5<T>& x, const Volume5<T>& grad_out, Volume5<T>& grad_x) {
    const Shape5& s = x.shape();
    require_same_shape(grad_out.shape(), s, "sobel3d backward");
    const Extent3 e{s[2], s[3], s[4]};
    auto g = sobel3d_components(x);
    // Per-direction upstream: dy * G_dir / |G|, zero where the magnitude vanishes.
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const T mag = std::sqrt(g[0][i] * g[0][i] + g[1][i] * g[1][i] + g[2][i] * g[2][i]);
        const T k = mag > T(0) ? grad_out[i] / mag : T(0);
        for (auto& comp : g) {
            comp[i] *= k;
        }
    }
    std::vector<T> scratch(static_cast<std::size_t>(e.size()));
    std::vector<T> acc(static_cast<std::size_t>(e.size()));
    for (std::int64_t b = 0; b < s[0]; ++b) {
        for (std::int64_t c = 0; c < s[1]; ++c) {
            T* gx = grad_x.plane(b, c).data();
            for (int dir = 0; dir < 3; ++dir) {
                sobel_direction_adjoint(g[static_cast<std::size_t>(dir)].plane(b, c).data(),
                                        acc.data(), scratch.data(), e, dir);
                for (std::int64_t i = 0; i < e.size(); ++i) {
                    gx[i] += acc[static_cast<std::size_t>(i)];
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Normalization

template <typename T>
Volume5<T> layer_norm(const Volume5<T>& x, const Volume5<T>& gamma, const Volume5<T>& beta,
                      double eps) {
    const Shape5& s = x.shape();
    const std::int64_t C = s[1];
    const std::int64_t S = s.spatial();
    require_affine(s, C, gamma.numel(), beta.numel(), "layer_norm");
    Volume5<T> y(s);
    std::vector<T> mean(static_cast<std::size_t>(S));
    std::vector<T> var(static_cast<std::size_t>(S));
    for (std::int64_t b = 0; b < s[0]; ++b) {
        std::fill(mean.begin(), mean.end(), T(0));
        std::fill(var.begin(), var.end(), T(0));
        for (std::int64_t c = 0; c < C; ++c) {
            const T* xc = x.plane(b, c).data();
            for (std::int64_t i = 0; i < S; ++i) {
                mean[static_cast<std::size_t>(i)] += xc[i];
            }
        }
        for (T& m : mean) {
            m /= T(C);
        }
        for (std::int64_t c = 0; c < C; ++c) {
            const T* xc = x.plane(b, c).data();
            for (std::int64_t i = 0; i < S; ++i) {
                const T d = xc[i] - mean[static_cast<std::size_t>(i)];
                var[static_cast<std::size_t>(i)] += d * d;
            }
        }
        for (T& v : var) {
            v = T(1) / std::sqrt(v / T(C) + T(eps));
        }
        for (std::int64_t c = 0; c < C; ++c) {
            const T* xc = x.plane(b, c).data();
            T* yc = y.plane(b, c).data();
            const T g = gamma[c];
            const T bt = beta[c];
            for (std::int64_t i = 0; i < S; ++i) {
                const auto u = static_cast<std::size_t>(i);
                yc[i] = (xc[i] - mean[u]) * var[u] * g + bt;
            }
        }
    }
    return y;
}

template <typename T>
void layer_norm_backward(const Volume5<T>& x, const Volume5<T>& gamma, const Volume5<T>& grad_out,
                         Volume5<T>* grad_x, Volume5<T>* grad_gamma, Volume5<T>* grad_beta,
                         double eps) {
    const Shape5& s = x.shape();
    const std::int64_t C = s[1];
    const std::int64_t S = s.spatial();
    std::vector<T> mean(static_cast<std::size_t>(S));
    std::vector<T> rstd(static_cast<std::size_t>(S));
    std::vector<T> sum_g(static_cast<std::size_t>(S));
    std::vector<T> sum_gx(static_cast<std::size_t>(S));
    for (std::int64_t b = 0; b < s[0]; ++b) {
        std::fill(mean.begin(), mean.end(), T(0));
        std::fill(rstd.begin(), rstd.end(), T(0));
        std::fill(sum_g.begin(), sum_g.end(), T(0));
        std::fill(sum_gx.begin(), sum_gx.end(), T(0));
        for (std::int64_t c = 0; c < C; ++c) {
            const T* xc = x.plane(b, c).data();
            for (std::int64_t i = 0; i < S; ++i) {
                mean[static_cast<std::size_t>(i)] += xc[i];
            }
        }
        for (T& m : mean) {
            m /= T(C);
        }
        for (std::int64_t c = 0; c < C; ++c) {
            const T* xc = x.plane(b, c).data();
            for (std::int64_t i = 0; i < S; ++i) {
                const T d = xc[i] - mean[static_cast<std::size_t>(i)];
                rstd[static_cast<std::size_t>(i)] += d * d;
            }
        }
        for (T& v : rstd) {
            v = T(1) / std::sqrt(v / T(C) + T(eps));
        }
        for (std::int64_t c = 0; c < C; ++c) {
            const T* xc = x.plane(b, c).data();
            const T* gy = grad_out.plane(b, c).data();
            const T g = gamma[c];
            T acc_gamma = 0;
            T acc_beta = 0;
            for (std::int64_t i = 0; i < S; ++i) {
                const auto u = static_cast<std::size_t>(i);
                const T xhat = (xc[i] - mean[u]) * rstd[u];
                acc_gamma += gy[i] * xhat;
                acc_beta += gy[i];
                const T gh = gy[i] * g;
                sum_g[u] += gh;
                sum_gx[u] += gh * xhat;
            }
            if (grad_gamma != nullptr) {
                (*grad_gamma)[c] += acc_gamma;
            }
            if (grad_beta != nullptr) {
                (*grad_beta)[c] += acc_beta;
            }
        }
        if (grad_x == nullptr) {
            continue;
        }
        for (std::int64_t c = 0; c < C; ++c) {
            const T* xc = x.plane(b, c).data();
            const T* gy = grad_out.plane(b, c).data();
            T* gx = grad_x->plane(b, c).data();
            const T g = gamma[c];
            for (std::int64_t i = 0; i < S; ++i) {
                const auto u = static_cast<std::size_t>(i);
                const T xhat = (xc[i] - mean[u]) * rstd[u];
                gx[i] += rstd[u] * (gy[i] * g - sum_g[u] / T(C) - xhat * sum_gx[u] / T(C));
            }
        }
    }
}

template <typename T>
Volume5<T> instance_norm(const Volume5<T>& x, const Volume5<T>& gamma, const Volume5<T>& beta,
                         double eps) {
    const Shape5& s = x.shape();
    const std::int64_t S = s.spatial();
    require_affine(s, s[1], gamma.numel(), beta.numel(), "instance_norm");
    Volume5<T> y(s);
    for (std::int64_t b = 0; b < s[0]; ++b) {
        for (std::int64_t c = 0; c < s[1]; ++c) {
            auto xc = x.plane(b, c);
            auto yc = y.plane(b, c);
            T mean = 0;
            for (T v : xc) {
                mean += v;
            }
            mean /= T(S);
            T var = 0;
            for (T v : xc) {
                var += (v - mean) * (v - mean);
            }
            const T rstd = T(1) / std::sqrt(var / T(S) + T(eps));
            const T g = gamma[c];
            const T bt = beta[c];
            for (std::int64_t i = 0; i < S; ++i) {
                yc[static_cast<std::size_t>(i)] = (xc[static_cast<std::size_t>(i)] - mean) * rstd * g + bt;
            }
        }
    }
    return y;
}

template <typename T>
void instance_norm_backward(const Volume5<T>& x, const Volume5<T>& gamma,
                            const Volume5<T>& grad_out, Volume5<T>* grad_x,
                            Volume5<T>* grad_gamma, Volume5<T>* grad_beta, double eps) {
    const Shape5& s = x.shape();
    const std::int64_t S = s.spatial();
    for (std::int64_t b = 0; b < s[0]; ++b) {
        for (std::int64_t c = 0; c < s[1]; ++c) {
            const T* xc = x.plane(b, c).data();
            const T* gy = grad_out.plane(b, c).data();
            T mean = 0;
            for (std::int64_t i = 0; i < S; ++i) {
                mean += xc[i];
            }
            mean /= T(S);
            T var = 0;
            for (std::int64_t i = 0; i < S; ++i) {
                var += (xc[i] - mean) * (xc[i] - mean);
            }
            const T rstd = T(1) / std::sqrt(var / T(S) + T(eps));
            const T g = gamma[c];
            T sum_g = 0;
            T sum_gx = 0;
            T acc_gamma = 0;
            T acc_beta = 0;
            for (std::int64_t i = 0; i < S; ++i) {
                const T xhat = (xc[i] - mean) * rstd;
                acc_gamma += gy[i] * xhat;
                acc_beta += gy[i];
                sum_g += gy[i] * g;
                sum_gx += gy[i] * g * xhat;
            }
            if (grad_gamma != nullptr) {
                (*grad_gamma)[c] += acc_gamma;
            }
            if (grad_beta != nullptr) {
                (*grad_beta)[c] += acc_beta;
            }
            if (grad_x != nullptr) {
                T* gx = grad_x->plane(b, c).data();
                for (std::int64_t i = 0; i < S; ++i) {
                    const T xhat = (xc[i] - mean) * rstd;
                    gx[i] += rstd * (gy[i] * g - sum_g / T(S) - xhat * sum_gx / T(S));
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Pooling statistics

template <typename T>
Volume5<T> pool_stats(const Volume5<T>& x, PoolKind kind) {
    const Shape5& s = x.shape();
    const std::int64_t C = s[1];
    const std::int64_t S = s.spatial();
    if (kind == PoolKind::GlobalAverage || kind == PoolKind::GlobalMax) {
        Volume5<T> y(Shape5(s[0], C, 1, 1, 1));
        for (std::int64_t b = 0; b < s[0]; ++b) {
            for (std::int64_t c = 0; c < C; ++c) {
                auto xc = x.plane(b, c);
                T acc = kind == PoolKind::GlobalMax ? xc[0] : T(0);
                for (T v : xc) {
                    acc = kind == PoolKind::GlobalMax ? nan_max(acc, v) : acc + v;
                }
                y(b, c, 0, 0, 0) = kind == PoolKind::GlobalMax ? acc : acc / T(S);
            }
        }
        return y;
    }
    Volume5<T> y(Shape5(s[0], 1, s[2], s[3], s[4]));
    for (std::int64_t b = 0; b < s[0]; ++b) {
        T* yb = y.plane(b, 0).data();
        const T* x0 = x.plane(b, 0).data();
        std::copy(x0, x0 + S, yb);
        for (std::int64_t c = 1; c < C; ++c) {
            const T* xc = x.plane(b, c).data();
            for (std::int64_t i = 0; i < S; ++i) {
                switch (kind) {
                    case PoolKind::ChannelMax: yb[i] = nan_max(yb[i], xc[i]); break;
                    case PoolKind::ChannelMin: yb[i] = nan_min(yb[i], xc[i]); break;
                    default: yb[i] += xc[i]; break;
                }
            }
        }
        if (kind == PoolKind::ChannelMean || kind == PoolKind::ChannelStd) {
            for (std::int64_t i = 0; i < S; ++i) {
                yb[i] /= T(C);
            }
        }
        if (kind == PoolKind::ChannelStd) {
            std::vector<T> var(static_cast<std::size_t>(S), T(0));
            for (std::int64_t c = 0; c < C; ++c) {
                const T* xc = x.plane(b, c).data();
                for (std::int64_t i = 0; i < S; ++i) {
                    const T d = xc[i] - yb[i];
                    var[static_cast<std::size_t>(i)] += d * d;
                }
            }
            for (std::int64_t i = 0; i < S; ++i) {
                yb[i] = std::sqrt(var[static_cast<std::size_t>(i)] / T(C));
            }
        }
    }
    return y;
}

template <typename T>
void pool_stats_backward(const Volume5<T>& x, const Volume5<T>& y, PoolKind kind,
                         const Volume5<T>& grad_out, Volume5<T>& grad_x) {
    const Shape5& s = x.shape();
    const std::int64_t C = s[1];
    const std::int64_t S = s.spatial();
    for (std::int64_t b = 0; b < s[0]; ++b) {
        switch (kind) {
            case PoolKind::GlobalAverage:
                for (std::int64_t c = 0; c < C; ++c) {
                    const T g = grad_out(b, c, 0, 0, 0) / T(S);
                    for (T& v : grad_x.plane(b, c)) {
                        v += g;
                    }
                }
                break;
            case PoolKind::GlobalMax:
                for (std::int64_t c = 0; c < C; ++c) {
                    auto xc = x.plane(b, c);
                    const auto it = std::max_element(xc.begin(), xc.end());
                    grad_x.plane(b, c)[static_cast<std::size_t>(it - xc.begin())] +=
                        grad_out(b, c, 0, 0, 0);
                }
                break;
            case PoolKind::ChannelMean: {
                const T* gy = grad_out.plane(b, 0).data();
                for (std::int64_t c = 0; c < C; ++c) {
                    T* gx = grad_x.plane(b, c).data();
                    for (std::int64_t i = 0; i < S; ++i) {
                        gx[i] += gy[i] / T(C);
                    }
                }
                break;
            }
            case PoolKind::ChannelStd: {
                const T* gy = grad_out.plane(b, 0).data();
                const T* sd = y.plane(b, 0).data();
                std::vector<T> mean(static_cast<std::size_t>(S), T(0));
                for (std::int64_t c = 0; c < C; ++c) {
                    const T* xc = x.plane(b, c).data();
                    for (std::int64_t i = 0; i < S; ++i) {
                        mean[static_cast<std::size_t>(i)] += xc[i];
                    }
                }
                for (T& m : mean) {
                    m /= T(C);
                }
                for (std::int64_t c = 0; c < C; ++c) {
                    const T* xc = x.plane(b, c).data();
                    T* gx = grad_x.plane(b, c).data();
                    for (std::int64_t i = 0; i < S; ++i) {
                        if (sd[i] > T(0)) {
                            gx[i] += gy[i] * (xc[i] - mean[static_cast<std::size_t>(i)]) /
                                     (T(C) * sd[i]);
                        }
                    }
                }
                break;
            }
            case PoolKind::ChannelMax:
            case PoolKind::ChannelMin: {
                const T* gy = grad_out.plane(b, 0).data();
                for (std::int64_t i = 0; i < S; ++i) {
                    std::int64_t best = 0;
                    T bv = x.plane(b, 0)[static_cast<std::size_t>(i)];
                    for (std::int64_t c = 1; c < C; ++c) {
                        const T v = x.plane(b, c)[static_cast<std::size_t>(i)];
                        if (kind == PoolKind::ChannelMax ? v > bv : v < bv) {
                            bv = v;
                            best = c;
                        }
                    }
                    grad_x.plane(b, best)[static_cast<std::size_t>(i)] += gy[i];
                }
                break;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Pointwise

template <typename T>
Volume5<T> unary(const Volume5<T>& x, Unary f) {
    Volume5<T> y(x.shape());
    const T* in = x.ptr();
    T* out = y.ptr();
    const std::int64_t n = x.numel();
    switch (f) {
        case Unary::Sigmoid:
            for (std::int64_t i = 0; i < n; ++i) out[i] = sigmoid(in[i]);
            break;
        case Unary::Relu:
            for (std::int64_t i = 0; i < n; ++i) out[i] = in[i] < T(0) ? T(0) : in[i];
            break;
        case Unary::Softplus:
            for (std::int64_t i = 0; i < n; ++i) out[i] = softplus(in[i]);
            break;
        case Unary::Silu:
            for (std::int64_t i = 0; i < n; ++i) out[i] = in[i] * sigmoid(in[i]);
            break;
    }
    return y;
}

template <typename T>
void unary_backward(const Volume5<T>& x, const Volume5<T>& y, Unary f, const Volume5<T>& grad_out,
                    Volume5<T>& grad_x) {
    const T* in = x.ptr();
    const T* out = y.ptr();
    const T* gy = grad_out.ptr();
    T* gx = grad_x.ptr();
    const std::int64_t n = x.numel();
    switch (f) {
        case Unary::Sigmoid:
            for (std::int64_t i = 0; i < n; ++i) gx[i] += gy[i] * out[i] * (T(1) - out[i]);
            break;
        case Unary::Relu:
            for (std::int64_t i = 0; i < n; ++i) gx[i] += in[i] > T(0) ? gy[i] : T(0);
            break;
        case Unary::Softplus:
            for (std::int64_t i = 0; i < n; ++i) gx[i] += gy[i] * sigmoid(in[i]);
            break;
        case Unary::Silu:
            for (std::int64_t i = 0; i < n; ++i) {
                const T sg = sigmoid(in[i]);
                gx[i] += gy[i] * sg * (T(1) + in[i] * (T(1) - sg));
            }
            break;
    }
}

Shape5 broadcast_shape(const Shape5& a, const Shape5& b) {
    Shape5 out = a;
    for (int axis = 0; axis < 5; ++axis) {
        if (a[axis] == b[axis]) {
            continue;
        }
        if (a[axis] == 1) {
            out[axis] = b[axis];
        } else if (b[axis] != 1) {
            throw ShapeError(std::string("broadcast: ") + axis_name(axis) + " axis mismatch (" +
                             std::to_string(a[axis]) + " vs " + std::to_string(b[axis]) +
                             "); only singleton axes broadcast");
        }
    }
    return out;
}

namespace {

std::array<std::int64_t, 5> broadcast_strides(const Shape5& s) {
    std::array<std::int64_t, 5> st{};
    std::int64_t acc = 1;
    for (int a = 4; a >= 0; --a) {
        st[static_cast<std::size_t>(a)] = s[a] == 1 ? 0 : acc;
        acc *= s[a];
    }
    return st;
}

// Visits every output element with the matching flat offsets into a and b.
template <typename Fn>
void for_each_broadcast(const Shape5& out, const Shape5& a, const Shape5& b, Fn&& fn) {
    const auto sa = broadcast_strides(a);
    const auto sb = broadcast_strides(b);
    std::int64_t o = 0;
    for (std::int64_t i0 = 0; i0 < out[0]; ++i0) {
        for (std::int64_t i1 = 0; i1 < out[1]; ++i1) {
            for (std::int64_t i2 = 0; i2 < out[2]; ++i2) {
                for (std::int64_t i3 = 0; i3 < out[3]; ++i3) {
                    const std::int64_t ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2] + i3 * sa[3];
                    const std::int64_t bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2] + i3 * sb[3];
                    for (std::int64_t i4 = 0; i4 < out[4]; ++i4, ++o) {
                        fn(o, ba + i4 * sa[4], bb + i4 * sb[4]);
                    }
                }
            }
        }
    }
}

}  // namespace

template <typename T>
Volume5<T> binary(const Volume5<T>& a, const Volume5<T>& b, Binary op) {
    const Shape5 out_shape = broadcast_shape(a.shape(), b.shape());
    Volume5<T> y(out_shape);
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* py = y.ptr();
    if (a.shape() == b.shape()) {
        const std::int64_t n = y.numel();
        switch (op) {
            case Binary::Add: for (std::int64_t i = 0; i < n; ++i) py[i] = pa[i] + pb[i]; break;
            case Binary::Sub: for (std::int64_t i = 0; i < n; ++i) py[i] = pa[i] - pb[i]; break;
            case Binary::Mul: for (std::int64_t i = 0; i < n; ++i) py[i] = pa[i] * pb[i]; break;
        }
        return y;
    }
    for_each_broadcast(out_shape, a.shape(), b.shape(),
                       [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
                           switch (op) {
                               case Binary::Add: py[o] = pa[ia] + pb[ib]; break;
                               case Binary::Sub: py[o] = pa[ia] - pb[ib]; break;
                               case Binary::Mul: py[o] = pa[ia] * pb[ib]; break;
                           }
                       });
    return y;
}

template <typename T>
void binary_backward(const Volume5<T>& a, const Volume5<T>& b, Binary op,
                     const Volume5<T>& grad_out, Volume5<T>* grad_a, Volume5<T>* grad_b) {
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    const T* gy = grad_out.ptr();
    T* ga = grad_a != nullptr ? grad_a->ptr() : nullptr;
    T* gb = grad_b != nullptr ? grad_b->ptr() : nullptr;
    for_each_broadcast(grad_out.shape(), a.shape(), b.shape(),
                       [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
                           switch (op) {
                               case Binary::Add:
                                   if (ga) ga[ia] += gy[o];
                                   if (gb) gb[ib] += gy[o];
                                   break;
                               case Binary::Sub:
                                   if (ga) ga[ia] += gy[o];
                                   if (gb) gb[ib] -= gy[o];
                                   break;
                               case Binary::Mul:
                                   if (ga) ga[ia] += gy[o] * pb[ib];
                                   if (gb) gb[ib] += gy[o] * pa[ia];
                                   break;
                           }
                       });
}

template <typename T>
Volume5<T> scale(const Volume5<T>& x, T factor) {
    Volume5<T> y(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        y[i] = x[i] * factor;
    }
    return y;
}

// ---------------------------------------------------------------------------
// Channel plumbing, resampling, softmax

template <typename T>
Volume5<T> slice_channels(const Volume5<T>& x, std::int64_t begin, std::int64_t count) {
    const Shape5& s = x.shape();
    if (begin < 0 || count < 1 || begin + count > s[1]) {
        throw ShapeError("slice_channels: channel range [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") outside " + std::to_string(s[1]) +
                         " channels");
    }
    Volume5<T> y(s.with(kChannel, count));
    for (std::int64_t b = 0; b < s[0]; ++b) {
        for (std::int64_t c = 0; c < count; ++c) {
            auto src = x.plane(b, begin + c);
            std::copy(src.begin(), src.end(), y.plane(b, c).begin());
        }
    }
    return y;
}

template <typename T>
Volume5<T> concat_channels(std::span<const Volume5<T>* const> parts) {
    if (parts.empty()) {
        throw ShapeError("concat_channels: no inputs");
    }
    Shape5 s = parts[0]->shape();
    std::int64_t total = 0;
    for (const auto* p : parts) {
        for (int axis : {kBatch, kDepth, kHeight, kWidth}) {
            if (p->shape()[axis] != s[axis]) {
                throw ShapeError(std::string("concat_channels: ") + axis_name(axis) +
                                 " axis mismatch");
            }
        }
        total += p->shape()[1];
    }
    Volume5<T> y(s.with(kChannel, total));
    for (std::int64_t b = 0; b < s[0]; ++b) {
        std::int64_t c0 = 0;
        for (const auto* p : parts) {
            for (std::int64_t c = 0; c < p->shape()[1]; ++c) {
                auto src = p->plane(b, c);
                std::copy(src.begin(), src.end(), y.plane(b, c0 + c).begin());
            }
            c0 += p->shape()[1];
        }
    }
    return y;
}

template <typename T>
Volume5<T> upsample_trilinear2x(const Volume5<T>& x) {
    Volume5<T> cur = x;
    for (int axis = kWidth; axis >= kDepth; --axis) {
        Volume5<T> next(cur.shape().with(axis, cur.shape()[axis] * 2));
        upsample_axis(cur, next, axis);
        cur = std::move(next);
    }
    return cur;
}

template <typename T>
void upsample_trilinear2x_backward(const Volume5<T>& grad_out, Volume5<T>& grad_x) {
    Volume5<T> cur = grad_out;
    for (int axis = kDepth; axis <= kWidth; ++axis) {
        Volume5<T> prev(cur.shape().with(axis, cur.shape()[axis] / 2));
        upsample_axis_adjoint(cur, prev, axis);
        cur = std::move(prev);
    }
    require_same_shape(cur.shape(), grad_x.shape(), "upsample backward");
    for (std::int64_t i = 0; i < cur.numel(); ++i) {
        grad_x[i] += cur[i];
    }
}

template <typename T>
Volume5<T> softmax_channels(const Volume5<T>& logits) {
    const Shape5& s = logits.shape();
    const std::int64_t C = s[1];
    const std::int64_t S = s.spatial();
    Volume5<T> p(s);
    for (std::int64_t b = 0; b < s[0]; ++b) {
        for (std::int64_t i = 0; i < S; ++i) {
            T mx = logits.plane(b, 0)[static_cast<std::size_t>(i)];
            for (std::int64_t c = 1; c < C; ++c) {
                mx = std::max(mx, logits.plane(b, c)[static_cast<std::size_t>(i)]);
            }
            T denom = 0;
            for (std::int64_t c = 0; c < C; ++c) {
                const T e = std::exp(logits.plane(b, c)[static_cast<std::size_t>(i)] - mx);
                p.plane(b, c)[static_cast<std::size_t>(i)] = e;
                denom += e;
            }
            for (std::int64_t c = 0; c < C; ++c) {
                p.plane(b, c)[static_cast<std::size_t>(i)] /= denom;
            }
        }
    }
    return p;
}

template <typename T>
T sum(const Volume5<T>& x) {
    T acc = 0;
    for (T v : x.data()) {
        acc += v;
    }
    return acc;
}

template <typename T>
bool all_finite(const Volume5<T>& x) {
    return std::all_of(x.data().begin(), x.data().end(), [](T v) { return std::isfinite(v); });
}

#define MHM_INSTANTIATE_KERNELS(T)                                                               \
    template std::array<Volume5<T>, 3> sobel3d_components(const Volume5<T>&);                    \
    template Volume5<T> sobel3d(const Volume5<T>&);                                              \
    template void sobel3d_backward(const Volume5<T>&, const Volume5<T>&, Volume5<T>&);           \
    template Volume5<T> layer_norm(const Volume5<T>&, const Volume5<T>&, const Volume5<T>&,      \
                                   double);                                                      \
    template void layer_norm_backward(const Volume5<T>&, const Volume5<T>&, const Volume5<T>&,   \
                                      Volume5<T>*, Volume5<T>*, Volume5<T>*, double);            \
    template Volume5<T> instance_norm(const Volume5<T>&, const Volume5<T>&, const Volume5<T>&,   \
                                      double);                                                   \
    template void instance_norm_backward(const Volume5<T>&, const Volume5<T>&,                   \
                                         const Volume5<T>&, Volume5<T>*, Volume5<T>*,            \
                                         Volume5<T>*, double);                                   \
    template Volume5<T> pool_stats(const Volume5<T>&, PoolKind);                                 \
    template void pool_stats_backward(const Volume5<T>&, const Volume5<T>&, PoolKind,            \
                                      const Volume5<T>&, Volume5<T>&);                           \
    template Volume5<T> unary(const Volume5<T>&, Unary);                                         \
    template void unary_backward(const Volume5<T>&, const Volume5<T>&, Unary, const Volume5<T>&, \
                                 Volume5<T>&);                                                   \
    template Volume5<T> binary(const Volume5<T>&, const Volume5<T>&, Binary);                    \
    template void binary_backward(const Volume5<T>&, const Volume5<T>&, Binary,                  \
                                  const Volume5<T>&, Volume5<T>*, Volume5<T>*);                  \
    template Volume5<T> scale(const Volume5<T>&, T);                                             \
    template Volume5<T> slice_channels(const Volume5<T>&, std::int64_t, std::int64_t);           \
    template Volume5<T> concat_channels(std::span<const Volume5<T>* const>);                     \
    template Volume5<T> upsample_trilinear2x(const Volume5<T>&);                                 \
    template void upsample_trilinear2x_backward(const Volume5<T>&, Volume5<T>&);                 \
    template Volume5<T> softmax_channels(const Volume5<T>&);                                     \
    template T sum(const Volume5<T>&);                                                           \
    template bool all_finite(const Volume5<T>&);

MHM_INSTANTIATE_KERNELS(float)
MHM_INSTANTIATE_KERNELS(double)

#undef MHM_INSTANTIATE_KERNELS

}  // namespace mhm::kernels
