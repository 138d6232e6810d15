#pragma once

// Straightforward loop implementations used as references in tests. They share
// no code with the library kernels beyond the Volume5 container.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <vector>

#include "mhmamba/metrics.hpp"
#include "mhmamba/volume.hpp"

namespace oracle {

using mhm::LabelVolume;
using mhm::Shape5;
using mhm::Volume5;

template <typename T>
Volume5<T> random_volume(const Shape5& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Volume5<T> v(shape);
    for (auto& e : v.data()) e = static_cast<T>(dist(rng));
    return v;
}

inline LabelVolume random_labels(std::int64_t b, std::int64_t d, std::int64_t h, std::int64_t w, int classes,
                                 std::mt19937_64& rng) {
    std::uniform_int_distribution<int> dist(0, classes - 1);
    LabelVolume l(b, d, h, w);
    for (auto& e : l.data) e = static_cast<std::uint8_t>(dist(rng));
    return l;
}

/// Direct convolution: every output element sums its receptive field explicitly.
template <typename T>
Volume5<T> conv3d(const Volume5<T>& x, const Volume5<T>& w, const Volume5<T>* bias, int stride, int pad,
                  int groups) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    const std::int64_t B = xs[0], Cin = xs[1], D = xs[2], H = xs[3], W = xs[4];
    const std::int64_t Cout = ws[0], Cg = ws[1], K0 = ws[2], K1 = ws[3], K2 = ws[4];
    const std::int64_t Do = (D + 2 * pad - K0) / stride + 1;
    const std::int64_t Ho = (H + 2 * pad - K1) / stride + 1;
    const std::int64_t Wo = (W + 2 * pad - K2) / stride + 1;
    const std::int64_t out_per_group = Cout / groups;
    (void)Cin;
    Volume5<T> y(Shape5(B, Cout, Do, Ho, Wo));
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t co = 0; co < Cout; ++co)
            for (std::int64_t od = 0; od < Do; ++od)
                for (std::int64_t oh = 0; oh < Ho; ++oh)
                    for (std::int64_t ow = 0; ow < Wo; ++ow) {
                        long double acc = bias ? static_cast<long double>((*bias)[co]) : 0.0L;
                        const std::int64_t g = co / out_per_group;
                        for (std::int64_t ci = 0; ci < Cg; ++ci)
                            for (std::int64_t kd = 0; kd < K0; ++kd)
                                for (std::int64_t kh = 0; kh < K1; ++kh)
                                    for (std::int64_t kw = 0; kw < K2; ++kw) {
                                        const std::int64_t id = od * stride - pad + kd;
                                        const std::int64_t ih = oh * stride - pad + kh;
                                        const std::int64_t iw = ow * stride - pad + kw;
                                        if (id < 0 || ih < 0 || iw < 0 || id >= D || ih >= H || iw >= W) continue;
                                        acc += static_cast<long double>(x(b, g * Cg + ci, id, ih, iw)) *
                                               static_cast<long double>(w(co, ci, kd, kh, kw));
                                    }
                        y(b, co, od, oh, ow) = static_cast<T>(acc);
                    }
    return y;
}

/// Reflect-padded copy (edge sample not repeated; unit axes replicate).
template <typename T>
std::vector<T> reflect_pad(const Volume5<T>& x, std::int64_t b, std::int64_t c) {
    const auto& s = x.shape();
    const std::int64_t D = s[2], H = s[3], W = s[4];
    const auto mirror = [](std::int64_t i, std::int64_t n) {
        if (n == 1) return std::int64_t{0};
        if (i == -1) return std::int64_t{1};
        if (i == n) return n - 2;
        return i;
    };
    std::vector<T> p(static_cast<std::size_t>((D + 2) * (H + 2) * (W + 2)));
    for (std::int64_t d = -1; d <= D; ++d)
        for (std::int64_t h = -1; h <= H; ++h)
            for (std::int64_t w = -1; w <= W; ++w)
                p[static_cast<std::size_t>(((d + 1) * (H + 2) + (h + 1)) * (W + 2) + (w + 1))] =
                    x(b, c, mirror(d, D), mirror(h, H), mirror(w, W));
    return p;
}

/// Full 27-tap Sobel kernel differentiating along `axis` (0 = depth).
inline std::array<double, 27> sobel_kernel(int axis) {
    const double smooth[3] = {1, 2, 1};
    const double deriv[3] = {-1, 0, 1};
    std::array<double, 27> k{};
    for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b)
            for (int c = 0; c < 3; ++c) {
                const double fa = axis == 0 ? deriv[a] : smooth[a];
                const double fb = axis == 1 ? deriv[b] : smooth[b];
                const double fc = axis == 2 ? deriv[c] : smooth[c];
                k[static_cast<std::size_t>((a * 3 + b) * 3 + c)] = fa * fb * fc;
            }
    return k;
}

template <typename T>
Volume5<T> sobel3d(const Volume5<T>& x) {
    const auto& s = x.shape();
    const std::int64_t H = s[3], W = s[4];
    std::array<std::array<double, 27>, 3> kernels{sobel_kernel(0), sobel_kernel(1), sobel_kernel(2)};
    Volume5<T> y(s);
    for (std::int64_t b = 0; b < s[0]; ++b)
        for (std::int64_t c = 0; c < s[1]; ++c) {
            const auto p = reflect_pad(x, b, c);
            for (std::int64_t d = 0; d < s[2]; ++d)
                for (std::int64_t h = 0; h < H; ++h)
                    for (std::int64_t w = 0; w < W; ++w) {
                        double sq = 0.0;
                        for (const auto& k : kernels) {
                            double g = 0.0;
                            for (int a = 0; a < 3; ++a)
                                for (int bb = 0; bb < 3; ++bb)
                                    for (int cc = 0; cc < 3; ++cc)
                                        g += k[static_cast<std::size_t>((a * 3 + bb) * 3 + cc)] *
                                             static_cast<double>(p[static_cast<std::size_t>(
                                                 ((d + a) * (H + 2) + (h + bb)) * (W + 2) + (w + cc))]);
                            sq += g * g;
                        }
                        y(b, c, d, h, w) = static_cast<T>(std::sqrt(sq));
                    }
        }
    return y;
}

/// Two-pass mean/variance normalization over the channel vector of each voxel.
template <typename T>
Volume5<T> layer_norm(const Volume5<T>& x, const Volume5<T>& gamma, const Volume5<T>& beta, double eps = 1e-5) {
    const auto& s = x.shape();
    Volume5<T> y(s);
    for (std::int64_t b = 0; b < s[0]; ++b)
        for (std::int64_t d = 0; d < s[2]; ++d)
            for (std::int64_t h = 0; h < s[3]; ++h)
                for (std::int64_t w = 0; w < s[4]; ++w) {
                    double mean = 0.0;
                    for (std::int64_t c = 0; c < s[1]; ++c) mean += x(b, c, d, h, w);
                    mean /= static_cast<double>(s[1]);
                    double var = 0.0;
                    for (std::int64_t c = 0; c < s[1]; ++c) var += std::pow(x(b, c, d, h, w) - mean, 2);
                    var /= static_cast<double>(s[1]);
                    for (std::int64_t c = 0; c < s[1]; ++c)
                        y(b, c, d, h, w) = static_cast<T>((x(b, c, d, h, w) - mean) / std::sqrt(var + eps) * gamma[c] + beta[c]);
                }
    return y;
}

template <typename T>
Volume5<T> instance_norm(const Volume5<T>& x, const Volume5<T>& gamma, const Volume5<T>& beta, double eps = 1e-5) {
    const auto& s = x.shape();
    const double n = static_cast<double>(s[2] * s[3] * s[4]);
    Volume5<T> y(s);
    for (std::int64_t b = 0; b < s[0]; ++b)
        for (std::int64_t c = 0; c < s[1]; ++c) {
            double mean = 0.0;
            for (std::int64_t d = 0; d < s[2]; ++d)
                for (std::int64_t h = 0; h < s[3]; ++h)
                    for (std::int64_t w = 0; w < s[4]; ++w) mean += x(b, c, d, h, w);
            mean /= n;
            double var = 0.0;
            for (std::int64_t d = 0; d < s[2]; ++d)
                for (std::int64_t h = 0; h < s[3]; ++h)
                    for (std::int64_t w = 0; w < s[4]; ++w) var += std::pow(x(b, c, d, h, w) - mean, 2);
            var /= n;
            for (std::int64_t d = 0; d < s[2]; ++d)
                for (std::int64_t h = 0; h < s[3]; ++h)
                    for (std::int64_t w = 0; w < s[4]; ++w)
                        y(b, c, d, h, w) =
                            static_cast<T>((x(b, c, d, h, w) - mean) / std::sqrt(var + eps) * gamma[c] + beta[c]);
        }
    return y;
}

enum class Stat { GlobalAverage, GlobalMax, ChannelMean, ChannelStd, ChannelMax, ChannelMin };

template <typename T>
Volume5<T> pool(const Volume5<T>& x, Stat kind) {
    const auto& s = x.shape();
    const bool global = kind == Stat::GlobalAverage || kind == Stat::GlobalMax;
    if (global) {
        Volume5<T> y(Shape5(s[0], s[1], 1, 1, 1));
        for (std::int64_t b = 0; b < s[0]; ++b)
            for (std::int64_t c = 0; c < s[1]; ++c) {
                double acc = kind == Stat::GlobalMax ? -std::numeric_limits<double>::infinity() : 0.0;
                for (std::int64_t d = 0; d < s[2]; ++d)
                    for (std::int64_t h = 0; h < s[3]; ++h)
                        for (std::int64_t w = 0; w < s[4]; ++w)
                            acc = kind == Stat::GlobalMax ? std::max(acc, static_cast<double>(x(b, c, d, h, w)))
                                                          : acc + x(b, c, d, h, w);
                if (kind == Stat::GlobalAverage) acc /= static_cast<double>(s[2] * s[3] * s[4]);
                y(b, c, 0, 0, 0) = static_cast<T>(acc);
            }
        return y;
    }
    Volume5<T> y(Shape5(s[0], 1, s[2], s[3], s[4]));
    for (std::int64_t b = 0; b < s[0]; ++b)
        for (std::int64_t d = 0; d < s[2]; ++d)
            for (std::int64_t h = 0; h < s[3]; ++h)
                for (std::int64_t w = 0; w < s[4]; ++w) {
                    std::vector<double> v;
                    for (std::int64_t c = 0; c < s[1]; ++c) v.push_back(x(b, c, d, h, w));
                    double r = 0.0;
                    switch (kind) {
                        case Stat::ChannelMax: r = *std::max_element(v.begin(), v.end()); break;
                        case Stat::ChannelMin: r = *std::min_element(v.begin(), v.end()); break;
                        default: {
                            double mean = 0.0;
                            for (double e : v) mean += e;
                            mean /= static_cast<double>(v.size());
                            if (kind == Stat::ChannelMean) {
                                r = mean;
                            } else {
                                double var = 0.0;
                                for (double e : v) var += (e - mean) * (e - mean);
                                r = std::sqrt(var / static_cast<double>(v.size()));
                            }
                        }
                    }
                    y(b, 0, d, h, w) = static_cast<T>(r);
                }
    return y;
}

/// Softmax probabilities of voxel i in batch b.
template <typename T>
std::vector<double> voxel_softmax(const Volume5<T>& z, std::int64_t b, std::int64_t d, std::int64_t h, std::int64_t w) {
    const std::int64_t K = z.shape()[1];
    std::vector<double> p(static_cast<std::size_t>(K));
    double mx = -std::numeric_limits<double>::infinity();
    for (std::int64_t c = 0; c < K; ++c) mx = std::max(mx, static_cast<double>(z(b, c, d, h, w)));
    double den = 0.0;
    for (std::int64_t c = 0; c < K; ++c) den += std::exp(z(b, c, d, h, w) - mx);
    for (std::int64_t c = 0; c < K; ++c) p[static_cast<std::size_t>(c)] = std::exp(z(b, c, d, h, w) - mx) / den;
    return p;
}

template <typename T>
double dice_loss(const Volume5<T>& z, const LabelVolume& y, double eps = 1e-5) {
    const auto& s = z.shape();
    const std::int64_t K = s[1];
    std::vector<double> inter(static_cast<std::size_t>(K)), psum(inter), gsum(inter);
    for (std::int64_t b = 0; b < s[0]; ++b)
        for (std::int64_t d = 0; d < s[2]; ++d)
            for (std::int64_t h = 0; h < s[3]; ++h)
                for (std::int64_t w = 0; w < s[4]; ++w) {
                    const auto p = voxel_softmax(z, b, d, h, w);
                    for (std::int64_t c = 1; c < K; ++c) {
                        const double g = y(b, d, h, w) == c ? 1.0 : 0.0;
                        inter[static_cast<std::size_t>(c)] += p[static_cast<std::size_t>(c)] * g;
                        psum[static_cast<std::size_t>(c)] += p[static_cast<std::size_t>(c)];
                        gsum[static_cast<std::size_t>(c)] += g;
                    }
                }
    double dice = 0.0;
    for (std::int64_t c = 1; c < K; ++c) {
        const auto k = static_cast<std::size_t>(c);
        dice += (2.0 * inter[k] + eps) / (psum[k] + gsum[k] + eps);
    }
    return 1.0 - dice / static_cast<double>(K - 1);
}

template <typename T>
double ce_loss(const Volume5<T>& z, const LabelVolume& y) {
    const auto& s = z.shape();
    double acc = 0.0;
    std::int64_t n = 0;
    for (std::int64_t b = 0; b < s[0]; ++b)
        for (std::int64_t d = 0; d < s[2]; ++d)
            for (std::int64_t h = 0; h < s[3]; ++h)
                for (std::int64_t w = 0; w < s[4]; ++w) {
                    const auto p = voxel_softmax(z, b, d, h, w);
                    acc -= std::log(p[y(b, d, h, w)]);
                    ++n;
                }
    return acc / static_cast<double>(n);
}

/// Token-by-token transcription of the selective-scan recurrence for one batch
/// entry; x is (N, C) row-major, weights row-major as documented on ScanWeights.
struct ScanOracleWeights {
    std::int64_t C = 0, n = 0;
    std::vector<double> a_log, w_b, w_c, w_delta, b_delta, d_skip;
};

inline std::vector<double> scan(const std::vector<double>& x, std::int64_t N, const ScanOracleWeights& p) {
    const std::int64_t C = p.C, n = p.n;
    std::vector<double> h(static_cast<std::size_t>(C * n), 0.0), y(static_cast<std::size_t>(N * C));
    for (std::int64_t t = 0; t < N; ++t) {
        const double* xt = x.data() + t * C;
        for (std::int64_t c = 0; c < C; ++c) {
            double z = p.b_delta[static_cast<std::size_t>(c)];
            for (std::int64_t j = 0; j < C; ++j) z += p.w_delta[static_cast<std::size_t>(c * C + j)] * xt[j];
            const double delta = std::log1p(std::exp(z));
            double out = p.d_skip[static_cast<std::size_t>(c)] * xt[c];
            for (std::int64_t k = 0; k < n; ++k) {
                double bk = 0.0, ck = 0.0;
                for (std::int64_t j = 0; j < C; ++j) {
                    bk += p.w_b[static_cast<std::size_t>(k * C + j)] * xt[j];
                    ck += p.w_c[static_cast<std::size_t>(k * C + j)] * xt[j];
                }
                const double a = -std::exp(p.a_log[static_cast<std::size_t>(c * n + k)]);
                double& hk = h[static_cast<std::size_t>(c * n + k)];
                hk = std::exp(delta * a) * hk + delta * bk * xt[c];
                out += ck * hk;
            }
            y[static_cast<std::size_t>(t * C + c)] = out;
        }
    }
    return y;
}

/// Boundary by explicit neighbour inspection, then all pairs of distances.
inline std::vector<std::array<std::int64_t, 3>> boundary(const mhm::metrics::RegionMask& m) {
    std::vector<std::array<std::int64_t, 3>> out;
    const int offs[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
    for (std::int64_t d = 0; d < m.depth; ++d)
        for (std::int64_t h = 0; h < m.height; ++h)
            for (std::int64_t w = 0; w < m.width; ++w) {
                if (!m(d, h, w)) continue;
                bool edge = false;
                for (const auto& o : offs) {
                    const std::int64_t a = d + o[0], b = h + o[1], c = w + o[2];
                    if (a < 0 || b < 0 || c < 0 || a >= m.depth || b >= m.height || c >= m.width || !m(a, b, c)) {
                        edge = true;
                    }
                }
                if (edge) out.push_back({d, h, w});
            }
    return out;
}

inline std::vector<double> directed(const mhm::metrics::RegionMask& from, const mhm::metrics::RegionMask& to) {
    const auto a = boundary(from);
    const auto b = boundary(to);
    const auto& sp = from.spacing;
    std::vector<double> out;
    for (const auto& p : a) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& q : b) {
            const double dd = static_cast<double>(p[0] - q[0]) * sp.depth;
            const double dh = static_cast<double>(p[1] - q[1]) * sp.height;
            const double dw = static_cast<double>(p[2] - q[2]) * sp.width;
            best = std::min(best, std::sqrt(dd * dd + dh * dh + dw * dw));
        }
        out.push_back(best);
    }
    return out;
}

/// Pooled bidirectional distances, 95th percentile by linear interpolation.
inline std::optional<double> hd95(const mhm::metrics::RegionMask& p, const mhm::metrics::RegionMask& g, double q = 0.95) {
    if (p.count() == 0 || g.count() == 0) return std::nullopt;
    auto all = directed(p, g);
    const auto back = directed(g, p);
    all.insert(all.end(), back.begin(), back.end());
    std::sort(all.begin(), all.end());
    const double pos = q * static_cast<double>(all.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, all.size() - 1);
    return all[lo] + (pos - static_cast<double>(lo)) * (all[hi] - all[lo]);
}

/// How many tiles cover each voxel index along one axis, by brute enumeration of
/// the tile grid (stride, then a final tile flush with the end).
inline std::vector<int> axis_coverage(std::int64_t extent, std::int64_t patch, double overlap) {
    std::int64_t stride = static_cast<std::int64_t>(std::floor(static_cast<double>(patch) * (1.0 - overlap)));
    if (stride < 1) stride = 1;
    std::vector<std::int64_t> starts;
    std::int64_t s = 0;
    while (true) {
        if (s + patch >= extent) {
            starts.push_back(extent - patch);
            break;
        }
        starts.push_back(s);
        s += stride;
    }
    std::sort(starts.begin(), starts.end());
    starts.erase(std::unique(starts.begin(), starts.end()), starts.end());
    std::vector<int> cover(static_cast<std::size_t>(extent), 0);
    for (std::int64_t st : starts)
        for (std::int64_t i = st; i < st + patch; ++i) ++cover[static_cast<std::size_t>(i)];
    return cover;
}

}  // namespace oracle
