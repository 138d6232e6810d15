#include "mhmamba/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "mhmamba/errors.hpp"

namespace mhm::metrics {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void require_same_extent(const RegionMask& a, const RegionMask& b) {
    if (a.depth != b.depth) throw ShapeError("metrics: masks differ along depth axis");
    if (a.height != b.height) throw ShapeError("metrics: masks differ along height axis");
    if (a.width != b.width) throw ShapeError("metrics: masks differ along width axis");
}

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher) over samples spaced
// `step` apart. f holds squared distances, +inf where no site exists.
void edt_1d(std::vector<double>& f, std::int64_t n, std::int64_t stride, double* line, double step,
            std::vector<std::int64_t>& v, std::vector<double>& z, std::vector<double>& out) {
    const auto at = [&](std::int64_t i) -> double& { return line[i * stride]; };
    std::int64_t k = -1;
    for (std::int64_t q = 0; q < n; ++q) {
        f[static_cast<std::size_t>(q)] = at(q);
        if (f[static_cast<std::size_t>(q)] == kInf) continue;
        const double xq = static_cast<double>(q) * step;
        const double fq = f[static_cast<std::size_t>(q)] + xq * xq;
        while (k >= 0) {
            const std::int64_t p = v[static_cast<std::size_t>(k)];
            const double xp = static_cast<double>(p) * step;
            const double s = (fq - (f[static_cast<std::size_t>(p)] + xp * xp)) / (2.0 * (xq - xp));
            if (s <= z[static_cast<std::size_t>(k)]) {
                --k;
            } else {
                break;
            }
        }
        ++k;
        v[static_cast<std::size_t>(k)] = q;
        if (k == 0) {
            z[0] = -kInf;
        } else {
            const std::int64_t p = v[static_cast<std::size_t>(k - 1)];
            const double xp = static_cast<double>(p) * step;
            z[static_cast<std::size_t>(k)] =
                (fq - (f[static_cast<std::size_t>(p)] + xp * xp)) / (2.0 * (xq - xp));
        }
    }
    if (k < 0) return;  // no sites: the line stays +inf
    std::int64_t j = 0;
    for (std::int64_t q = 0; q < n; ++q) {
        const double xq = static_cast<double>(q) * step;
        while (j < k && z[static_cast<std::size_t>(j + 1)] < xq) ++j;
        const std::int64_t p = v[static_cast<std::size_t>(j)];
        const double dx = xq - static_cast<double>(p) * step;
        out[static_cast<std::size_t>(q)] = dx * dx + f[static_cast<std::size_t>(p)];
    }
    for (std::int64_t q = 0; q < n; ++q) at(q) = out[static_cast<std::size_t>(q)];
}

std::vector<double> pooled_distances(const RegionMask& pred, const RegionMask& gt) {
    std::vector<double> all = directed_surface_distances(pred, gt);
    const std::vector<double> back = directed_surface_distances(gt, pred);
    all.insert(all.end(), back.begin(), back.end());
    std::sort(all.begin(), all.end());
    return all;
}

}  // namespace

const char* region_name(Region r) {
    switch (r) {
        case Region::WT: return "WT";
        case Region::TC: return "TC";
        case Region::ET: return "ET";
    }
    return "?";
}

RegionMask::RegionMask(std::int64_t d, std::int64_t h, std::int64_t w, Spacing s)
    : depth(d), height(h), width(w), data(static_cast<std::size_t>(d * h * w), 0), spacing(s) {}

std::int64_t RegionMask::count() const {
    return std::count_if(data.begin(), data.end(), [](std::uint8_t v) { return v != 0; });
}

std::array<RegionMask, 3> regions_from_labels(const LabelVolume& labels, std::int64_t batch,
                                              Spacing spacing) {
    std::array<RegionMask, 3> out;
    const std::array<Region, 3> order{Region::WT, Region::TC, Region::ET};
    for (std::size_t r = 0; r < 3; ++r) {
        out[r] = RegionMask(labels.depth, labels.height, labels.width, spacing);
        out[r].region = order[r];
    }
    const std::size_t base = static_cast<std::size_t>(batch * labels.spatial());
    for (std::size_t i = 0; i < static_cast<std::size_t>(labels.spatial()); ++i) {
        const std::uint8_t c = labels.data[base + i];
        if (c > 3) throw Error("regions_from_labels: label " + std::to_string(c) + " is outside 0..3");
        out[0].data[i] = c >= 1;
        out[1].data[i] = c >= 2;
        out[2].data[i] = c == 3;
    }
    return out;
}

double dice_score(const RegionMask& pred, const RegionMask& gt) {
    require_same_extent(pred, gt);
    std::int64_t p = 0, g = 0, both = 0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const bool a = pred.data[i] != 0;
        const bool b = gt.data[i] != 0;
        p += a;
        g += b;
        both += a && b;
    }
    if (p + g == 0) return 100.0;
    return 100.0 * 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

std::vector<Index3> boundary_voxels(const RegionMask& m) {
    std::vector<Index3> out;
    const auto fg = [&](std::int64_t d, std::int64_t h, std::int64_t w) {
        if (d < 0 || h < 0 || w < 0 || d >= m.depth || h >= m.height || w >= m.width) return false;
        return m(d, h, w) != 0;
    };
    for (std::int64_t d = 0; d < m.depth; ++d) {
        for (std::int64_t h = 0; h < m.height; ++h) {
            for (std::int64_t w = 0; w < m.width; ++w) {
                if (!fg(d, h, w)) continue;
                if (!fg(d - 1, h, w) || !fg(d + 1, h, w) || !fg(d, h - 1, w) || !fg(d, h + 1, w) ||
                    !fg(d, h, w - 1) || !fg(d, h, w + 1)) {
                    out.push_back({d, h, w});
                }
            }
        }
    }
    return out;
}

std::vector<double> distance_transform(const RegionMask& seeds) {
    const std::int64_t D = seeds.depth, H = seeds.height, W = seeds.width;
    std::vector<double> g(seeds.data.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = seeds.data[i] != 0 ? 0.0 : kInf;

    const std::int64_t longest = std::max({D, H, W});
    std::vector<double> f(static_cast<std::size_t>(longest)), out(f.size());
    std::vector<double> z(static_cast<std::size_t>(longest) + 1);
    std::vector<std::int64_t> v(static_cast<std::size_t>(longest));

    for (std::int64_t d = 0; d < D; ++d)
        for (std::int64_t h = 0; h < H; ++h)
            edt_1d(f, W, 1, g.data() + seeds.offset(d, h, 0), seeds.spacing.width, v, z, out);
    for (std::int64_t d = 0; d < D; ++d)
        for (std::int64_t w = 0; w < W; ++w)
            edt_1d(f, H, W, g.data() + seeds.offset(d, 0, w), seeds.spacing.height, v, z, out);
    for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t w = 0; w < W; ++w)
            edt_1d(f, D, H * W, g.data() + seeds.offset(0, h, w), seeds.spacing.depth, v, z, out);

    for (double& e : g) e = std::sqrt(e);
    return g;
}

std::vector<double> directed_surface_distances(const RegionMask& from, const RegionMask& to) {
    require_same_extent(from, to);
    RegionMask seeds(to.depth, to.height, to.width, to.spacing);
    for (const auto& p : boundary_voxels(to)) seeds(p.d, p.h, p.w) = 1;
    const std::vector<double> dt = distance_transform(seeds);
    std::vector<double> out;
    for (const auto& p : boundary_voxels(from)) {
        out.push_back(dt[static_cast<std::size_t>(from.offset(p.d, p.h, p.w))]);
    }
    return out;
}

double quantile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) throw Error("quantile of an empty sequence");
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

std::optional<double> hd95(const RegionMask& pred, const RegionMask& gt) {
    require_same_extent(pred, gt);
    if (pred.empty() || gt.empty()) return std::nullopt;
    return quantile_sorted(pooled_distances(pred, gt), 0.95);
}

std::optional<double> hausdorff(const RegionMask& pred, const RegionMask& gt) {
    require_same_extent(pred, gt);
    if (pred.empty() || gt.empty()) return std::nullopt;
    return pooled_distances(pred, gt).back();
}

std::string MetricsReport::csv() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "region,dice,hd95\n";
    const auto hd = [&](const std::optional<double>& v) {
        if (v) {
            os << *v;
        } else {
            os << "undefined";
        }
    };
    for (const auto& r : regions) {
        os << region_name(r.region) << ',' << r.dice << ',';
        hd(r.hd95);
        os << '\n';
    }
    os << "Avg," << mean_dice << ',';
    hd(mean_hd95);
    os << '\n';
    return os.str();
}

namespace {

void finish(MetricsReport& report) {
    double dice = 0.0, hd = 0.0;
    int defined = 0;
    for (const auto& r : report.regions) {
        dice += r.dice;
        if (r.hd95) {
            hd += *r.hd95;
            ++defined;
        }
    }
    report.mean_dice = dice / 3.0;
    report.mean_hd95 = defined > 0 ? std::optional<double>(hd / defined) : std::nullopt;
}

}  // namespace

MetricsReport evaluate(const LabelVolume& pred, const LabelVolume& gt, std::int64_t batch,
                       Spacing spacing) {
    if (pred.depth != gt.depth || pred.height != gt.height || pred.width != gt.width) {
        throw ShapeError("evaluate: prediction and ground truth extents differ");
    }
    const auto p = regions_from_labels(pred, batch, spacing);
    const auto g = regions_from_labels(gt, batch, spacing);
    MetricsReport report;
    for (std::size_t r = 0; r < 3; ++r) {
        report.regions[r] = RegionScore{g[r].region, dice_score(p[r], g[r]), hd95(p[r], g[r])};
    }
    finish(report);
    return report;
}

MetricsReport average(const std::vector<MetricsReport>& cases) {
    MetricsReport out;
    if (cases.empty()) return out;
    for (std::size_t r = 0; r < 3; ++r) {
        double dice = 0.0, hd = 0.0;
        int defined = 0;
        for (const auto& c : cases) {
            dice += c.regions[r].dice;
            if (c.regions[r].hd95) {
                hd += *c.regions[r].hd95;
                ++defined;
            }
        }
        out.regions[r].region = cases.front().regions[r].region;
        out.regions[r].dice = dice / static_cast<double>(cases.size());
        out.regions[r].hd95 = defined > 0 ? std::optional<double>(hd / defined) : std::nullopt;
    }
    finish(out);
    return out;
}

}  // namespace mhm::metrics
