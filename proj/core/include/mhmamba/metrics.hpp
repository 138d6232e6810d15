#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mhmamba/volume.hpp"

namespace mhm::metrics {

enum class Region { WT, TC, ET };

const char* region_name(Region r);

/// Millimetres per voxel along (depth, height, width).
struct Spacing {
    double depth = 1.0;
    double height = 1.0;
    double width = 1.0;
};

struct Index3 {
    std::int64_t d = 0, h = 0, w = 0;
    bool operator==(const Index3&) const = default;
};

/// Binary (D, H, W) mask.
struct RegionMask {
    std::int64_t depth = 0, height = 0, width = 0;
    std::vector<std::uint8_t> data;
    Region region = Region::WT;
    Spacing spacing;

    RegionMask() = default;
    RegionMask(std::int64_t d, std::int64_t h, std::int64_t w, Spacing s = {});

    std::int64_t numel() const { return depth * height * width; }
    std::int64_t offset(std::int64_t d, std::int64_t h, std::int64_t w) const {
        return (d * height + h) * width + w;
    }
    std::uint8_t& operator()(std::int64_t d, std::int64_t h, std::int64_t w) {
        return data[static_cast<std::size_t>(offset(d, h, w))];
    }
    std::uint8_t operator()(std::int64_t d, std::int64_t h, std::int64_t w) const {
        return data[static_cast<std::size_t>(offset(d, h, w))];
    }
    std::int64_t count() const;
    bool empty() const { return count() == 0; }
};

/// WT = {1,2,3}, TC = {2,3}, ET = {3}, returned in that order for one batch entry.
/// Throws Error for labels above 3.
std::array<RegionMask, 3> regions_from_labels(const LabelVolume& labels, std::int64_t batch = 0,
                                              Spacing spacing = {});

/// 100 * 2|P n G| / (|P| + |G|); 100 when both are empty. Throws ShapeError on mismatch.
double dice_score(const RegionMask& pred, const RegionMask& gt);

/// Foreground voxels with at least one 6-connected background or out-of-bounds neighbour.
std::vector<Index3> boundary_voxels(const RegionMask& mask);

/// Exact Euclidean distance (mm) from every voxel to the nearest voxel with seed != 0.
/// Entries are +inf when there are no seeds.
std::vector<double> distance_transform(const RegionMask& seeds);

/// Distances from each boundary voxel of `from` to the nearest boundary voxel of `to`.
std::vector<double> directed_surface_distances(const RegionMask& from, const RegionMask& to);

/// Linear-interpolated quantile of an ascending sequence, q in [0, 1].
double quantile_sorted(const std::vector<double>& sorted, double q);

/// 95th percentile of the pooled bidirectional boundary distances; nullopt when either
/// mask is empty.
std::optional<double> hd95(const RegionMask& pred, const RegionMask& gt);
/// Maximum of the same pooled distances.
std::optional<double> hausdorff(const RegionMask& pred, const RegionMask& gt);

struct RegionScore {
    Region region = Region::WT;
    double dice = 0.0;
    std::optional<double> hd95;
};

struct MetricsReport {
    std::array<RegionScore, 3> regions;  ///< WT, TC, ET
    double mean_dice = 0.0;
    std::optional<double> mean_hd95;  ///< over regions where HD95 is defined

    const RegionScore& at(Region r) const { return regions[static_cast<std::size_t>(r)]; }
    /// "region,dice,hd95" rows for WT, TC, ET, Avg; undefined distances print as "undefined".
    std::string csv() const;
};

MetricsReport evaluate(const LabelVolume& pred, const LabelVolume& gt, std::int64_t batch = 0,
                       Spacing spacing = {});

/// Averages per-case reports region by region, skipping undefined distances.
MetricsReport average(const std::vector<MetricsReport>& cases);

}  // namespace mhm::metrics
