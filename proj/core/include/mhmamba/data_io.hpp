#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mhmamba/volume.hpp"

namespace mhm::io {

// ---------------------------------------------------------------------------
// Volume files: "<stem>.json" header next to a "<stem>.raw" little-endian
// payload in (C, D, H, W) row-major order.

enum class Dtype { F32, F64, U8 };

const char* dtype_name(Dtype d);
/// Throws IoError(UnknownDtype).
Dtype parse_dtype(const std::string& name);
std::size_t dtype_width(Dtype d);

struct VolumeHeader {
    std::array<std::int64_t, 4> shape{1, 1, 1, 1};  ///< C, D, H, W
    Dtype dtype = Dtype::F32;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::vector<std::string> modalities;
    std::string payload;  ///< file name of the raw stream, relative to the header

    std::int64_t numel() const { return shape[0] * shape[1] * shape[2] * shape[3]; }
};

/// "<dir>/<stem>.json" for any of "<stem>", "<stem>.json", "<stem>.raw".
std::filesystem::path header_path(const std::filesystem::path& path);

/// Writes batch entry 0; the dtype follows T (float -> f32, double -> f64).
template <typename T>
void write_volume(const std::filesystem::path& path, const Volume5<T>& v,
                  const std::vector<std::string>& modalities = {},
                  std::array<double, 3> spacing = {1.0, 1.0, 1.0});
void write_labels(const std::filesystem::path& path, const LabelVolume& labels,
                  std::array<double, 3> spacing = {1.0, 1.0, 1.0});

VolumeHeader read_header(const std::filesystem::path& path);
/// Returns a (1, C, D, H, W) volume converted from the stored dtype.
template <typename T>
Volume5<T> read_volume(const std::filesystem::path& path);
/// Requires a single-channel u8 file.
LabelVolume read_labels(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Synthetic phantom: three nested ellipsoids (edema 1 > core 2 > enhancing 3).

inline const std::vector<std::string> kModalities{"T1", "T1ce", "T2", "FLAIR"};

struct PhantomSpec {
    std::array<std::int64_t, 3> dims{64, 64, 64};
    std::array<double, 3> center{31.5, 31.5, 31.5};
    /// Outer to inner semi-axes (depth, height, width) in voxels.
    std::array<std::array<double, 3>, 3> radii{{{20.0, 17.0, 15.0}, {12.0, 10.0, 9.0}, {6.0, 5.0, 4.5}}};
    /// Mean intensity per class (background, 1, 2, 3) and modality.
    std::array<std::array<float, 4>, 4> means{{{0.20f, 0.20f, 0.30f, 0.25f},
                                                {0.35f, 0.30f, 0.80f, 0.90f},
                                                {0.15f, 0.25f, 0.60f, 0.50f},
                                                {0.50f, 0.90f, 0.45f, 0.60f}}};
    double noise = 0.05;
    std::uint64_t seed = 0;

    /// Throws ConfigError unless radii shrink strictly on every axis and the outer
    /// ellipsoid lies inside the volume.
    void validate() const;
};

/// Default spec with the centre and radii jittered by a seeded draw.
PhantomSpec random_phantom_spec(std::uint64_t seed, std::array<std::int64_t, 3> dims = {64, 64, 64});

struct Phantom {
    Volume5<float> image;  ///< (1, 4, D, H, W)
    LabelVolume labels;    ///< (1, D, H, W)
};

/// Class of voxel (d, h, w): 3 inside the innermost ellipsoid, 0 outside all.
std::uint8_t phantom_label(const PhantomSpec& spec, std::int64_t d, std::int64_t h, std::int64_t w);

Phantom generate_phantom(const PhantomSpec& spec);

// ---------------------------------------------------------------------------
// Cropping and flips shared by sampling and tiling.

template <typename T>
Volume5<T> crop(const Volume5<T>& v, const std::array<std::int64_t, 3>& corner,
                const std::array<std::int64_t, 3>& size);
LabelVolume crop(const LabelVolume& v, const std::array<std::int64_t, 3>& corner,
                 const std::array<std::int64_t, 3>& size);

/// Mirrors along spatial axis 0 (depth), 1 (height) or 2 (width).
template <typename T>
Volume5<T> flip(const Volume5<T>& v, int axis);
LabelVolume flip(const LabelVolume& v, int axis);

// ---------------------------------------------------------------------------
// Sliding-window inference

template <typename T>
using LogitsFn = std::function<Volume5<T>(const Volume5<T>&)>;

/// Tile origins along one axis: stride max(1, floor(patch * (1 - overlap))), with the
/// last tile moved inward to end at the boundary.
std::vector<std::int64_t> tile_starts(std::int64_t extent, std::int64_t patch, double overlap);

template <typename T>
struct SlidingWindowResult {
    Volume5<T> probabilities;         ///< (B, classes, D, H, W), averaged over tiles
    std::vector<std::int32_t> counts; ///< tiles covering each (D, H, W) voxel
    LabelVolume labels;               ///< argmax, first index on ties
};

/// Throws ShapeError when the patch exceeds the volume and ConfigError when the
/// overlap lies outside [0, 0.9].
template <typename T>
SlidingWindowResult<T> sliding_window_infer(const LogitsFn<T>& model, const Volume5<T>& volume,
                                            const std::array<std::int64_t, 3>& patch,
                                            double overlap);

}  // namespace mhm::io
