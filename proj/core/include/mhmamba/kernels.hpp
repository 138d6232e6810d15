#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "mhmamba/volume.hpp"

// Forward kernels over Volume5 and the matching vector-Jacobian products.
// Backward routines accumulate into their gradient outputs; null pointers
// skip that gradient.
namespace mhm::kernels {

inline constexpr double kNormEpsilon = 1e-5;

struct ConvGeometry {
    int stride = 1;
    int padding = 0;
    int groups = 1;
};

/// Weight (C_out, C_in/groups, kd, kh, kw), optional bias of C_out entries.
template <typename T>
struct ConvParams {
    Volume5<T> weight;
    std::optional<Volume5<T>> bias;
    ConvGeometry geometry;
};

/// Validates operands and returns the output shape, floor((n + 2p - k)/s) + 1 per axis.
Shape5 conv3d_output_shape(const Shape5& x, const Shape5& weight, const ConvGeometry& g);

template <typename T>
Volume5<T> conv3d(const Volume5<T>& x, const Volume5<T>& weight, const Volume5<T>* bias,
                  const ConvGeometry& g);

template <typename T>
Volume5<T> conv3d(const Volume5<T>& x, const ConvParams<T>& p) {
    return conv3d(x, p.weight, p.bias ? &*p.bias : nullptr, p.geometry);
}

template <typename T>
void conv3d_backward(const Volume5<T>& x, const Volume5<T>& weight, const ConvGeometry& g,
                     const Volume5<T>& grad_out, Volume5<T>* grad_x, Volume5<T>* grad_w,
                     Volume5<T>* grad_b);

/// Per-channel gradient magnitude of the three 3x3x3 Sobel responses, reflect padded.
template <typename T>
Volume5<T> sobel3d(const Volume5<T>& x);

/// Directional responses (derivative along depth, height, width) before the magnitude.
template <typename T>
std::array<Volume5<T>, 3> sobel3d_components(const Volume5<T>& x);

template <typename T>
void sobel3d_backward(const Volume5<T>& x, const Volume5<T>& grad_out, Volume5<T>& grad_x);

/// Normalizes the channel vector at every voxel, then applies gamma/beta per channel.
template <typename T>
Volume5<T> layer_norm(const Volume5<T>& x, const Volume5<T>& gamma, const Volume5<T>& beta,
                      double eps = kNormEpsilon);

template <typename T>
void layer_norm_backward(const Volume5<T>& x, const Volume5<T>& gamma, const Volume5<T>& grad_out,
                         Volume5<T>* grad_x, Volume5<T>* grad_gamma, Volume5<T>* grad_beta,
                         double eps = kNormEpsilon);

/// Normalizes each (batch, channel) plane over D, H, W.
template <typename T>
Volume5<T> instance_norm(const Volume5<T>& x, const Volume5<T>& gamma, const Volume5<T>& beta,
                         double eps = kNormEpsilon);

template <typename T>
void instance_norm_backward(const Volume5<T>& x, const Volume5<T>& gamma,
                            const Volume5<T>& grad_out, Volume5<T>* grad_x,
                            Volume5<T>* grad_gamma, Volume5<T>* grad_beta,
                            double eps = kNormEpsilon);

/// GlobalAverage/GlobalMax reduce over (D, H, W) to (B, C, 1, 1, 1); the channel
/// statistics reduce over C to (B, 1, D, H, W). Std is the population deviation.
enum class PoolKind { GlobalAverage, GlobalMax, ChannelMean, ChannelStd, ChannelMax, ChannelMin };

template <typename T>
Volume5<T> pool_stats(const Volume5<T>& x, PoolKind kind);

template <typename T>
void pool_stats_backward(const Volume5<T>& x, const Volume5<T>& y, PoolKind kind,
                         const Volume5<T>& grad_out, Volume5<T>& grad_x);

enum class Unary { Sigmoid, Relu, Softplus, Silu };

/// Logistic function kept strictly inside (0, 1): beyond |v| ~ 37 (double) or
/// ~17 (float) it would round to 1 or underflow to 0, so it saturates at the
/// nearest interior values instead. NaN passes through.
template <typename T>
inline T sigmoid(T v) {
    constexpr T lo = std::numeric_limits<T>::min();
    constexpr T hi = T(1) - std::numeric_limits<T>::epsilon() / T(2);
    T s;
    if (v >= T(0)) {
        s = T(1) / (T(1) + std::exp(-v));
    } else {
        const T e = std::exp(v);
        s = e / (T(1) + e);
    }
    return std::clamp(s, lo, hi);
}

template <typename T>
inline T softplus(T v) {
    if (v > T(30)) {
        return v;
    }
    return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v)));
}

template <typename T>
Volume5<T> unary(const Volume5<T>& x, Unary f);

template <typename T>
void unary_backward(const Volume5<T>& x, const Volume5<T>& y, Unary f, const Volume5<T>& grad_out,
                    Volume5<T>& grad_x);

enum class Binary { Add, Sub, Mul };

/// Broadcasts along singleton axes only; any other mismatch names the axis.
Shape5 broadcast_shape(const Shape5& a, const Shape5& b);

template <typename T>
Volume5<T> binary(const Volume5<T>& a, const Volume5<T>& b, Binary op);

template <typename T>
void binary_backward(const Volume5<T>& a, const Volume5<T>& b, Binary op,
                     const Volume5<T>& grad_out, Volume5<T>* grad_a, Volume5<T>* grad_b);

template <typename T>
Volume5<T> scale(const Volume5<T>& x, T factor);

/// Channel range [begin, begin + count).
template <typename T>
Volume5<T> slice_channels(const Volume5<T>& x, std::int64_t begin, std::int64_t count);

template <typename T>
Volume5<T> concat_channels(std::span<const Volume5<T>* const> parts);

/// x2 trilinear upsampling with half-pixel centres (edge samples clamp).
template <typename T>
Volume5<T> upsample_trilinear2x(const Volume5<T>& x);

template <typename T>
void upsample_trilinear2x_backward(const Volume5<T>& grad_out, Volume5<T>& grad_x);

template <typename T>
Volume5<T> softmax_channels(const Volume5<T>& logits);

template <typename T>
T sum(const Volume5<T>& x);

template <typename T>
bool all_finite(const Volume5<T>& x);

}  // namespace mhm::kernels
