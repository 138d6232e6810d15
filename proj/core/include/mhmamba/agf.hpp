#pragma once

#include <array>
#include <cstdint>
#include <random>

#include "mhmamba/blocks.hpp"

// Adaptive gated fusion of an encoder skip and the upsampled decoder feature.
namespace mhm::blocks {

inline constexpr std::int64_t kFusionGroups = 4;

template <typename T>
struct AGFParams {
    /// One 1x1x1 conv per group: [enc_k, dec_k] (2C/4 channels) -> one gate map.
    std::array<ConvLayer<T>, kFusionGroups> gates;
    ConvLayer<T> fuse;  ///< W_f, 1x1x1, C -> C

    /// Throws ConfigError unless 4 divides channels.
    static AGFParams init(std::int64_t channels, std::mt19937_64& rng);

    template <typename Fn>
    void visit(Fn&& fn) {
        for (std::size_t k = 0; k < gates.size(); ++k) {
            visit_child(fn, "gate" + std::to_string(k), gates[k]);
        }
        visit_child(fn, "fuse", fuse);
    }
};

/// Per group k: delta_k = sigmoid(conv([enc_k, dec_k])), fused_k = delta_k enc_k +
/// (1 - delta_k) dec_k. The fused groups are concatenated and projected by W_f.
/// Throws ShapeError when enc and dec differ in shape.
template <typename T>
Var<T> agf_forward(const Var<T>& enc, const Var<T>& dec, const AGFParams<T>& p,
                   const Probe<T>* probe = nullptr);

}  // namespace mhm::blocks
