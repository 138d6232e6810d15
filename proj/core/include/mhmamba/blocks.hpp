#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "mhmamba/autodiff.hpp"
#include "mhmamba/ssm.hpp"

namespace mhm::blocks {

template <typename T>
using Var = ad::Var<T>;

enum class Activation { Relu, Silu };

kernels::Unary to_unary(Activation a);
Activation parse_activation(std::string_view name);
const char* activation_name(Activation a);

/// Observer for intermediate maps (gates, attention maps, the pre-projection
/// head concat). Tags: "mhm.gate", "mhm.concat", "csca.channel", "csca.spatial",
/// "csca.lambda", "agf.delta".
template <typename T>
using Probe = std::function<void(std::string_view tag, const Volume5<T>& value)>;

/// Forwards a visitor into a child parameter group under "<prefix>.".
template <typename Fn, typename Child>
void visit_child(Fn& fn, std::string_view prefix, Child& child) {
    child.visit([&](std::string_view name, auto& value) {
        fn(std::string(prefix) + "." + std::string(name), value);
    });
}

/// Convolution weights plus bias. Weights and bias are uniform in +-1/sqrt(fan_in).
template <typename T>
struct ConvLayer {
    Volume5<T> weight;
    Volume5<T> bias;
    kernels::ConvGeometry geometry;

    static ConvLayer init(std::int64_t out_channels, std::int64_t in_channels, std::int64_t kernel,
                          kernels::ConvGeometry geometry, std::mt19937_64& rng);

    Var<T> operator()(const Var<T>& x) const;

    template <typename Fn>
    void visit(Fn&& fn) {
        fn(std::string_view("weight"), weight);
        fn(std::string_view("bias"), bias);
    }
};

template <typename T>
struct NormAffine {
    Volume5<T> gamma;
    Volume5<T> beta;

    static NormAffine init(std::int64_t channels);

    template <typename Fn>
    void visit(Fn&& fn) {
        fn(std::string_view("gamma"), gamma);
        fn(std::string_view("beta"), beta);
    }
};

// ---------------------------------------------------------------------------
// Gated local aggregation: alpha * Sobel3D(F) + beta * Conv(ReLU(IN(F)))

template <typename T>
struct GLAParams {
    ConvLayer<T> detail;
    NormAffine<T> norm;
    Volume5<T> alpha;
    Volume5<T> beta;

    static GLAParams init(std::int64_t channels, std::mt19937_64& rng);

    template <typename Fn>
    void visit(Fn&& fn) {
        visit_child(fn, "detail", detail);
        visit_child(fn, "norm", norm);
        fn(std::string_view("alpha"), alpha);
        fn(std::string_view("beta"), beta);
    }
};

template <typename T>
Var<T> gla_forward(const Var<T>& f, const GLAParams<T>& p);

// ---------------------------------------------------------------------------
// Multi-head Mamba

/// One head: regular conv + activation, then a selective-scan path and a
/// conv-only mixing path fused by a sigmoid gate over both.
template <typename T>
struct MambaHeadParams {
    ConvLayer<T> pre;
    ConvLayer<T> mix;
    ConvLayer<T> gate;
    ssm::SSMHeadParams<T> scan;

    static MambaHeadParams init(std::int64_t channels, std::int64_t state, std::mt19937_64& rng);

    template <typename Fn>
    void visit(Fn&& fn) {
        visit_child(fn, "pre", pre);
        visit_child(fn, "mix", mix);
        visit_child(fn, "gate", gate);
        visit_child(fn, "ssm", scan);
    }
};

template <typename T>
struct MHMParams {
    NormAffine<T> norm;
    std::vector<MambaHeadParams<T>> heads;
    ConvLayer<T> proj;  ///< W_p, 1x1x1
    Volume5<T> delta;   ///< residual weight on F_GLA

    /// Throws ConfigError unless heads divides channels.
    static MHMParams init(std::int64_t channels, std::int64_t heads, std::int64_t state,
                          std::mt19937_64& rng);

    template <typename Fn>
    void visit(Fn&& fn) {
        visit_child(fn, "norm", norm);
        for (std::size_t j = 0; j < heads.size(); ++j) {
            visit_child(fn, "head" + std::to_string(j), heads[j]);
        }
        visit_child(fn, "proj", proj);
        fn(std::string_view("delta"), delta);
    }
};

struct MhmOptions {
    Activation activation = Activation::Relu;
    /// Tokens per scan chunk; 0 runs the sequential scan.
    std::int64_t scan_chunk = 0;
};

template <typename T>
Var<T> mamba_head_forward(const Var<T>& head_in, const MambaHeadParams<T>& p,
                          const MhmOptions& options, const Probe<T>* probe = nullptr);

template <typename T>
Var<T> mhm_forward(const Var<T>& f_gla, const MHMParams<T>& p, const MhmOptions& options,
                   const Probe<T>* probe = nullptr);

// ---------------------------------------------------------------------------
// Channel-spatial calibration attention

template <typename T>
struct CSCAParams {
    ConvLayer<T> reduce;   ///< shared channel MLP, C -> C/r
    ConvLayer<T> expand;   ///< C/r -> C
    ConvLayer<T> spatial;  ///< 4 statistics -> 1 map, 7x7x7
    ConvLayer<T> gate;     ///< [GAP(F_c), GAP(F_s)] -> lambda
    NormAffine<T> norm;
    ConvLayer<T> ffn_in;   ///< C -> 4C
    ConvLayer<T> ffn_out;  ///< 4C -> C

    static CSCAParams init(std::int64_t channels, std::int64_t reduction, std::mt19937_64& rng);

    template <typename Fn>
    void visit(Fn&& fn) {
        visit_child(fn, "reduce", reduce);
        visit_child(fn, "expand", expand);
        visit_child(fn, "spatial", spatial);
        visit_child(fn, "gate", gate);
        visit_child(fn, "norm", norm);
        visit_child(fn, "ffn_in", ffn_in);
        visit_child(fn, "ffn_out", ffn_out);
    }
};

template <typename T>
struct CscaOutput {
    Var<T> calibrated;  ///< lambda * F_c + (1 - lambda) * F_s + F_MHM
    Var<T> out;         ///< MLP(LN(calibrated))
};

template <typename T>
CscaOutput<T> csca_forward(const Var<T>& f_mhm, const CSCAParams<T>& p, Activation activation,
                           const Probe<T>* probe = nullptr);

// ---------------------------------------------------------------------------
// Full block, stem, downsampling

template <typename T>
struct MHMBlockParams {
    GLAParams<T> gla;
    MHMParams<T> mhm;
    CSCAParams<T> csca;

    static MHMBlockParams init(std::int64_t channels, std::int64_t heads, std::int64_t state,
                               std::int64_t reduction, std::mt19937_64& rng);

    template <typename Fn>
    void visit(Fn&& fn) {
        visit_child(fn, "gla", gla);
        visit_child(fn, "mhm", mhm);
        visit_child(fn, "csca", csca);
    }
};

/// GLA -> MHM -> CSCA, with the outer residual around LN + MLP.
template <typename T>
Var<T> block_forward(const Var<T>& f, const MHMBlockParams<T>& p, const MhmOptions& options,
                     const Probe<T>* probe = nullptr);

template <typename T>
struct StemParams {
    ConvLayer<T> depthwise;  ///< 7x7x7, stride 2, padding 3, groups = in_channels
    ConvLayer<T> pointwise;  ///< 1x1x1 to the embedding width

    static StemParams init(std::int64_t in_channels, std::int64_t out_channels,
                           std::mt19937_64& rng);

    template <typename Fn>
    void visit(Fn&& fn) {
        visit_child(fn, "depthwise", depthwise);
        visit_child(fn, "pointwise", pointwise);
    }
};

template <typename T>
Var<T> stem_forward(const Var<T>& x, const StemParams<T>& p);

/// 3x3x3 stride-2 padding-1 convolution, in -> out channels.
template <typename T>
ConvLayer<T> downsample_init(std::int64_t in_channels, std::int64_t out_channels,
                             std::mt19937_64& rng);

/// Throws ShapeError when any spatial extent is already 1.
template <typename T>
Var<T> downsample_forward(const Var<T>& x, const ConvLayer<T>& p);

}  // namespace mhm::blocks
