#include "mhmamba/blocks.hpp"

#include <cmath>

#include "mhmamba/errors.hpp"

namespace mhm::blocks {

using kernels::ConvGeometry;

kernels::Unary to_unary(Activation a) {
    return a == Activation::Silu ? kernels::Unary::Silu : kernels::Unary::Relu;
}

Activation parse_activation(std::string_view name) {
    if (name == "relu") return Activation::Relu;
    if (name == "silu") return Activation::Silu;
    throw ConfigError("unknown activation '" + std::string(name) + "' (expected relu or silu)");
}

const char* activation_name(Activation a) {
    return a == Activation::Silu ? "silu" : "relu";
}

namespace {

template <typename T>
Volume5<T> uniform(const Shape5& shape, T bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-static_cast<double>(bound),
                                                static_cast<double>(bound));
    Volume5<T> v(shape);
    for (auto& e : v.data()) e = static_cast<T>(dist(rng));
    return v;
}

template <typename T>
Volume5<T> constant(T value) {
    return Volume5<T>(Shape5(1, 1, 1, 1, 1), value);
}

template <typename T>
Var<T> param(ad::Tape<T>& tape, const Volume5<T>& v) {
    return tape.leaf(v);
}

template <typename T>
Var<T> normed(const Var<T>& x, const NormAffine<T>& n, bool layer) {
    auto& tape = x.tape();
    return layer ? ad::layer_norm(x, param(tape, n.gamma), param(tape, n.beta))
                 : ad::instance_norm(x, param(tape, n.gamma), param(tape, n.beta));
}

template <typename T>
void emit(const Probe<T>* probe, std::string_view tag, const Var<T>& v) {
    if (probe != nullptr && *probe) (*probe)(tag, v.value());
}

ConvGeometry same_padding(std::int64_t kernel) {
    ConvGeometry g;
    g.padding = static_cast<int>(kernel / 2);
    return g;
}

}  // namespace

template <typename T>
ConvLayer<T> ConvLayer<T>::init(std::int64_t out_channels, std::int64_t in_channels,
                                std::int64_t kernel, ConvGeometry geometry, std::mt19937_64& rng) {
    if (in_channels % geometry.groups != 0 || out_channels % geometry.groups != 0) {
        throw ConfigError("conv layer: groups must divide both channel counts");
    }
    const std::int64_t cin_g = in_channels / geometry.groups;
    const T bound = T(1) / std::sqrt(static_cast<T>(cin_g * kernel * kernel * kernel));
    ConvLayer layer;
    layer.weight = uniform<T>(Shape5(out_channels, cin_g, kernel, kernel, kernel), bound, rng);
    layer.bias = uniform<T>(Shape5(out_channels, 1, 1, 1, 1), bound, rng);
    layer.geometry = geometry;
    return layer;
}

template <typename T>
Var<T> ConvLayer<T>::operator()(const Var<T>& x) const {
    auto& tape = x.tape();
    return ad::conv3d(x, param(tape, weight), std::optional<Var<T>>(param(tape, bias)), geometry);
}

template <typename T>
NormAffine<T> NormAffine<T>::init(std::int64_t channels) {
    return NormAffine{Volume5<T>(Shape5(channels, 1, 1, 1, 1), T(1)),
                      Volume5<T>(Shape5(channels, 1, 1, 1, 1), T(0))};
}

// ---------------------------------------------------------------------------

template <typename T>
GLAParams<T> GLAParams<T>::init(std::int64_t channels, std::mt19937_64& rng) {
    GLAParams p;
    p.detail = ConvLayer<T>::init(channels, channels, 3, same_padding(3), rng);
    p.norm = NormAffine<T>::init(channels);
    p.alpha = constant<T>(1);
    p.beta = constant<T>(1);
    return p;
}

template <typename T>
Var<T> gla_forward(const Var<T>& f, const GLAParams<T>& p) {
    auto& tape = f.tape();
    const Var<T> edges = ad::sobel3d(f);
    const Var<T> local = p.detail(ad::relu(normed(f, p.norm, false)));
    return ad::add(ad::mul(param(tape, p.alpha), edges), ad::mul(param(tape, p.beta), local));
}

// ---------------------------------------------------------------------------

template <typename T>
MambaHeadParams<T> MambaHeadParams<T>::init(std::int64_t channels, std::int64_t state,
                                            std::mt19937_64& rng) {
    MambaHeadParams p;
    p.pre = ConvLayer<T>::init(channels, channels, 3, same_padding(3), rng);
    p.mix = ConvLayer<T>::init(channels, channels, 3, same_padding(3), rng);
    p.gate = ConvLayer<T>::init(channels, 2 * channels, 1, ConvGeometry{}, rng);
    p.scan = ssm::SSMHeadParams<T>::init(channels, state, rng);
    return p;
}

template <typename T>
MHMParams<T> MHMParams<T>::init(std::int64_t channels, std::int64_t heads, std::int64_t state,
                                std::mt19937_64& rng) {
    if (heads < 1 || channels % heads != 0) {
        throw ConfigError("mhm: " + std::to_string(heads) + " heads do not divide " +
                          std::to_string(channels) + " channels");
    }
    MHMParams p;
    p.norm = NormAffine<T>::init(channels);
    for (std::int64_t j = 0; j < heads; ++j) {
        p.heads.push_back(MambaHeadParams<T>::init(channels / heads, state, rng));
    }
    p.proj = ConvLayer<T>::init(channels, channels, 1, ConvGeometry{}, rng);
    p.delta = constant<T>(1);
    return p;
}

template <typename T>
Var<T> mamba_head_forward(const Var<T>& head_in, const MambaHeadParams<T>& p,
                          const MhmOptions& options, const Probe<T>* probe) {
    auto& tape = head_in.tape();
    const auto act = to_unary(options.activation);
    const Var<T> u = ad::activation(p.pre(head_in), act);
    const Var<T> s = ad::selective_scan(u, ad::ScanVars<T>::bind(tape, p.scan), options.scan_chunk);
    const Var<T> m = ad::activation(p.mix(u), act);
    const std::array<Var<T>, 2> both{s, m};
    const Var<T> g = ad::sigmoid(p.gate(ad::concat_channels<T>(both)));
    emit(probe, "mhm.gate", g);
    return ad::add(ad::mul(g, s), ad::mul(ad::one_minus(g), m));
}

template <typename T>
Var<T> mhm_forward(const Var<T>& f_gla, const MHMParams<T>& p, const MhmOptions& options,
                   const Probe<T>* probe) {
    auto& tape = f_gla.tape();
    const auto heads = static_cast<std::int64_t>(p.heads.size());
    const std::vector<Var<T>> parts = ad::split_channels(normed(f_gla, p.norm, true), heads);
    std::vector<Var<T>> outs;
    outs.reserve(parts.size());
    for (std::size_t j = 0; j < parts.size(); ++j) {
        outs.push_back(mamba_head_forward(parts[j], p.heads[j], options, probe));
    }
    const Var<T> joined = ad::concat_channels<T>(outs);
    emit(probe, "mhm.concat", joined);
    return ad::add(p.proj(joined), ad::mul(param(tape, p.delta), f_gla));
}

// ---------------------------------------------------------------------------

template <typename T>
CSCAParams<T> CSCAParams<T>::init(std::int64_t channels, std::int64_t reduction,
                                  std::mt19937_64& rng) {
    if (reduction < 1 || channels % reduction != 0) {
        throw ConfigError("csca: reduction " + std::to_string(reduction) + " does not divide " +
                          std::to_string(channels) + " channels");
    }
    CSCAParams p;
    const std::int64_t hidden = channels / reduction;
    p.reduce = ConvLayer<T>::init(hidden, channels, 1, ConvGeometry{}, rng);
    p.expand = ConvLayer<T>::init(channels, hidden, 1, ConvGeometry{}, rng);
    p.spatial = ConvLayer<T>::init(1, 4, 7, same_padding(7), rng);
    p.gate = ConvLayer<T>::init(1, 2 * channels, 1, ConvGeometry{}, rng);
    p.norm = NormAffine<T>::init(channels);
    p.ffn_in = ConvLayer<T>::init(4 * channels, channels, 1, ConvGeometry{}, rng);
    p.ffn_out = ConvLayer<T>::init(channels, 4 * channels, 1, ConvGeometry{}, rng);
    return p;
}

template <typename T>
CscaOutput<T> csca_forward(const Var<T>& f, const CSCAParams<T>& p, Activation activation,
                           const Probe<T>* probe) {
    using kernels::PoolKind;
    const auto mlp = [&](const Var<T>& v) { return p.expand(ad::relu(p.reduce(v))); };

    const Var<T> channel_map = ad::sigmoid(ad::add(mlp(ad::pool(f, PoolKind::GlobalAverage)),
                                                   mlp(ad::pool(f, PoolKind::GlobalMax))));
    emit(probe, "csca.channel", channel_map);
    const Var<T> f_c = ad::mul(channel_map, f);

    const std::array<Var<T>, 4> stats{
        ad::pool(f, PoolKind::ChannelMean), ad::pool(f, PoolKind::ChannelStd),
        ad::pool(f, PoolKind::ChannelMax), ad::pool(f, PoolKind::ChannelMin)};
    const Var<T> spatial_map = ad::sigmoid(p.spatial(ad::concat_channels<T>(stats)));
    emit(probe, "csca.spatial", spatial_map);
    const Var<T> f_s = ad::mul(spatial_map, f);

    const std::array<Var<T>, 2> pooled{ad::pool(f_c, PoolKind::GlobalAverage),
                                       ad::pool(f_s, PoolKind::GlobalAverage)};
    const Var<T> lambda = ad::sigmoid(p.gate(ad::concat_channels<T>(pooled)));
    emit(probe, "csca.lambda", lambda);

    const Var<T> calibrated =
        ad::add(ad::add(ad::mul(lambda, f_c), ad::mul(ad::one_minus(lambda), f_s)), f);
    const Var<T> hidden =
        ad::activation(p.ffn_in(normed(calibrated, p.norm, true)), to_unary(activation));
    return CscaOutput<T>{calibrated, p.ffn_out(hidden)};
}

// ---------------------------------------------------------------------------

template <typename T>
MHMBlockParams<T> MHMBlockParams<T>::init(std::int64_t channels, std::int64_t heads,
                                          std::int64_t state, std::int64_t reduction,
                                          std::mt19937_64& rng) {
    MHMBlockParams p;
    p.gla = GLAParams<T>::init(channels, rng);
    p.mhm = MHMParams<T>::init(channels, heads, state, rng);
    p.csca = CSCAParams<T>::init(channels, reduction, rng);
    return p;
}

template <typename T>
Var<T> block_forward(const Var<T>& f, const MHMBlockParams<T>& p, const MhmOptions& options,
                     const Probe<T>* probe) {
    const Var<T> g = gla_forward(f, p.gla);
    const Var<T> m = mhm_forward(g, p.mhm, options, probe);
    const CscaOutput<T> c = csca_forward(m, p.csca, options.activation, probe);
    return ad::add(c.calibrated, c.out);
}

template <typename T>
StemParams<T> StemParams<T>::init(std::int64_t in_channels, std::int64_t out_channels,
                                  std::mt19937_64& rng) {
    StemParams p;
    ConvGeometry dw;
    dw.stride = 2;
    dw.padding = 3;
    dw.groups = static_cast<int>(in_channels);
    p.depthwise = ConvLayer<T>::init(in_channels, in_channels, 7, dw, rng);
    p.pointwise = ConvLayer<T>::init(out_channels, in_channels, 1, ConvGeometry{}, rng);
    return p;
}

template <typename T>
Var<T> stem_forward(const Var<T>& x, const StemParams<T>& p) {
    const std::int64_t expected = p.depthwise.weight.shape()[0];
    if (x.shape()[kChannel] != expected) {
        throw ShapeError("stem: expected " + std::to_string(expected) +
                         " input channels along channel axis, got " +
                         std::to_string(x.shape()[kChannel]));
    }
    return p.pointwise(p.depthwise(x));
}

template <typename T>
ConvLayer<T> downsample_init(std::int64_t in_channels, std::int64_t out_channels,
                             std::mt19937_64& rng) {
    ConvGeometry g;
    g.stride = 2;
    g.padding = 1;
    return ConvLayer<T>::init(out_channels, in_channels, 3, g, rng);
}

template <typename T>
Var<T> downsample_forward(const Var<T>& x, const ConvLayer<T>& p) {
    for (Axis a : {kDepth, kHeight, kWidth}) {
        if (x.shape()[a] < 2) {
            throw ShapeError(std::string("downsample: extent 1 along ") + axis_name(a) +
                             " axis cannot be halved");
        }
    }
    return p(x);
}

#define MHM_INSTANTIATE(T)                                                                       \
    template struct ConvLayer<T>;                                                                \
    template struct NormAffine<T>;                                                               \
    template struct GLAParams<T>;                                                                \
    template struct MambaHeadParams<T>;                                                          \
    template struct MHMParams<T>;                                                                \
    template struct CSCAParams<T>;                                                               \
    template struct MHMBlockParams<T>;                                                           \
    template struct StemParams<T>;                                                               \
    template Var<T> gla_forward(const Var<T>&, const GLAParams<T>&);                             \
    template Var<T> mamba_head_forward(const Var<T>&, const MambaHeadParams<T>&,                 \
                                       const MhmOptions&, const Probe<T>*);                     \
    template Var<T> mhm_forward(const Var<T>&, const MHMParams<T>&, const MhmOptions&,           \
                                const Probe<T>*);                                                \
    template CscaOutput<T> csca_forward(const Var<T>&, const CSCAParams<T>&, Activation,         \
                                        const Probe<T>*);                                        \
    template Var<T> block_forward(const Var<T>&, const MHMBlockParams<T>&, const MhmOptions&,    \
                                  const Probe<T>*);                                              \
    template Var<T> stem_forward(const Var<T>&, const StemParams<T>&);                           \
    template ConvLayer<T> downsample_init<T>(std::int64_t, std::int64_t, std::mt19937_64&);      \
    template Var<T> downsample_forward(const Var<T>&, const ConvLayer<T>&);

MHM_INSTANTIATE(float)
MHM_INSTANTIATE(double)

#undef MHM_INSTANTIATE

}  // namespace mhm::blocks
