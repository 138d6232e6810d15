#include "mhmamba/agf.hpp"

#include "mhmamba/errors.hpp"

namespace mhm::blocks {

template <typename T>
AGFParams<T> AGFParams<T>::init(std::int64_t channels, std::mt19937_64& rng) {
    if (channels % kFusionGroups != 0) {
        throw ConfigError("agf: " + std::to_string(channels) + " channels do not split into " +
                          std::to_string(kFusionGroups) + " groups");
    }
    const std::int64_t group = channels / kFusionGroups;
    AGFParams p;
    for (auto& gate : p.gates) {
        gate = ConvLayer<T>::init(1, 2 * group, 1, kernels::ConvGeometry{}, rng);
    }
    p.fuse = ConvLayer<T>::init(channels, channels, 1, kernels::ConvGeometry{}, rng);
    return p;
}

template <typename T>
Var<T> agf_forward(const Var<T>& enc, const Var<T>& dec, const AGFParams<T>& p,
                   const Probe<T>* probe) {
    require_same_shape(enc.shape(), dec.shape(), "agf: encoder and decoder features");
    const std::vector<Var<T>> e = ad::split_channels(enc, kFusionGroups);
    const std::vector<Var<T>> d = ad::split_channels(dec, kFusionGroups);
    std::vector<Var<T>> fused;
    fused.reserve(e.size());
    for (std::size_t k = 0; k < e.size(); ++k) {
        const std::array<Var<T>, 2> pair{e[k], d[k]};
        const Var<T> delta = ad::sigmoid(p.gates[k](ad::concat_channels<T>(pair)));
        if (probe != nullptr && *probe) (*probe)("agf.delta", delta.value());
        fused.push_back(ad::add(ad::mul(delta, e[k]), ad::mul(ad::one_minus(delta), d[k])));
    }
    return p.fuse(ad::concat_channels<T>(fused));
}

template struct AGFParams<float>;
template struct AGFParams<double>;
template Var<float> agf_forward(const Var<float>&, const Var<float>&, const AGFParams<float>&,
                                const Probe<float>*);
template Var<double> agf_forward(const Var<double>&, const Var<double>&, const AGFParams<double>&,
                                 const Probe<double>*);

}  // namespace mhm::blocks
