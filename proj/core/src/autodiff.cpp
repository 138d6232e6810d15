#include "mhmamba/autodiff.hpp"

#include <algorithm>
#include <limits>
#include <cmath>
#include <numeric>
#include <random>

namespace mhm::ad {

const char* op_name(OpKind op) {
    switch (op) {
        case OpKind::Leaf: return "leaf";
        case OpKind::Conv3d: return "conv3d";
        case OpKind::Sobel3d: return "sobel3d";
        case OpKind::LayerNorm: return "layer_norm";
        case OpKind::InstanceNorm: return "instance_norm";
        case OpKind::Pool: return "pool";
        case OpKind::Unary: return "unary";
        case OpKind::Binary: return "binary";
        case OpKind::Affine: return "affine";
        case OpKind::Slice: return "slice";
        case OpKind::Concat: return "concat";
        case OpKind::Upsample: return "upsample";
        case OpKind::Sum: return "sum";
        case OpKind::SelectiveScan: return "selective_scan";
        case OpKind::CrossEntropy: return "cross_entropy";
        case OpKind::DiceLoss: return "dice_loss";
    }
    return "?";
}

template <typename T>
const Volume5<T>* GradientStore<T>::find(const Var<T>& leaf) const {
    const auto it = grads_.find(leaf.id());
    return it == grads_.end() ? nullptr : &it->second;
}

template <typename T>
const Volume5<T>& GradientStore<T>::at(const Var<T>& leaf) const {
    const auto* g = find(leaf);
    if (g == nullptr) {
        throw Error("no gradient recorded for node " + std::to_string(leaf.id()));
    }
    return *g;
}

template <typename T>
Var<T> Tape<T>::leaf(const Volume5<T>& external, bool requires_grad) {
    if (const auto it = leaf_index_.find(&external); it != leaf_index_.end()) {
        return Var<T>(this, it->second);
    }
    TapeNode<T> node;
    node.external = &external;
    node.requires_grad = grad_enabled_ && requires_grad;
    nodes_.push_back(std::move(node));
    leaf_index_.emplace(&external, nodes_.size() - 1);
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::variable(Volume5<T> value) {
    TapeNode<T> node;
    node.owned = std::move(value);
    node.requires_grad = grad_enabled_;
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::constant(Volume5<T> value) {
    TapeNode<T> node;
    node.owned = std::move(value);
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::push(OpKind op, std::span<const Var<T>> inputs, Volume5<T> value,
                     BackwardFn<T> backward) {
    TapeNode<T> node;
    node.op = op;
    node.owned = std::move(value);
    for (const auto& in : inputs) {
        // Inputs must already be recorded on this tape, which keeps it acyclic.
        if (in.tape_ != this || in.id() >= nodes_.size()) {
            throw Error(std::string(op_name(op)) + ": input is not an earlier node of this tape");
        }
        node.inputs.push_back(in.id());
        node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
    }
    if (node.requires_grad) {
        node.backward = std::move(backward);
    }
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
GradientStore<T> Tape<T>::backward(const Var<T>& loss) {
    if (loss.tape_ != this || loss.id() >= nodes_.size()) {
        throw Error("backward: loss is not a node of this tape");
    }
    if (loss.shape() != Shape5{}) {
        throw ShapeError("backward: loss must be scalar (1x1x1x1x1), got " + loss.shape().str());
    }
    GradientStore<T> store;
    std::vector<Volume5<T>> grads(nodes_.size(), Volume5<T>(Shape5{}, T(0)));
    std::vector<bool> live(nodes_.size(), false);
    grads[loss.id()] = Volume5<T>(Shape5{}, T(1));
    live[loss.id()] = true;

    std::vector<Volume5<T>*> in_grads;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        TapeNode<T>& node = nodes_[i];
        if (!live[i] || !node.requires_grad) {
            continue;
        }
        if (node.op == OpKind::Leaf) {
            store.grads_.emplace(i, std::move(grads[i]));
            continue;
        }
        in_grads.clear();
        for (std::size_t in : node.inputs) {
            if (!nodes_[in].requires_grad) {
                in_grads.push_back(nullptr);
                continue;
            }
            if (!live[in]) {
                grads[in] = Volume5<T>(nodes_[in].value().shape(), T(0));
                live[in] = true;
            }
            in_grads.push_back(&grads[in]);
        }
        node.backward(grads[i], in_grads);
        grads[i] = Volume5<T>();
    }
    return store;
}

template <typename T>
std::optional<Var<T>> Tape<T>::find_leaf(const Volume5<T>* external) const {
    const auto it = leaf_index_.find(external);
    if (it == leaf_index_.end()) {
        return std::nullopt;
    }
    return Var<T>(const_cast<Tape<T>*>(this), it->second);
}

template <typename T>
std::optional<std::pair<std::size_t, OpKind>> Tape<T>::first_non_finite() const {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (!kernels::all_finite(nodes_[i].value())) {
            return std::make_pair(i, nodes_[i].op);
        }
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------

template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& weight, const std::optional<Var<T>>& bias,
              const kernels::ConvGeometry& g) {
    Tape<T>& tape = x.tape();
    Volume5<T> y = kernels::conv3d(x.value(), weight.value(), bias ? &bias->value() : nullptr, g);
    std::vector<Var<T>> inputs{x, weight};
    if (bias) {
        inputs.push_back(*bias);
    }
    return tape.push(OpKind::Conv3d, inputs, std::move(y),
                     [x, weight, g, has_bias = bias.has_value()](
                         const Volume5<T>& gy, std::span<Volume5<T>* const> gin) {
                         kernels::conv3d_backward(x.value(), weight.value(), g, gy, gin[0], gin[1],
                                                  has_bias ? gin[2] : nullptr);
                     });
}

template <typename T>
Var<T> sobel3d(const Var<T>& x) {
    return x.tape().push(OpKind::Sobel3d, {x}, kernels::sobel3d(x.value()),
                         [x](const Volume5<T>& gy, std::span<Volume5<T>* const> gin) {
                             kernels::sobel3d_backward(x.value(), gy, *gin[0]);
                         });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta) {
    return x.tape().push(
        OpKind::LayerNorm, {x, gamma, beta},
        kernels::layer_norm(x.value(), gamma.value(), beta.value()),
        [x, gamma](const Volume5<T>& gy, std::span<Volume5<T>* const> gin) {
            kernels::layer_norm_backward(x.value(), gamma.value(), gy, gin[0], gin[1], gin[2]);
        });
}

template <typename T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta) {
    return x.tape().push(
        OpKind::InstanceNorm, {x, gamma, beta},
        kernels::instance_norm(x.value(), gamma.value(), beta.value()),
        [x, gamma](const Volume5<T>& gy, std::span<Volume5<T>* const> gin) {
            kernels::instance_norm_backward(x.value(), gamma.value(), gy, gin[0], gin[1], gin[2]);
        });
}

template <typename T>
Var<T> pool(const Var<T>& x, kernels::PoolKind kind) {
    Tape<T>& tape = x.tape();
    const std::size_t self = tape.size();
    return tape.push(OpKind::Pool, {x}, kernels::pool_stats(x.value(), kind),
                     [x, kind, self, &tape](const Volume5<T>& gy,
                                            std::span<Volume5<T>* const> gin) {
                         kernels::pool_stats_backward(x.value(), tape.value(self), kind, gy,
                                                      *gin[0]);
                     });
}

template <typename T>
Var<T> activation(const Var<T>& x, kernels::Unary f) {
    Tape<T>& tape = x.tape();
    const std::size_t self = tape.size();
    return tape.push(OpKind::Unary, {x}, kernels::unary(x.value(), f),
                     [x, f, self, &tape](const Volume5<T>& gy, std::span<Volume5<T>* const> gin) {
                         kernels::unary_backward(x.value(), tape.value(self), f, gy, *gin[0]);
                     });
}

template <typename T>
Var<T> binary(const Var<T>& a, const Var<T>& b, kernels::Binary op) {
    return a.tape().push(OpKind::Binary, {a, b}, kernels::binary(a.value(), b.value(), op),
                         [a, b, op](const Volume5<T>& gy, std::span<Volume5<T>* const> gin) {
                             kernels::binary_backward(a.value(), b.value(), op, gy, gin[0],
                                                      gin[1]);
                         });
}

template <typename T>
Var<T> affine(const Var<T>& x, T factor, T offset) {
    Volume5<T> y = kernels::scale(x.value(), factor);
    if (offset != T(0)) {
        for (T& v : y.data()) {
            v += offset;
        }
    }
    return x.tape().push(OpKind::Affine, {x}, std::move(y),
                         [factor](const Volume5<T>& gy, std::span<Volume5<T>* const> gin) {
                             Volume5<T>& gx = *gin[0];
                             for (std::int64_t i = 0; i < gx.numel(); ++i) {
                                 gx[i] += factor * gy[i];
                             }
                         });
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, std::int64_t begin, std::int64_t count) {
    return x.tape().push(OpKind::Slice, {x}, kernels::slice_channels(x.value(), begin, count),
                         [begin, count](const Volume5<T>& gy, std::span<Volume5<T>* const> gin) {
                             Volume5<T>& gx = *gin[0];
                             for (std::int64_t b = 0; b < gy.shape()[0]; ++b) {
                                 for (std::int64_t c = 0; c < count; ++c) {
                                     auto src = gy.plane(b, c);
                                     auto dst = gx.plane(b, begin + c);
                                     for (std::size_t i = 0; i < src.size(); ++i) {
                                         dst[i] += src[i];
                                     }
                                 }
                             }
                         });
}

template <typename T>
Var<T> concat_channels(std::span<const Var<T>> parts) {
    if (parts.empty()) {
        throw ShapeError("concat_channels: no inputs");
    }
    std::vector<const Volume5<T>*> values;
    std::vector<std::int64_t> widths;
    for (const auto& p : parts) {
        values.push_back(&p.value());
        widths.push_back(p.shape()[1]);
    }
    Volume5<T> y = kernels::concat_channels<T>(values);
    return parts[0].tape().push(
        OpKind::Concat, parts, std::move(y),
        [widths](const Volume5<T>& gy, std::span<Volume5<T>* const> gin) {
            std::int64_t c0 = 0;
            for (std::size_t k = 0; k < widths.size(); ++k) {
                if (gin[k] != nullptr) {
                    for (std::int64_t b = 0; b < gy.shape()[0]; ++b) {
                        for (std::int64_t c = 0; c < widths[k]; ++c) {
                            auto src = gy.plane(b, c0 + c);
                            auto dst = gin[k]->plane(b, c);
                            for (std::size_t i = 0; i < src.size(); ++i) {
                                dst[i] += src[i];
                            }
                        }
                    }
                }
                c0 += widths[k];
            }
        });
}

template <typename T>
Var<T> upsample2x(const Var<T>& x) {
    return x.tape().push(OpKind::Upsample, {x}, kernels::upsample_trilinear2x(x.value()),
                         [](const Volume5<T>& gy, std::span<Volume5<T>* const> gin) {
                             kernels::upsample_trilinear2x_backward(gy, *gin[0]);
                         });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
    return x.tape().push(OpKind::Sum, {x}, Volume5<T>::scalar(kernels::sum(x.value())),
                         [](const Volume5<T>& gy, std::span<Volume5<T>* const> gin) {
                             for (T& v : gin[0]->data()) {
                                 v += gy[0];
                             }
                         });
}

template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Volume5<T>& weights) {
    require_same_shape(x.shape(), weights.shape(), "weighted_sum");
    T acc = 0;
    for (std::int64_t i = 0; i < weights.numel(); ++i) {
        acc += x.value()[i] * weights[i];
    }
    return x.tape().push(OpKind::Sum, {x}, Volume5<T>::scalar(acc),
                         [weights](const Volume5<T>& gy, std::span<Volume5<T>* const> gin) {
                             for (std::int64_t i = 0; i < weights.numel(); ++i) {
                                 (*gin[0])[i] += gy[0] * weights[i];
                             }
                         });
}

template <typename T>
std::vector<Var<T>> split_channels(const Var<T>& x, std::int64_t parts) {
    const std::int64_t c = x.shape()[1];
    if (parts < 1 || c % parts != 0) {
        throw ConfigError("split_channels: " + std::to_string(c) +
                          " channels not divisible into " + std::to_string(parts) + " parts");
    }
    std::vector<Var<T>> out;
    const std::int64_t width = c / parts;
    for (std::int64_t k = 0; k < parts; ++k) {
        out.push_back(slice_channels(x, k * width, width));
    }
    return out;
}

// ---------------------------------------------------------------------------

double relative_error(double analytic, double numeric, double floor) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

template <typename T>
GradCheckReport grad_check(const std::function<Var<T>(Tape<T>&)>& f,
                           std::span<Volume5<T>* const> wrt, const GradCheckOptions& options) {
    GradCheckReport report;
    report.per_array.assign(wrt.size(), 0.0);

    std::vector<Volume5<T>> analytic;
    {
        Tape<T> tape;
        const Var<T> loss = f(tape);
        const GradientStore<T> grads = tape.backward(loss);
        for (auto* arr : wrt) {
            const auto leaf = tape.find_leaf(arr);
            const Volume5<T>* g = leaf ? grads.find(*leaf) : nullptr;
            analytic.push_back(g != nullptr ? *g : Volume5<T>(arr->shape(), T(0)));
        }
    }

    const auto evaluate = [&f]() {
        Tape<T> tape(false);
        return static_cast<double>(f(tape).value()[0]);
    };

    const double base = options.kink_threshold > 0.0 ? evaluate() : 0.0;
    // Second differences below this are indistinguishable from accumulated rounding.
    const double rounding =
        64.0 * std::numeric_limits<T>::epsilon() * std::max(std::abs(base), 1.0) / options.step;
    std::mt19937_64 rng(options.seed);
    const T h = static_cast<T>(options.step);
    for (std::size_t a = 0; a < wrt.size(); ++a) {
        Volume5<T>& arr = *wrt[a];
        std::vector<std::int64_t> coords(static_cast<std::size_t>(arr.numel()));
        std::iota(coords.begin(), coords.end(), 0);
        if (options.max_coordinates != 0 && options.max_coordinates < coords.size()) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(options.max_coordinates);
            std::sort(coords.begin(), coords.end());
        }
        for (const std::int64_t i : coords) {
            const T saved = arr[i];
            arr[i] = saved + h;
            const double plus = evaluate();
            arr[i] = saved - h;
            const double minus = evaluate();
            arr[i] = saved;
            const double numeric = (plus - minus) / (2.0 * options.step);
            const double exact = static_cast<double>(analytic[a][i]);
            if (options.kink_threshold > 0.0) {
                const double scale = std::max({std::abs(exact), std::abs(numeric), options.floor});
                const double limit = std::max(options.kink_threshold * scale, rounding);
                const double curvature = std::abs(plus - 2.0 * base + minus) / options.step;
                if (curvature > limit) {
                    // Smooth curvature shrinks eightfold with the step and leaves the
                    // central difference unchanged; a kink inside the stencil does neither.
                    const T small = h / T(8);
                    arr[i] = saved + small;
                    const double plus8 = evaluate();
                    arr[i] = saved - small;
                    const double minus8 = evaluate();
                    arr[i] = saved;
                    const double step8 = static_cast<double>(small);
                    const double numeric8 = (plus8 - minus8) / (2.0 * step8);
                    const double curvature8 = std::abs(plus8 - 2.0 * base + minus8) / step8;
                    if (curvature8 > 0.5 * curvature ||
                        std::abs(numeric8 - numeric) > std::max(0.5 * options.kink_threshold * scale, 8.0 * rounding)) {
                        ++report.skipped;
                        continue;
                    }
                }
            }
            const double err = relative_error(exact, numeric, options.floor);
            ++report.coordinates;
            report.per_array[a] = std::max(report.per_array[a], err);
            if (err > report.max_relative_error || report.worst_index < 0) {
                report.max_relative_error = std::max(report.max_relative_error, err);
                report.worst_array = a;
                report.worst_index = i;
                report.worst_analytic = exact;
                report.worst_numeric = numeric;
            }
        }
    }
    return report;
}

template <typename T>
GradCheckReport grad_check(const std::function<Var<T>(Tape<T>&, const Var<T>&)>& f, Volume5<T>& x,
                           double step) {
    Volume5<T>* ptr = &x;
    GradCheckOptions options;
    options.step = step;
    return grad_check<T>([&](Tape<T>& tape) { return f(tape, tape.leaf(x)); },
                         std::span<Volume5<T>* const>(&ptr, 1), options);
}

template <typename T>
DirectionalCheckReport directional_check(const std::function<Var<T>(Tape<T>&)>& f,
                                         std::span<Volume5<T>* const> wrt, std::size_t directions,
                                         double step, std::uint64_t seed) {
    std::vector<Volume5<T>> grads;
    {
        Tape<T> tape;
        const Var<T> loss = f(tape);
        const GradientStore<T> store = tape.backward(loss);
        for (auto* arr : wrt) {
            const auto leaf = tape.find_leaf(arr);
            const Volume5<T>* g = leaf ? store.find(*leaf) : nullptr;
            grads.push_back(g != nullptr ? *g : Volume5<T>(arr->shape(), T(0)));
        }
    }
    const auto evaluate = [&f]() {
        Tape<T> tape(false);
        return static_cast<double>(f(tape).value()[0]);
    };

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<Volume5<T>> saved;
    for (auto* arr : wrt) saved.push_back(*arr);

    DirectionalCheckReport report;
    for (std::size_t d = 0; d < directions; ++d) {
        std::vector<std::vector<double>> dir(wrt.size());
        double norm2 = 0.0;
        for (std::size_t a = 0; a < wrt.size(); ++a) {
            dir[a].resize(static_cast<std::size_t>(wrt[a]->numel()));
            for (double& v : dir[a]) {
                v = normal(rng);
                norm2 += v * v;
            }
        }
        const double inv = 1.0 / std::sqrt(norm2);
        double analytic = 0.0;
        for (std::size_t a = 0; a < wrt.size(); ++a) {
            for (std::size_t i = 0; i < dir[a].size(); ++i) {
                dir[a][i] *= inv;
                analytic += static_cast<double>(grads[a][static_cast<std::int64_t>(i)]) * dir[a][i];
            }
        }
        const auto shift = [&](double sign) {
            for (std::size_t a = 0; a < wrt.size(); ++a) {
                for (std::size_t i = 0; i < dir[a].size(); ++i) {
                    const auto k = static_cast<std::int64_t>(i);
                    (*wrt[a])[k] = static_cast<T>(static_cast<double>(saved[a][k]) + sign * step * dir[a][i]);
                }
            }
        };
        shift(1.0);
        const double plus = evaluate();
        shift(-1.0);
        const double minus = evaluate();
        for (std::size_t a = 0; a < wrt.size(); ++a) *wrt[a] = saved[a];
        const double numeric = (plus - minus) / (2.0 * step);
        report.analytic.push_back(analytic);
        report.numeric.push_back(numeric);
        report.max_relative_error = std::max(report.max_relative_error, relative_error(analytic, numeric));
    }
    return report;
}

#define MHM_INSTANTIATE_AD(T)                                                                    \
    template class GradientStore<T>;                                                             \
    template class Tape<T>;                                                                      \
    template Var<T> conv3d(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&,           \
                           const kernels::ConvGeometry&);                                        \
    template Var<T> sobel3d(const Var<T>&);                                                      \
    template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&);                     \
    template Var<T> instance_norm(const Var<T>&, const Var<T>&, const Var<T>&);                  \
    template Var<T> pool(const Var<T>&, kernels::PoolKind);                                      \
    template Var<T> activation(const Var<T>&, kernels::Unary);                                   \
    template Var<T> binary(const Var<T>&, const Var<T>&, kernels::Binary);                       \
    template Var<T> affine(const Var<T>&, T, T);                                                 \
    template Var<T> slice_channels(const Var<T>&, std::int64_t, std::int64_t);                  \
    template Var<T> concat_channels(std::span<const Var<T>>);                                    \
    template Var<T> upsample2x(const Var<T>&);                                                   \
    template Var<T> sum(const Var<T>&);                                                          \
    template Var<T> weighted_sum(const Var<T>&, const Volume5<T>&);                              \
    template std::vector<Var<T>> split_channels(const Var<T>&, std::int64_t);                    \
    template GradCheckReport grad_check(const std::function<Var<T>(Tape<T>&)>&,                  \
                                        std::span<Volume5<T>* const>, const GradCheckOptions&);  \
    template GradCheckReport grad_check(const std::function<Var<T>(Tape<T>&, const Var<T>&)>&,   \
                                        Volume5<T>&, double);                                    \
    template DirectionalCheckReport directional_check(const std::function<Var<T>(Tape<T>&)>&,    \
                                                      std::span<Volume5<T>* const>, std::size_t, \
                                                      double, std::uint64_t);

MHM_INSTANTIATE_AD(float)
MHM_INSTANTIATE_AD(double)

#undef MHM_INSTANTIATE_AD

}  // namespace mhm::ad
