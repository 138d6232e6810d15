#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mhmamba/kernels.hpp"
#include "mhmamba/volume.hpp"

// Reverse-mode differentiation over Volume5 values. A Tape is rebuilt for each
// forward pass; Var is a cheap handle to one of its nodes.
namespace mhm::ad {

enum class OpKind : std::uint8_t {
    Leaf,
    Conv3d,
    Sobel3d,
    LayerNorm,
    InstanceNorm,
    Pool,
    Unary,
    Binary,
    Affine,
    Slice,
    Concat,
    Upsample,
    Sum,
    SelectiveScan,
    CrossEntropy,
    DiceLoss,
};

const char* op_name(OpKind op);

template <typename T>
class Tape;

template <typename T>
class Var {
public:
    Var() = default;

    bool valid() const { return tape_ != nullptr; }
    Tape<T>& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    const Volume5<T>& value() const;
    const Shape5& shape() const { return value().shape(); }

private:
    friend class Tape<T>;
    Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape<T>* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Accumulates input gradients; entries are null for inputs that need none.
template <typename T>
using BackwardFn =
    std::function<void(const Volume5<T>& grad_out, std::span<Volume5<T>* const> grad_in)>;

template <typename T>
struct TapeNode {
    OpKind op = OpKind::Leaf;
    std::vector<std::size_t> inputs;
    Volume5<T> owned;
    const Volume5<T>* external = nullptr;
    BackwardFn<T> backward;
    bool requires_grad = false;

    const Volume5<T>& value() const { return external != nullptr ? *external : owned; }
};

/// Leaf id -> accumulated gradient, shaped like the leaf.
template <typename T>
class GradientStore {
public:
    const Volume5<T>* find(const Var<T>& leaf) const;
    /// Throws when the leaf received no gradient.
    const Volume5<T>& at(const Var<T>& leaf) const;
    std::size_t size() const { return grads_.size(); }

private:
    friend class Tape<T>;
    std::unordered_map<std::size_t, Volume5<T>> grads_;
};

template <typename T>
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Registers an externally owned array (a parameter). Repeated calls with the
    /// same array return the same leaf, so every parameter appears once.
    Var<T> leaf(const Volume5<T>& external, bool requires_grad = true);
    /// Owned leaf that requires a gradient.
    Var<T> variable(Volume5<T> value);
    Var<T> constant(Volume5<T> value);

    Var<T> push(OpKind op, std::span<const Var<T>> inputs, Volume5<T> value, BackwardFn<T> backward);
    Var<T> push(OpKind op, std::initializer_list<Var<T>> inputs, Volume5<T> value,
                BackwardFn<T> backward) {
        return push(op, std::span<const Var<T>>(inputs.begin(), inputs.size()), std::move(value),
                    std::move(backward));
    }

    /// Gradients of a 1x1x1x1x1 loss with respect to every leaf that requires one.
    GradientStore<T> backward(const Var<T>& loss);

    std::optional<Var<T>> find_leaf(const Volume5<T>* external) const;

    bool grad_enabled() const { return grad_enabled_; }
    std::size_t size() const { return nodes_.size(); }
    const TapeNode<T>& node(std::size_t id) const { return nodes_[id]; }
    const Volume5<T>& value(std::size_t id) const { return nodes_[id].value(); }

    /// First node (in recording order) holding a non-finite value, with its op.
    std::optional<std::pair<std::size_t, OpKind>> first_non_finite() const;

private:
    bool grad_enabled_;
    std::vector<TapeNode<T>> nodes_;
    std::unordered_map<const Volume5<T>*, std::size_t> leaf_index_;
};

template <typename T>
const Volume5<T>& Var<T>::value() const {
    return tape_->value(id_);
}

// ---------------------------------------------------------------------------
// Differentiable operations

template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& weight, const std::optional<Var<T>>& bias,
              const kernels::ConvGeometry& g);
template <typename T>
Var<T> sobel3d(const Var<T>& x);
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta);
template <typename T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta);
template <typename T>
Var<T> pool(const Var<T>& x, kernels::PoolKind kind);
template <typename T>
Var<T> activation(const Var<T>& x, kernels::Unary f);
template <typename T>
Var<T> sigmoid(const Var<T>& x) { return activation(x, kernels::Unary::Sigmoid); }
template <typename T>
Var<T> relu(const Var<T>& x) { return activation(x, kernels::Unary::Relu); }
template <typename T>
Var<T> softplus(const Var<T>& x) { return activation(x, kernels::Unary::Softplus); }
template <typename T>
Var<T> silu(const Var<T>& x) { return activation(x, kernels::Unary::Silu); }
template <typename T>
Var<T> binary(const Var<T>& a, const Var<T>& b, kernels::Binary op);
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) { return binary(a, b, kernels::Binary::Add); }
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) { return binary(a, b, kernels::Binary::Sub); }
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) { return binary(a, b, kernels::Binary::Mul); }
/// factor * x + offset
template <typename T>
Var<T> affine(const Var<T>& x, T factor, T offset = T(0));
template <typename T>
Var<T> scale(const Var<T>& x, T factor) { return affine(x, factor, T(0)); }
template <typename T>
Var<T> one_minus(const Var<T>& x) { return affine(x, T(-1), T(1)); }
template <typename T>
Var<T> slice_channels(const Var<T>& x, std::int64_t begin, std::int64_t count);
template <typename T>
Var<T> concat_channels(std::span<const Var<T>> parts);
template <typename T>
Var<T> upsample2x(const Var<T>& x);
/// Sum of all elements as a 1x1x1x1x1 value.
template <typename T>
Var<T> sum(const Var<T>& x);
/// Sum of elementwise products with a constant array; handy as a scalar probe loss.
template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Volume5<T>& weights);

/// Splits along the channel axis into `parts` equal slices.
template <typename T>
std::vector<Var<T>> split_channels(const Var<T>& x, std::int64_t parts);

// ---------------------------------------------------------------------------
// Finite-difference verification

struct GradCheckOptions {
    double step = 1e-4;
    /// Per-array cap on checked coordinates; 0 checks every coordinate.
    std::size_t max_coordinates = 0;
    std::uint64_t seed = 0;
    /// Lower bound on the relative-error denominator. Gradients below it are
    /// compared in absolute terms, which keeps difference noise on near-zero
    /// entries from dominating the report.
    double floor = 1e-8;
    /// When positive, coordinates whose second difference exceeds kink_threshold *
    /// max(|analytic|, |numeric|, floor) (and the rounding noise of the loss) are
    /// re-differenced at step / 8. If that does not behave like smooth curvature the
    /// stencil straddles a non-differentiable point (a ReLU or max switching branch)
    /// and the coordinate is counted in `skipped` instead of compared.
    double kink_threshold = 0.0;
};

struct GradCheckReport {
    double max_relative_error = 0.0;
    std::size_t coordinates = 0;  ///< compared, excluding skipped ones
    std::size_t skipped = 0;
    std::vector<double> per_array;
    std::size_t worst_array = 0;
    std::int64_t worst_index = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

/// |a - n| / max(|a|, |n|, floor)
double relative_error(double analytic, double numeric, double floor = 1e-8);

/// Compares reverse-mode gradients of `f` against central differences with
/// respect to each array in `wrt`. `f` must register those arrays through
/// Tape::leaf. The arrays are perturbed in place and restored.
template <typename T>
GradCheckReport grad_check(const std::function<Var<T>(Tape<T>&)>& f,
                           std::span<Volume5<T>* const> wrt, const GradCheckOptions& options = {});

/// Single-input convenience form.
template <typename T>
GradCheckReport grad_check(const std::function<Var<T>(Tape<T>&, const Var<T>&)>& f, Volume5<T>& x,
                           double step);

struct DirectionalCheckReport {
    double max_relative_error = 0.0;
    std::vector<double> analytic;  ///< <grad, v> per direction
    std::vector<double> numeric;   ///< central difference along v per direction
};

/// Randomized check over all of `wrt` at once: for each of `directions` unit
/// Gaussian directions v, compares <grad f, v> with (f(p + hv) - f(p - hv)) / 2h.
/// Costs two forward passes per direction regardless of parameter count.
template <typename T>
DirectionalCheckReport directional_check(const std::function<Var<T>(Tape<T>&)>& f,
                                         std::span<Volume5<T>* const> wrt, std::size_t directions,
                                         double step, std::uint64_t seed);

}  // namespace mhm::ad
