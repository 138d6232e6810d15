#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "mhmamba/autodiff.hpp"
#include "mhmamba/network.hpp"

namespace mhm::train {

inline constexpr double kDiceEpsilon = 1e-5;

// ---------------------------------------------------------------------------
// Losses over (B, K, D, H, W) logits and (B, D, H, W) class ids.

/// 1 - mean over foreground classes 1..K-1 of (2 sum p g + eps) / (sum p + sum g + eps),
/// sums taken over the whole batch, p = softmax over classes.
template <typename T>
ad::Var<T> dice_loss(const ad::Var<T>& logits, const LabelVolume& labels, double eps = kDiceEpsilon);

/// Mean voxelwise -log softmax probability of the true class.
template <typename T>
ad::Var<T> ce_loss(const ad::Var<T>& logits, const LabelVolume& labels);

template <typename T>
struct LossTerms {
    ad::Var<T> total;  ///< 0.5 dice + 0.5 ce
    ad::Var<T> dice;
    ad::Var<T> ce;
};

template <typename T>
LossTerms<T> combined_loss(const ad::Var<T>& logits, const LabelVolume& labels);

struct LossValue {
    double total = 0.0;
    double dice = 0.0;
    double ce = 0.0;
};

// ---------------------------------------------------------------------------

enum class OptimizerKind { Sgd, AdamW };

const char* optimizer_name(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& name);

struct TrainConfig {
    std::int64_t epochs = 150;
    std::int64_t batch_size = 1;
    double lr = 1e-3;
    double weight_decay = 1e-5;
    double poly_power = 0.9;
    std::array<std::int64_t, 3> patch{32, 32, 32};
    std::uint64_t seed = 0;
    bool flips = true;
    OptimizerKind optimizer = OptimizerKind::Sgd;
    double momentum = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;

    /// Throws ConfigError for a non-positive lr, epochs or batch size.
    void validate() const;
};

/// lr0 * (1 - step / total)^power. Throws ConfigError unless 0 <= step <= total.
double poly_lr(std::int64_t step, std::int64_t total, double lr0, double power);
inline double poly_lr(std::int64_t step, std::int64_t total, const TrainConfig& cfg) {
    return poly_lr(step, total, cfg.lr, cfg.poly_power);
}

/// First-order update with decoupled weight decay: p <- p - lr * wd * p, then the
/// SGD (optionally with momentum) or Adam step.
template <typename T>
class Optimizer {
public:
    Optimizer(const TrainConfig& cfg, std::vector<Volume5<T>*> params);

    /// grads[i] may be null for a parameter without gradient (it still decays).
    void step(const std::vector<const Volume5<T>*>& grads, double lr);

    std::int64_t steps() const { return steps_; }

private:
    TrainConfig cfg_;
    std::vector<Volume5<T>*> params_;
    std::vector<std::vector<T>> m_;
    std::vector<std::vector<T>> v_;
    std::int64_t steps_ = 0;
};

// ---------------------------------------------------------------------------

template <typename T>
struct Case {
    Volume5<T> image;   ///< (1, C, D, H, W)
    LabelVolume labels; ///< (1, D, H, W)
};

template <typename T>
struct Patch {
    Volume5<T> image;
    LabelVolume labels;
    std::array<std::int64_t, 3> corner{};
    std::array<bool, 3> flipped{};
};

/// Uniform random corner, then (when flips is set) a fair-coin mirror per axis
/// applied to image and labels alike. Throws ShapeError when the patch does not fit.
template <typename T>
Patch<T> sample_patch(const Volume5<T>& image, const LabelVolume& labels,
                      const std::array<std::int64_t, 3>& patch, std::mt19937_64& rng, bool flips);

struct EpochRecord {
    std::int64_t epoch = 0;
    LossValue loss;  ///< mean over the epoch's steps
    double lr = 0.0;
};

/// "epoch,total,dice,ce,lr"
std::string loss_log_header();
std::string format_log_line(const EpochRecord& r);

/// One epoch visits every case once in order, batch_size patches per step, at the
/// poly learning rate for that epoch. Throws NumericError naming the first
/// non-finite tape node when a loss is not finite.
template <typename T>
std::vector<EpochRecord> train(MhMambaNet<T>& net, const std::vector<Case<T>>& data,
                               const TrainConfig& cfg,
                               const std::function<void(const EpochRecord&)>& on_epoch = {});

/// Loss value for a fixed batch without updating parameters.
template <typename T>
LossValue evaluate_loss(const MhMambaNet<T>& net, const Volume5<T>& image, const LabelVolume& labels);

}  // namespace mhm::train
