#include "mhmamba/training.hpp"

#include <cmath>
#include <cstdio>

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

#include "mhmamba/data_io.hpp"
#include "mhmamba/errors.hpp"
#include "mhmamba/kernels.hpp"

namespace mhm::train {

namespace {

/// Flushes subnormal floats to zero while alive. Adam's second moments underflow
/// into the subnormal range within a few steps, where x86 arithmetic is ~100x slower.
class FlushSubnormals {
public:
    FlushSubnormals() {
#if defined(__SSE__)
        saved_ = _mm_getcsr();
        _mm_setcsr(saved_ | 0x8040u);  // FTZ | DAZ
#endif
    }
    ~FlushSubnormals() {
#if defined(__SSE__)
        _mm_setcsr(saved_);
#endif
    }
    FlushSubnormals(const FlushSubnormals&) = delete;
    FlushSubnormals& operator=(const FlushSubnormals&) = delete;

private:
    unsigned saved_ = 0;
};

void check_labels(const Shape5& s, const LabelVolume& labels, const char* what) {
    if (labels.batch != s[kBatch] || labels.depth != s[kDepth] || labels.height != s[kHeight] ||
        labels.width != s[kWidth]) {
        throw ShapeError(std::string(what) + ": labels do not match the logits' batch and spatial extents");
    }
    for (std::uint8_t c : labels.data) {
        if (c >= s[kChannel]) {
            throw ShapeError(std::string(what) + ": label " + std::to_string(c) + " exceeds class count");
        }
    }
}

// log-softmax over the channel axis, computed in double.
template <typename T>
std::vector<double> log_softmax(const Volume5<T>& z) {
    const Shape5& s = z.shape();
    const std::int64_t K = s[kChannel];
    const auto S = static_cast<std::size_t>(s.spatial());
    std::vector<double> out(static_cast<std::size_t>(z.numel()));
    for (std::int64_t b = 0; b < s[kBatch]; ++b) {
        for (std::size_t i = 0; i < S; ++i) {
            double mx = z.plane(b, 0)[i];
            for (std::int64_t c = 1; c < K; ++c) mx = std::max(mx, static_cast<double>(z.plane(b, c)[i]));
            double denom = 0.0;
            for (std::int64_t c = 0; c < K; ++c) denom += std::exp(static_cast<double>(z.plane(b, c)[i]) - mx);
            const double lse = mx + std::log(denom);
            for (std::int64_t c = 0; c < K; ++c) {
                out[static_cast<std::size_t>(z.offset(b, c, 0, 0, 0)) + i] = static_cast<double>(z.plane(b, c)[i]) - lse;
            }
        }
    }
    return out;
}

}  // namespace

template <typename T>
ad::Var<T> dice_loss(const ad::Var<T>& logits, const LabelVolume& labels, double eps) {
    const Volume5<T>& z = logits.value();
    const Shape5 s = z.shape();
    check_labels(s, labels, "dice_loss");
    const std::int64_t K = s[kChannel];
    const auto S = static_cast<std::size_t>(s.spatial());

    std::vector<double> p = log_softmax(z);
    for (double& v : p) v = std::exp(v);

    // Per foreground class: intersection, prediction mass, label mass.
    std::vector<double> inter(static_cast<std::size_t>(K), 0.0), mass(inter), count(inter);
    for (std::int64_t b = 0; b < s[kBatch]; ++b) {
        for (std::int64_t c = 1; c < K; ++c) {
            const std::size_t base = static_cast<std::size_t>(z.offset(b, c, 0, 0, 0));
            for (std::size_t i = 0; i < S; ++i) {
                const double pi = p[base + i];
                const bool g = labels.data[static_cast<std::size_t>(b) * S + i] == c;
                mass[static_cast<std::size_t>(c)] += pi;
                if (g) {
                    inter[static_cast<std::size_t>(c)] += pi;
                    count[static_cast<std::size_t>(c)] += 1.0;
                }
            }
        }
    }
    const double classes = static_cast<double>(K - 1);
    double mean = 0.0;
    for (std::int64_t c = 1; c < K; ++c) {
        const auto k = static_cast<std::size_t>(c);
        mean += (2.0 * inter[k] + eps) / (mass[k] + count[k] + eps);
    }
    mean /= classes;

    return logits.tape().push(
        ad::OpKind::DiceLoss, {logits}, Volume5<T>::scalar(static_cast<T>(1.0 - mean)),
        [p = std::move(p), inter, mass, count, labels, s, eps, classes](
            const Volume5<T>& gy, std::span<Volume5<T>* const> gin) {
            const std::int64_t K = s[kChannel];
            const auto S = static_cast<std::size_t>(s.spatial());
            const double scale = static_cast<double>(gy[0]);
            std::vector<double> gp(static_cast<std::size_t>(K));
            Volume5<T>& gz = *gin[0];
            for (std::int64_t b = 0; b < s[kBatch]; ++b) {
                for (std::size_t i = 0; i < S; ++i) {
                    const std::uint8_t y = labels.data[static_cast<std::size_t>(b) * S + i];
                    // dL/dp_c, zero for the background class.
                    gp[0] = 0.0;
                    for (std::int64_t c = 1; c < K; ++c) {
                        const auto k = static_cast<std::size_t>(c);
                        const double den = mass[k] + count[k] + eps;
                        const double g = y == c ? 1.0 : 0.0;
                        gp[k] = -(2.0 * g * den - (2.0 * inter[k] + eps)) / (den * den * classes);
                    }
                    const auto at = [&](std::int64_t c) {
                        return static_cast<std::size_t>((b * K + c) * static_cast<std::int64_t>(S)) + i;
                    };
                    double dot = 0.0;
                    for (std::int64_t c = 0; c < K; ++c) dot += p[at(c)] * gp[static_cast<std::size_t>(c)];
                    for (std::int64_t c = 0; c < K; ++c) {
                        gz[static_cast<std::int64_t>(at(c))] +=
                            static_cast<T>(scale * p[at(c)] * (gp[static_cast<std::size_t>(c)] - dot));
                    }
                }
            }
        });
}

template <typename T>
ad::Var<T> ce_loss(const ad::Var<T>& logits, const LabelVolume& labels) {
    const Volume5<T>& z = logits.value();
    const Shape5 s = z.shape();
    check_labels(s, labels, "ce_loss");
    const std::int64_t K = s[kChannel];
    const auto S = static_cast<std::size_t>(s.spatial());
    std::vector<double> lp = log_softmax(z);
    double acc = 0.0;
    for (std::int64_t b = 0; b < s[kBatch]; ++b) {
        for (std::size_t i = 0; i < S; ++i) {
            const std::uint8_t y = labels.data[static_cast<std::size_t>(b) * S + i];
            acc -= lp[static_cast<std::size_t>((b * K + y) * static_cast<std::int64_t>(S)) + i];
        }
    }
    const double n = static_cast<double>(s[kBatch]) * static_cast<double>(S);
    return logits.tape().push(
        ad::OpKind::CrossEntropy, {logits}, Volume5<T>::scalar(static_cast<T>(acc / n)),
        [lp = std::move(lp), labels, s, n](const Volume5<T>& gy, std::span<Volume5<T>* const> gin) {
            const std::int64_t K = s[kChannel];
            const auto S = static_cast<std::size_t>(s.spatial());
            const double scale = static_cast<double>(gy[0]) / n;
            Volume5<T>& gz = *gin[0];
            for (std::int64_t b = 0; b < s[kBatch]; ++b) {
                for (std::size_t i = 0; i < S; ++i) {
                    const std::uint8_t y = labels.data[static_cast<std::size_t>(b) * S + i];
                    for (std::int64_t c = 0; c < K; ++c) {
                        const std::size_t at = static_cast<std::size_t>((b * K + c) * static_cast<std::int64_t>(S)) + i;
                        const double g = std::exp(lp[at]) - (c == y ? 1.0 : 0.0);
                        gz[static_cast<std::int64_t>(at)] += static_cast<T>(scale * g);
                    }
                }
            }
        });
}

template <typename T>
LossTerms<T> combined_loss(const ad::Var<T>& logits, const LabelVolume& labels) {
    LossTerms<T> t;
    t.dice = dice_loss(logits, labels);
    t.ce = ce_loss(logits, labels);
    t.total = ad::add(ad::scale(t.dice, T(0.5)), ad::scale(t.ce, T(0.5)));
    return t;
}

// ---------------------------------------------------------------------------

const char* optimizer_name(OptimizerKind k) {
    return k == OptimizerKind::AdamW ? "adamw" : "sgd";
}

OptimizerKind parse_optimizer(const std::string& name) {
    if (name == "sgd") return OptimizerKind::Sgd;
    if (name == "adamw") return OptimizerKind::AdamW;
    throw ConfigError("unknown optimizer '" + name + "' (expected sgd or adamw)");
}

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("train config: lr must be positive");
    if (epochs < 1) throw ConfigError("train config: epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("train config: batch_size must be at least 1");
    if (weight_decay < 0.0) throw ConfigError("train config: weight_decay must be non-negative");
    if (poly_power < 0.0) throw ConfigError("train config: poly_power must be non-negative");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train config: momentum must lie in [0, 1)");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
        throw ConfigError("train config: Adam betas must lie in [0, 1)");
    }
    for (std::int64_t p : patch) {
        if (p < 1) throw ConfigError("train config: patch extents must be positive");
    }
}

double poly_lr(std::int64_t step, std::int64_t total, double lr0, double power) {
    if (total < 1 || step < 0 || step > total) {
        throw ConfigError("poly_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(total) + "]");
    }
    return lr0 * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total), power);
}

template <typename T>
Optimizer<T>::Optimizer(const TrainConfig& cfg, std::vector<Volume5<T>*> params)
    : cfg_(cfg), params_(std::move(params)) {
    for (auto* p : params_) {
        const bool need_m = cfg_.optimizer == OptimizerKind::AdamW || cfg_.momentum > 0.0;
        m_.emplace_back(need_m ? static_cast<std::size_t>(p->numel()) : 0, T(0));
        v_.emplace_back(cfg_.optimizer == OptimizerKind::AdamW ? static_cast<std::size_t>(p->numel()) : 0, T(0));
    }
}

template <typename T>
void Optimizer<T>::step(const std::vector<const Volume5<T>*>& grads, double lr) {
    if (grads.size() != params_.size()) throw Error("optimizer: gradient count does not match parameters");
    ++steps_;
    const T decay = static_cast<T>(1.0 - lr * cfg_.weight_decay);
    const T rate = static_cast<T>(lr);
    const bool adam = cfg_.optimizer == OptimizerKind::AdamW;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T mom = static_cast<T>(cfg_.momentum);
    const T step_size = static_cast<T>(lr / bc1);
    const T root_bc2 = static_cast<T>(std::sqrt(bc2));
    const T eps = static_cast<T>(cfg_.adam_eps);

    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto p = params_[i]->data();
        if (cfg_.weight_decay != 0.0 && lr != 0.0) {
            for (T& e : p) e *= decay;
        }
        if (grads[i] == nullptr || lr == 0.0) continue;
        const auto g = grads[i]->data();
        if (adam) {
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t k = 0; k < p.size(); ++k) {
                m[k] = b1 * m[k] + (T(1) - b1) * g[k];
                v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
                p[k] -= step_size * m[k] / (std::sqrt(v[k]) / root_bc2 + eps);
            }
        } else if (!m_[i].empty()) {
            auto& m = m_[i];
            for (std::size_t k = 0; k < p.size(); ++k) {
                m[k] = mom * m[k] + g[k];
                p[k] -= rate * m[k];
            }
        } else {
            for (std::size_t k = 0; k < p.size(); ++k) p[k] -= rate * g[k];
        }
    }
}

// ---------------------------------------------------------------------------

template <typename T>
Patch<T> sample_patch(const Volume5<T>& image, const LabelVolume& labels,
                      const std::array<std::int64_t, 3>& patch, std::mt19937_64& rng, bool flips) {
    const Shape5& s = image.shape();
    if (labels.depth != s[kDepth] || labels.height != s[kHeight] || labels.width != s[kWidth]) {
        throw ShapeError("sample_patch: image and labels differ in spatial extent");
    }
    const std::array<std::int64_t, 3> dims{s[kDepth], s[kHeight], s[kWidth]};
    const std::array<Axis, 3> axes{kDepth, kHeight, kWidth};
    Patch<T> out;
    for (int a = 0; a < 3; ++a) {
        if (patch[a] > dims[a]) {
            throw ShapeError(std::string("sample_patch: patch larger than the volume along ") +
                             axis_name(axes[a]) + " axis");
        }
        std::uniform_int_distribution<std::int64_t> pick(0, dims[a] - patch[a]);
        out.corner[a] = pick(rng);
    }
    out.image = io::crop(image, out.corner, patch);
    out.labels = io::crop(labels, out.corner, patch);
    if (flips) {
        std::bernoulli_distribution coin(0.5);
        for (int a = 0; a < 3; ++a) {
            out.flipped[a] = coin(rng);
            if (out.flipped[a]) {
                out.image = io::flip(out.image, a);
                out.labels = io::flip(out.labels, a);
            }
        }
    }
    return out;
}

std::string loss_log_header() {
    return "epoch,total,dice,ce,lr";
}

std::string format_log_line(const EpochRecord& r) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.9g,%.9g", static_cast<long long>(r.epoch), r.loss.total,
                  r.loss.dice, r.loss.ce, r.lr);
    return buf;
}

namespace {

template <typename T>
[[noreturn]] void report_non_finite(const ad::Tape<T>& tape,
                                   const std::vector<std::pair<std::string, Volume5<T>*>>& named) {
    if (auto bad = tape.first_non_finite()) {
        std::string what = "node " + std::to_string(bad->first) + " (" + ad::op_name(bad->second) + ")";
        for (const auto& [name, param] : named) {
            const auto leaf = tape.find_leaf(param);
            if (leaf && leaf->id() == bad->first) what += " = parameter " + name;
        }
        throw NumericError("non-finite loss: first non-finite tensor is " + what);
    }
    throw NumericError("non-finite loss");
}

template <typename T>
Volume5<T> stack(const std::vector<const Volume5<T>*>& items) {
    const Shape5 one = items.front()->shape();
    Volume5<T> out(one.with(kBatch, static_cast<std::int64_t>(items.size())));
    auto dst = out.data();
    std::size_t at = 0;
    for (const auto* v : items) {
        std::copy(v->data().begin(), v->data().end(), dst.begin() + static_cast<std::ptrdiff_t>(at));
        at += v->data().size();
    }
    return out;
}

LabelVolume stack(const std::vector<const LabelVolume*>& items) {
    const LabelVolume& one = *items.front();
    LabelVolume out(static_cast<std::int64_t>(items.size()), one.depth, one.height, one.width);
    std::size_t at = 0;
    for (const auto* v : items) {
        std::copy(v->data.begin(), v->data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(at));
        at += v->data.size();
    }
    return out;
}

}  // namespace

template <typename T>
std::vector<EpochRecord> train(MhMambaNet<T>& net, const std::vector<Case<T>>& data, const TrainConfig& cfg,
                               const std::function<void(const EpochRecord&)>& on_epoch) {
    cfg.validate();
    if (data.empty()) throw ConfigError("train: no training cases");
    const FlushSubnormals flush;
    auto named = net.parameters();
    std::vector<Volume5<T>*> params;
    for (auto& [name, v] : named) params.push_back(v);
    Optimizer<T> opt(cfg, params);
    std::mt19937_64 rng(cfg.seed);

    const auto n = static_cast<std::int64_t>(data.size());
    const std::int64_t steps = (n + cfg.batch_size - 1) / cfg.batch_size;
    std::vector<EpochRecord> log;
    for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = poly_lr(epoch, cfg.epochs, cfg);
        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = lr;
        for (std::int64_t step = 0; step < steps; ++step) {
            std::vector<Patch<T>> patches;
            for (std::int64_t k = step * cfg.batch_size; k < std::min(n, (step + 1) * cfg.batch_size); ++k) {
                const auto& c = data[static_cast<std::size_t>(k)];
                patches.push_back(sample_patch(c.image, c.labels, cfg.patch, rng, cfg.flips));
            }
            std::vector<const Volume5<T>*> images;
            std::vector<const LabelVolume*> labels;
            for (const auto& p : patches) {
                images.push_back(&p.image);
                labels.push_back(&p.labels);
            }
            const Volume5<T> x = stack(images);
            const LabelVolume y = stack(labels);

            ad::Tape<T> tape;
            const auto out = net.forward(tape.leaf(x, false));
            const LossTerms<T> loss = combined_loss(out.logits, y);
            const double dice = static_cast<double>(loss.dice.value()[0]);
            const double ce = static_cast<double>(loss.ce.value()[0]);
            if (!std::isfinite(dice) || !std::isfinite(ce)) report_non_finite(tape, named);

            const ad::GradientStore<T> grads = tape.backward(loss.total);
            std::vector<const Volume5<T>*> g;
            g.reserve(params.size());
            for (auto* p : params) {
                const auto leaf = tape.find_leaf(p);
                g.push_back(leaf ? grads.find(*leaf) : nullptr);
            }
            opt.step(g, lr);

            rec.loss.dice += dice;
            rec.loss.ce += ce;
        }
        rec.loss.dice /= static_cast<double>(steps);
        rec.loss.ce /= static_cast<double>(steps);
        rec.loss.total = 0.5 * rec.loss.dice + 0.5 * rec.loss.ce;
        log.push_back(rec);
        if (on_epoch) on_epoch(rec);
    }
    return log;
}

template <typename T>
LossValue evaluate_loss(const MhMambaNet<T>& net, const Volume5<T>& image, const LabelVolume& labels) {
    ad::Tape<T> tape(false);
    const auto out = net.forward(tape.leaf(image, false));
    const LossTerms<T> loss = combined_loss(out.logits, labels);
    LossValue v;
    v.dice = static_cast<double>(loss.dice.value()[0]);
    v.ce = static_cast<double>(loss.ce.value()[0]);
    v.total = 0.5 * v.dice + 0.5 * v.ce;
    return v;
}

#define MHM_INSTANTIATE(T)                                                                             \
    template ad::Var<T> dice_loss(const ad::Var<T>&, const LabelVolume&, double);                      \
    template ad::Var<T> ce_loss(const ad::Var<T>&, const LabelVolume&);                                \
    template LossTerms<T> combined_loss(const ad::Var<T>&, const LabelVolume&);                        \
    template class Optimizer<T>;                                                                       \
    template Patch<T> sample_patch(const Volume5<T>&, const LabelVolume&,                              \
                                   const std::array<std::int64_t, 3>&, std::mt19937_64&, bool);        \
    template std::vector<EpochRecord> train(MhMambaNet<T>&, const std::vector<Case<T>>&,               \
                                            const TrainConfig&,                                        \
                                            const std::function<void(const EpochRecord&)>&);           \
    template LossValue evaluate_loss(const MhMambaNet<T>&, const Volume5<T>&, const LabelVolume&);

MHM_INSTANTIATE(float)
MHM_INSTANTIATE(double)

#undef MHM_INSTANTIATE

}  // namespace mhm::train
