#include "mhmamba_cli/suites.hpp"

#include <algorithm>
#include <chrono>
#include <functional>
#include <memory>
#include <optional>
#include <random>

#include "mhmamba/agf.hpp"
#include "mhmamba/network.hpp"
#include "mhmamba/ssm.hpp"
#include "mhmamba/training.hpp"
#include "mhmamba_cli/config.hpp"

namespace mhm::cli {

namespace {

using V = Volume5<double>;
using VarD = ad::Var<double>;
using Clock = std::chrono::steady_clock;
using kernels::PoolKind;
using kernels::Unary;

V random(const Shape5& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    V v(s);
    for (auto& e : v.data()) e += d(rng);
    return v;
}

LabelVolume random_labels(std::int64_t d, std::int64_t h, std::int64_t w, std::mt19937_64& rng) {
    LabelVolume l(1, d, h, w);
    std::uniform_int_distribution<int> c(0, 3);
    for (auto& e : l.data) e = static_cast<std::uint8_t>(c(rng));
    return l;
}

// Initial values put gates and scalar mixing weights at special points (zeros,
// ones); a small perturbation moves every parameter into general position.
template <typename P>
void jitter(P& p, std::mt19937_64& rng, double amount) {
    std::uniform_real_distribution<double> d(-amount, amount);
    p.visit([&](std::string_view, V& v) {
        for (auto& e : v.data()) e += d(rng);
    });
}

template <typename P>
void collect(P& p, std::vector<V*>& wrt) {
    p.visit([&](std::string_view, V& v) { wrt.push_back(&v); });
}

// A ReLU or max that switches branch inside the stencil [x - h, x + h] shifts the
// central difference by up to half the second difference. Coordinates whose
// second difference exceeds twice the tolerance and that fail the step / 8
// smoothness test are excluded; no more than 1% may be.
constexpr double kKinkThreshold = 2.0 * kGradTolerance;

// The scan is smooth but some decay-rate gradients are ~1e-7; at h = 1e-5 the
// rounding noise of the loss dominates them, at 1e-4 truncation is still negligible.
constexpr double kSmoothStep = 1e-4;

/// Loss = <f(x), probe> for a probe drawn once from the output shape.
class Checker {
public:
    explicit Checker(std::uint64_t seed) : rng(seed) {}

    std::mt19937_64 rng;

    GradScopeResult run(const std::function<VarD(ad::Tape<double>&)>& forward, std::vector<V*> wrt,
                        double floor = 1e-8, double step = 1e-5) {
        V probe;
        {
            ad::Tape<double> t(false);
            probe = random(forward(t).shape(), rng);
        }
        ad::GradCheckOptions options;
        options.step = step;
        options.floor = floor;
        options.kink_threshold = kKinkThreshold;
        const auto r = ad::grad_check<double>(
            [&](ad::Tape<double>& t) { return ad::weighted_sum(forward(t), probe); }, wrt, options);
        return {"", r.max_relative_error, r.coordinates, r.skipped, 0.0};
    }

    GradScopeResult unary(const std::function<VarD(const VarD&)>& op, const Shape5& s, double lo = -1.0,
                          double hi = 1.0) {
        V x = random(s, rng, lo, hi);
        return run([&](ad::Tape<double>& t) { return op(t.leaf(x)); }, {&x});
    }
};

GradScopeResult pool_scope(Checker& c, PoolKind k) {
    return c.unary([k](const VarD& v) { return ad::pool(v, k); }, Shape5(2, 4, 2, 3, 2));
}

GradScopeResult activation_scope(Checker& c, Unary f) {
    return c.unary([f](const VarD& v) { return ad::activation(v, f); }, Shape5(1, 3, 3, 2, 2), -3.0, 3.0);
}

GradScopeResult binary_scope(Checker& c, kernels::Binary op) {
    V a = random(Shape5(2, 3, 2, 2, 2), c.rng);
    V b = random(Shape5(2, 1, 2, 2, 2), c.rng);
    V s = random(Shape5(1, 3, 1, 1, 1), c.rng);
    return c.run([&](ad::Tape<double>& t) { return ad::binary(ad::binary(t.leaf(a), t.leaf(b), op), t.leaf(s), op); },
                 {&a, &b, &s});
}

GradScopeResult conv_scope(Checker& c, kernels::ConvGeometry g) {
    V x = random(Shape5(2, 4, 5, 4, 5), c.rng);
    V w = random(Shape5(4, 4 / g.groups, 3, 3, 3), c.rng);
    V b = random(Shape5(4, 1, 1, 1, 1), c.rng);
    return c.run(
        [&](ad::Tape<double>& t) { return ad::conv3d(t.leaf(x), t.leaf(w), std::optional<VarD>(t.leaf(b)), g); },
        {&x, &w, &b});
}

GradScopeResult norm_scope(Checker& c, bool layer) {
    V x = random(Shape5(2, 5, 3, 2, 3), c.rng, -2.0, 2.0);
    V g = random(Shape5(5, 1, 1, 1, 1), c.rng);
    V b = random(Shape5(5, 1, 1, 1, 1), c.rng);
    return c.run(
        [&](ad::Tape<double>& t) {
            return layer ? ad::layer_norm(t.leaf(x), t.leaf(g), t.leaf(b))
                         : ad::instance_norm(t.leaf(x), t.leaf(g), t.leaf(b));
        },
        {&x, &g, &b});
}

GradScopeResult scan_scope(Checker& c, std::int64_t chunk) {
    auto p = ssm::SSMHeadParams<double>::init(3, 4, c.rng);
    jitter(p, c.rng, 0.3);
    V x = random(Shape5(2, 3, 2, 3, 3), c.rng);
    std::vector<V*> wrt{&x};
    collect(p, wrt);
    return c.run(
        [&](ad::Tape<double>& t) {
            return ad::selective_scan(t.leaf(x), ad::ScanVars<double>::bind(t, p), chunk);
        },
        wrt, 1e-8, kSmoothStep);
}

GradScopeResult loss_scope(Checker& c, int which) {
    V z = random(Shape5(1, 4, 3, 2, 3), c.rng, -2.0, 2.0);
    const LabelVolume y = random_labels(3, 2, 3, c.rng);
    ad::GradCheckOptions options;
    options.step = 1e-5;
    options.kink_threshold = kKinkThreshold;
    const auto r = ad::grad_check<double>(
        [&](ad::Tape<double>& t) {
            const auto l = train::combined_loss(t.leaf(z), y);
            return which == 0 ? l.dice : which == 1 ? l.ce : l.total;
        },
        std::vector<V*>{&z}, options);
    return {"", r.max_relative_error, r.coordinates, r.skipped, 0.0};
}

// Composed modules at C = 8 on a 4^3 grid. Losses there reach O(100), so rounding
// leaves ~1e-8 of noise in each difference quotient at h = 1e-5; entries below
// 1e-3 are compared absolutely (error < 1e-7).
constexpr double kModuleFloor = 1e-3;
constexpr double kModuleStep = 1e-5;

GradScopeResult gla_scope(Checker& c) {
    auto p = blocks::GLAParams<double>::init(8, c.rng);
    jitter(p, c.rng, 0.1);
    V x = random(Shape5(1, 8, 4, 4, 4), c.rng);
    std::vector<V*> wrt{&x};
    collect(p, wrt);
    return c.run([&](ad::Tape<double>& t) { return blocks::gla_forward(t.leaf(x), p); }, wrt, kModuleFloor, kModuleStep);
}

GradScopeResult mhm_scope(Checker& c) {
    auto p = blocks::MHMParams<double>::init(8, 4, 4, c.rng);
    jitter(p, c.rng, 0.1);
    V x = random(Shape5(1, 8, 4, 4, 4), c.rng);
    std::vector<V*> wrt{&x};
    collect(p, wrt);
    return c.run([&](ad::Tape<double>& t) { return blocks::mhm_forward(t.leaf(x), p, blocks::MhmOptions{}); }, wrt,
                 kModuleFloor, kModuleStep);
}

GradScopeResult csca_scope(Checker& c) {
    auto p = blocks::CSCAParams<double>::init(8, 4, c.rng);
    jitter(p, c.rng, 0.1);
    V x = random(Shape5(1, 8, 4, 4, 4), c.rng);
    std::vector<V*> wrt{&x};
    collect(p, wrt);
    return c.run(
        [&](ad::Tape<double>& t) { return blocks::csca_forward(t.leaf(x), p, blocks::Activation::Relu).out; }, wrt,
        kModuleFloor, kModuleStep);
}

GradScopeResult block_scope(Checker& c) {
    auto p = blocks::MHMBlockParams<double>::init(8, 4, 4, 4, c.rng);
    jitter(p, c.rng, 0.1);
    V x = random(Shape5(1, 8, 4, 4, 4), c.rng);
    std::vector<V*> wrt{&x};
    collect(p, wrt);
    return c.run([&](ad::Tape<double>& t) { return blocks::block_forward(t.leaf(x), p, blocks::MhmOptions{}); },
                 wrt, kModuleFloor, kModuleStep);
}

GradScopeResult agf_scope(Checker& c) {
    auto p = blocks::AGFParams<double>::init(8, c.rng);
    jitter(p, c.rng, 0.5);
    V e = random(Shape5(1, 8, 3, 3, 3), c.rng);
    V d = random(Shape5(1, 8, 3, 3, 3), c.rng);
    std::vector<V*> wrt{&e, &d};
    collect(p, wrt);
    return c.run([&](ad::Tape<double>& t) { return blocks::agf_forward(t.leaf(e), t.leaf(d), p); }, wrt);
}

// The default network has millions of parameters, so instead of one difference
// per coordinate it compares directional derivatives along random directions
// that touch every parameter at once.
GradScopeResult network_scope(std::int64_t size, std::uint64_t seed) {
    if (size < 16 || size % 16 != 0) throw UsageError("gradcheck: network size must be a positive multiple of 16");
    NetworkConfig cfg;
    cfg.precision = Precision::F64;
    MhMambaNet<double> net(cfg, seed);
    std::mt19937_64 rng(seed + 1);
    const V x = random(Shape5(1, 4, size, size, size), rng);
    const LabelVolume y = random_labels(size, size, size, rng);
    std::vector<V*> wrt;
    for (auto& [name, v] : net.parameters()) wrt.push_back(v);
    constexpr std::size_t kDirections = 6;
    const auto r = ad::directional_check<double>(
        [&](ad::Tape<double>& t) { return train::combined_loss(net.forward(t.constant(x)).logits, y).total; }, wrt,
        kDirections, 1e-5, seed + 2);
    return {"", r.max_relative_error, kDirections, 0, 0.0};
}

using ScopeFn = std::function<GradScopeResult(Checker&)>;

const std::vector<std::pair<std::string, ScopeFn>>& scope_table() {
    using kernels::Binary;
    static const std::vector<std::pair<std::string, ScopeFn>> table{
        {"conv3d", [](Checker& c) { return conv_scope(c, {1, 1, 1}); }},
        {"conv3d_strided", [](Checker& c) { return conv_scope(c, {2, 1, 1}); }},
        {"conv3d_grouped", [](Checker& c) { return conv_scope(c, {1, 0, 2}); }},
        {"sobel3d", [](Checker& c) { return c.unary([](const VarD& v) { return ad::sobel3d(v); }, Shape5(1, 2, 4, 3, 5)); }},
        {"layer_norm", [](Checker& c) { return norm_scope(c, true); }},
        {"instance_norm", [](Checker& c) { return norm_scope(c, false); }},
        {"pool_global_average", [](Checker& c) { return pool_scope(c, PoolKind::GlobalAverage); }},
        {"pool_global_max", [](Checker& c) { return pool_scope(c, PoolKind::GlobalMax); }},
        {"pool_channel_mean", [](Checker& c) { return pool_scope(c, PoolKind::ChannelMean); }},
        {"pool_channel_std", [](Checker& c) { return pool_scope(c, PoolKind::ChannelStd); }},
        {"pool_channel_max", [](Checker& c) { return pool_scope(c, PoolKind::ChannelMax); }},
        {"pool_channel_min", [](Checker& c) { return pool_scope(c, PoolKind::ChannelMin); }},
        {"sigmoid", [](Checker& c) { return activation_scope(c, Unary::Sigmoid); }},
        {"relu", [](Checker& c) { return activation_scope(c, Unary::Relu); }},
        {"softplus", [](Checker& c) { return activation_scope(c, Unary::Softplus); }},
        {"silu", [](Checker& c) { return activation_scope(c, Unary::Silu); }},
        {"add", [](Checker& c) { return binary_scope(c, Binary::Add); }},
        {"sub", [](Checker& c) { return binary_scope(c, Binary::Sub); }},
        {"mul", [](Checker& c) { return binary_scope(c, Binary::Mul); }},
        {"affine", [](Checker& c) { return c.unary([](const VarD& v) { return ad::affine(v, -1.5, 0.25); }, Shape5(1, 2, 2, 2, 2)); }},
        {"slice_channels",
         [](Checker& c) { return c.unary([](const VarD& v) { return ad::slice_channels(v, 1, 2); }, Shape5(2, 4, 2, 2, 2)); }},
        {"concat_channels",
         [](Checker& c) {
             return c.unary(
                 [](const VarD& v) {
                     const std::array<VarD, 3> parts{v, ad::scale(v, 2.0), ad::slice_channels(v, 0, 1)};
                     return ad::concat_channels<double>(parts);
                 },
                 Shape5(2, 2, 2, 2, 2));
         }},
        {"split_channels",
         [](Checker& c) {
             return c.unary(
                 [](const VarD& v) {
                     auto parts = ad::split_channels(v, 2);
                     return ad::mul(parts[0], parts[1]);
                 },
                 Shape5(1, 4, 2, 2, 2));
         }},
        {"upsample2x", [](Checker& c) { return c.unary([](const VarD& v) { return ad::upsample2x(v); }, Shape5(1, 2, 3, 2, 3)); }},
        {"sum", [](Checker& c) { return c.unary([](const VarD& v) { return ad::sum(v); }, Shape5(1, 2, 2, 2, 2)); }},
        {"scan", [](Checker& c) { return scan_scope(c, 0); }},
        {"scan_blocked", [](Checker& c) { return scan_scope(c, 5); }},
        {"dice_loss", [](Checker& c) { return loss_scope(c, 0); }},
        {"ce_loss", [](Checker& c) { return loss_scope(c, 1); }},
        {"combined_loss", [](Checker& c) { return loss_scope(c, 2); }},
        {"gla", gla_scope},
        {"mhm", mhm_scope},
        {"csca", csca_scope},
        {"block", block_scope},
        {"agf", agf_scope},
    };
    return table;
}

}  // namespace

const std::vector<std::string>& gradcheck_scopes() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> n;
        for (const auto& [name, fn] : scope_table()) n.push_back(name);
        n.emplace_back("network");
        return n;
    }();
    return names;
}

GradScopeResult run_gradcheck(const std::string& scope, std::int64_t size, std::uint64_t seed) {
    const auto t0 = Clock::now();
    GradScopeResult r;
    if (scope == "network") {
        r = network_scope(size, seed);
    } else {
        const auto& table = scope_table();
        const auto it = std::find_if(table.begin(), table.end(), [&](const auto& e) { return e.first == scope; });
        if (it == table.end()) throw UsageError("unknown gradcheck scope '" + scope + "'");
        Checker c(seed);
        r = it->second(c);
    }
    r.scope = scope;
    r.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    return r;
}

// ---------------------------------------------------------------------------

const std::vector<std::string>& bench_components() {
    static const std::vector<std::string> names{"scan", "block", "encoder", "network"};
    return names;
}

namespace {

using Workload = std::function<void()>;

double elapsed_ms(const Workload& fn) {
    const auto t0 = Clock::now();
    fn();
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

// One head of the default first stage: C_h = 48 / 4 channels, 16 states.
Workload scan_workload(std::int64_t tokens, std::mt19937_64& rng) {
    constexpr std::int64_t kChannels = 12, kState = 16;
    const auto p = ssm::SSMHeadParams<float>::init(kChannels, kState, rng);
    auto x = std::make_shared<ssm::SequenceView<float>>(1, tokens, kChannels);
    std::uniform_real_distribution<float> d(-1.0f, 1.0f);
    for (auto& e : x->data) e = d(rng);
    return [x, w = p.weights()] {
        const auto y = ssm::scan_sequential(*x, w);
        if (y.data.empty()) throw std::logic_error("empty scan output");
    };
}

}  // namespace

std::vector<BenchRow> run_bench(const std::string& component, const std::vector<std::int64_t>& sizes, int repeats,
                                std::uint64_t seed) {
    if (std::find(bench_components().begin(), bench_components().end(), component) == bench_components().end()) {
        throw UsageError("unknown bench component '" + component + "'");
    }
    if (sizes.empty()) throw UsageError("bench: no sizes given");
    std::mt19937_64 rng(seed);
    auto net = std::make_shared<std::optional<MhMambaNet<float>>>();
    auto block = std::make_shared<std::optional<blocks::MHMBlockParams<float>>>();
    if (component == "encoder" || component == "network") net->emplace(NetworkConfig{}, seed);
    if (component == "block") block->emplace(blocks::MHMBlockParams<float>::init(48, 4, 16, 4, rng));

    std::vector<BenchRow> rows;
    std::vector<Workload> work;
    for (const std::int64_t size : sizes) {
        if (size < 1) throw UsageError("bench: sizes must be positive");
        BenchRow row;
        row.size = size;
        if (component == "scan") {
            row.tokens = size;
            work.push_back(scan_workload(size, rng));
        } else {
            row.tokens = size * size * size;
            const std::int64_t channels = component == "block" ? 48 : 4;
            auto x = std::make_shared<Volume5<float>>(Shape5(1, channels, size, size, size));
            std::uniform_real_distribution<float> d(-1.0f, 1.0f);
            for (auto& e : x->data()) e = d(rng);
            work.push_back([x, net, block, component] {
                ad::Tape<float> t(false);
                if (component == "block") {
                    blocks::block_forward(t.constant(*x), **block, blocks::MhmOptions{});
                } else if (component == "encoder") {
                    (*net)->encode(t.constant(*x));
                } else {
                    (*net)->forward(t.constant(*x));
                }
            });
        }
        rows.push_back(row);
    }
    // Repeats go round-robin over the sizes so a transient slowdown of the
    // machine hits every size alike instead of skewing one ratio.
    for (int r = 0; r < std::max(1, repeats); ++r) {
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const double ms = elapsed_ms(work[i]);
            if (r == 0 || ms < rows[i].ms) rows[i].ms = ms;
        }
    }
    for (std::size_t i = 1; i < rows.size(); ++i) rows[i].ratio = rows[i].ms / rows[i - 1].ms;
    return rows;
}

}  // namespace mhm::cli
