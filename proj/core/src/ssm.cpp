#include "mhmamba/ssm.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "mhmamba/kernels.hpp"

namespace mhm::ssm {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

// Input-dependent quantities for every token of one sequence.
template <typename T>
struct Projections {
    std::vector<T> z;      // (N, C) pre-softplus step
    std::vector<T> delta;  // (N, C)
    std::vector<T> b;      // (N, n)
    std::vector<T> c;      // (N, n)
};

template <typename T>
Projections<T> project(const T* x, std::int64_t length, const ScanWeights<T>& w) {
    const std::int64_t C = w.channels;
    const std::int64_t n = w.state;
    Projections<T> p;
    p.z.resize(static_cast<std::size_t>(length * C));
    p.delta.resize(p.z.size());
    p.b.resize(static_cast<std::size_t>(length * n));
    p.c.resize(p.b.size());
    ConstMap<T> xm(x, length, C);
    MutMap<T> z(p.z.data(), length, C);
    z.noalias() = xm * ConstMap<T>(w.w_delta.data(), C, C).transpose();
    for (std::int64_t t = 0; t < length; ++t) {
        for (std::int64_t ch = 0; ch < C; ++ch) {
            const auto i = static_cast<std::size_t>(t * C + ch);
            p.z[i] += w.b_delta[static_cast<std::size_t>(ch)];
            p.delta[i] = kernels::softplus(p.z[i]);
        }
    }
    MutMap<T>(p.b.data(), length, n).noalias() = xm * ConstMap<T>(w.w_b.data(), n, C).transpose();
    MutMap<T>(p.c.data(), length, n).noalias() = xm * ConstMap<T>(w.w_c.data(), n, C).transpose();
    return p;
}

template <typename T>
std::vector<T> state_matrix(const ScanWeights<T>& w) {
    std::vector<T> a(w.a_log.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] = -std::exp(w.a_log[i]);
    }
    return a;
}

// Advances state h (C, n) over tokens [t0, t1). Writes outputs when y is non-null and
// the post-update state of every token when states is non-null.
template <typename T>
void run_range(const T* x, const Projections<T>& p, const std::vector<T>& a,
               const ScanWeights<T>& w, std::int64_t t0, std::int64_t t1, T* h, T* y, T* states) {
    const std::int64_t C = w.channels;
    const std::int64_t n = w.state;
    for (std::int64_t t = t0; t < t1; ++t) {
        const T* bt = p.b.data() + t * n;
        const T* ct = p.c.data() + t * n;
        for (std::int64_t ch = 0; ch < C; ++ch) {
            const T dt = p.delta[static_cast<std::size_t>(t * C + ch)];
            const T xc = x[t * C + ch];
            const T* ac = a.data() + ch * n;
            T* hc = h + ch * n;
            T acc = 0;
            for (std::int64_t k = 0; k < n; ++k) {
                hc[k] = std::exp(dt * ac[k]) * hc[k] + dt * bt[k] * xc;
                acc += ct[k] * hc[k];
            }
            if (y != nullptr) {
                y[t * C + ch] = acc + w.d_skip[static_cast<std::size_t>(ch)] * xc;
            }
        }
        if (states != nullptr) {
            std::copy(h, h + C * n, states + t * C * n);
        }
    }
}

// Local scan of one chunk from a zero state: end state and the product of transitions.
template <typename T>
void chunk_summary(const T* x, const Projections<T>& p, const std::vector<T>& a,
                   const ScanWeights<T>& w, std::int64_t t0, std::int64_t t1, T* local, T* decay) {
    const std::int64_t C = w.channels;
    const std::int64_t n = w.state;
    std::fill(local, local + C * n, T(0));
    std::fill(decay, decay + C * n, T(1));
    for (std::int64_t t = t0; t < t1; ++t) {
        const T* bt = p.b.data() + t * n;
        for (std::int64_t ch = 0; ch < C; ++ch) {
            const T dt = p.delta[static_cast<std::size_t>(t * C + ch)];
            const T xc = x[t * C + ch];
            for (std::int64_t k = 0; k < n; ++k) {
                const auto i = ch * n + k;
                const T abar = std::exp(dt * a[static_cast<std::size_t>(i)]);
                local[i] = abar * local[i] + dt * bt[k] * xc;
                decay[i] *= abar;
            }
        }
    }
}

template <typename T>
void check_sequence(const SequenceView<T>& x, const ScanWeights<T>& w) {
    if (x.channels != w.channels) {
        throw ShapeError("selective scan: channel axis mismatch (sequence has " +
                         std::to_string(x.channels) + ", head expects " +
                         std::to_string(w.channels) + ")");
    }
}

}  // namespace

template <typename T>
SSMHeadParams<T> SSMHeadParams<T>::init(std::int64_t channels, std::int64_t state,
                                        std::mt19937_64& rng) {
    if (channels < 1 || state < 1) {
        throw ConfigError("SSM head needs at least one channel and one state");
    }
    SSMHeadParams p;
    p.a_log = Volume5<T>(Shape5(channels, state, 1, 1, 1));
    for (std::int64_t c = 0; c < channels; ++c) {
        for (std::int64_t k = 0; k < state; ++k) {
            p.a_log[c * state + k] = static_cast<T>(std::log(static_cast<double>(k + 1)));
        }
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
    std::uniform_real_distribution<double> uni(-bound, bound);
    auto fill = [&](Volume5<T>& v) {
        for (T& e : v.data()) {
            e = static_cast<T>(uni(rng));
        }
    };
    p.w_b = Volume5<T>(Shape5(state, channels, 1, 1, 1));
    p.w_c = Volume5<T>(Shape5(state, channels, 1, 1, 1));
    p.w_delta = Volume5<T>(Shape5(channels, channels, 1, 1, 1));
    fill(p.w_b);
    fill(p.w_c);
    fill(p.w_delta);
    p.b_delta = Volume5<T>(Shape5(channels, 1, 1, 1, 1));
    std::uniform_real_distribution<double> log_step(std::log(1e-3), std::log(1e-1));
    for (T& e : p.b_delta.data()) {
        const double dt = std::exp(log_step(rng));
        e = static_cast<T>(dt + std::log(-std::expm1(-dt)));
    }
    p.d_skip = Volume5<T>(Shape5(channels, 1, 1, 1, 1), T(1));
    return p;
}

template <typename T>
ScanWeights<T> SSMHeadParams<T>::weights() const {
    return ScanWeights<T>{channels(), state(), a_log.data(), w_b.data(),    w_c.data(),
                          w_delta.data(), b_delta.data(), d_skip.data()};
}

template <typename T>
SequenceView<T> flatten_tokens(const Volume5<T>& x) {
    const Shape5& s = x.shape();
    const std::int64_t N = s.spatial();
    SequenceView<T> seq(s[0], N, s[1]);
    for (std::int64_t b = 0; b < s[0]; ++b) {
        for (std::int64_t c = 0; c < s[1]; ++c) {
            auto plane = x.plane(b, c);
            for (std::int64_t t = 0; t < N; ++t) {
                seq.at(b, t, c) = plane[static_cast<std::size_t>(t)];
            }
        }
    }
    return seq;
}

template <typename T>
Volume5<T> unflatten_tokens(const SequenceView<T>& seq, std::int64_t depth, std::int64_t height,
                            std::int64_t width) {
    if (depth * height * width != seq.length) {
        throw ShapeError("unflatten_tokens: " + std::to_string(seq.length) +
                         " tokens do not fill " + std::to_string(depth) + "x" +
                         std::to_string(height) + "x" + std::to_string(width));
    }
    Volume5<T> x(Shape5(seq.batch, seq.channels, depth, height, width));
    for (std::int64_t b = 0; b < seq.batch; ++b) {
        for (std::int64_t c = 0; c < seq.channels; ++c) {
            auto plane = x.plane(b, c);
            for (std::int64_t t = 0; t < seq.length; ++t) {
                plane[static_cast<std::size_t>(t)] = seq.at(b, t, c);
            }
        }
    }
    return x;
}

template <typename T>
Discretized<T> discretize(const ScanWeights<T>& w, std::span<const T> token) {
    if (static_cast<std::int64_t>(token.size()) != w.channels) {
        throw ShapeError("discretize: token length " + std::to_string(token.size()) +
                         " does not match head width " + std::to_string(w.channels));
    }
    const Projections<T> p = project(token.data(), 1, w);
    const std::vector<T> a = state_matrix(w);
    Discretized<T> d;
    d.delta = p.delta;
    d.c = p.c;
    d.a_bar.resize(a.size());
    d.b_bar.resize(a.size());
    for (std::int64_t ch = 0; ch < w.channels; ++ch) {
        for (std::int64_t k = 0; k < w.state; ++k) {
            const auto i = static_cast<std::size_t>(ch * w.state + k);
            d.a_bar[i] = std::exp(d.delta[static_cast<std::size_t>(ch)] * a[i]);
            d.b_bar[i] = d.delta[static_cast<std::size_t>(ch)] * p.b[static_cast<std::size_t>(k)];
        }
    }
    return d;
}

template <typename T>
SequenceView<T> scan_sequential(const SequenceView<T>& x, const ScanWeights<T>& w) {
    check_sequence(x, w);
    SequenceView<T> y(x.batch, x.length, x.channels);
    const std::vector<T> a = state_matrix(w);
    std::vector<T> h(static_cast<std::size_t>(w.channels * w.state));
    for (std::int64_t b = 0; b < x.batch; ++b) {
        const T* xb = x.data.data() + b * x.length * x.channels;
        const Projections<T> p = project(xb, x.length, w);
        std::fill(h.begin(), h.end(), T(0));
        run_range(xb, p, a, w, 0, x.length, h.data(), y.data.data() + b * x.length * x.channels,
                  static_cast<T*>(nullptr));
    }
    return y;
}

template <typename T>
SequenceView<T> scan_blocked(const SequenceView<T>& x, const ScanWeights<T>& w,
                             std::int64_t chunk) {
    check_sequence(x, w);
    if (chunk < 1) {
        throw ConfigError("scan_blocked: chunk must be >= 1");
    }
    SequenceView<T> y(x.batch, x.length, x.channels);
    const std::vector<T> a = state_matrix(w);
    const std::int64_t S = w.channels * w.state;
    const std::int64_t chunks = (x.length + chunk - 1) / chunk;
    std::vector<T> local(static_cast<std::size_t>(chunks * S));
    std::vector<T> decay(local.size());
    std::vector<T> start(local.size());
    for (std::int64_t b = 0; b < x.batch; ++b) {
        const T* xb = x.data.data() + b * x.length * x.channels;
        T* yb = y.data.data() + b * x.length * x.channels;
        const Projections<T> p = project(xb, x.length, w);
        // Chunk summaries are independent of each other.
        for (std::int64_t k = 0; k < chunks; ++k) {
            const std::int64_t t0 = k * chunk;
            const std::int64_t t1 = std::min(x.length, t0 + chunk);
            chunk_summary(xb, p, a, w, t0, t1, local.data() + k * S, decay.data() + k * S);
        }
        // Boundary stitch: start_k = decay_{k-1} * start_{k-1} + local_{k-1}.
        std::fill(start.begin(), start.begin() + S, T(0));
        for (std::int64_t k = 1; k < chunks; ++k) {
            for (std::int64_t i = 0; i < S; ++i) {
                start[static_cast<std::size_t>(k * S + i)] =
                    decay[static_cast<std::size_t>((k - 1) * S + i)] *
                        start[static_cast<std::size_t>((k - 1) * S + i)] +
                    local[static_cast<std::size_t>((k - 1) * S + i)];
            }
        }
        // Rescan each chunk from its carried state; again independent per chunk.
        for (std::int64_t k = 0; k < chunks; ++k) {
            const std::int64_t t0 = k * chunk;
            const std::int64_t t1 = std::min(x.length, t0 + chunk);
            run_range(xb, p, a, w, t0, t1, start.data() + k * S, yb, static_cast<T*>(nullptr));
        }
    }
    return y;
}

template struct SSMHeadParams<float>;
template struct SSMHeadParams<double>;
template SequenceView<float> flatten_tokens(const Volume5<float>&);
template SequenceView<double> flatten_tokens(const Volume5<double>&);
template Volume5<float> unflatten_tokens(const SequenceView<float>&, std::int64_t, std::int64_t,
                                         std::int64_t);
template Volume5<double> unflatten_tokens(const SequenceView<double>&, std::int64_t, std::int64_t,
                                          std::int64_t);
template Discretized<float> discretize(const ScanWeights<float>&, std::span<const float>);
template Discretized<double> discretize(const ScanWeights<double>&, std::span<const double>);
template SequenceView<float> scan_sequential(const SequenceView<float>&, const ScanWeights<float>&);
template SequenceView<double> scan_sequential(const SequenceView<double>&,
                                              const ScanWeights<double>&);
template SequenceView<float> scan_blocked(const SequenceView<float>&, const ScanWeights<float>&,
                                          std::int64_t);
template SequenceView<double> scan_blocked(const SequenceView<double>&,
                                           const ScanWeights<double>&, std::int64_t);

// ---------------------------------------------------------------------------
// Reverse pass

namespace {

template <typename T>
struct ScanGrads {
    std::vector<T> a_log, w_b, w_c, w_delta, b_delta, d_skip;
};

// Accumulates parameter gradients into g and returns dL/dx for one sequence (N, C).
template <typename T>
std::vector<T> scan_backward_sequence(const T* x, const T* gy, std::int64_t length,
                                      const ScanWeights<T>& w, ScanGrads<T>& g) {
    const std::int64_t C = w.channels;
    const std::int64_t n = w.state;
    const Projections<T> p = project(x, length, w);
    const std::vector<T> a = state_matrix(w);
    std::vector<T> states(static_cast<std::size_t>(length * C * n));
    std::vector<T> h(static_cast<std::size_t>(C * n), T(0));
    run_range(x, p, a, w, 0, length, h.data(), static_cast<T*>(nullptr), states.data());

    std::vector<T> gx(static_cast<std::size_t>(length * C), T(0));
    std::vector<T> gz(gx.size(), T(0));
    std::vector<T> gb(static_cast<std::size_t>(length * n), T(0));
    std::vector<T> gc(gb.size(), T(0));
    std::vector<T> gh(static_cast<std::size_t>(C * n), T(0));
    std::vector<T> ga_state(gh.size(), T(0));

    for (std::int64_t t = length; t-- > 0;) {
        const T* ht = states.data() + t * C * n;
        const T* hprev = t > 0 ? states.data() + (t - 1) * C * n : nullptr;
        const T* bt = p.b.data() + t * n;
        const T* ct = p.c.data() + t * n;
        T* gbt = gb.data() + t * n;
        T* gct = gc.data() + t * n;
        for (std::int64_t ch = 0; ch < C; ++ch) {
            const auto ti = static_cast<std::size_t>(t * C + ch);
            const T gyc = gy[ti];
            const T xc = x[ti];
            const T dt = p.delta[ti];
            g.d_skip[static_cast<std::size_t>(ch)] += gyc * xc;
            T gxc = gyc * w.d_skip[static_cast<std::size_t>(ch)];
            T gdelta = 0;
            for (std::int64_t k = 0; k < n; ++k) {
                const auto i = static_cast<std::size_t>(ch * n + k);
                gct[k] += gyc * ht[i];
                gh[i] += gyc * ct[k];
                const T abar = std::exp(dt * a[i]);
                const T hp = hprev != nullptr ? hprev[i] : T(0);
                const T gabar = gh[i] * hp;
                gdelta += gabar * abar * a[i] + gh[i] * bt[k] * xc;
                ga_state[i] += gabar * abar * dt;
                gbt[k] += gh[i] * dt * xc;
                gxc += gh[i] * dt * bt[k];
                gh[i] *= abar;
            }
            gx[ti] += gxc;
            gz[ti] = gdelta * kernels::sigmoid(p.z[ti]);
        }
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        // dA/dA_log = A
        g.a_log[i] += ga_state[i] * a[i];
    }
    ConstMap<T> xm(x, length, C);
    ConstMap<T> gzm(gz.data(), length, C);
    ConstMap<T> gbm(gb.data(), length, n);
    ConstMap<T> gcm(gc.data(), length, n);
    MutMap<T>(g.w_delta.data(), C, C).noalias() += gzm.transpose() * xm;
    MutMap<T>(g.w_b.data(), n, C).noalias() += gbm.transpose() * xm;
    MutMap<T>(g.w_c.data(), n, C).noalias() += gcm.transpose() * xm;
    for (std::int64_t t = 0; t < length; ++t) {
        for (std::int64_t ch = 0; ch < C; ++ch) {
            g.b_delta[static_cast<std::size_t>(ch)] += gz[static_cast<std::size_t>(t * C + ch)];
        }
    }
    MutMap<T> gxm(gx.data(), length, C);
    gxm.noalias() += gzm * ConstMap<T>(w.w_delta.data(), C, C);
    gxm.noalias() += gbm * ConstMap<T>(w.w_b.data(), n, C);
    gxm.noalias() += gcm * ConstMap<T>(w.w_c.data(), n, C);
    return gx;
}

}  // namespace

}  // namespace mhm::ssm

namespace mhm::ad {

template <typename T>
ScanVars<T> ScanVars<T>::bind(Tape<T>& tape, const ssm::SSMHeadParams<T>& p) {
    return ScanVars{tape.leaf(p.a_log),   tape.leaf(p.w_b),     tape.leaf(p.w_c),
                    tape.leaf(p.w_delta), tape.leaf(p.b_delta), tape.leaf(p.d_skip)};
}

namespace {

template <typename T>
ssm::ScanWeights<T> weights_of(const ScanVars<T>& p) {
    return ssm::ScanWeights<T>{p.w_delta.shape()[0], p.a_log.shape()[1],
                               p.a_log.value().data(),   p.w_b.value().data(),
                               p.w_c.value().data(),     p.w_delta.value().data(),
                               p.b_delta.value().data(), p.d_skip.value().data()};
}

}  // namespace

template <typename T>
Var<T> selective_scan(const Var<T>& x, const ScanVars<T>& p, std::int64_t chunk) {
    const Shape5 shape = x.shape();
    const ssm::ScanWeights<T> w = weights_of(p);
    if (p.a_log.value().numel() != w.channels * w.state ||
        p.w_b.value().numel() != w.state * w.channels ||
        p.w_c.value().numel() != w.state * w.channels ||
        p.b_delta.value().numel() != w.channels || p.d_skip.value().numel() != w.channels) {
        throw ShapeError("selective_scan: inconsistent head parameter shapes");
    }
    const ssm::SequenceView<T> seq = ssm::flatten_tokens(x.value());
    const ssm::SequenceView<T> out =
        chunk > 0 ? ssm::scan_blocked(seq, w, chunk) : ssm::scan_sequential(seq, w);
    Volume5<T> y = ssm::unflatten_tokens(out, shape[2], shape[3], shape[4]);

    const std::array<Var<T>, 7> inputs{x, p.a_log, p.w_b, p.w_c, p.w_delta, p.b_delta, p.d_skip};
    return x.tape().push(
        OpKind::SelectiveScan, inputs, std::move(y),
        [x, p](const Volume5<T>& gy_vol, std::span<Volume5<T>* const> gin) {
            const ssm::ScanWeights<T> w = weights_of(p);
            const ssm::SequenceView<T> xs = ssm::flatten_tokens(x.value());
            const ssm::SequenceView<T> gys = ssm::flatten_tokens(gy_vol);
            ssm::ScanGrads<T> g;
            g.a_log.assign(w.a_log.size(), T(0));
            g.w_b.assign(w.w_b.size(), T(0));
            g.w_c.assign(w.w_c.size(), T(0));
            g.w_delta.assign(w.w_delta.size(), T(0));
            g.b_delta.assign(w.b_delta.size(), T(0));
            g.d_skip.assign(w.d_skip.size(), T(0));
            ssm::SequenceView<T> gxs(xs.batch, xs.length, xs.channels);
            for (std::int64_t b = 0; b < xs.batch; ++b) {
                const std::size_t off = static_cast<std::size_t>(b * xs.length * xs.channels);
                const std::vector<T> gx = ssm::scan_backward_sequence(
                    xs.data.data() + off, gys.data.data() + off, xs.length, w, g);
                std::copy(gx.begin(), gx.end(), gxs.data.begin() + static_cast<std::ptrdiff_t>(off));
            }
            const Shape5& s = x.shape();
            if (gin[0] != nullptr) {
                const Volume5<T> gx = ssm::unflatten_tokens(gxs, s[2], s[3], s[4]);
                for (std::int64_t i = 0; i < gx.numel(); ++i) {
                    (*gin[0])[i] += gx[i];
                }
            }
            const std::array<const std::vector<T>*, 6> parts{&g.a_log,   &g.w_b,     &g.w_c,
                                                             &g.w_delta, &g.b_delta, &g.d_skip};
            for (std::size_t k = 0; k < parts.size(); ++k) {
                if (gin[k + 1] != nullptr) {
                    for (std::size_t i = 0; i < parts[k]->size(); ++i) {
                        (*gin[k + 1])[static_cast<std::int64_t>(i)] += (*parts[k])[i];
                    }
                }
            }
        });
}

template struct ScanVars<float>;
template struct ScanVars<double>;
template Var<float> selective_scan(const Var<float>&, const ScanVars<float>&, std::int64_t);
template Var<double> selective_scan(const Var<double>&, const ScanVars<double>&, std::int64_t);

}  // namespace mhm::ad
