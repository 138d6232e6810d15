#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "mhmamba/agf.hpp"
#include "mhmamba/errors.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace mhm;
using namespace mhm::blocks;
using V = Volume5<double>;

namespace {

V conv(const V& x, const ConvLayer<double>& l) {
    return oracle::conv3d(x, l.weight, &l.bias, l.geometry.stride, l.geometry.padding, l.geometry.groups);
}

/// Split into four groups, gate each voxel, concatenate, project.
V agf_ref(const V& e, const V& d, const AGFParams<double>& p) {
    const auto& s = e.shape();
    const std::int64_t g = s[1] / 4;
    V fused(s);
    for (std::int64_t k = 0; k < 4; ++k) {
        V pair(Shape5(s[0], 2 * g, s[2], s[3], s[4]));
        for (std::int64_t b = 0; b < s[0]; ++b)
            for (std::int64_t c = 0; c < g; ++c)
                for (std::int64_t i = 0; i < s.spatial(); ++i) {
                    pair.plane(b, c)[i] = e.plane(b, k * g + c)[i];
                    pair.plane(b, g + c)[i] = d.plane(b, k * g + c)[i];
                }
        const V logit = conv(pair, p.gates[static_cast<std::size_t>(k)]);
        for (std::int64_t b = 0; b < s[0]; ++b)
            for (std::int64_t i = 0; i < s.spatial(); ++i) {
                const double delta = 1.0 / (1.0 + std::exp(-logit.plane(b, 0)[i]));
                for (std::int64_t c = k * g; c < (k + 1) * g; ++c) {
                    fused.plane(b, c)[i] = delta * e.plane(b, c)[i] + (1.0 - delta) * d.plane(b, c)[i];
                }
            }
    }
    return conv(fused, p.fuse);
}

AGFParams<double> random_agf(std::int64_t channels, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto p = AGFParams<double>::init(channels, rng);
    std::uniform_real_distribution<double> d(-0.5, 0.5);
    p.visit([&](std::string_view, V& v) {
        for (auto& x : v.data()) x += d(rng);
    });
    return p;
}

V fuse(const V& e, const V& d, const AGFParams<double>& p, const Probe<double>* probe = nullptr) {
    ad::Tape<double> t(false);
    return agf_forward(t.constant(e), t.constant(d), p, probe).value();
}

}  // namespace

TEST(AGF, MatchesComposedOracle) {
    const auto p = random_agf(8, 1);
    std::mt19937_64 rng(2);
    const V e = oracle::random_volume<double>(Shape5(1, 8, 3, 3, 3), rng);
    const V d = oracle::random_volume<double>(Shape5(1, 8, 3, 3, 3), rng);
    EXPECT_LE(testutil::max_rel_diff(fuse(e, d, p), agf_ref(e, d, p)), 1e-12);
}

TEST(AGF, EqualInputsBypassTheGates) {
    const auto p = random_agf(8, 3);
    std::mt19937_64 rng(4);
    const V e = oracle::random_volume<double>(Shape5(2, 8, 2, 3, 4), rng);
    EXPECT_LE(testutil::max_rel_diff(fuse(e, e, p), conv(e, p.fuse)), 1e-14);
}

TEST(AGF, SaturatedGatesPassTheEncoderThrough) {
    auto p = random_agf(8, 5);
    for (auto& g : p.gates) {
        g.weight.fill(0.0);
        g.bias.fill(100.0);
    }
    std::mt19937_64 rng(6);
    const V e = oracle::random_volume<double>(Shape5(1, 8, 3, 3, 3), rng);
    const V d = oracle::random_volume<double>(Shape5(1, 8, 3, 3, 3), rng);
    EXPECT_LE(testutil::max_rel_diff(fuse(e, d, p), conv(e, p.fuse)), 1e-14);
}

TEST(AGF, FusedGroupsAreConvexCombinations) {
    // With W_f the identity (and no bias) the output is the pre-projection fusion.
    auto p = random_agf(8, 7);
    p.fuse.weight.fill(0.0);
    p.fuse.bias.fill(0.0);
    for (std::int64_t c = 0; c < 8; ++c) p.fuse.weight(c, c, 0, 0, 0) = 1.0;
    std::mt19937_64 rng(8);
    const V e = oracle::random_volume<double>(Shape5(2, 8, 3, 4, 3), rng, -3, 3);
    const V d = oracle::random_volume<double>(Shape5(2, 8, 3, 4, 3), rng, -3, 3);
    const V y = fuse(e, d, p);
    for (std::int64_t i = 0; i < y.numel(); ++i) {
        EXPECT_GE(y[i], std::min(e[i], d[i]) - 1e-15);
        EXPECT_LE(y[i], std::max(e[i], d[i]) + 1e-15);
    }
}

TEST(AGF, GateMapsAreSpatialAndInsideUnitInterval) {
    const auto p = random_agf(8, 9);
    std::mt19937_64 rng(10);
    const V e = oracle::random_volume<double>(Shape5(1, 8, 3, 3, 2), rng);
    const V d = oracle::random_volume<double>(Shape5(1, 8, 3, 3, 2), rng);
    int seen = 0;
    const Probe<double> probe = [&](std::string_view tag, const V& v) {
        if (tag != "agf.delta") return;
        ++seen;
        EXPECT_EQ(v.shape(), Shape5(1, 1, 3, 3, 2));
        for (double g : v.data()) {
            EXPECT_GT(g, 0.0);
            EXPECT_LT(g, 1.0);
        }
    };
    fuse(e, d, p, &probe);
    EXPECT_EQ(seen, 4);
}

TEST(AGF, RejectsMismatchedOrIndivisibleChannels) {
    std::mt19937_64 rng(11);
    EXPECT_THROW(AGFParams<double>::init(6, rng), ConfigError);
    const auto p = random_agf(8, 12);
    EXPECT_THROW(fuse(V(Shape5(1, 8, 2, 2, 2)), V(Shape5(1, 8, 2, 2, 3)), p), ShapeError);
    EXPECT_THROW(fuse(V(Shape5(1, 8, 2, 2, 2)), V(Shape5(1, 4, 2, 2, 2)), p), ShapeError);
}

TEST(AGF, GradientsMatchFiniteDifferences) {
    auto p = random_agf(8, 13);
    std::mt19937_64 rng(14);
    V e = oracle::random_volume<double>(Shape5(1, 8, 3, 3, 3), rng);
    V d = oracle::random_volume<double>(Shape5(1, 8, 3, 3, 3), rng);
    const V w = oracle::random_volume<double>(e.shape(), rng);
    std::vector<V*> wrt{&e, &d};
    p.visit([&](std::string_view, V& v) { wrt.push_back(&v); });
    ad::GradCheckOptions options;
    options.step = 1e-5;
    const auto report = ad::grad_check<double>(
        [&](ad::Tape<double>& t) { return ad::weighted_sum(agf_forward(t.leaf(e), t.leaf(d), p), w); }, wrt,
        options);
    EXPECT_LT(report.max_relative_error, 1e-4) << report.worst_analytic << " vs " << report.worst_numeric;
}
