#include <gtest/gtest.h>

#include <fstream>
#include <map>
#include <random>
#include <set>

#include "mhmamba/errors.hpp"
#include "mhmamba/network.hpp"
#include "mhmamba/training.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace mhm;

namespace {

/// Narrow configuration that keeps 16^3 double-precision passes cheap.
NetworkConfig small_config() {
    NetworkConfig c;
    c.channels = {48, 48, 48, 48};
    c.blocks = {1, 1, 1, 1};
    c.d_state = 4;
    c.patch = {16, 16, 16};
    return c;
}

template <typename T>
Volume5<T> random_input(const Shape5& s, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return oracle::random_volume<T>(s, rng);
}

}  // namespace

TEST(Network, StageShapesFollowTheHalvingSchedule) {
    const MhMambaNet<float> net(NetworkConfig{}, 1);
    ad::Tape<float> t(false);
    const auto out = net.forward(t.constant(random_input<float>(Shape5(1, 4, 32, 32, 32), 2)));
    EXPECT_EQ(out.stages[0].shape(), Shape5(1, 48, 16, 16, 16));
    EXPECT_EQ(out.stages[1].shape(), Shape5(1, 96, 8, 8, 8));
    EXPECT_EQ(out.stages[2].shape(), Shape5(1, 192, 4, 4, 4));
    EXPECT_EQ(out.stages[3].shape(), Shape5(1, 384, 2, 2, 2));
    EXPECT_EQ(out.logits.shape(), Shape5(1, 4, 32, 32, 32));
}

TEST(Network, LogitsMatchInputResolution) {
    const MhMambaNet<float> net(small_config(), 3);
    for (const Shape5& s : {Shape5(1, 4, 16, 16, 16), Shape5(1, 4, 32, 32, 32), Shape5(1, 4, 48, 32, 32)}) {
        const auto y = net.infer(random_input<float>(s, 4));
        EXPECT_EQ(y.shape(), Shape5(1, 4, s[2], s[3], s[4]));
        EXPECT_TRUE(kernels::all_finite(y));
    }
}

TEST(Network, RejectsIndivisibleExtentsAndWrongChannels) {
    const MhMambaNet<float> net(small_config(), 5);
    try {
        net.infer(Volume5<float>(Shape5(1, 4, 16, 24, 16)));
        FAIL();
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("height"), std::string::npos);
    }
    EXPECT_THROW(net.infer(Volume5<float>(Shape5(1, 3, 16, 16, 16))), ShapeError);
}

TEST(Network, ZeroHeadGivesUniformSoftmax) {
    NetworkConfig c = small_config();
    c.zero_head = true;
    const MhMambaNet<double> net(c, 6);
    const auto logits = net.infer(random_input<double>(Shape5(1, 4, 16, 16, 16), 7));
    for (double v : logits.data()) EXPECT_EQ(v, 0.0);
    const auto probs = kernels::softmax_channels(logits);
    for (double v : probs.data()) EXPECT_EQ(v, 0.25);
}

TEST(Network, BatchEntriesAreProcessedIndependently) {
    const MhMambaNet<double> net(small_config(), 8);
    const auto a = random_input<double>(Shape5(1, 4, 16, 16, 16), 9);
    const auto b = random_input<double>(Shape5(1, 4, 16, 16, 16), 10);
    const auto stack = [](const Volume5<double>& first, const Volume5<double>& second) {
        std::vector<double> data(first.data().begin(), first.data().end());
        data.insert(data.end(), second.data().begin(), second.data().end());
        return Volume5<double>(Shape5(2, 4, 16, 16, 16), std::move(data));
    };
    const auto y_ab = net.infer(stack(a, b));
    const auto y_ba = net.infer(stack(b, a));
    const auto y_a = net.infer(a);
    const std::int64_t n = y_a.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        EXPECT_EQ(y_ab[i], y_ba[n + i]);
        EXPECT_EQ(y_ab[n + i], y_ba[i]);
        EXPECT_NEAR(y_ab[i], y_a[i], 1e-12);
    }
}

TEST(Network, ForwardIsDeterministic) {
    const MhMambaNet<float> a(small_config(), 11);
    const MhMambaNet<float> b(small_config(), 11);
    const auto x = random_input<float>(Shape5(1, 4, 16, 16, 16), 12);
    EXPECT_TRUE(testutil::bitwise_equal(a.infer(x), b.infer(x)));
    EXPECT_TRUE(testutil::bitwise_equal(a.infer(x), a.infer(x)));
}

TEST(Network, ConfigValidationNamesTheViolation) {
    const auto expect_error = [](NetworkConfig c, const std::string& fragment) {
        try {
            c.validate();
            FAIL() << "accepted " << fragment;
        } catch (const ConfigError& e) {
            EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
        }
    };
    NetworkConfig c;
    c.channels[0] = 32;
    expect_error(c, "channels[0]");
    c = NetworkConfig{};
    c.heads = 5;
    expect_error(c, "heads");
    c = NetworkConfig{};
    c.patch = {32, 40, 32};
    expect_error(c, "patch[1]");
    c = NetworkConfig{};
    c.csca_reduction = 7;
    expect_error(c, "csca_reduction");
    EXPECT_NO_THROW(NetworkConfig{}.validate());
}

TEST(ParameterReport, TotalsEqualLeafEnumeration) {
    MhMambaNet<float> net(NetworkConfig{}, 13);
    std::int64_t enumerated = 0;
    std::set<const void*> seen;
    net.visit([&](const std::string&, Volume5<float>& v) {
        EXPECT_TRUE(seen.insert(&v).second) << "array visited twice";
        enumerated += v.numel();
    });
    std::int64_t reported = 0;
    std::map<std::string, std::int64_t> by_module;
    for (const auto& m : net.parameter_report()) {
        reported += m.parameters;
        by_module[m.module] = m.parameters;
    }
    EXPECT_EQ(reported, enumerated);
    EXPECT_EQ(net.parameter_count(), enumerated);
    // Depthwise 7^3 on 4 channels plus bias, then a 1x1x1 4 -> 48 projection plus bias.
    EXPECT_EQ(by_module.at("stem"), (4 * 343 + 4) + (48 * 4 + 48));
    for (const char* m : {"stage1", "stage2", "stage3", "stage4", "down1", "down2", "down3", "decoder1",
                          "decoder2", "decoder3", "head"}) {
        EXPECT_GT(by_module.count(m), 0u) << m;
    }
}

TEST(ParameterReport, SsmCountFollowsHeadWidthIdentity) {
    // Per head of width c = C / N_h with state n: a_log n c, W_B n c, W_C n c, W_delta c^2,
    // b_delta c, D c. Summed over heads: 3 n C + C^2 / N_h + 2 C.
    for (const std::int64_t heads : {2, 4, 8}) {
        NetworkConfig c = small_config();
        c.heads = heads;
        MhMambaNet<float> net(c, 14);
        std::int64_t ssm = 0;
        net.visit([&](const std::string& name, Volume5<float>& v) {
            if (name.rfind("stage1.block1.mhm.", 0) == 0 && name.find(".ssm.") != std::string::npos) ssm += v.numel();
        });
        const std::int64_t C = 48, n = c.d_state;
        EXPECT_EQ(ssm, 3 * n * C + C * C / heads + 2 * C) << heads << " heads";
    }
}

TEST(Checkpoint, RoundTripIsBitwise) {
    testutil::TempDir dir("ckpt");
    const MhMambaNet<float> net(small_config(), 15);
    const auto path = dir.path() / "net.ckpt";
    save_checkpoint(path, net);
    EXPECT_EQ(read_checkpoint_config(path), net.config());
    const auto loaded = load_checkpoint<float>(path);
    std::vector<std::pair<std::string, Volume5<float>>> a, b;
    net.visit([&](const std::string& n, const Volume5<float>& v) { a.emplace_back(n, v); });
    loaded.visit([&](const std::string& n, const Volume5<float>& v) { b.emplace_back(n, v); });
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].first, b[i].first);
        EXPECT_TRUE(testutil::bitwise_equal(a[i].second, b[i].second)) << a[i].first;
    }
}

TEST(Checkpoint, TruncatedPayloadIsReported) {
    testutil::TempDir dir("ckpt-trunc");
    const MhMambaNet<float> net(small_config(), 16);
    const auto path = dir.path() / "net.ckpt";
    save_checkpoint(path, net);
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 6);
    try {
        load_checkpoint<float>(path);
        FAIL();
    } catch (const IoError& e) {
        EXPECT_EQ(e.code(), IoError::Code::TruncatedPayload);
    }
}

TEST(Checkpoint, MissingFileIsReported) {
    try {
        load_checkpoint<float>("/nonexistent/dir/net.ckpt");
        FAIL();
    } catch (const IoError& e) {
        EXPECT_EQ(e.code(), IoError::Code::Open);
    }
}

TEST(NetworkGrad, CombinedLossMatchesDirectionalDifferences) {
    MhMambaNet<double> net(small_config(), 17);
    const auto x = random_input<double>(Shape5(1, 4, 16, 16, 16), 18);
    std::mt19937_64 rng(19);
    const LabelVolume y = oracle::random_labels(1, 16, 16, 16, 4, rng);
    std::vector<Volume5<double>*> wrt;
    for (auto& [name, v] : net.parameters()) wrt.push_back(v);
    const auto report = ad::directional_check<double>(
        [&](ad::Tape<double>& t) { return train::combined_loss(net.forward(t.constant(x)).logits, y).total; },
        wrt, 6, 1e-4, 20);
    for (std::size_t i = 0; i < report.analytic.size(); ++i) {
        EXPECT_NE(report.analytic[i], 0.0);
    }
    EXPECT_LT(report.max_relative_error, 1e-4);
}
