#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mhmamba/data_io.hpp"
#include "mhmamba/errors.hpp"
#include "mhmamba/training.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace mhm;
using namespace mhm::train;

namespace {

double value_of(const ad::Var<double>& v) { return v.value()[0]; }

LossTerms<double> losses(const Volume5<double>& logits, const LabelVolume& y) {
    static ad::Tape<double> tape(false);
    return combined_loss(tape.constant(logits), y);
}

NetworkConfig tiny_config() {
    NetworkConfig c;
    c.channels = {48, 48, 48, 48};
    c.blocks = {1, 1, 1, 1};
    c.d_state = 4;
    c.patch = {16, 16, 16};
    return c;
}

std::vector<Case<float>> tiny_data(int count) {
    std::vector<Case<float>> data;
    for (int i = 0; i < count; ++i) {
        auto ph = io::generate_phantom(io::random_phantom_spec(40 + static_cast<std::uint64_t>(i), {24, 24, 24}));
        data.push_back({ph.image, ph.labels});
    }
    return data;
}

TrainConfig tiny_train(std::int64_t epochs) {
    TrainConfig t;
    t.epochs = epochs;
    t.patch = {16, 16, 16};
    t.seed = 3;
    t.optimizer = OptimizerKind::AdamW;
    return t;
}

}  // namespace

// ---------------------------------------------------------------------------

TEST(Loss, DiceAndCrossEntropyMatchVoxelLoopOracles) {
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int> extent(1, 5);
    for (int trial = 0; trial < 60; ++trial) {
        const std::int64_t b = extent(rng) % 2 + 1, d = extent(rng), h = extent(rng), w = extent(rng);
        const auto z = oracle::random_volume<double>(Shape5(b, 4, d, h, w), rng, -3, 3);
        const auto y = oracle::random_labels(b, d, h, w, 4, rng);
        const auto l = losses(z, y);
        const double dice = oracle::dice_loss(z, y), ce = oracle::ce_loss(z, y);
        EXPECT_LE(std::abs(value_of(l.dice) - dice) / std::max(std::abs(dice), 1e-300), 1e-10) << trial;
        EXPECT_LE(std::abs(value_of(l.ce) - ce) / std::max(std::abs(ce), 1e-300), 1e-10) << trial;
        EXPECT_EQ(value_of(l.total), 0.5 * value_of(l.dice) + 0.5 * value_of(l.ce));
    }
}

TEST(Loss, PerfectPredictionDrivesDiceToZero) {
    std::mt19937_64 rng(2);
    const auto y = oracle::random_labels(1, 4, 4, 4, 4, rng);
    Volume5<double> z(Shape5(1, 4, 4, 4, 4), -50.0);
    for (std::int64_t i = 0; i < y.numel(); ++i) z.plane(0, y.data[static_cast<std::size_t>(i)])[i] = 50.0;
    const auto l = losses(z, y);
    EXPECT_LT(value_of(l.dice), 1e-6);
    EXPECT_LT(value_of(l.ce), 1e-6);
}

TEST(Loss, UniformPredictionClosedForm) {
    // Every voxel is class 1 and p = 1/4: class 1 scores (0.5 n + eps) / (1.25 n + eps),
    // the two absent classes score eps / (0.25 n + eps).
    const std::int64_t n = 3 * 4 * 5;
    const LabelVolume y(1, 3, 4, 5, 1);
    const Volume5<double> z(Shape5(1, 4, 3, 4, 5), 0.0);
    const double eps = kDiceEpsilon;
    const double present = (0.5 * n + eps) / (1.25 * n + eps);
    const double absent = eps / (0.25 * n + eps);
    const auto l = losses(z, y);
    EXPECT_NEAR(value_of(l.dice), 1.0 - (present + 2.0 * absent) / 3.0, 1e-15);
    EXPECT_NEAR(value_of(l.ce), std::log(4.0), 1e-15);
}

TEST(Loss, ConfidentTrueClassDrivesCrossEntropyToZero) {
    std::mt19937_64 rng(3);
    const auto y = oracle::random_labels(2, 3, 3, 3, 4, rng);
    double previous = std::log(4.0) + 1.0;
    for (const double margin : {1.0, 5.0, 20.0, 40.0}) {
        Volume5<double> z(Shape5(2, 4, 3, 3, 3));
        for (std::int64_t b = 0; b < 2; ++b)
            for (std::int64_t i = 0; i < 27; ++i) z.plane(b, y.data[static_cast<std::size_t>(b * 27 + i)])[i] = margin;
        const double ce = value_of(losses(z, y).ce);
        EXPECT_LT(ce, previous);
        previous = ce;
    }
    EXPECT_LT(previous, 1e-15);
}

TEST(Loss, RangesHold) {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 30; ++trial) {
        const auto z = oracle::random_volume<double>(Shape5(1, 4, 3, 3, 3), rng, -10, 10);
        const auto l = losses(z, oracle::random_labels(1, 3, 3, 3, 4, rng));
        EXPECT_GE(value_of(l.dice), 0.0);
        EXPECT_LE(value_of(l.dice), 1.0 + 1e-9);
        EXPECT_GE(value_of(l.ce), 0.0);
    }
}

TEST(Loss, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(5);
    auto z = oracle::random_volume<double>(Shape5(2, 4, 3, 2, 3), rng, -2, 2);
    const auto y = oracle::random_labels(2, 3, 2, 3, 4, rng);
    for (int which = 0; which < 3; ++which) {
        const auto r = ad::grad_check<double>(
            [&](ad::Tape<double>&, const ad::Var<double>& v) {
                const auto l = combined_loss(v, y);
                return which == 0 ? l.dice : which == 1 ? l.ce : l.total;
            },
            z, 1e-5);
        EXPECT_LT(r.max_relative_error, 1e-4) << which << " " << r.worst_analytic << " vs " << r.worst_numeric;
    }
}

// ---------------------------------------------------------------------------

TEST(PolyLr, ScheduleValues) {
    EXPECT_EQ(poly_lr(0, 150, 1e-3, 0.9), 1e-3);
    EXPECT_EQ(poly_lr(150, 150, 1e-3, 0.9), 0.0);
    EXPECT_NEAR(poly_lr(75, 150, 1e-3, 0.9), 1e-3 * std::pow(0.5, 0.9), 1e-18);
    double last = 1.0;
    for (int s = 0; s <= 150; ++s) {
        const double lr = poly_lr(s, 150, 1e-3, 0.9);
        EXPECT_LE(lr, last);
        last = lr;
    }
    EXPECT_THROW(poly_lr(151, 150, 1e-3, 0.9), ConfigError);
    EXPECT_THROW(poly_lr(-1, 150, 1e-3, 0.9), ConfigError);
}

TEST(TrainConfigCheck, RejectsNonPositiveValues) {
    TrainConfig c;
    c.lr = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = TrainConfig{};
    c.epochs = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = TrainConfig{};
    c.batch_size = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    EXPECT_NO_THROW(TrainConfig{}.validate());
}

// ---------------------------------------------------------------------------

TEST(Optimizer, ZeroLearningRateLeavesParametersBitwise) {
    Volume5<float> p(Shape5(1, 1, 1, 2, 3), std::vector<float>{1, -2, 3, -4, 5, -6});
    const Volume5<float> before = p;
    const Volume5<float> g(p.shape(), 0.5f);
    for (const auto kind : {OptimizerKind::Sgd, OptimizerKind::AdamW}) {
        TrainConfig c;
        c.optimizer = kind;
        Optimizer<float> opt(c, {&p});
        opt.step({&g}, 0.0);
        EXPECT_TRUE(testutil::bitwise_equal(p, before));
    }
}

TEST(Optimizer, SgdStepWithDecoupledDecay) {
    Volume5<double> p(Shape5(1, 1, 1, 1, 2), std::vector<double>{2.0, -1.0});
    const Volume5<double> g(p.shape(), std::vector<double>{0.5, 4.0});
    TrainConfig c;
    c.weight_decay = 0.1;
    Optimizer<double> opt(c, {&p});
    opt.step({&g}, 0.01);
    EXPECT_NEAR(p[0], 2.0 * (1 - 0.001) - 0.01 * 0.5, 1e-15);
    EXPECT_NEAR(p[1], -1.0 * (1 - 0.001) - 0.01 * 4.0, 1e-15);
}

TEST(Optimizer, AdamFirstStepMovesByLearningRate) {
    // After one step the bias-corrected moments are g and g^2, so the update is lr * g / (|g| + eps).
    Volume5<double> p(Shape5(1, 1, 1, 1, 3), std::vector<double>{1.0, 1.0, 1.0});
    const Volume5<double> g(p.shape(), std::vector<double>{3.0, -0.2, 0.0});
    TrainConfig c;
    c.optimizer = OptimizerKind::AdamW;
    c.weight_decay = 0.0;
    Optimizer<double> opt(c, {&p});
    opt.step({&g}, 0.01);
    EXPECT_NEAR(p[0], 1.0 - 0.01 * 3.0 / (3.0 + 1e-8), 1e-14);
    EXPECT_NEAR(p[1], 1.0 + 0.01 * 0.2 / (0.2 + 1e-8), 1e-14);
    EXPECT_EQ(p[2], 1.0);
}

TEST(Optimizer, MissingGradientStillDecays) {
    Volume5<double> p(Shape5(1, 1, 1, 1, 1), 4.0);
    TrainConfig c;
    c.weight_decay = 0.5;
    Optimizer<double> opt(c, {&p});
    opt.step({nullptr}, 0.1);
    EXPECT_NEAR(p[0], 4.0 * 0.95, 1e-15);
}

// ---------------------------------------------------------------------------

TEST(SamplePatch, FullExtentWithoutFlipsIsIdentity) {
    std::mt19937_64 rng(6);
    const auto img = oracle::random_volume<float>(Shape5(1, 4, 5, 6, 7), rng);
    const auto lab = oracle::random_labels(1, 5, 6, 7, 4, rng);
    const auto p = sample_patch(img, lab, {5, 6, 7}, rng, false);
    EXPECT_TRUE(testutil::bitwise_equal(p.image, img));
    EXPECT_EQ(p.labels, lab);
}

TEST(SamplePatch, FixedSeedRepeatsTheCropSequence) {
    std::mt19937_64 r(7);
    const auto img = oracle::random_volume<float>(Shape5(1, 2, 12, 12, 12), r);
    const auto lab = oracle::random_labels(1, 12, 12, 12, 4, r);
    std::mt19937_64 a(99), b(99);
    for (int i = 0; i < 20; ++i) {
        const auto pa = sample_patch(img, lab, {4, 5, 6}, a, true);
        const auto pb = sample_patch(img, lab, {4, 5, 6}, b, true);
        EXPECT_EQ(pa.corner, pb.corner);
        EXPECT_EQ(pa.flipped, pb.flipped);
        EXPECT_TRUE(testutil::bitwise_equal(pa.image, pb.image));
    }
}

TEST(SamplePatch, FlipsAndCropsApplyToImageAndLabelsAlike) {
    // Channel 0 of the image carries the label id, so any misalignment shows up directly.
    std::mt19937_64 rng(8);
    const auto lab = oracle::random_labels(1, 9, 8, 7, 4, rng);
    Volume5<float> img(Shape5(1, 2, 9, 8, 7));
    for (std::int64_t i = 0; i < lab.numel(); ++i) img.plane(0, 0)[i] = lab.data[static_cast<std::size_t>(i)];
    int flipped = 0;
    for (int trial = 0; trial < 40; ++trial) {
        const auto p = sample_patch(img, lab, {4, 4, 4}, rng, true);
        for (bool f : p.flipped) flipped += f;
        for (std::int64_t i = 0; i < p.labels.numel(); ++i) {
            ASSERT_EQ(p.image.plane(0, 0)[i], static_cast<float>(p.labels.data[static_cast<std::size_t>(i)]));
        }
        for (int a = 0; a < 3; ++a) {
            EXPECT_GE(p.corner[a], 0);
        }
        EXPECT_LE(p.corner[0], 5);
        EXPECT_LE(p.corner[1], 4);
        EXPECT_LE(p.corner[2], 3);
    }
    EXPECT_GT(flipped, 0);
}

TEST(SamplePatch, RejectsOversizedPatch) {
    const Volume5<float> img(Shape5(1, 1, 4, 4, 4));
    const LabelVolume lab(1, 4, 4, 4);
    std::mt19937_64 rng(9);
    EXPECT_THROW(sample_patch(img, lab, {4, 5, 4}, rng, false), ShapeError);
}

// ---------------------------------------------------------------------------

TEST(LossLog, FormatIsStable) {
    EXPECT_EQ(loss_log_header(), "epoch,total,dice,ce,lr");
    EpochRecord r;
    r.epoch = 3;
    r.loss = {0.75, 0.5, 1.0};
    r.lr = 1e-3;
    EXPECT_EQ(format_log_line(r), "3,0.75,0.5,1,0.001");
}

TEST(TrainLoop, SameSeedReproducesTheLogBytewise) {
    const auto data = tiny_data(2);
    std::vector<std::string> logs[2];
    for (int run = 0; run < 2; ++run) {
        MhMambaNet<float> net(tiny_config(), 21);
        for (const auto& r : train::train(net, data, tiny_train(3))) logs[run].push_back(format_log_line(r));
    }
    EXPECT_EQ(logs[0], logs[1]);
    ASSERT_EQ(logs[0].size(), 3u);
}

TEST(TrainLoop, LossFallsBelowItsStartingValue) {
    const auto data = tiny_data(1);
    MhMambaNet<float> net(tiny_config(), 22);
    const auto log = train::train(net, data, tiny_train(12));
    ASSERT_EQ(log.size(), 12u);
    for (const auto& r : log) {
        EXPECT_DOUBLE_EQ(r.loss.total, 0.5 * r.loss.dice + 0.5 * r.loss.ce);
        EXPECT_EQ(r.lr, poly_lr(r.epoch, 12, 1e-3, 0.9));
    }
    EXPECT_LT(log.back().loss.total, log.front().loss.total);
}

TEST(TrainLoop, NonFiniteLossNamesTheFirstBadNode) {
    const auto data = tiny_data(1);
    MhMambaNet<float> net(tiny_config(), 23);
    net.parameters().front().second->data()[0] = std::numeric_limits<float>::quiet_NaN();
    try {
        train::train(net, data, tiny_train(1));
        FAIL();
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("non-finite"), std::string::npos) << msg;
        EXPECT_NE(msg.find("stem.depthwise.weight"), std::string::npos) << msg;
    }
}
