#include <gtest/gtest.h>

#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <random>

#include "mhmamba/data_io.hpp"
#include "mhmamba/errors.hpp"
#include "mhmamba/kernels.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace mhm;
using namespace mhm::io;
namespace fs = std::filesystem;

namespace {

IoError::Code read_error(const fs::path& p) {
    try {
        read_volume<float>(p);
    } catch (const IoError& e) {
        return e.code();
    }
    ADD_FAILURE() << "read succeeded";
    return IoError::Code::Open;
}

void rewrite_header(const fs::path& p, const std::function<void(nlohmann::json&)>& edit) {
    nlohmann::json j;
    {
        std::ifstream is(header_path(p));
        j = nlohmann::json::parse(is);
    }
    edit(j);
    std::ofstream(header_path(p)) << j.dump();
}

}  // namespace

TEST(VolumeFile, FloatRoundTripIsBitwiseIncludingSpecialValues) {
    testutil::TempDir dir("vol-f32");
    std::mt19937_64 rng(1);
    auto v = oracle::random_volume<float>(Shape5(1, 3, 5, 4, 6), rng, -1e3, 1e3);
    v[0] = -0.0f;
    v[1] = std::numeric_limits<float>::denorm_min();
    v[2] = std::numeric_limits<float>::infinity();
    v[3] = std::numeric_limits<float>::max();
    write_volume(dir.path() / "img", v, {"a", "b", "c"}, {1.0, 2.0, 0.5});
    const auto back = read_volume<float>(dir.path() / "img.json");
    EXPECT_TRUE(testutil::bitwise_equal(v, back));
    const auto h = read_header(dir.path() / "img.raw");
    EXPECT_EQ(h.dtype, Dtype::F32);
    EXPECT_EQ(h.modalities, (std::vector<std::string>{"a", "b", "c"}));
    EXPECT_EQ(h.spacing, (std::array<double, 3>{1.0, 2.0, 0.5}));
    EXPECT_EQ(fs::file_size(dir.path() / "img.raw"), static_cast<std::uintmax_t>(v.numel()) * 4u);
}

TEST(VolumeFile, DoubleAndLabelRoundTrips) {
    testutil::TempDir dir("vol-f64");
    std::mt19937_64 rng(2);
    const auto v = oracle::random_volume<double>(Shape5(1, 2, 3, 3, 3), rng);
    write_volume(dir.path() / "d", v);
    EXPECT_TRUE(testutil::bitwise_equal(v, read_volume<double>(dir.path() / "d")));
    const auto labels = oracle::random_labels(1, 4, 5, 6, 4, rng);
    write_labels(dir.path() / "seg", labels);
    EXPECT_EQ(read_labels(dir.path() / "seg").data, labels.data);
    EXPECT_THROW(read_labels(dir.path() / "d"), IoError);
}

TEST(VolumeFile, PayloadOneByteShortIsTruncation) {
    testutil::TempDir dir("vol-trunc");
    write_volume(dir.path() / "v", Volume5<float>(Shape5(1, 1, 2, 2, 2)));
    fs::resize_file(dir.path() / "v.raw", 31);
    EXPECT_EQ(read_error(dir.path() / "v"), IoError::Code::TruncatedPayload);
}

TEST(VolumeFile, InflatedShapeIsSizeMismatch) {
    testutil::TempDir dir("vol-size");
    write_volume(dir.path() / "v", Volume5<float>(Shape5(1, 1, 2, 2, 2)));
    rewrite_header(dir.path() / "v", [](nlohmann::json& j) { j["shape"][1] = 3; });
    EXPECT_EQ(read_error(dir.path() / "v"), IoError::Code::SizeMismatch);
}

TEST(VolumeFile, UnknownDtypeAndMalformedHeaders) {
    testutil::TempDir dir("vol-dtype");
    write_volume(dir.path() / "v", Volume5<float>(Shape5(1, 1, 2, 2, 2)));
    rewrite_header(dir.path() / "v", [](nlohmann::json& j) { j["dtype"] = "f16"; });
    EXPECT_EQ(read_error(dir.path() / "v"), IoError::Code::UnknownDtype);
    rewrite_header(dir.path() / "v", [](nlohmann::json& j) { j.erase("dtype"); });
    EXPECT_EQ(read_error(dir.path() / "v"), IoError::Code::Header);
    EXPECT_EQ(read_error(dir.path() / "missing"), IoError::Code::Open);
    EXPECT_THROW(parse_dtype("int8"), IoError);
}

TEST(Phantom, NoiselessLabelCountsMatchMembershipLoop) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        PhantomSpec spec = random_phantom_spec(seed, {40, 36, 32});
        spec.noise = 0.0;
        const auto ph = generate_phantom(spec);
        std::array<std::int64_t, 4> expected{};
        for (std::int64_t d = 0; d < 40; ++d)
            for (std::int64_t h = 0; h < 36; ++h)
                for (std::int64_t w = 0; w < 32; ++w) {
                    const auto inside = [&](int k) {
                        const double x = (static_cast<double>(d) - spec.center[0]) / spec.radii[k][0];
                        const double y = (static_cast<double>(h) - spec.center[1]) / spec.radii[k][1];
                        const double z = (static_cast<double>(w) - spec.center[2]) / spec.radii[k][2];
                        return x * x + y * y + z * z <= 1.0;
                    };
                    ++expected[inside(2) ? 3 : inside(1) ? 2 : inside(0) ? 1 : 0];
                }
        std::array<std::int64_t, 4> got{};
        for (auto l : ph.labels.data) ++got[l];
        EXPECT_EQ(got, expected);
        for (std::int64_t c = 0; c < 4; ++c) {
            for (std::size_t i = 0; i < ph.labels.data.size(); ++i) {
                ASSERT_EQ(ph.image.plane(0, c)[i], spec.means[ph.labels.data[i]][static_cast<std::size_t>(c)]);
            }
        }
    }
}

TEST(Phantom, SeededAndNested) {
    const auto spec = random_phantom_spec(7, {32, 32, 32});
    const auto a = generate_phantom(spec);
    const auto b = generate_phantom(spec);
    EXPECT_TRUE(testutil::bitwise_equal(a.image, b.image));
    EXPECT_EQ(a.labels.data, b.labels.data);
    EXPECT_EQ(a.image.shape(), Shape5(1, 4, 32, 32, 32));
    // Each inner region sits strictly inside the outer one: no class-3 voxel touches class 0 or 1.
    for (std::int64_t d = 1; d < 31; ++d)
        for (std::int64_t h = 1; h < 31; ++h)
            for (std::int64_t w = 1; w < 31; ++w) {
                if (a.labels(0, d, h, w) != 3) continue;
                for (int o = 0; o < 3; ++o) {
                    EXPECT_GE(a.labels(0, d + (o == 0), h + (o == 1), w + (o == 2)), 2);
                    EXPECT_GE(a.labels(0, d - (o == 0), h - (o == 1), w - (o == 2)), 2);
                }
            }
    std::array<std::int64_t, 4> counts{};
    for (auto l : a.labels.data) ++counts[l];
    for (auto c : counts) EXPECT_GT(c, 0);
}

TEST(Phantom, RejectsBadRadii) {
    PhantomSpec spec;
    spec.radii[1][0] = spec.radii[0][0];
    EXPECT_THROW(generate_phantom(spec), ConfigError);
    spec = PhantomSpec{};
    spec.radii[0][2] = 40.0;
    EXPECT_THROW(generate_phantom(spec), ConfigError);
}

TEST(CropFlip, FlipIsAnInvolutionAndCropIndexesCorrectly) {
    std::mt19937_64 rng(8);
    const auto v = oracle::random_volume<float>(Shape5(2, 3, 4, 5, 6), rng);
    const auto l = oracle::random_labels(2, 4, 5, 6, 4, rng);
    for (int axis = 0; axis < 3; ++axis) {
        EXPECT_TRUE(testutil::bitwise_equal(flip(flip(v, axis), axis), v));
        EXPECT_EQ(flip(flip(l, axis), axis).data, l.data);
    }
    EXPECT_EQ(flip(v, 2)(1, 2, 3, 4, 0), v(1, 2, 3, 4, 5));
    const auto c = crop(v, {1, 2, 3}, {2, 3, 3});
    EXPECT_EQ(c.shape(), Shape5(2, 3, 2, 3, 3));
    EXPECT_EQ(c(1, 2, 1, 2, 2), v(1, 2, 2, 4, 5));
    EXPECT_EQ(crop(l, {1, 2, 3}, {2, 3, 3})(1, 1, 2, 2), l(1, 2, 4, 5));
    EXPECT_THROW(crop(v, {3, 0, 0}, {2, 1, 1}), ShapeError);
    EXPECT_THROW(flip(v, 3), Error);
}

TEST(SlidingWindow, TileStartsCoverEveryVoxelLikeTheCountingOracle) {
    for (const std::int64_t extent : {8, 17, 32, 48, 50, 64}) {
        for (const std::int64_t patch : {1, 8, 16, 32}) {
            if (patch > extent) continue;
            for (const double overlap : {0.0, 0.25, 0.5, 0.75, 0.9}) {
                std::vector<int> cover(static_cast<std::size_t>(extent), 0);
                for (auto s : tile_starts(extent, patch, overlap))
                    for (std::int64_t i = s; i < s + patch; ++i) ++cover[static_cast<std::size_t>(i)];
                EXPECT_EQ(cover, oracle::axis_coverage(extent, patch, overlap))
                    << extent << " " << patch << " " << overlap;
                EXPECT_GE(*std::min_element(cover.begin(), cover.end()), 1);
            }
        }
    }
}

TEST(SlidingWindow, CountsMatchTilingOracleAt48With32AndHalfOverlap) {
    std::mt19937_64 rng(9);
    const auto v = oracle::random_volume<float>(Shape5(1, 2, 48, 48, 48), rng);
    const LogitsFn<float> model = [](const Volume5<float>& x) { return x; };
    const auto r = sliding_window_infer(model, v, {32, 32, 32}, 0.5);
    const auto axis = oracle::axis_coverage(48, 32, 0.5);
    for (std::int64_t d = 0; d < 48; ++d)
        for (std::int64_t h = 0; h < 48; ++h)
            for (std::int64_t w = 0; w < 48; ++w) {
                ASSERT_EQ(r.counts[static_cast<std::size_t>((d * 48 + h) * 48 + w)],
                          axis[d] * axis[h] * axis[w]);
            }
    // An elementwise model makes every tile agree, so stitching reproduces the direct softmax.
    EXPECT_LE(testutil::max_rel_diff(r.probabilities, kernels::softmax_channels(v)), 1e-6);
}

TEST(SlidingWindow, SingleTileEqualsDirectForwardAndConstantsStayUniform) {
    std::mt19937_64 rng(10);
    const auto v = oracle::random_volume<double>(Shape5(1, 4, 8, 8, 8), rng);
    const Volume5<double> w = oracle::random_volume<double>(Shape5(1, 4, 8, 8, 8), rng);
    const LogitsFn<double> mix = [&](const Volume5<double>& x) {
        Volume5<double> y(x.shape());
        for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = x[i] * w[i] + x[(i + 7) % x.numel()];
        return y;
    };
    const auto one = sliding_window_infer(mix, v, {8, 8, 8}, 0.5);
    EXPECT_TRUE(testutil::bitwise_equal(one.probabilities, kernels::softmax_channels(mix(v))));
    for (auto c : one.counts) EXPECT_EQ(c, 1);

    const LogitsFn<double> flat = [](const Volume5<double>& x) {
        return Volume5<double>(Shape5(x.shape()[0], 4, x.shape()[2], x.shape()[3], x.shape()[4]));
    };
    const auto big = oracle::random_volume<double>(Shape5(1, 4, 20, 12, 9), rng);
    const auto u = sliding_window_infer(flat, big, {8, 8, 8}, 0.3);
    for (double p : u.probabilities.data()) EXPECT_EQ(p, 0.25);
    for (auto l : u.labels.data) EXPECT_EQ(l, 0);
}

TEST(SlidingWindow, RejectsOversizedPatchAndBadOverlap) {
    const LogitsFn<float> id = [](const Volume5<float>& x) { return x; };
    const Volume5<float> v(Shape5(1, 2, 8, 8, 8));
    EXPECT_THROW(sliding_window_infer(id, v, {8, 9, 8}, 0.5), ShapeError);
    EXPECT_THROW(sliding_window_infer(id, v, {8, 8, 8}, 0.95), ConfigError);
    EXPECT_THROW(sliding_window_infer(id, v, {8, 8, 8}, -0.1), ConfigError);
}
