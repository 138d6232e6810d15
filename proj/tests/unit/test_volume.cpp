#include <gtest/gtest.h>

#include "mhmamba/errors.hpp"
#include "mhmamba/volume.hpp"

using namespace mhm;

TEST(Shape5, RejectsNonPositiveExtentNamingAxis) {
    try {
        Shape5(1, 2, 0, 4, 4);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("depth"), std::string::npos);
    }
}

TEST(Shape5, CountsAndAccessors) {
    const Shape5 s(2, 3, 4, 5, 6);
    EXPECT_EQ(s.batch(), 2);
    EXPECT_EQ(s.channels(), 3);
    EXPECT_EQ(s.spatial(), 120);
    EXPECT_EQ(s.numel(), 720);
    EXPECT_EQ(s.with(kChannel, 7).channels(), 7);
    EXPECT_EQ(s.str(), "2x3x4x5x6");
}

TEST(Volume5, RowMajorLayout) {
    Volume5<float> v(Shape5(2, 3, 2, 2, 2));
    v(1, 2, 1, 0, 1) = 5.0f;
    EXPECT_EQ(v[((1 * 3 + 2) * 2 + 1) * 4 + 0 * 2 + 1], 5.0f);
    EXPECT_EQ(v.plane(1, 2)[4 + 1], 5.0f);
}

TEST(Volume5, DataLengthMustMatchShape) {
    EXPECT_THROW(Volume5<double>(Shape5(1, 1, 2, 2, 2), std::vector<double>(7)), ShapeError);
}

TEST(Volume5, ReshapeKeepsElementCount) {
    Volume5<double> v(Shape5(1, 2, 2, 2, 2), 1.0);
    v.reshape(Shape5(2, 1, 2, 2, 2));
    EXPECT_EQ(v.shape(), Shape5(2, 1, 2, 2, 2));
    EXPECT_THROW(v.reshape(Shape5(1, 1, 2, 2, 2)), ShapeError);
}

TEST(Volume5, CastPreservesValues) {
    Volume5<double> v(Shape5(1, 1, 1, 1, 3), std::vector<double>{0.5, -2.0, 3.25});
    const auto f = v.cast<float>();
    EXPECT_EQ(f[0], 0.5f);
    EXPECT_EQ(f[1], -2.0f);
    EXPECT_EQ(f[2], 3.25f);
}

TEST(RequireSameShape, NamesMismatchedAxis) {
    try {
        require_same_shape(Shape5(1, 2, 3, 4, 5), Shape5(1, 2, 3, 9, 5), "op");
        FAIL();
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("height"), std::string::npos);
    }
}

TEST(LabelVolume, Indexing) {
    LabelVolume l(2, 2, 3, 4);
    l(1, 1, 2, 3) = 3;
    EXPECT_EQ(l.data.back(), 3);
    EXPECT_EQ(l.numel(), 48);
}
