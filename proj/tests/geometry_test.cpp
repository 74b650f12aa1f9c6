#include <sparse_rcnn/geometry.hpp>

#include <gtest/gtest.h>

#include <random>

using namespace sparse_rcnn;

// Area-based IoU and GIoU written from the definitions.
static double ref_iou(const BoxA& a, const BoxA& b) {
    const double iw = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
    const double ih = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
    const double inter = iw * ih;
    return inter / (a.area() + b.area() - inter);
}

static double ref_giou(const BoxA& a, const BoxA& b) {
    const double iw = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
    const double ih = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
    const double inter = iw * ih, uni = a.area() + b.area() - inter;
    const double hull = (std::max(a.x1, b.x1) - std::min(a.x0, b.x0)) * (std::max(a.y1, b.y1) - std::min(a.y0, b.y0));
    return inter / uni - (hull - uni) / hull;
}

static BoxA random_box(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> pos(0.0, 10.0), size(0.1, 5.0);
    const double x = pos(rng), y = pos(rng);
    return {x, y, x + size(rng), y + size(rng)};
}

TEST(Geometry, WorkedPair) {
    const BoxA a{0, 0, 2, 2}, b{1, 1, 3, 3};
    EXPECT_NEAR(iou(a, b), 1.0 / 7.0, 1e-12);
    EXPECT_NEAR(giou(a, b), -5.0 / 63.0, 1e-12);
}

TEST(Geometry, MatchesAreaDefinitions) {
    std::mt19937_64 rng(1);
    for (int i = 0; i < 2000; ++i) {
        const BoxA a = random_box(rng), b = random_box(rng);
        EXPECT_NEAR(iou(a, b), ref_iou(a, b), 1e-12);
        EXPECT_NEAR(giou(a, b), ref_giou(a, b), 1e-12);
    }
}

TEST(Geometry, RandomPairProperties) {
    std::mt19937_64 rng(2);
    for (int i = 0; i < 10000; ++i) {
        const BoxA a = random_box(rng), b = random_box(rng);
        EXPECT_EQ(giou(a, a), 1.0);
        EXPECT_EQ(giou(a, b), giou(b, a));
        EXPECT_EQ(iou(a, b), iou(b, a));
        EXPECT_LE(giou(a, b), iou(a, b));
        EXPECT_GT(giou(a, b), -1.0);
        EXPECT_LE(giou(a, b), 1.0);
    }
}

TEST(Geometry, DisjointFarBoxesApproachMinusOne) {
    const BoxA a{0, 0, 1, 1}, b{1000, 1000, 1001, 1001};
    EXPECT_EQ(iou(a, b), 0.0);
    EXPECT_LT(giou(a, b), -0.99);
    EXPECT_GT(giou(a, b), -1.0);
}

TEST(Geometry, NormalizedRoundTrip) {
    const BoxN n{0.25, 0.5, 0.3, 0.2};
    const BoxA a = to_absolute(n, 64, 32);
    EXPECT_DOUBLE_EQ(a.x0, 6.4);
    EXPECT_DOUBLE_EQ(a.y1, 19.2);
    const BoxN back = to_normalized(a, 64, 32);
    EXPECT_NEAR(back.cx, n.cx, 1e-15);
    EXPECT_NEAR(back.h, n.h, 1e-15);
}

TEST(Geometry, ClampKeepsValidBoxes) {
    const BoxN c = clamp_box({-0.2, 1.4, 0.0, 3.0});
    EXPECT_EQ(c.cx, 0.0);
    EXPECT_EQ(c.cy, 1.0);
    EXPECT_EQ(c.w, kMinBoxSize);
    EXPECT_EQ(c.h, 1.0);
    EXPECT_TRUE(is_valid(c));
}

TEST(Geometry, BoxUpdateScalesAndClamps) {
    const BoxN base{0.5, 0.5, 0.2, 0.4};
    const BoxN u = apply_box_update(base, {0.5, -0.25, std::log(2.0), 0.0});
    EXPECT_NEAR(u.cx, 0.6, 1e-15);
    EXPECT_NEAR(u.cy, 0.4, 1e-15);
    EXPECT_NEAR(u.w, 0.4, 1e-15);
    EXPECT_NEAR(u.h, 0.4, 1e-15);
    const BoxN big = apply_box_update(base, {0, 0, 50.0, -50.0});
    EXPECT_EQ(big.w, 1.0);
    EXPECT_NEAR(big.h, 0.4 * std::exp(-kMaxLogScale), 1e-15);

    // Tensor form agrees with the scalar form.
    const Tensor t = apply_box_update(boxes_tensor({base}), Tensor(Shape{1, 4}, {0.5, -0.25, std::log(2.0), 0.0}));
    EXPECT_EQ(box_row(t, 0), u);
}

TEST(Geometry, CornersInFrame) {
    const Tensor c = boxes_to_corners(boxes_tensor({{0.5, 0.25, 0.5, 0.5}}), 16, 8);
    EXPECT_DOUBLE_EQ(c[0], 4.0);
    EXPECT_DOUBLE_EQ(c[1], 0.0);
    EXPECT_DOUBLE_EQ(c[2], 12.0);
    EXPECT_DOUBLE_EQ(c[3], 4.0);
}
