#include <gtest/gtest.h>

#include "iou_oracles.hpp"
#include "s2r/iou.hpp"
#include "s2r/rng.hpp"

using namespace s2r;
using namespace s2r::geom;
using namespace s2r::testing;

TEST(BevIou, HandCases) {
    const Box3D a = box(1, 2, 0, 4, 2, 1.5, 0.4);
    EXPECT_NEAR(bev_iou(a, a), 1.0, 1e-12);
    EXPECT_EQ(bev_iou(a, box(101, 2, 0, 4, 2, 1.5)), 0.0);
    EXPECT_NEAR(bev_iou(box(0, 0, 0, 1, 1, 1), box(0.5, 0, 0, 1, 1, 1)), 1.0 / 3.0, 1e-12);
    // a square rotated by 90 degrees is the same footprint
    EXPECT_NEAR(bev_iou(box(0, 0, 0, 2, 2, 1), box(0, 0, 0, 2, 2, 1, kPi / 2)), 1.0, 1e-12);
    // touching edges only
    EXPECT_NEAR(bev_iou(box(0, 0, 0, 1, 1, 1), box(1, 0, 0, 1, 1, 1)), 0.0, 1e-12);
}

TEST(Iou3d, HandCases) {
    const Box3D a = box(0, 0, 0, 1, 1, 1);
    EXPECT_NEAR(iou3d(a, a), 1.0, 1e-12);
    EXPECT_EQ(iou3d(a, box(0, 0, 1, 1, 1, 1)), 0.0);  // z-ranges touch
    EXPECT_NEAR(iou3d(a, box(0.5, 0, 0, 1, 1, 1)), 1.0 / 3.0, 1e-12);
    EXPECT_NEAR(iou3d(a, box(0, 0, 0.5, 1, 1, 1)), 1.0 / 3.0, 1e-12);
}

TEST(BevIou, AgreesWithRasterizationOracle) {
    Rng rng(2024);
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        const Box3D a = random_box(rng), b = random_box(rng);
        worst = std::max(worst, std::abs(bev_iou(a, b) - raster_iou(a, b)));
    }
    EXPECT_LT(worst, 5e-3);
}

TEST(BevIou, SymmetricBoundedAndRotationInvariant) {
    Rng rng(9);
    for (int trial = 0; trial < 500; ++trial) {
        const Box3D a = random_box(rng), b = random_box(rng);
        const double ab = bev_iou(a, b);
        EXPECT_NEAR(ab, bev_iou(b, a), 1e-12);
        EXPECT_GE(ab, 0.0);
        EXPECT_LE(ab, 1.0);
        const double t = rng.uniform(-kPi, kPi), c = std::cos(t), s = std::sin(t);
        auto rot = [&](Box3D x) {
            const double px = x.center.x, py = x.center.y;
            x.center.x = c * px - s * py;
            x.center.y = s * px + c * py;
            x.yaw = normalize_yaw(x.yaw + t);
            return x;
        };
        EXPECT_NEAR(bev_iou(rot(a), rot(b)), ab, 1e-9);
        const double v = iou3d(a, b);
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}
