#include <gtest/gtest.h>

#include "s2r/diagnostics.hpp"
#include "s2r/iou.hpp"
#include "s2r/rng.hpp"
#include "s2r/scenegen.hpp"

using namespace s2r;
using namespace s2r::diag;

namespace {

Box3D make_box(double x, double y, double z, double l, double w, double h, double yaw, ClassId c = ClassId::Car) {
    return {{x, y, z}, {l, w, h}, yaw, c, std::nullopt};
}

// Half-plane tests against the explicit footprint corners.
bool corner_oracle(const Box3D& b, const Point& p) {
    const auto c = geom::bev_corners(b);
    for (int i = 0; i < 4; ++i)
        if (geom::cross(c[i], c[(i + 1) % 4], {p.x, p.y}) < 0) return false;
    return p.z >= b.z_min() && p.z <= b.z_max();
}

Dataset one_frame(std::vector<Box3D> boxes, PointCloud cloud = {}) {
    Frame f;
    f.frame_id = "a";
    f.boxes = std::move(boxes);
    f.cloud = std::move(cloud);
    return {"d", std::nullopt, true, {f}};
}

}  // namespace

TEST(ClassHistogram, CountsAndAdditivity) {
    EXPECT_TRUE(class_histogram(Dataset{}).empty());
    Dataset ds;
    Frame a, b;
    a.frame_id = "a";
    b.frame_id = "b";
    a.boxes = {make_box(0, 0, 0, 4, 2, 1.5, 0), make_box(5, 0, 0, 4, 2, 1.5, 0)};
    b.boxes = {make_box(0, 5, 0, 4, 2, 1.5, 0), make_box(0, 9, 0, 0.6, 0.6, 1.7, 0, ClassId::Pedestrian)};
    ds.frames = {a, b};
    const auto h = class_histogram(ds);
    EXPECT_EQ(h.at(ClassId::Car), 3u);
    EXPECT_EQ(h.at(ClassId::Pedestrian), 1u);
    Dataset da{"", {}, true, {a}}, db{"", {}, true, {b}};
    auto ha = class_histogram(da), hb = class_histogram(db);
    for (ClassId c : kAllClasses) EXPECT_EQ(ha[c] + hb[c], h.count(c) ? h.at(c) : 0u);
}

TEST(PolarDensity, SingleBoxRingAndConservation) {
    const auto m = polar_density(one_frame({make_box(10, 0, 0, 4, 2, 1.5, 0)}));
    EXPECT_EQ(m.total(), 1u);
    EXPECT_EQ(m.count(4, 18), 1u);  // range bin [10, 12.5), azimuth bin [0, 10 deg)
    EXPECT_DOUBLE_EQ(m.emitted(4, 18), 1.0);

    std::vector<Box3D> ring;
    for (int k = 0; k < 360; ++k) {
        const double a = -kPi + (k + 0.5) * 2 * kPi / 360;
        ring.push_back(make_box(21 * std::cos(a), 21 * std::sin(a), 0, 1, 1, 1, 0));
    }
    const auto r = polar_density(one_frame(ring), 20, 36, true);
    EXPECT_EQ(r.total(), 360u);
    for (std::size_t a = 0; a < 36; ++a) {
        EXPECT_EQ(r.count(8, a), 10u);
        EXPECT_NEAR(r.emitted(8, a), std::log(11.0), 1e-12);
    }
    const auto e = polar_density(Dataset{});
    EXPECT_EQ(e.total(), 0u);
    for (std::size_t i = 0; i < 20; ++i)
        for (std::size_t a = 0; a < 36; ++a) EXPECT_EQ(e.emitted(i, a), 0.0);
    EXPECT_THROW(polar_density(Dataset{}, 0, 3), ConfigError);
}

TEST(PointsInBox, BoundaryAndRotatedCases) {
    PointCloud c;
    c.points = {{0, 0, 0, 0}};
    EXPECT_EQ(points_in_box(c, make_box(0, 0, 0, 1, 1, 1, 0)), 1u);
    c.points = {{0.51f, 0, 0, 0}};
    EXPECT_EQ(points_in_box(c, make_box(0, 0, 0, 1, 1, 1, 0)), 0u);
    c.points = {{0.6f, 0.6f, 0, 0}};
    const Box3D rotated = make_box(0, 0, 0, 2, 0.5, 1, kPi / 4);
    EXPECT_EQ(points_in_box(c, rotated), corner_oracle(rotated, c.points[0]) ? 1u : 0u);
    EXPECT_EQ(points_in_box(c, rotated), 1u);
}

TEST(PointsInBox, AgreesWithCornerOracle) {
    Rng rng(31);
    std::size_t disagreements = 0;
    for (int i = 0; i < 1000; ++i) {
        const Box3D b = make_box(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 4),
                                 rng.uniform(0.5, 2), rng.uniform(0.5, 2), rng.uniform(-kPi, kPi));
        const Point p{static_cast<float>(rng.uniform(-3, 3)), static_cast<float>(rng.uniform(-3, 3)),
                      static_cast<float>(rng.uniform(-2, 2)), 0};
        PointCloud c;
        c.points = {p};
        disagreements += (points_in_box(c, b) == 1) != corner_oracle(b, p);
    }
    EXPECT_EQ(disagreements, 0u);
}

TEST(PointsPerBox, SamplesAndRangeTrend) {
    PointCloud c;
    for (int i = 0; i < 5; ++i) c.points.push_back({10.0f + 0.1f * i, 0, 0, 0});
    c.points.push_back({30, 0, 0, 0});
    const auto curve = points_per_box_curve(one_frame({make_box(10.2, 0, 0, 1, 1, 1, 0)}, c));
    ASSERT_EQ(curve.size(), 1u);
    EXPECT_NEAR(curve[0].range, 10.2, 1e-12);
    EXPECT_EQ(curve[0].points, 5u);
    EXPECT_TRUE(points_per_box_curve(Dataset{}).empty());

    // wide-area scenes: point counts fall with range
    scene::SceneConfig cfg;
    cfg.area = {-40, 40, -40, 40, -3, 1};
    cfg.n_cars = {6, 10};
    cfg.n_pedestrians = {0, 0};
    const auto pair = scene::generate_dataset(cfg, {}, 40, 3, scene::Split::Eval);
    auto samples = points_per_box_curve(pair.sim);
    ASSERT_GE(samples.size(), 200u);
    std::sort(samples.begin(), samples.end(), [](auto& a, auto& b) { return a.range < b.range; });
    std::vector<double> medians;
    for (int d = 0; d < 10; ++d) {
        const std::size_t lo = samples.size() * d / 10, hi = samples.size() * (d + 1) / 10;
        std::vector<std::size_t> n;
        for (std::size_t i = lo; i < hi; ++i) n.push_back(samples[i].points);
        std::sort(n.begin(), n.end());
        medians.push_back(static_cast<double>(n[n.size() / 2]));
    }
    for (std::size_t d = 1; d < medians.size(); ++d) EXPECT_LE(medians[d], medians[d - 1]) << "decile " << d;
}

TEST(FilterGt, ThresholdIsStrictAndIdempotent) {
    PointCloud c;
    for (int i = 0; i < 5; ++i) c.points.push_back({0.1f * i, 0, 0, 0});
    const Dataset ds = one_frame({make_box(0.2, 0, 0, 1, 1, 1, 0), make_box(20, 0, 0, 1, 1, 1, 0)}, c);
    EXPECT_EQ(filter_gt_by_min_points(ds, 0), ds);
    const Dataset f5 = filter_gt_by_min_points(ds, 5);
    ASSERT_EQ(f5.frames[0].boxes.size(), 1u);
    EXPECT_EQ(f5.frames[0].boxes[0].center.x, 0.2);
    EXPECT_EQ(f5.frames[0].cloud, c);
    EXPECT_TRUE(filter_gt_by_min_points(ds, 6).frames[0].boxes.empty());
    EXPECT_EQ(filter_gt_by_min_points(f5, 5), f5);
}

TEST(GapReport, IdentityDropoutAndShift) {
    scene::SceneConfig cfg = scene::desk_scene();
    const auto same = scene::generate_dataset(cfg, {}, 5, 1, scene::Split::Eval);
    const GapReport id = gap_report(same.sim, same.real);
    EXPECT_TRUE(id.paired);
    EXPECT_EQ(id.dropout_estimate, 0.0);
    EXPECT_EQ(id.shadow_coverage, 0.0);
    ASSERT_TRUE(id.sim_out_of_box && id.real_out_of_box);
    for (ClassId c : kAllClasses)
        EXPECT_EQ(fraction_for(*id.sim_out_of_box, c), fraction_for(*id.real_out_of_box, c));

    scene::GapConfig gap;
    gap.dropout_rate = 0.3;
    const auto dropped = scene::generate_dataset(cfg, gap, 20, 2);
    EXPECT_NEAR(gap_report(dropped.sim, dropped.real).dropout_estimate, 0.3, 0.03);

    scene::GapConfig shift;
    shift.box_shift_p = 1.0;
    shift.box_shift_max = 0.5;
    const auto shifted = scene::generate_dataset(cfg, shift, 10, 3, scene::Split::Eval);
    const GapReport s = gap_report(shifted.sim, shifted.real);
    EXPECT_GT(fraction_for(*s.real_out_of_box, ClassId::Car), fraction_for(*s.sim_out_of_box, ClassId::Car));

    scene::GapConfig shadow;
    shadow.ego_shadow = true;
    const auto shaded = scene::generate_dataset(cfg, shadow, 5, 4);
    const GapReport sh = gap_report(shaded.sim, shaded.real);
    // the rear sector within +-16 degrees is dark out to 10 m
    EXPECT_GT(sh.shadow_coverage, 0.05);
    EXPECT_LT(sh.shadow_coverage, 0.5);
}

TEST(Emitters, DeterministicText) {
    scene::SceneConfig cfg = scene::desk_scene();
    const auto p = scene::generate_dataset(cfg, {}, 3, 6, scene::Split::Eval);
    const auto m = polar_density(p.sim, 20, 36, true);
    EXPECT_EQ(polar_density_svg(m), polar_density_svg(polar_density(p.sim, 20, 36, true)));
    EXPECT_EQ(class_histogram_csv(class_histogram(p.sim)).substr(0, 12), "class,count\n");
    EXPECT_NE(points_per_box_svg(points_per_box_curve(p.sim)).find("<circle"), std::string::npos);
    EXPECT_NE(gap_report_csv(gap_report(p.sim, p.real)).find("dropout_estimate,0.000000"), std::string::npos);
}
