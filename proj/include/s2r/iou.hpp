#pragma once

// Rotated-box overlap in bird's-eye view and 3D. The BEV intersection clips
// one rectangle against the four half-planes of the other
// (Sutherland-Hodgman) and measures the result with the shoelace formula.

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "s2r/core.hpp"

namespace s2r::geom {

struct Point2 {
    double x = 0, y = 0;
};

using Polygon = std::vector<Point2>;

/// Footprint corners in counter-clockwise order.
inline std::array<Point2, 4> bev_corners(const Box3D& b) {
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    const double hl = 0.5 * b.size.x, hw = 0.5 * b.size.y;
    const std::array<std::array<double, 2>, 4> local{{{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}}};
    std::array<Point2, 4> out;
    for (int i = 0; i < 4; ++i)
        out[i] = {b.center.x + c * local[i][0] - s * local[i][1], b.center.y + s * local[i][0] + c * local[i][1]};
    return out;
}

inline double cross(const Point2& a, const Point2& b, const Point2& p) {
    return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
}

inline double polygon_area(const Polygon& poly) {
    double a = 0.0;
    for (std::size_t i = 0, n = poly.size(); i < n; ++i) {
        const Point2 &p = poly[i], &q = poly[(i + 1) % n];
        a += p.x * q.y - q.x * p.y;
    }
    return 0.5 * std::abs(a);
}

/// Clips `subject` against the convex counter-clockwise polygon `clip`.
template <std::size_t K>
inline Polygon clip_convex(Polygon subject, const std::array<Point2, K>& clip) {
    for (std::size_t e = 0; e < K && !subject.empty(); ++e) {
        const Point2 &a = clip[e], &b = clip[(e + 1) % K];
        Polygon out;
        out.reserve(subject.size() + 2);
        for (std::size_t i = 0, n = subject.size(); i < n; ++i) {
            const Point2 &cur = subject[i], &nxt = subject[(i + 1) % n];
            const double dc = cross(a, b, cur), dn = cross(a, b, nxt);
            if (dc >= 0) out.push_back(cur);
            if ((dc >= 0) != (dn >= 0)) {
                const double t = dc / (dc - dn);
                out.push_back({cur.x + t * (nxt.x - cur.x), cur.y + t * (nxt.y - cur.y)});
            }
        }
        subject = std::move(out);
    }
    return subject;
}

inline double bev_intersection(const Box3D& a, const Box3D& b) {
    // Quick reject on circumscribed circles.
    const double ra = 0.5 * std::hypot(a.size.x, a.size.y), rb = 0.5 * std::hypot(b.size.x, b.size.y);
    if (std::hypot(a.center.x - b.center.x, a.center.y - b.center.y) > ra + rb) return 0.0;
    const auto ca = bev_corners(a);
    const auto cb = bev_corners(b);
    return polygon_area(clip_convex(Polygon(ca.begin(), ca.end()), cb));
}

inline double bev_iou(const Box3D& a, const Box3D& b) {
    const double inter = bev_intersection(a, b);
    const double uni = a.bev_area() + b.bev_area() - inter;
    return uni > 0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

inline double iou3d(const Box3D& a, const Box3D& b) {
    const double overlap_z = std::min(a.z_max(), b.z_max()) - std::max(a.z_min(), b.z_min());
    if (overlap_z <= 0) return 0.0;
    const double inter = bev_intersection(a, b) * overlap_z;
    const double uni = a.volume() + b.volume() - inter;
    return uni > 0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

}  // namespace s2r::geom
