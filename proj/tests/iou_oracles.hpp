#pragma once

// Rasterized BEV overlap, independent of the polygon clipper it checks.

#include <algorithm>
#include <cmath>

#include "s2r/iou.hpp"
#include "s2r/rng.hpp"

namespace s2r::testing {

using geom::bev_corners;
using geom::Point2;

inline Box3D box(double x, double y, double z, double l, double w, double h, double yaw = 0.0) {
    return {{x, y, z}, {l, w, h}, yaw, ClassId::Car, std::nullopt};
}

inline bool inside_footprint(const Box3D& b, double px, double py) {
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    const double dx = px - b.center.x, dy = py - b.center.y;
    const double u = c * dx + s * dy, v = -s * dx + c * dy;
    return std::abs(u) <= 0.5 * b.size.x && std::abs(v) <= 0.5 * b.size.y;
}

// Cell-center sampling on a res x res grid over the union's bounding box.
inline double raster_iou(const Box3D& a, const Box3D& b, int res = 1000) {
    double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
    for (const Box3D* bx : {&a, &b})
        for (const Point2& p : bev_corners(*bx)) {
            x0 = std::min(x0, p.x), x1 = std::max(x1, p.x);
            y0 = std::min(y0, p.y), y1 = std::max(y1, p.y);
        }
    const double sx = (x1 - x0) / res, sy = (y1 - y0) / res;
    long inter = 0, uni = 0;
    for (int i = 0; i < res; ++i) {
        const double py = y0 + (i + 0.5) * sy;
        for (int j = 0; j < res; ++j) {
            const double px = x0 + (j + 0.5) * sx;
            const bool ia = inside_footprint(a, px, py), ib = inside_footprint(b, px, py);
            inter += ia && ib;
            uni += ia || ib;
        }
    }
    return uni ? static_cast<double>(inter) / uni : 0.0;
}

inline Box3D random_box(Rng& rng) {
    return box(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-1, 1), rng.uniform(0.5, 5), rng.uniform(0.5, 3),
               rng.uniform(0.5, 2), rng.uniform(-kPi, kPi));
}

}  // namespace s2r::testing
