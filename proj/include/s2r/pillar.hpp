#pragma once

// Pillarization: groups a clipped point cloud into vertical columns on an
// x-y grid, producing the stacked (D, P, N) tensor consumed by the pillar
// feature net, and scatters per-pillar features back into a (C, H, W)
// pseudo-image.
//
// Grid convention: col = floor((x - x_min) / dx) indexes W, row =
// floor((y - y_min) / dy) indexes H. Cells are half-open.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "s2r/autodiff.hpp"
#include "s2r/core.hpp"
#include "s2r/rng.hpp"

namespace s2r::pillar {

using ad::Tensor;

constexpr std::size_t kDecoratedDim = 9;

struct PillarGridConfig {
    RangeConfig range;
    double dx = 0.25, dy = 0.25;
    std::size_t max_points_per_pillar = 60;  // N
    std::size_t max_pillars = 12000;          // P
    std::size_t point_feature_dim = kDecoratedDim;  // D

    std::size_t width() const { return static_cast<std::size_t>(std::llround((range.x_max - range.x_min) / dx)); }
    std::size_t height() const { return static_cast<std::size_t>(std::llround((range.y_max - range.y_min) / dy)); }

    void validate() const {
        if (!range.valid()) throw ConfigError("pillar grid: range min must be < max on every axis");
        if (!(dx > 0) || !(dy > 0)) throw ConfigError("pillar grid: pillar size must be positive");
        const double wx = (range.x_max - range.x_min) / dx, wy = (range.y_max - range.y_min) / dy;
        if (std::abs(wx - std::round(wx)) > 1e-9 * std::max(1.0, wx) ||
            std::abs(wy - std::round(wy)) > 1e-9 * std::max(1.0, wy))
            throw ConfigError("pillar grid: range extents must be integer multiples of the pillar size");
        if (max_points_per_pillar < 1 || max_pillars < 1)
            throw ConfigError("pillar grid: max points per pillar and max pillars must be >= 1");
        if (point_feature_dim != kDecoratedDim)
            throw ConfigError("pillar grid: point feature dim must be 9 (decorated x,y,z,i + offsets)");
    }
    friend bool operator==(const PillarGridConfig&, const PillarGridConfig&) = default;
};

/// Paper-scale grid: +-50 m, z in [-3, 1], 0.25 m pillars, 60 points per pillar.
inline PillarGridConfig paper_grid() { return PillarGridConfig{}; }

struct PillarCoord {
    std::size_t row = 0, col = 0;
    friend bool operator==(const PillarCoord&, const PillarCoord&) = default;
};

struct PillarTensor {
    Tensor features;  // (D, P, N)
    std::vector<PillarCoord> coords;
    std::vector<std::size_t> counts;

    std::size_t num_pillars() const { return coords.size(); }
    std::size_t dim() const { return features.shape.at(0); }
    std::size_t max_points() const { return features.shape.at(2); }
    double at(std::size_t d, std::size_t p, std::size_t n) const {
        return features[(d * num_pillars() + p) * max_points() + n];
    }
    friend bool operator==(const PillarTensor&, const PillarTensor&) = default;
};

/// (x, y, z, i, x - xc, y - yc, z - zc, x - xp, y - yp) with (xc, yc, zc) the
/// centroid of the pillar's points and (xp, yp) the pillar cell center.
inline std::array<double, kDecoratedDim> decorate_point(const Point& p, std::array<double, 2> pillar_center,
                                                        std::array<double, 3> centroid) {
    const double x = p.x, y = p.y, z = p.z;
    return {x, y, z, static_cast<double>(p.intensity), x - centroid[0], y - centroid[1], z - centroid[2],
            x - pillar_center[0], y - pillar_center[1]};
}

inline std::array<double, 2> cell_center(const PillarGridConfig& cfg, PillarCoord c) {
    return {cfg.range.x_min + (static_cast<double>(c.col) + 0.5) * cfg.dx,
            cfg.range.y_min + (static_cast<double>(c.row) + 0.5) * cfg.dy};
}

inline PillarCoord cell_of(const PillarGridConfig& cfg, double x, double y) {
    const std::size_t W = cfg.width(), H = cfg.height();
    auto col = static_cast<std::size_t>(std::floor((x - cfg.range.x_min) / cfg.dx));
    auto row = static_cast<std::size_t>(std::floor((y - cfg.range.y_min) / cfg.dy));
    // x < x_max can still round up to W in floating point.
    return {std::min(row, H - 1), std::min(col, W - 1)};
}

inline PillarTensor pillarize(const PointCloud& cloud, const PillarGridConfig& cfg, std::uint64_t rng_seed) {
    cfg.validate();
    const std::size_t W = cfg.width(), N = cfg.max_points_per_pillar, D = cfg.point_feature_dim;
    struct Entry {
        std::size_t cell, index;
    };
    std::vector<Entry> entries;
    entries.reserve(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const Point& p = cloud.points[i];
        if (!cfg.range.contains(p.x, p.y, p.z))
            throw OutOfRange("pillarize: point " + std::to_string(i) + " lies outside the grid range; clip first");
        const PillarCoord c = cell_of(cfg, p.x, p.y);
        entries.push_back({c.row * W + c.col, i});
    }
    std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.cell < b.cell; });

    struct Group {
        std::size_t cell, begin, end;
    };
    std::vector<Group> groups;
    for (std::size_t i = 0; i < entries.size();) {
        std::size_t j = i;
        while (j < entries.size() && entries[j].cell == entries[i].cell) ++j;
        groups.push_back({entries[i].cell, i, j});
        i = j;
    }
    if (groups.size() > cfg.max_pillars) {
        std::stable_sort(groups.begin(), groups.end(), [](const Group& a, const Group& b) {
            return a.end - a.begin > b.end - b.begin;  // stable keeps row-major order among ties
        });
        groups.resize(cfg.max_pillars);
        std::sort(groups.begin(), groups.end(), [](const Group& a, const Group& b) { return a.cell < b.cell; });
    }

    const std::size_t P = groups.size();
    PillarTensor out;
    out.features = Tensor({D, P, N}, 0.0);
    out.coords.resize(P);
    out.counts.resize(P);
    std::vector<std::size_t> chosen;
    for (std::size_t p = 0; p < P; ++p) {
        const Group& g = groups[p];
        const std::size_t count = g.end - g.begin;
        chosen.resize(count);
        std::iota(chosen.begin(), chosen.end(), g.begin);
        if (count > N) {
            Rng rng(mix_seed(rng_seed, g.cell));
            for (std::size_t k = 0; k < N; ++k) std::swap(chosen[k], chosen[k + rng.below(count - k)]);
            chosen.resize(N);
            std::sort(chosen.begin(), chosen.end());
        }
        const PillarCoord coord{g.cell / W, g.cell % W};
        out.coords[p] = coord;
        out.counts[p] = chosen.size();
        std::array<double, 3> centroid{0, 0, 0};
        for (std::size_t e : chosen) {
            const Point& pt = cloud.points[entries[e].index];
            centroid[0] += pt.x;
            centroid[1] += pt.y;
            centroid[2] += pt.z;
        }
        for (double& c : centroid) c /= static_cast<double>(chosen.size());
        const auto center = cell_center(cfg, coord);
        for (std::size_t n = 0; n < chosen.size(); ++n) {
            const auto f = decorate_point(cloud.points[entries[chosen[n]].index], center, centroid);
            for (std::size_t d = 0; d < D; ++d) out.features[(d * P + p) * N + n] = f[d];
        }
    }
    return out;
}

/// Writes column p of a (C, P) feature matrix to cell coords[p] of a
/// (C, H, W) image; every other cell is zero.
inline Tensor scatter(const Tensor& pillar_features, const std::vector<PillarCoord>& coords,
                      const PillarGridConfig& cfg) {
    if (pillar_features.rank() != 2 || pillar_features.shape[1] != coords.size())
        throw DimensionMismatch("scatter: features " + ad::shape_str(pillar_features.shape) + " vs " +
                                std::to_string(coords.size()) + " pillar coordinates");
    const std::size_t C = pillar_features.shape[0], P = coords.size(), H = cfg.height(), W = cfg.width();
    Tensor img({C, H, W}, 0.0);
    for (std::size_t p = 0; p < P; ++p) {
        if (coords[p].row >= H || coords[p].col >= W) throw DimensionMismatch("scatter: pillar coordinate outside grid");
        for (std::size_t c = 0; c < C; ++c) img[(c * H + coords[p].row) * W + coords[p].col] = pillar_features[c * P + p];
    }
    return img;
}

}  // namespace s2r::pillar
