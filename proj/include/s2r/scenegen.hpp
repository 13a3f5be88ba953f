#pragma once

// Synthetic two-domain lidar scenes. The sensor sits at the origin above a
// flat ground plane z = -sensor_height; each beam direction is ray-cast
// against the ground and the object boxes and keeps its first hit. The
// "real" domain is derived from a simulated frame by point dropout, ego-vehicle
// occlusion, label desync and intensity flattening.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "s2r/core.hpp"
#include "s2r/iou.hpp"
#include "s2r/rng.hpp"

namespace s2r::scene {

struct LidarConfig {
    std::size_t n_beams = 16;
    double fov_min = -15.0 * kPi / 180.0;  // elevation of the lowest beam
    double fov_max = 15.0 * kPi / 180.0;
    double azimuth_resolution = 0.4 * kPi / 180.0;
    double max_range = 50.0;
    double sensor_height = 1.8;
};

struct CountRange {
    int min = 0, max = 0;
};

struct SceneConfig {
    std::uint64_t seed = 0;
    RangeConfig area{-8, 8, -8, 8, -3, 1};
    CountRange n_cars{1, 4};
    CountRange n_pedestrians{0, 3};
    LidarConfig lidar;
    // Roof-mounted sensor over the front third of the vehicle body.
    Box3D ego_footprint{{-1.5, 0.0, -1.2}, {4.0, 2.0, 1.2}, 0.0, ClassId::Car, std::nullopt};

    void validate() const {
        if (!area.valid()) throw ConfigError("scene.area: min must be < max on every axis");
        if (!(lidar.azimuth_resolution > 0)) throw ConfigError("scene.azimuth_resolution must be > 0");
        if (!(lidar.max_range > 0)) throw ConfigError("scene.max_range must be > 0");
        if (!(lidar.sensor_height > 0)) throw ConfigError("scene.sensor_height must be > 0");
        if (lidar.n_beams == 0) throw ConfigError("scene.n_beams must be >= 1");
        if (!(lidar.fov_min <= lidar.fov_max)) throw ConfigError("scene.fov_min must be <= fov_max");
        if (n_cars.min < 0 || n_cars.min > n_cars.max) throw ConfigError("scene.n_cars: need 0 <= min <= max");
        if (n_pedestrians.min < 0 || n_pedestrians.min > n_pedestrians.max)
            throw ConfigError("scene.n_pedestrians: need 0 <= min <= max");
        if (!is_valid_box(ego_footprint)) throw ConfigError("scene.ego_footprint is not a valid box");
    }
};

/// A configuration suited to the +-8 m desk grid: more, steeper beams so the
/// small area receives a useful number of returns.
inline SceneConfig desk_scene() {
    SceneConfig c;
    c.lidar.n_beams = 32;
    c.lidar.fov_min = -30.0 * kPi / 180.0;
    c.lidar.fov_max = 10.0 * kPi / 180.0;
    c.lidar.max_range = 12.0;
    return c;
}

struct GapConfig {
    double dropout_rate = 0.0;
    bool ego_shadow = false;
    double box_shift_p = 0.0;
    double box_shift_max = 0.0;
    bool intensity_flatten = false;
    double flatten_value = 0.5;

    bool disabled() const {
        return dropout_rate == 0.0 && !ego_shadow && box_shift_p == 0.0 && !intensity_flatten;
    }

    void validate() const {
        if (!(dropout_rate >= 0.0 && dropout_rate <= 1.0)) throw ConfigError("gap.dropout_rate must be in [0, 1]");
        if (!(box_shift_p >= 0.0 && box_shift_p <= 1.0)) throw ConfigError("gap.box_shift_p must be in [0, 1]");
        if (!(box_shift_max >= 0.0)) throw ConfigError("gap.box_shift_max must be >= 0");
        if (!(flatten_value >= 0.0 && flatten_value <= 1.0)) throw ConfigError("gap.flatten_value must be in [0, 1]");
    }
};

struct Ray {
    Vec3 origin, dir;
};

struct SlabHit {
    double t = 0.0;
    int axis = 0;  // box-frame axis of the entry face
};

/// Entry of a ray into an oriented box, t > 0 only. Rays starting inside miss.
inline std::optional<SlabHit> ray_box(const Ray& ray, const Box3D& b) {
    const Vec3 o = to_box_frame(b, ray.origin.x, ray.origin.y, ray.origin.z);
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    const double d[3] = {c * ray.dir.x + s * ray.dir.y, -s * ray.dir.x + c * ray.dir.y, ray.dir.z};
    const double p[3] = {o.x, o.y, o.z};
    const double half[3] = {0.5 * b.size.x, 0.5 * b.size.y, 0.5 * b.size.z};
    double t_in = -std::numeric_limits<double>::infinity(), t_out = std::numeric_limits<double>::infinity();
    int axis = 0;
    for (int k = 0; k < 3; ++k) {
        if (d[k] == 0.0) {
            if (std::abs(p[k]) > half[k]) return std::nullopt;
            continue;
        }
        double t0 = (-half[k] - p[k]) / d[k], t1 = (half[k] - p[k]) / d[k];
        if (t0 > t1) std::swap(t0, t1);
        if (t0 > t_in) t_in = t0, axis = k;
        t_out = std::min(t_out, t1);
    }
    if (t_in > t_out || t_in <= 0.0) return std::nullopt;
    return SlabHit{t_in, axis};
}

/// Whether the segment from `a` to `b` passes through the box (either end inside counts).
inline bool segment_hits_box(const Vec3& a, const Vec3& b, const Box3D& box) {
    if (box_contains(box, a.x, a.y, a.z) || box_contains(box, b.x, b.y, b.z)) return true;
    const auto hit = ray_box({a, {b.x - a.x, b.y - a.y, b.z - a.z}}, box);
    return hit && hit->t <= 1.0;
}

struct Hit {
    Vec3 point;
    int object = -1;  // index into the scene's boxes, -1 for ground
    double intensity = 0.0;
};

/// Intensity falls with incidence angle and with range.
inline double return_intensity(double cos_incidence, double range, double max_range) {
    const double falloff = 1.0 / (1.0 + (range / max_range) * (range / max_range));
    return std::clamp(std::abs(cos_incidence) * falloff, 0.0, 1.0);
}

inline std::vector<Hit> cast_rays(const LidarConfig& lidar, const std::vector<Box3D>& boxes) {
    std::vector<Hit> hits;
    const std::size_t n_az = static_cast<std::size_t>(std::ceil(2.0 * kPi / lidar.azimuth_resolution - 1e-9));
    const double ground_z = -lidar.sensor_height;
    for (std::size_t b = 0; b < lidar.n_beams; ++b) {
        const double elev = lidar.n_beams == 1
                                ? lidar.fov_min
                                : lidar.fov_min + (lidar.fov_max - lidar.fov_min) * static_cast<double>(b) /
                                                      static_cast<double>(lidar.n_beams - 1);
        const double ce = std::cos(elev), se = std::sin(elev);
        for (std::size_t a = 0; a < n_az; ++a) {
            const double az = -kPi + lidar.azimuth_resolution * static_cast<double>(a);
            const Ray ray{{0, 0, 0}, {ce * std::cos(az), ce * std::sin(az), se}};
            double best_t = lidar.max_range;
            int best_obj = -2;
            Vec3 normal{0, 0, 1};
            if (ray.dir.z < 0) {
                const double t = ground_z / ray.dir.z;
                if (t <= best_t) best_t = t, best_obj = -1;
            }
            for (std::size_t i = 0; i < boxes.size(); ++i) {
                const auto h = ray_box(ray, boxes[i]);
                if (!h || h->t > best_t) continue;
                best_t = h->t;
                best_obj = static_cast<int>(i);
                const double c = std::cos(boxes[i].yaw), s = std::sin(boxes[i].yaw);
                normal = h->axis == 0 ? Vec3{c, s, 0} : h->axis == 1 ? Vec3{-s, c, 0} : Vec3{0, 0, 1};
            }
            if (best_obj == -2) continue;
            if (best_obj == -1) normal = {0, 0, 1};
            const double cos_inc = normal.x * ray.dir.x + normal.y * ray.dir.y + normal.z * ray.dir.z;
            Vec3 p{best_t * ray.dir.x, best_t * ray.dir.y, best_t * ray.dir.z};
            if (best_obj == -1) p.z = ground_z;
            hits.push_back({p, best_obj, return_intensity(cos_inc, best_t, lidar.max_range)});
        }
    }
    return hits;
}

/// Object layout for one scene: sizes jittered around typical dimensions,
/// resting on the ground, not overlapping each other or the ego vehicle.
inline std::vector<Box3D> place_objects(const SceneConfig& cfg, Rng& rng) {
    std::vector<Box3D> boxes;
    const int n_cars = rng.integer(cfg.n_cars.min, cfg.n_cars.max);
    const int n_peds = rng.integer(cfg.n_pedestrians.min, cfg.n_pedestrians.max);
    const double ground = -cfg.lidar.sensor_height;
    Box3D ego_zone = cfg.ego_footprint;
    ego_zone.size.x += 2.0;
    ego_zone.size.y += 2.0;
    auto place = [&](ClassId cls, Vec3 size) {
        const double margin = 0.5 * std::hypot(size.x, size.y);
        for (int attempt = 0; attempt < 100; ++attempt) {
            Box3D b;
            b.cls = cls;
            b.size = size;
            b.yaw = normalize_yaw(rng.uniform(-kPi, kPi));
            b.center = {rng.uniform(cfg.area.x_min + margin, cfg.area.x_max - margin),
                        rng.uniform(cfg.area.y_min + margin, cfg.area.y_max - margin), ground + 0.5 * size.z};
            bool ok = geom::bev_intersection(b, ego_zone) == 0.0;
            for (const Box3D& o : boxes) ok = ok && geom::bev_intersection(b, o) == 0.0;
            if (ok) {
                boxes.push_back(b);
                return;
            }
        }
    };
    for (int i = 0; i < n_cars; ++i)
        place(ClassId::Car, {rng.uniform(4.2, 4.8), rng.uniform(1.7, 1.9), rng.uniform(1.4, 1.6)});
    for (int i = 0; i < n_peds; ++i)
        place(ClassId::Pedestrian, {rng.uniform(0.5, 0.7), rng.uniform(0.5, 0.7), rng.uniform(1.6, 1.8)});
    return boxes;
}

/// Float rounding can leave a surface return a hair outside its box; pull it
/// toward the box center along the segment (which lies inside) until the
/// stored point is enclosed.
inline Point to_point_inside(const Vec3& h, double intensity, const Box3D& b) {
    Point p{static_cast<float>(h.x), static_cast<float>(h.y), static_cast<float>(h.z), static_cast<float>(intensity)};
    for (double t = 1e-8; !box_contains(b, p.x, p.y, p.z) && t < 1e-3; t *= 2) {
        p.x = static_cast<float>(h.x + t * (b.center.x - h.x));
        p.y = static_cast<float>(h.y + t * (b.center.y - h.y));
        p.z = static_cast<float>(h.z + t * (b.center.z - h.z));
    }
    return p;
}

inline Frame generate_scene(const SceneConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    Frame f;
    f.domain = DomainTag::Simulated;
    f.boxes = place_objects(cfg, rng);
    for (const Hit& h : cast_rays(cfg.lidar, f.boxes)) {
        if (h.object >= 0) {
            f.cloud.points.push_back(to_point_inside(h.point, h.intensity, f.boxes[h.object]));
            continue;
        }
        f.cloud.points.push_back({static_cast<float>(h.point.x), static_cast<float>(h.point.y),
                                  static_cast<float>(h.point.z), static_cast<float>(h.intensity)});
    }
    return f;
}

/// Applies the gap in a fixed order: dropout, ego shadow, label shift, intensity flattening.
inline Frame realify(const Frame& sim, const GapConfig& gap, std::uint64_t seed,
                     const Box3D& ego_footprint = SceneConfig{}.ego_footprint) {
    if (sim.domain != DomainTag::Simulated) throw DomainError("realify: frame " + sim.frame_id + " is already Real");
    gap.validate();
    Rng rng(seed);
    Frame out = sim;
    out.domain = DomainTag::Real;
    if (gap.dropout_rate > 0.0) {
        std::vector<Point> kept;
        kept.reserve(out.cloud.size());
        for (const Point& p : out.cloud.points)
            if (!rng.bernoulli(gap.dropout_rate)) kept.push_back(p);
        out.cloud.points = std::move(kept);
    }
    if (gap.ego_shadow) {
        std::erase_if(out.cloud.points, [&](const Point& p) {
            return segment_hits_box({0, 0, 0}, {p.x, p.y, p.z}, ego_footprint);
        });
    }
    if (gap.box_shift_p > 0.0) {
        for (Box3D& b : out.boxes) {
            if (!rng.bernoulli(gap.box_shift_p)) continue;
            const double r = gap.box_shift_max * std::sqrt(rng.uniform()), a = rng.uniform(-kPi, kPi);
            b.center.x += r * std::cos(a);
            b.center.y += r * std::sin(a);
        }
    }
    if (gap.intensity_flatten)
        for (Point& p : out.cloud.points) p.intensity = static_cast<float>(gap.flatten_value);
    return out;
}

enum class Split { Train, Eval };

struct DatasetPair {
    Dataset sim, real;
};

inline std::string frame_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06zu", i);
    return buf;
}

/// Paired sim/real datasets. Frame i uses scene seed mix_seed(seed, 2i) and
/// gap seed mix_seed(seed, 2i+1). The real training split is unlabeled.
inline DatasetPair generate_dataset(const SceneConfig& scene, const GapConfig& gap, std::size_t n_frames,
                                   std::uint64_t seed, Split split = Split::Train) {
    if (n_frames == 0) throw ConfigError("generate_dataset: n_frames must be >= 1");
    scene.validate();
    gap.validate();
    DatasetPair out;
    const std::string suffix = split == Split::Train ? "" : "_eval";
    out.sim = {"sim" + suffix, seed, true, {}};
    out.real = {"real" + suffix, seed, split == Split::Eval, {}};
    for (std::size_t i = 0; i < n_frames; ++i) {
        SceneConfig cfg = scene;
        cfg.seed = mix_seed(seed, 2 * i);
        Frame sim = generate_scene(cfg);
        sim.frame_id = frame_name(i);
        Frame real = realify(sim, gap, mix_seed(seed, 2 * i + 1), scene.ego_footprint);
        if (split == Split::Train) real.boxes.clear();
        out.sim.frames.push_back(std::move(sim));
        out.real.frames.push_back(std::move(real));
    }
    return out;
}

}  // namespace s2r::scene
