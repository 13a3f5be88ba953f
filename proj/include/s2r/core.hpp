#pragma once

// Domain primitives shared by every module: points, boxes, frames, datasets
// and the exception hierarchy.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace s2r {

//////////////////////////// errors ////////////////////////////

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : Error {
    using Error::Error;
};
struct FormatError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct OutOfRange : Error {
    using Error::Error;
};
struct ShapeMismatch : Error {
    using Error::Error;
};
using DimensionMismatch = ShapeMismatch;
struct DomainError : Error {
    using Error::Error;
};
struct CheckpointMismatch : Error {
    using Error::Error;
};
struct FrameMismatch : Error {
    using Error::Error;
};
struct EmptyDataset : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};

//////////////////////////// geometry ////////////////////////////

constexpr double kPi = std::numbers::pi;

/// Wraps an angle into (-pi, pi].
inline double normalize_yaw(double yaw) {
    double r = std::remainder(yaw, 2.0 * kPi);  // [-pi, pi]
    if (r <= -kPi) r += 2.0 * kPi;
    return r;
}

struct Point {
    float x = 0, y = 0, z = 0, intensity = 0;
    friend bool operator==(const Point&, const Point&) = default;
};

struct PointCloud {
    std::vector<Point> points;

    std::size_t size() const { return points.size(); }
    bool empty() const { return points.empty(); }
    friend bool operator==(const PointCloud&, const PointCloud&) = default;
};

inline bool is_valid_point(const Point& p) {
    return std::isfinite(p.x) && std::isfinite(p.y) && std::isfinite(p.z) &&
           std::isfinite(p.intensity) && p.intensity >= 0.0f && p.intensity <= 1.0f;
}

enum class ClassId : int { Car = 0, Pedestrian = 1 };
constexpr int kNumClasses = 2;
constexpr std::array<ClassId, kNumClasses> kAllClasses{ClassId::Car, ClassId::Pedestrian};

inline std::string_view class_name(ClassId c) {
    switch (c) {
        case ClassId::Car: return "Car";
        case ClassId::Pedestrian: return "Pedestrian";
    }
    return "?";
}

inline std::optional<ClassId> parse_class(std::string_view name) {
    if (name == "Car") return ClassId::Car;
    if (name == "Pedestrian") return ClassId::Pedestrian;
    return std::nullopt;
}

struct Vec3 {
    double x = 0, y = 0, z = 0;
    friend bool operator==(const Vec3&, const Vec3&) = default;
};

/// Oriented 3D box. `size` is (length along heading, width, height); the
/// center is the geometric center, so z spans center.z +- h/2.
struct Box3D {
    Vec3 center;
    Vec3 size{1, 1, 1};
    double yaw = 0;
    ClassId cls = ClassId::Car;
    std::optional<double> score;

    double length() const { return size.x; }
    double width() const { return size.y; }
    double height() const { return size.z; }
    double z_min() const { return center.z - 0.5 * size.z; }
    double z_max() const { return center.z + 0.5 * size.z; }
    double bev_area() const { return size.x * size.y; }
    double volume() const { return size.x * size.y * size.z; }

    friend bool operator==(const Box3D&, const Box3D&) = default;
};

inline bool is_valid_box(const Box3D& b) {
    return std::isfinite(b.center.x) && std::isfinite(b.center.y) && std::isfinite(b.center.z) &&
           b.size.x > 0 && b.size.y > 0 && b.size.z > 0 && std::isfinite(b.size.x) &&
           std::isfinite(b.size.y) && std::isfinite(b.size.z) && std::isfinite(b.yaw) &&
           (!b.score || (*b.score >= 0.0 && *b.score <= 1.0));
}

/// Expresses a world point in the box frame (origin at center, x along heading).
inline Vec3 to_box_frame(const Box3D& b, double x, double y, double z) {
    const double dx = x - b.center.x, dy = y - b.center.y;
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    return {c * dx + s * dy, -s * dx + c * dy, z - b.center.z};
}

/// Inclusive containment test on all faces.
inline bool box_contains(const Box3D& b, double x, double y, double z) {
    const Vec3 local = to_box_frame(b, x, y, z);
    return std::abs(local.x) <= 0.5 * b.size.x && std::abs(local.y) <= 0.5 * b.size.y &&
           std::abs(local.z) <= 0.5 * b.size.z;
}

struct RangeConfig {
    double x_min = -50, x_max = 50;
    double y_min = -50, y_max = 50;
    double z_min = -3, z_max = 1;

    bool valid() const { return x_min < x_max && y_min < y_max && z_min < z_max; }
    bool contains(double x, double y, double z) const {
        return x >= x_min && x < x_max && y >= y_min && y < y_max && z >= z_min && z < z_max;
    }
    friend bool operator==(const RangeConfig&, const RangeConfig&) = default;
};

/// Keeps points inside the half-open box [min, max) on every axis, order preserved.
inline PointCloud clip_to_range(const PointCloud& cloud, const RangeConfig& range) {
    if (!range.valid()) throw ConfigError("clip_to_range: range min must be < max on every axis");
    PointCloud out;
    out.points.reserve(cloud.size());
    for (const Point& p : cloud.points)
        if (range.contains(p.x, p.y, p.z)) out.points.push_back(p);
    return out;
}

//////////////////////////// frames ////////////////////////////

enum class DomainTag { Simulated, Real };

inline std::string_view domain_name(DomainTag d) {
    return d == DomainTag::Simulated ? "Simulated" : "Real";
}

inline std::optional<DomainTag> parse_domain(std::string_view s) {
    if (s == "Simulated") return DomainTag::Simulated;
    if (s == "Real") return DomainTag::Real;
    return std::nullopt;
}

struct Frame {
    PointCloud cloud;
    std::vector<Box3D> boxes;
    std::string frame_id;
    DomainTag domain = DomainTag::Simulated;

    friend bool operator==(const Frame&, const Frame&) = default;
};

struct Dataset {
    std::string name;
    std::optional<std::uint64_t> seed;
    bool labeled = true;
    std::vector<Frame> frames;

    std::size_t size() const { return frames.size(); }
    bool empty() const { return frames.empty(); }
    friend bool operator==(const Dataset&, const Dataset&) = default;
};

}  // namespace s2r
