#pragma once

// Dataset statistics and sim-vs-real gap measurements, with CSV and minimal
// SVG emitters. All text output uses fixed precision so identical inputs
// give identical bytes.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "s2r/core.hpp"

namespace s2r::diag {

using ClassHistogram = std::map<ClassId, std::size_t>;

inline ClassHistogram class_histogram(const Dataset& ds) {
    ClassHistogram h;
    for (const Frame& f : ds.frames)
        for (const Box3D& b : f.boxes) ++h[b.cls];
    return h;
}

struct PolarDensityMap {
    std::vector<double> range_edges, azimuth_edges;
    std::vector<std::size_t> counts;  // range-major, (range_bins, azimuth_bins)
    bool log_scaled = false;

    std::size_t range_bins() const { return range_edges.size() - 1; }
    std::size_t azimuth_bins() const { return azimuth_edges.size() - 1; }
    std::size_t count(std::size_t r, std::size_t a) const { return counts[r * azimuth_bins() + a]; }
    std::size_t total() const {
        std::size_t s = 0;
        for (std::size_t c : counts) s += c;
        return s;
    }
    /// ln(1 + count) when log-scaled, otherwise the count as a frequency of the total.
    double emitted(std::size_t r, std::size_t a) const {
        const double c = static_cast<double>(count(r, a));
        if (log_scaled) return std::log1p(c);
        const std::size_t t = total();
        return t ? c / static_cast<double>(t) : 0.0;
    }
};

/// Box centers binned by BEV range over [0, max_range] and azimuth over
/// [-pi, pi). Ranges beyond max_range land in the last range bin.
inline PolarDensityMap polar_density(const Dataset& ds, std::size_t n_range_bins = 20, std::size_t n_azimuth_bins = 36,
                                     bool log_scale = false, double max_range = 50.0) {
    if (n_range_bins == 0 || n_azimuth_bins == 0) throw ConfigError("polar_density: bin counts must be >= 1");
    if (!(max_range > 0)) throw ConfigError("polar_density: max_range must be > 0");
    PolarDensityMap m;
    m.log_scaled = log_scale;
    for (std::size_t i = 0; i <= n_range_bins; ++i)
        m.range_edges.push_back(max_range * static_cast<double>(i) / static_cast<double>(n_range_bins));
    for (std::size_t i = 0; i <= n_azimuth_bins; ++i)
        m.azimuth_edges.push_back(-kPi + 2 * kPi * static_cast<double>(i) / static_cast<double>(n_azimuth_bins));
    m.counts.assign(n_range_bins * n_azimuth_bins, 0);
    for (const Frame& f : ds.frames)
        for (const Box3D& b : f.boxes) {
            const double r = std::hypot(b.center.x, b.center.y);
            double az = std::atan2(b.center.y, b.center.x);
            if (az >= kPi) az -= 2 * kPi;
            const auto ri = std::min<std::size_t>(static_cast<std::size_t>(r / max_range * n_range_bins), n_range_bins - 1);
            const auto ai = std::min<std::size_t>(static_cast<std::size_t>((az + kPi) / (2 * kPi) * n_azimuth_bins),
                                                  n_azimuth_bins - 1);
            ++m.counts[ri * n_azimuth_bins + ai];
        }
    return m;
}

inline std::size_t points_in_box(const PointCloud& cloud, const Box3D& box) {
    std::size_t n = 0;
    for (const Point& p : cloud.points) n += box_contains(box, p.x, p.y, p.z);
    return n;
}

struct BoxSample {
    double range = 0.0;
    std::size_t points = 0;
    ClassId cls = ClassId::Car;
};

using PointsPerBoxCurve = std::vector<BoxSample>;

inline PointsPerBoxCurve points_per_box_curve(const Dataset& ds) {
    PointsPerBoxCurve c;
    for (const Frame& f : ds.frames)
        for (const Box3D& b : f.boxes) c.push_back({std::hypot(b.center.x, b.center.y), points_in_box(f.cloud, b), b.cls});
    return c;
}

/// Drops boxes holding fewer than `min_points` points; clouds are untouched.
inline Dataset filter_gt_by_min_points(const Dataset& ds, std::size_t min_points) {
    Dataset out = ds;
    for (Frame& f : out.frames)
        std::erase_if(f.boxes, [&](const Box3D& b) { return points_in_box(f.cloud, b) < min_points; });
    return out;
}

struct CountStats {
    std::size_t min = 0, max = 0;
    double median = 0.0, mean = 0.0;
};

inline CountStats count_stats(const Dataset& ds) {
    CountStats s;
    if (ds.frames.empty()) return s;
    std::vector<std::size_t> n;
    for (const Frame& f : ds.frames) n.push_back(f.cloud.size());
    std::sort(n.begin(), n.end());
    s.min = n.front();
    s.max = n.back();
    const std::size_t k = n.size();
    s.median = k % 2 ? static_cast<double>(n[k / 2]) : 0.5 * static_cast<double>(n[k / 2 - 1] + n[k / 2]);
    double total = 0;
    for (std::size_t v : n) total += static_cast<double>(v);
    s.mean = total / static_cast<double>(k);
    return s;
}

struct OutOfBox {
    std::size_t attributed = 0, outside = 0;
    double fraction() const { return attributed ? static_cast<double>(outside) / static_cast<double>(attributed) : 0.0; }
};

/// Points are attributed to the nearest box (by BEV center distance) whose
/// footprint scaled by `radius` contains them. Points in the bottom 10% of the
/// box height are ground returns and are skipped.
inline std::map<ClassId, OutOfBox> out_of_box(const Dataset& ds, double radius = 1.5) {
    std::map<ClassId, OutOfBox> out;
    for (const Frame& f : ds.frames) {
        if (f.boxes.empty()) continue;
        for (const Point& p : f.cloud.points) {
            const Box3D* best = nullptr;
            double best_d = 0;
            for (const Box3D& b : f.boxes) {
                const Vec3 l = to_box_frame(b, p.x, p.y, p.z);
                if (std::abs(l.x) > 0.5 * radius * b.size.x || std::abs(l.y) > 0.5 * radius * b.size.y) continue;
                if (l.z < -0.4 * b.size.z || l.z > 0.5 * b.size.z) continue;
                const double d = std::hypot(p.x - b.center.x, p.y - b.center.y);
                if (!best || d < best_d) best = &b, best_d = d;
            }
            if (!best) continue;
            OutOfBox& o = out[best->cls];
            ++o.attributed;
            o.outside += !box_contains(*best, p.x, p.y, p.z);
        }
    }
    return out;
}

inline double fraction_for(const std::map<ClassId, OutOfBox>& m, ClassId c) {
    auto it = m.find(c);
    return it == m.end() ? 0.0 : it->second.fraction();
}

struct GapReport {
    CountStats sim_points, real_points;
    bool paired = false;
    double dropout_estimate = 0.0;
    double shadow_coverage = 0.0;
    std::optional<std::map<ClassId, OutOfBox>> sim_out_of_box, real_out_of_box;
};

namespace detail {

inline std::vector<char> occupied_azimuths(const PointCloud& c, std::size_t bins, double near) {
    std::vector<char> occ(bins, 0);
    for (const Point& p : c.points) {
        if (std::hypot(p.x, p.y) > near) continue;
        const double az = std::atan2(p.y, p.x);
        occ[std::min<std::size_t>(static_cast<std::size_t>((az + kPi) / (2 * kPi) * bins), bins - 1)] = 1;
    }
    return occ;
}

}  // namespace detail

/// Paired datasets (same frame ids in the same order) give per-frame shadow
/// coverage; otherwise only aggregate point statistics are compared.
inline GapReport gap_report(const Dataset& sim, const Dataset& real, std::size_t azimuth_bins = 360,
                            double near_range = 10.0) {
    GapReport r;
    r.sim_points = count_stats(sim);
    r.real_points = count_stats(real);
    if (r.sim_points.mean > 0) r.dropout_estimate = std::clamp(1.0 - r.real_points.mean / r.sim_points.mean, 0.0, 1.0);
    r.paired = sim.frames.size() == real.frames.size() && !sim.frames.empty() &&
               std::equal(sim.frames.begin(), sim.frames.end(), real.frames.begin(),
                          [](const Frame& a, const Frame& b) { return a.frame_id == b.frame_id; });
    if (r.paired) {
        double acc = 0;
        for (std::size_t i = 0; i < sim.frames.size(); ++i) {
            const auto s = detail::occupied_azimuths(sim.frames[i].cloud, azimuth_bins, near_range);
            const auto t = detail::occupied_azimuths(real.frames[i].cloud, azimuth_bins, near_range);
            std::size_t lit = 0, lost = 0;
            for (std::size_t k = 0; k < azimuth_bins; ++k) {
                lit += s[k];
                lost += s[k] && !t[k];
            }
            acc += lit ? static_cast<double>(lost) / static_cast<double>(lit) : 0.0;
        }
        r.shadow_coverage = acc / static_cast<double>(sim.frames.size());
    }
    if (sim.labeled) r.sim_out_of_box = out_of_box(sim);
    if (real.labeled) r.real_out_of_box = out_of_box(real);
    return r;
}

//////////////////////////// emitters ////////////////////////////

inline std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

inline std::string class_histogram_csv(const ClassHistogram& h) {
    std::string out = "class,count\n";
    for (ClassId c : kAllClasses) {
        auto it = h.find(c);
        out += std::string(class_name(c)) + "," + std::to_string(it == h.end() ? 0 : it->second) + "\n";
    }
    return out;
}

inline std::string polar_density_csv(const PolarDensityMap& m) {
    std::string out = m.log_scaled ? "range_lo,range_hi,azimuth_lo,azimuth_hi,count,log1p_count\n"
                                   : "range_lo,range_hi,azimuth_lo,azimuth_hi,count,frequency\n";
    for (std::size_t r = 0; r < m.range_bins(); ++r)
        for (std::size_t a = 0; a < m.azimuth_bins(); ++a)
            out += fmt("%.4f", m.range_edges[r]) + "," + fmt("%.4f", m.range_edges[r + 1]) + "," +
                   fmt("%.6f", m.azimuth_edges[a]) + "," + fmt("%.6f", m.azimuth_edges[a + 1]) + "," +
                   std::to_string(m.count(r, a)) + "," + fmt("%.6f", m.emitted(r, a)) + "\n";
    return out;
}

inline std::string points_per_box_csv(const PointsPerBoxCurve& c) {
    std::string out = "range,points,class\n";
    for (const BoxSample& s : c)
        out += fmt("%.4f", s.range) + "," + std::to_string(s.points) + "," + std::string(class_name(s.cls)) + "\n";
    return out;
}

inline std::string gap_report_csv(const GapReport& r) {
    std::string out = "statistic,value\n";
    auto row = [&](const std::string& k, const std::string& v) { out += k + "," + v + "\n"; };
    for (auto [name, s] : {std::pair{"sim", r.sim_points}, std::pair{"real", r.real_points}}) {
        row(std::string(name) + "_points_min", std::to_string(s.min));
        row(std::string(name) + "_points_median", fmt("%.1f", s.median));
        row(std::string(name) + "_points_max", std::to_string(s.max));
    }
    row("paired", r.paired ? "1" : "0");
    row("dropout_estimate", fmt("%.6f", r.dropout_estimate));
    row("shadow_coverage", fmt("%.6f", r.shadow_coverage));
    for (auto [name, oob] : {std::pair{"sim", &r.sim_out_of_box}, std::pair{"real", &r.real_out_of_box}}) {
        if (!*oob) continue;
        for (ClassId c : kAllClasses)
            row(std::string(name) + "_out_of_box_" + std::string(class_name(c)), fmt("%.6f", fraction_for(**oob, c)));
    }
    return out;
}

inline std::string svg_open(int w, int h) {
    return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) + "\" height=\"" +
           std::to_string(h) + "\" viewBox=\"0 0 " + std::to_string(w) + " " + std::to_string(h) + "\">\n";
}

inline std::string class_histogram_svg(const ClassHistogram& h) {
    std::size_t peak = 1;
    for (auto [c, n] : h) peak = std::max(peak, n);
    std::string out = svg_open(240, 180);
    int x = 30;
    for (ClassId c : kAllClasses) {
        auto it = h.find(c);
        const double n = it == h.end() ? 0.0 : static_cast<double>(it->second);
        const double bh = 140.0 * n / static_cast<double>(peak);
        out += "<rect x=\"" + std::to_string(x) + "\" y=\"" + fmt("%.2f", 150 - bh) + "\" width=\"70\" height=\"" +
               fmt("%.2f", bh) + "\" fill=\"#4477aa\"/>\n";
        out += "<text x=\"" + std::to_string(x) + "\" y=\"170\" font-size=\"12\">" + std::string(class_name(c)) + " " +
               fmt("%.0f", n) + "</text>\n";
        x += 100;
    }
    return out + "</svg>\n";
}

/// Annular-sector heatmap around the sensor, one path per non-empty cell.
inline std::string polar_density_svg(const PolarDensityMap& m) {
    double peak = 0;
    for (std::size_t r = 0; r < m.range_bins(); ++r)
        for (std::size_t a = 0; a < m.azimuth_bins(); ++a) peak = std::max(peak, m.emitted(r, a));
    const double cx = 200, cy = 200, scale = 180.0 / m.range_edges.back();
    std::string out = svg_open(400, 400);
    out += "<circle cx=\"200\" cy=\"200\" r=\"180\" fill=\"#f4f4f4\" stroke=\"#999\"/>\n";
    for (std::size_t r = 0; r < m.range_bins(); ++r)
        for (std::size_t a = 0; a < m.azimuth_bins(); ++a) {
            const double v = m.emitted(r, a);
            if (v <= 0) continue;
            const double r0 = m.range_edges[r] * scale, r1 = m.range_edges[r + 1] * scale;
            const double a0 = m.azimuth_edges[a], a1 = m.azimuth_edges[a + 1];
            // sensor x forward is drawn upward
            auto px = [&](double rad, double az) { return fmt("%.2f", cx - rad * std::sin(az)); };
            auto py = [&](double rad, double az) { return fmt("%.2f", cy - rad * std::cos(az)); };
            const int shade = static_cast<int>(std::lround(230.0 * (1.0 - v / peak)));
            out += "<path d=\"M" + px(r0, a0) + "," + py(r0, a0) + " L" + px(r1, a0) + "," + py(r1, a0) + " L" +
                   px(r1, a1) + "," + py(r1, a1) + " L" + px(r0, a1) + "," + py(r0, a1) + " Z\" fill=\"rgb(230," +
                   std::to_string(shade) + "," + std::to_string(shade) + ")\"/>\n";
        }
    return out + "</svg>\n";
}

inline std::string points_per_box_svg(const PointsPerBoxCurve& c) {
    double max_r = 1, max_n = 1;
    for (const BoxSample& s : c) max_r = std::max(max_r, s.range), max_n = std::max(max_n, static_cast<double>(s.points));
    std::string out = svg_open(420, 300);
    out += "<path d=\"M40,260 L400,260 M40,260 L40,20\" stroke=\"#333\" fill=\"none\"/>\n";
    for (const BoxSample& s : c) {
        const double x = 40 + 360 * s.range / max_r;
        const double y = 260 - 240 * std::log1p(static_cast<double>(s.points)) / std::log1p(max_n);
        out += "<circle cx=\"" + fmt("%.2f", x) + "\" cy=\"" + fmt("%.2f", y) + "\" r=\"2\" fill=\"" +
               (s.cls == ClassId::Car ? "#4477aa" : "#cc6677") + "\"/>\n";
    }
    return out + "</svg>\n";
}

}  // namespace s2r::diag
