#pragma once

// KITTI-style detection metrics. Predictions are matched greedily per frame in
// descending score order, matches from all frames are pooled, and the
// precision-recall curve is swept over every distinct score. AP and AOS are
// the mean interpolated precision (or orientation similarity) at 41 or 11
// equally spaced recall points, in percent.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "s2r/core.hpp"
#include "s2r/io.hpp"
#include "s2r/iou.hpp"

namespace s2r::eval {

enum class Interpolation { Points41, Points11 };
enum class Metric { Bev, ThreeD };

inline const char* metric_name(Metric m) { return m == Metric::Bev ? "bev" : "3d"; }

inline std::size_t recall_points(Interpolation i) { return i == Interpolation::Points41 ? 41 : 11; }

struct Threshold {
    ClassId cls;
    Metric metric;
    double iou;
};

struct EvalConfig {
    std::vector<Threshold> thresholds{
        {ClassId::Car, Metric::Bev, 0.5},         {ClassId::Car, Metric::Bev, 0.7},
        {ClassId::Car, Metric::ThreeD, 0.5},      {ClassId::Car, Metric::ThreeD, 0.7},
        {ClassId::Pedestrian, Metric::Bev, 0.25}, {ClassId::Pedestrian, Metric::Bev, 0.5},
        {ClassId::Pedestrian, Metric::ThreeD, 0.25}, {ClassId::Pedestrian, Metric::ThreeD, 0.5},
    };
    Interpolation interpolation = Interpolation::Points41;

    void validate() const {
        for (const Threshold& t : thresholds)
            if (!(t.iou > 0.0 && t.iou <= 1.0))
                throw ConfigError("eval: IoU threshold " + std::to_string(t.iou) + " outside (0, 1]");
    }
};

/// One prediction after matching: its score, whether it hit a GT, and the
/// orientation similarity (1 + cos dtheta) / 2 if it did.
struct Match {
    double score = 0.0;
    bool tp = false;
    double similarity = 0.0;
};

struct OperatingPoint {
    double score_threshold = 0.0;
    std::size_t tp = 0, fp = 0, fn = 0;
    double recall = 0.0, precision = 0.0, similarity = 0.0;
};

inline double overlap(const Box3D& a, const Box3D& b, Metric m) {
    return m == Metric::Bev ? geom::bev_iou(a, b) : geom::iou3d(a, b);
}

/// Greedy matching within one frame for one class.
inline std::vector<Match> match_frame(const std::vector<Box3D>& preds, const std::vector<Box3D>& gts, ClassId cls,
                                      double threshold, Metric metric) {
    std::vector<const Box3D*> p;
    for (const Box3D& b : preds) {
        if (b.cls != cls) continue;
        if (!b.score) throw Error("eval: prediction without a score");
        p.push_back(&b);
    }
    std::stable_sort(p.begin(), p.end(), [](const Box3D* a, const Box3D* b) { return *a->score > *b->score; });
    std::vector<const Box3D*> g;
    for (const Box3D& b : gts)
        if (b.cls == cls) g.push_back(&b);
    std::vector<char> used(g.size(), 0);
    std::vector<Match> out;
    for (const Box3D* pred : p) {
        double best = -1.0;
        std::size_t best_j = g.size();
        for (std::size_t j = 0; j < g.size(); ++j) {
            if (used[j]) continue;
            const double iou = overlap(*pred, *g[j], metric);
            if (iou > best) best = iou, best_j = j;
        }
        Match m{*pred->score, false, 0.0};
        if (best_j < g.size() && best >= threshold) {
            used[best_j] = 1;
            m.tp = true;
            m.similarity = 0.5 * (1.0 + std::cos(pred->yaw - g[best_j]->yaw));
        }
        out.push_back(m);
    }
    return out;
}

/// Operating points at every distinct score, highest threshold first.
inline std::vector<OperatingPoint> sweep(std::vector<Match> matches, std::size_t num_gt) {
    std::stable_sort(matches.begin(), matches.end(), [](const Match& a, const Match& b) { return a.score > b.score; });
    std::vector<OperatingPoint> pts;
    std::size_t tp = 0, fp = 0;
    double sim = 0.0;
    for (std::size_t i = 0; i < matches.size();) {
        const double s = matches[i].score;
        for (; i < matches.size() && matches[i].score == s; ++i) {
            matches[i].tp ? ++tp : ++fp;
            sim += matches[i].similarity;
        }
        OperatingPoint op;
        op.score_threshold = s;
        op.tp = tp;
        op.fp = fp;
        op.fn = num_gt - tp;
        op.recall = num_gt ? static_cast<double>(tp) / static_cast<double>(num_gt) : 0.0;
        op.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
        op.similarity = sim / static_cast<double>(tp + fp);
        pts.push_back(op);
    }
    return pts;
}

/// Mean over recall points r of max{value(p) : recall(p) >= r}, in percent.
template <class Value>
inline double interpolate(const std::vector<OperatingPoint>& pts, Interpolation interp, Value value) {
    const std::size_t k = recall_points(interp);
    double acc = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        const double r = static_cast<double>(i) / static_cast<double>(k - 1);
        double best = 0.0;
        for (const OperatingPoint& p : pts)
            if (p.recall >= r - 1e-12) best = std::max(best, value(p));
        acc += best;
    }
    return 100.0 * acc / static_cast<double>(k);
}

struct Curve {
    std::vector<OperatingPoint> points;
    std::size_t num_gt = 0;
    double ap = 0.0, aos = 0.0;
};

/// Frames are (predictions, ground truth) pairs; matches are pooled before the sweep.
inline Curve pr_curve(const std::vector<std::pair<std::vector<Box3D>, std::vector<Box3D>>>& frames, ClassId cls,
                      double threshold, Metric metric, Interpolation interp) {
    std::vector<Match> all;
    Curve c;
    for (const auto& [preds, gts] : frames) {
        auto m = match_frame(preds, gts, cls, threshold, metric);
        all.insert(all.end(), m.begin(), m.end());
        for (const Box3D& g : gts) c.num_gt += g.cls == cls;
    }
    c.points = sweep(std::move(all), c.num_gt);
    if (c.num_gt == 0) return c;
    c.ap = interpolate(c.points, interp, [](const OperatingPoint& p) { return p.precision; });
    c.aos = interpolate(c.points, interp, [](const OperatingPoint& p) { return p.similarity; });
    return c;
}

inline double average_precision(const std::vector<Box3D>& preds, const std::vector<Box3D>& gts, ClassId cls,
                                double threshold, Interpolation interp = Interpolation::Points41,
                                Metric metric = Metric::Bev) {
    return pr_curve({{preds, gts}}, cls, threshold, metric, interp).ap;
}

inline double aos(const std::vector<Box3D>& preds, const std::vector<Box3D>& gts, ClassId cls, double threshold,
                  Interpolation interp = Interpolation::Points41) {
    return pr_curve({{preds, gts}}, cls, threshold, Metric::Bev, interp).aos;
}

struct ReportRow {
    std::string label;
    double value = 0.0;
    std::size_t tp = 0, fp = 0, fn = 0;  // at the lowest score threshold
};

struct EvalReport {
    std::vector<ReportRow> rows;

    const ReportRow& row(const std::string& label) const {
        for (const ReportRow& r : rows)
            if (r.label == label) return r;
        throw Error("eval report has no row " + label);
    }
    double value(const std::string& label) const { return row(label).value; }
};

inline std::string class_prefix(ClassId c) { return c == ClassId::Car ? "car" : "ped"; }

inline std::string row_label(const Threshold& t) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%s@%.2f", class_prefix(t.cls).c_str(), metric_name(t.metric), t.iou);
    return buf;
}

using Predictions = std::map<std::string, std::vector<Box3D>>;

/// Dataset-level evaluation. Every dataset frame needs an entry in `preds`
/// (possibly empty) and `preds` may not name frames the dataset lacks.
/// AOS per class is reported at that class's lowest BEV threshold.
inline EvalReport evaluate(const Predictions& preds, const Dataset& ds, const EvalConfig& cfg) {
    cfg.validate();
    if (ds.frames.empty()) throw EmptyDataset("evaluate: dataset '" + ds.name + "' has no frames");
    std::vector<std::pair<std::vector<Box3D>, std::vector<Box3D>>> frames;
    for (const Frame& f : ds.frames) {
        auto it = preds.find(f.frame_id);
        if (it == preds.end()) throw FrameMismatch("evaluate: no predictions for frame " + f.frame_id);
        frames.emplace_back(it->second, f.boxes);
    }
    if (preds.size() != ds.frames.size())
        for (const auto& [id, boxes] : preds)
            if (std::none_of(ds.frames.begin(), ds.frames.end(), [&](const Frame& f) { return f.frame_id == id; }))
                throw FrameMismatch("evaluate: predictions for unknown frame " + id);

    EvalReport report;
    auto push = [&](std::string label, double value, const Curve& c) {
        ReportRow r{std::move(label), value, 0, 0, c.num_gt};
        if (!c.points.empty()) r.tp = c.points.back().tp, r.fp = c.points.back().fp, r.fn = c.points.back().fn;
        report.rows.push_back(r);
    };
    for (ClassId cls : kAllClasses) {
        const Threshold* aos_at = nullptr;
        for (const Threshold& t : cfg.thresholds) {
            if (t.cls != cls) continue;
            const Curve c = pr_curve(frames, cls, t.iou, t.metric, cfg.interpolation);
            push(row_label(t), c.ap, c);
            if (t.metric == Metric::Bev && (!aos_at || t.iou < aos_at->iou)) aos_at = &t;
        }
        if (aos_at) {
            const Curve c = pr_curve(frames, cls, aos_at->iou, Metric::Bev, cfg.interpolation);
            push(class_prefix(cls) + "_aos", c.aos, c);
        }
    }
    return report;
}

inline std::string report_csv(const EvalReport& r) {
    std::string out = "metric,value,tp,fp,fn\n";
    char buf[160];
    for (const ReportRow& row : r.rows) {
        std::snprintf(buf, sizeof buf, "%s,%.4f,%zu,%zu,%zu\n", row.label.c_str(), row.value, row.tp, row.fp, row.fn);
        out += buf;
    }
    return out;
}

inline EvalReport parse_report_csv(const std::string& text) {
    EvalReport r;
    std::size_t pos = text.find('\n');
    if (pos == std::string::npos || text.substr(0, pos) != "metric,value,tp,fp,fn")
        throw FormatError("eval report: missing header");
    ++pos;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string::npos) end = text.size();
        const std::string line = text.substr(pos, end - pos);
        pos = end + 1;
        if (line.empty()) continue;
        char label[64];
        ReportRow row;
        if (std::sscanf(line.c_str(), "%63[^,],%lf,%zu,%zu,%zu", label, &row.value, &row.tp, &row.fp, &row.fn) != 5)
            throw FormatError("eval report: bad row '" + line + "'");
        row.label = label;
        r.rows.push_back(row);
    }
    return r;
}

/// Table-shaped text with an optional baseline delta column.
inline std::string format_table(const EvalReport& r, const EvalReport* baseline = nullptr) {
    std::string out;
    char buf[160];
    std::snprintf(buf, sizeof buf, baseline ? "%-14s %9s %9s %9s\n" : "%-14s %9s\n", "metric", "value", "baseline",
                  "delta");
    out += buf;
    for (const ReportRow& row : r.rows) {
        if (baseline) {
            const double b = baseline->value(row.label);
            std::snprintf(buf, sizeof buf, "%-14s %9.2f %9.2f %+9.2f\n", row.label.c_str(), row.value, b, row.value - b);
        } else {
            std::snprintf(buf, sizeof buf, "%-14s %9.2f\n", row.label.c_str(), row.value);
        }
        out += buf;
    }
    return out;
}

/// Predictions stored like annotations: one JSONL file per frame.
inline void save_predictions(const Predictions& preds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (const auto& [id, boxes] : preds) io::write_annotations(boxes, dir / (id + ".jsonl"));
}

inline Predictions load_predictions(const std::filesystem::path& dir, const Dataset& ds) {
    if (!std::filesystem::is_directory(dir)) throw IoError("predictions directory not found: " + dir.string());
    Predictions p;
    for (const Frame& f : ds.frames) {
        const auto file = dir / (f.frame_id + ".jsonl");
        if (!std::filesystem::exists(file)) throw FrameMismatch("no prediction file for frame " + f.frame_id);
        p[f.frame_id] = io::read_annotations(file);
        for (const Box3D& b : p[f.frame_id])
            if (!b.score) throw FormatError("prediction without a score in " + file.string());
    }
    return p;
}

}  // namespace s2r::eval
