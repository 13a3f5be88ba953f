#pragma once

// Run configuration: one JSON document with sections scene, gap, pillar,
// network, coral, training and eval. The document produced from the defaults
// doubles as the schema: keys it does not contain are rejected, and every
// value must have the type of its default.

#include <string>
#include <string_view>

#include <json.hpp>

#include "s2r/core.hpp"
#include "s2r/detector.hpp"
#include "s2r/eval.hpp"
#include "s2r/io.hpp"
#include "s2r/scenegen.hpp"

namespace s2r::config {

using nlohmann::json;

/// CORAL weight tuned for the desk configuration; the default run stays the baseline.
inline constexpr double kDeskBetaDa = 1000.0;

struct RunConfig {
    scene::SceneConfig scene = scene::desk_scene();
    std::size_t train_frames = 200;
    std::size_t eval_frames = 50;
    scene::GapConfig gap{0.3, true, 0.0, 0.0, true, 0.5};
    det::NetworkConfig network = det::desk_network();
    double beta_da = 0.0;
    det::TrainConfig training;
    det::InferConfig infer{0.05, 0.5, 100};
    eval::Interpolation interpolation = eval::Interpolation::Points41;

    det::TrainConfig train_config() const {
        det::TrainConfig tc = training;
        tc.beta_da = beta_da;
        return tc;
    }
    eval::EvalConfig eval_config() const {
        eval::EvalConfig e;
        e.interpolation = interpolation;
        return e;
    }

    void validate() const {
        scene.validate();
        gap.validate();
        network.validate();
        train_config().validate();
        if (train_frames == 0 || eval_frames == 0) throw ConfigError("scene: frame counts must be >= 1");
        if (!(infer.score_threshold >= 0 && infer.score_threshold <= 1))
            throw ConfigError("eval.score_threshold must lie in [0, 1]");
        if (!(infer.nms_iou >= 0 && infer.nms_iou <= 1)) throw ConfigError("eval.nms_iou must lie in [0, 1]");
    }
};

namespace detail {

constexpr double kDeg = kPi / 180.0;

inline json anchor_json(const det::AnchorSpec& a) {
    return {{"length", a.size.x}, {"width", a.size.y}, {"height", a.size.z},
            {"z", a.z},           {"iou_pos", a.iou_pos}, {"iou_neg", a.iou_neg}};
}

inline det::AnchorSpec anchor_from(const json& j, ClassId cls) {
    return {cls,
            {j.at("length").get<double>(), j.at("width").get<double>(), j.at("height").get<double>()},
            j.at("z").get<double>(),
            j.at("iou_pos").get<double>(),
            j.at("iou_neg").get<double>()};
}

inline bool same_kind(const json& def, const json& v) {
    if (def.is_number_unsigned() || def.is_number_integer()) return v.is_number_integer() && v.get<long long>() >= 0;
    if (def.is_number()) return v.is_number();
    return def.type() == v.type();
}

inline void check_against(const json& schema, const json& doc, const std::string& path) {
    for (auto it = doc.begin(); it != doc.end(); ++it) {
        const std::string key = path.empty() ? it.key() : path + "." + it.key();
        if (!schema.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
        const json& def = schema.at(it.key());
        if (def.is_object()) {
            if (!it.value().is_object()) throw ConfigError("config key '" + key + "' must be an object");
            check_against(def, it.value(), key);
        } else if (def.is_array()) {
            if (!it.value().is_array() || it.value().size() != def.size())
                throw ConfigError("config key '" + key + "' must be an array of " + std::to_string(def.size()));
            for (std::size_t i = 0; i < def.size(); ++i)
                if (!same_kind(def[i], it.value()[i])) throw ConfigError("config key '" + key + "' has a bad element type");
        } else if (!same_kind(def, it.value())) {
            throw ConfigError("config key '" + key + "' must be a " + std::string(def.type_name()) +
                              (def.is_number_unsigned() ? " (non-negative integer)" : ""));
        }
    }
}

}  // namespace detail

inline json to_json(const RunConfig& c) {
    using detail::kDeg;
    const auto& s = c.scene;
    const auto& g = c.network.grid;
    const auto& n = c.network;
    json anchors = json::object();
    for (const auto& a : n.anchors) anchors[std::string(class_name(a.cls))] = detail::anchor_json(a);
    json yaws = json::array();
    for (double y : n.anchor_yaws) yaws.push_back(y / kDeg);
    return {
        {"scene",
         {{"seed", s.seed},
          {"train_frames", c.train_frames},
          {"eval_frames", c.eval_frames},
          {"area", {s.area.x_min, s.area.x_max, s.area.y_min, s.area.y_max, s.area.z_min, s.area.z_max}},
          {"n_cars", {s.n_cars.min, s.n_cars.max}},
          {"n_pedestrians", {s.n_pedestrians.min, s.n_pedestrians.max}},
          {"lidar",
           {{"n_beams", s.lidar.n_beams},
            {"fov_min_deg", s.lidar.fov_min / kDeg},
            {"fov_max_deg", s.lidar.fov_max / kDeg},
            {"azimuth_resolution_deg", s.lidar.azimuth_resolution / kDeg},
            {"max_range", s.lidar.max_range},
            {"sensor_height", s.lidar.sensor_height}}}}},
        {"gap",
         {{"dropout_rate", c.gap.dropout_rate},
          {"ego_shadow", c.gap.ego_shadow},
          {"box_shift_p", c.gap.box_shift_p},
          {"box_shift_max", c.gap.box_shift_max},
          {"intensity_flatten", c.gap.intensity_flatten},
          {"flatten_value", c.gap.flatten_value}}},
        {"pillar",
         {{"range", {g.range.x_min, g.range.x_max, g.range.y_min, g.range.y_max, g.range.z_min, g.range.z_max}},
          {"dx", g.dx},
          {"dy", g.dy},
          {"max_points_per_pillar", g.max_points_per_pillar},
          {"max_pillars", g.max_pillars}}},
        {"network",
         {{"channels", n.channels},
          {"layers_per_block", n.layers_per_block},
          {"block_multipliers", n.block_multipliers},
          {"anchors", anchors},
          {"anchor_yaws_deg", yaws},
          {"beta_cls", n.weights.cls},
          {"beta_loc", n.weights.loc},
          {"beta_dir", n.weights.dir},
          {"focal_alpha", n.focal_alpha},
          {"focal_gamma", n.focal_gamma}}},
        {"coral", {{"beta_da", c.beta_da}}},
        {"training",
         {{"batch_size", c.training.batch_size},
          {"epochs", c.training.epochs},
          {"lr", c.training.lr},
          {"seed", c.training.seed}}},
        {"eval",
         {{"score_threshold", c.infer.score_threshold},
          {"nms_iou", c.infer.nms_iou},
          {"max_detections", c.infer.max_detections},
          {"interpolation", c.interpolation == eval::Interpolation::Points41 ? 41 : 11}}},
    };
}

/// Builds a config from a complete document (defaults merged in) and validates it.
inline RunConfig from_json(const json& j) {
    using detail::kDeg;
    RunConfig c;
    try {
        const json& s = j.at("scene");
        c.scene.seed = s.at("seed").get<std::uint64_t>();
        c.train_frames = s.at("train_frames").get<std::size_t>();
        c.eval_frames = s.at("eval_frames").get<std::size_t>();
        const auto a = s.at("area").get<std::vector<double>>();
        c.scene.area = {a[0], a[1], a[2], a[3], a[4], a[5]};
        c.scene.n_cars = {s.at("n_cars")[0].get<int>(), s.at("n_cars")[1].get<int>()};
        c.scene.n_pedestrians = {s.at("n_pedestrians")[0].get<int>(), s.at("n_pedestrians")[1].get<int>()};
        const json& l = s.at("lidar");
        c.scene.lidar.n_beams = l.at("n_beams").get<std::size_t>();
        c.scene.lidar.fov_min = l.at("fov_min_deg").get<double>() * kDeg;
        c.scene.lidar.fov_max = l.at("fov_max_deg").get<double>() * kDeg;
        c.scene.lidar.azimuth_resolution = l.at("azimuth_resolution_deg").get<double>() * kDeg;
        c.scene.lidar.max_range = l.at("max_range").get<double>();
        c.scene.lidar.sensor_height = l.at("sensor_height").get<double>();

        const json& g = j.at("gap");
        c.gap.dropout_rate = g.at("dropout_rate").get<double>();
        c.gap.ego_shadow = g.at("ego_shadow").get<bool>();
        c.gap.box_shift_p = g.at("box_shift_p").get<double>();
        c.gap.box_shift_max = g.at("box_shift_max").get<double>();
        c.gap.intensity_flatten = g.at("intensity_flatten").get<bool>();
        c.gap.flatten_value = g.at("flatten_value").get<double>();

        const json& p = j.at("pillar");
        const auto r = p.at("range").get<std::vector<double>>();
        c.network.grid.range = {r[0], r[1], r[2], r[3], r[4], r[5]};
        c.network.grid.dx = p.at("dx").get<double>();
        c.network.grid.dy = p.at("dy").get<double>();
        c.network.grid.max_points_per_pillar = p.at("max_points_per_pillar").get<std::size_t>();
        c.network.grid.max_pillars = p.at("max_pillars").get<std::size_t>();

        const json& n = j.at("network");
        c.network.channels = n.at("channels").get<std::size_t>();
        c.network.layers_per_block = n.at("layers_per_block").get<std::array<std::size_t, 3>>();
        c.network.block_multipliers = n.at("block_multipliers").get<std::array<std::size_t, 3>>();
        c.network.anchors.clear();
        for (ClassId cls : kAllClasses)
            if (n.at("anchors").contains(std::string(class_name(cls))))
                c.network.anchors.push_back(detail::anchor_from(n.at("anchors").at(std::string(class_name(cls))), cls));
        c.network.anchor_yaws.clear();
        for (const json& y : n.at("anchor_yaws_deg")) c.network.anchor_yaws.push_back(y.get<double>() * kDeg);
        c.network.weights = {n.at("beta_cls").get<double>(), n.at("beta_loc").get<double>(), n.at("beta_dir").get<double>()};
        c.network.focal_alpha = n.at("focal_alpha").get<double>();
        c.network.focal_gamma = n.at("focal_gamma").get<double>();

        c.beta_da = j.at("coral").at("beta_da").get<double>();
        const json& t = j.at("training");
        c.training.batch_size = t.at("batch_size").get<std::size_t>();
        c.training.epochs = t.at("epochs").get<std::size_t>();
        c.training.lr = t.at("lr").get<double>();
        c.training.seed = t.at("seed").get<std::uint64_t>();

        const json& e = j.at("eval");
        c.infer = {e.at("score_threshold").get<double>(), e.at("nms_iou").get<double>(),
                   e.at("max_detections").get<std::size_t>()};
        const int interp = e.at("interpolation").get<int>();
        if (interp != 11 && interp != 41) throw ConfigError("eval.interpolation must be 11 or 41");
        c.interpolation = interp == 41 ? eval::Interpolation::Points41 : eval::Interpolation::Points11;
    } catch (const json::exception& ex) {
        throw ConfigError(std::string("config: ") + ex.what());
    }
    c.validate();
    return c;
}

/// Checks `doc` against the default schema and merges it over the defaults.
inline json merge_over_defaults(const json& doc) {
    json base = to_json(RunConfig{});
    if (!doc.is_object()) throw ConfigError("config must be a JSON object");
    detail::check_against(base, doc, "");
    base.merge_patch(doc);
    return base;
}

/// Applies `section.key=value` (dotted path, any depth). The value is parsed
/// as JSON when possible, otherwise taken as a string.
inline void apply_override(json& doc, std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) throw ConfigError("--set expects section.key=value, got '" + std::string(assignment) + "'");
    const std::string path(assignment.substr(0, eq));
    const std::string text(assignment.substr(eq + 1));
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    json patch = value;
    std::size_t end = path.size();
    while (true) {
        const std::size_t dot = path.rfind('.', end - 1);
        const std::string key = path.substr(dot == std::string::npos ? 0 : dot + 1, end - (dot == std::string::npos ? 0 : dot + 1));
        if (key.empty()) throw ConfigError("--set: empty key in '" + path + "'");
        patch = json{{key, patch}};
        if (dot == std::string::npos) break;
        end = dot;
    }
    detail::check_against(to_json(RunConfig{}), patch, "");
    doc.merge_patch(patch);
}

inline RunConfig parse(const std::string& text) {
    const json doc = json::parse(text, nullptr, false);
    if (doc.is_discarded()) throw ConfigError("config is not valid JSON");
    return from_json(merge_over_defaults(doc));
}

inline RunConfig load(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IoError("missing config file: " + path.string());
    return parse(io::detail::read_file(path));
}

}  // namespace s2r::config
