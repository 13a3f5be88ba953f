#pragma once

// File formats:
//   cloud      .bin    little-endian float32 (x, y, z, intensity) per point, no header
//   labels     .jsonl  one box per line:
//                      {"class":"Car","center":[x,y,z],"size":[l,w,h],"yaw":r,"score":s}
//   manifest   manifest.json listing frame id, cloud path, label path, domain tag

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "s2r/core.hpp"

namespace s2r::io {

namespace fs = std::filesystem;
using nlohmann::json;

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IoError("read failed: " + path.string());
    return ss.str();
}

inline void write_file(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace detail

inline std::string encode_cloud(const PointCloud& cloud) {
    std::string bytes;
    bytes.reserve(cloud.size() * 16);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const Point& p = cloud.points[i];
        if (!is_valid_point(p))
            throw FormatError("point " + std::to_string(i) + " is non-finite or has intensity outside [0,1]");
        for (float v : {p.x, p.y, p.z, p.intensity}) detail::put_u32_le(bytes, std::bit_cast<std::uint32_t>(v));
    }
    return bytes;
}

inline PointCloud decode_cloud(const std::string& bytes) {
    if (bytes.size() % 16 != 0)
        throw FormatError("cloud byte length " + std::to_string(bytes.size()) + " is not a multiple of 16");
    PointCloud cloud;
    cloud.points.resize(bytes.size() / 16);
    const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
    for (std::size_t i = 0; i < cloud.points.size(); ++i) {
        const unsigned char* q = raw + 16 * i;
        Point p{std::bit_cast<float>(detail::get_u32_le(q)), std::bit_cast<float>(detail::get_u32_le(q + 4)),
                std::bit_cast<float>(detail::get_u32_le(q + 8)), std::bit_cast<float>(detail::get_u32_le(q + 12))};
        if (!is_valid_point(p)) throw FormatError("point " + std::to_string(i) + " is non-finite or out of range");
        cloud.points[i] = p;
    }
    return cloud;
}

inline PointCloud read_cloud(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("missing cloud file: " + path.string());
    return decode_cloud(detail::read_file(path));
}

inline void write_cloud(const PointCloud& cloud, const fs::path& path) {
    const std::string bytes = encode_cloud(cloud);  // validates before touching the file
    detail::write_file(path, bytes);
}

//////////////////////////// annotations ////////////////////////////

inline json box_to_json(const Box3D& b) {
    json j;
    j["class"] = std::string(class_name(b.cls));
    j["center"] = {b.center.x, b.center.y, b.center.z};
    j["size"] = {b.size.x, b.size.y, b.size.z};
    j["yaw"] = b.yaw;
    if (b.score) j["score"] = *b.score;
    return j;
}

inline Box3D box_from_json(const json& j) {
    if (!j.is_object()) throw FormatError("record is not an object");
    for (const auto& [key, _] : j.items())
        if (key != "class" && key != "center" && key != "size" && key != "yaw" && key != "score")
            throw FormatError("unknown key '" + key + "'");
    auto vec3 = [&](const char* key) {
        if (!j.contains(key) || !j[key].is_array() || j[key].size() != 3)
            throw FormatError(std::string("'") + key + "' must be an array of 3 numbers");
        Vec3 v;
        double* dst[3] = {&v.x, &v.y, &v.z};
        for (int i = 0; i < 3; ++i) {
            if (!j[key][i].is_number()) throw FormatError(std::string("'") + key + "' must hold numbers");
            *dst[i] = j[key][i].get<double>();
        }
        return v;
    };
    Box3D b;
    if (!j.contains("class") || !j["class"].is_string()) throw FormatError("missing 'class'");
    auto cls = parse_class(j["class"].get<std::string>());
    if (!cls) throw FormatError("unknown class '" + j["class"].get<std::string>() + "'");
    b.cls = *cls;
    b.center = vec3("center");
    b.size = vec3("size");
    if (!j.contains("yaw") || !j["yaw"].is_number()) throw FormatError("missing numeric 'yaw'");
    b.yaw = normalize_yaw(j["yaw"].get<double>());
    if (j.contains("score")) {
        if (!j["score"].is_number()) throw FormatError("'score' must be a number");
        b.score = j["score"].get<double>();
    }
    if (!is_valid_box(b)) throw FormatError("box sizes must be > 0, values finite, score in [0,1]");
    return b;
}

inline std::vector<Box3D> parse_annotations(const std::string& text) {
    std::vector<Box3D> boxes;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            boxes.push_back(box_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw FormatError("line " + std::to_string(line_no) + ": " + e.what());
        } catch (const FormatError& e) {
            throw FormatError("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return boxes;
}

inline std::vector<Box3D> read_annotations(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("missing annotation file: " + path.string());
    return parse_annotations(detail::read_file(path));
}

inline void write_annotations(const std::vector<Box3D>& boxes, const fs::path& path) {
    std::string text;
    for (const Box3D& b : boxes) {
        if (!is_valid_box(b)) throw FormatError("refusing to write invalid box");
        text += box_to_json(b).dump();
        text += '\n';
    }
    detail::write_file(path, text);
}

//////////////////////////// datasets ////////////////////////////

/// Writes a dataset as `dir/manifest.json`, `dir/clouds/*.bin`, `dir/labels/*.jsonl`.
/// Unlabeled datasets get no label files.
inline void save_dataset(const Dataset& ds, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir / "clouds", ec);
    if (ds.labeled) fs::create_directories(dir / "labels", ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    json manifest;
    manifest["name"] = ds.name;
    manifest["seed"] = ds.seed ? json(*ds.seed) : json(nullptr);
    manifest["labeled"] = ds.labeled;
    manifest["frames"] = json::array();
    for (const Frame& f : ds.frames) {
        json entry;
        entry["frame_id"] = f.frame_id;
        entry["cloud"] = "clouds/" + f.frame_id + ".bin";
        entry["annotations"] = ds.labeled ? json("labels/" + f.frame_id + ".jsonl") : json(nullptr);
        entry["domain"] = std::string(domain_name(f.domain));
        write_cloud(f.cloud, dir / entry["cloud"].get<std::string>());
        if (ds.labeled) write_annotations(f.boxes, dir / entry["annotations"].get<std::string>());
        manifest["frames"].push_back(std::move(entry));
    }
    detail::write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline Dataset load_dataset(const fs::path& dir) {
    const fs::path mpath = dir / "manifest.json";
    if (!fs::exists(mpath)) throw IoError("missing manifest: " + mpath.string());
    json manifest;
    try {
        manifest = json::parse(detail::read_file(mpath));
    } catch (const json::exception& e) {
        throw FormatError(mpath.string() + ": " + e.what());
    }
    Dataset ds;
    try {
        ds.name = manifest.at("name").get<std::string>();
        if (!manifest.at("seed").is_null()) ds.seed = manifest.at("seed").get<std::uint64_t>();
        ds.labeled = manifest.value("labeled", true);
        for (const json& entry : manifest.at("frames")) {
            Frame f;
            f.frame_id = entry.at("frame_id").get<std::string>();
            auto domain = parse_domain(entry.at("domain").get<std::string>());
            if (!domain) throw FormatError("bad domain tag in " + mpath.string());
            f.domain = *domain;
            f.cloud = read_cloud(dir / entry.at("cloud").get<std::string>());
            if (!entry.at("annotations").is_null())
                f.boxes = read_annotations(dir / entry.at("annotations").get<std::string>());
            for (const Frame& other : ds.frames)
                if (other.frame_id == f.frame_id) throw FormatError("duplicate frame_id " + f.frame_id);
            ds.frames.push_back(std::move(f));
        }
    } catch (const json::exception& e) {
        throw FormatError(mpath.string() + ": " + e.what());
    }
    return ds;
}

}  // namespace s2r::io
