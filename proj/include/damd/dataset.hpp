#pragma once

// Dataset and prediction files (JSON lines). Image paths are stored relative
// to the directory holding the JSONL file.

#include "damd/augmentation.hpp"
#include "damd/evaluation.hpp"
#include "damd/error.hpp"
#include "damd/image.hpp"
#include "damd/morphable_model.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace damd {

struct DatasetEntry {
    std::string image_path;
    BBox bbox;
    std::vector<double> landmarks;  ///< 68 (x, y) pairs, source image coordinates
    std::vector<bool> visibility;
    double yaw_deg = 0.0;
    std::optional<ParamVector> params; ///< crop coordinates
};

struct PredictionEntry {
    std::string image_path;
    std::vector<double> landmarks; ///< 68 (x, y) pairs, source image coordinates
};

namespace detail {

[[noreturn]] inline void schema_error(const std::string& source, std::size_t line, const std::string& what)
{
    throw DataError(source + ":" + std::to_string(line) + ": " + what);
}

inline double finite_number(const nlohmann::json& v, const std::string& source, std::size_t line,
                            const std::string& field)
{
    if (!v.is_number())
        schema_error(source, line, "'" + field + "' must be a number");
    const double d = v.get<double>();
    if (!std::isfinite(d))
        schema_error(source, line, "'" + field + "' must be finite");
    return d;
}

inline std::vector<double> parse_points(const nlohmann::json& obj, const std::string& source, std::size_t line)
{
    if (!obj.contains("landmarks") || !obj["landmarks"].is_array() || obj["landmarks"].size() != kNumLandmarks)
        schema_error(source, line, "'landmarks' must be an array of 68 [x, y] pairs");
    std::vector<double> pts;
    pts.reserve(2 * kNumLandmarks);
    for (const auto& p : obj["landmarks"]) {
        if (!p.is_array() || p.size() != 2)
            schema_error(source, line, "each landmark must be an [x, y] pair");
        pts.push_back(finite_number(p[0], source, line, "landmarks"));
        pts.push_back(finite_number(p[1], source, line, "landmarks"));
    }
    return pts;
}

inline std::string parse_path(const nlohmann::json& obj, const std::string& source, std::size_t line)
{
    if (!obj.contains("image_path") || !obj["image_path"].is_string() || obj["image_path"].get<std::string>().empty())
        schema_error(source, line, "'image_path' must be a non-empty string");
    return obj["image_path"].get<std::string>();
}

inline nlohmann::json points_json(const std::vector<double>& pts)
{
    nlohmann::json arr = nlohmann::json::array();
    for (std::size_t j = 0; j + 1 < pts.size(); j += 2)
        arr.push_back({pts[j], pts[j + 1]});
    return arr;
}

template <typename F>
void for_each_json_line(const std::string& text, const std::string& source, F&& f)
{
    std::istringstream in(text);
    std::string raw;
    std::size_t line = 0;
    while (std::getline(in, raw)) {
        ++line;
        if (raw.find_first_not_of(" \t\r") == std::string::npos)
            continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(raw);
        } catch (const nlohmann::json::parse_error& e) {
            schema_error(source, line, std::string("invalid JSON: ") + e.what());
        }
        if (!obj.is_object())
            schema_error(source, line, "expected a JSON object");
        f(obj, line);
    }
}

inline std::string read_text(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("cannot open '" + path.string() + "'");
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary);
    if (!out || !(out << text) || !out.flush())
        throw DataError("cannot write '" + path.string() + "'");
}

} // namespace detail

inline DatasetEntry parse_dataset_line(const nlohmann::json& obj, const std::string& source, std::size_t line)
{
    DatasetEntry e;
    e.image_path = detail::parse_path(obj, source, line);
    if (!obj.contains("bbox") || !obj["bbox"].is_array() || obj["bbox"].size() != 4)
        detail::schema_error(source, line, "'bbox' must be [x, y, w, h]");
    const auto& b = obj["bbox"];
    e.bbox = {detail::finite_number(b[0], source, line, "bbox"), detail::finite_number(b[1], source, line, "bbox"),
              detail::finite_number(b[2], source, line, "bbox"), detail::finite_number(b[3], source, line, "bbox")};
    if (!(e.bbox.w > 0.0) || !(e.bbox.h > 0.0))
        detail::schema_error(source, line, "bbox width and height must be positive");
    e.landmarks = detail::parse_points(obj, source, line);
    if (!obj.contains("visibility") || !obj["visibility"].is_array() || obj["visibility"].size() != kNumLandmarks)
        detail::schema_error(source, line, "'visibility' must be an array of 68 booleans");
    for (const auto& v : obj["visibility"]) {
        if (!v.is_boolean())
            detail::schema_error(source, line, "'visibility' entries must be booleans");
        e.visibility.push_back(v.get<bool>());
    }
    if (!obj.contains("yaw_deg"))
        detail::schema_error(source, line, "missing 'yaw_deg'");
    e.yaw_deg = detail::finite_number(obj["yaw_deg"], source, line, "yaw_deg");
    if (obj.contains("params") && !obj["params"].is_null()) {
        const auto& p = obj["params"];
        if (!p.is_array() || p.size() != kParamDims)
            detail::schema_error(source, line, "'params' must hold 62 numbers");
        ParamVector pv;
        for (std::size_t k = 0; k < kParamDims; ++k)
            pv.values[k] = detail::finite_number(p[k], source, line, "params");
        e.params = pv;
    }
    return e;
}

inline nlohmann::json to_json(const DatasetEntry& e)
{
    nlohmann::json obj;
    obj["image_path"] = e.image_path;
    obj["bbox"] = {e.bbox.x, e.bbox.y, e.bbox.w, e.bbox.h};
    obj["landmarks"] = detail::points_json(e.landmarks);
    obj["visibility"] = e.visibility;
    obj["yaw_deg"] = e.yaw_deg;
    if (e.params)
        obj["params"] = std::vector<double>(e.params->values.begin(), e.params->values.end());
    return obj;
}

inline std::vector<DatasetEntry> parse_dataset(const std::string& text, const std::string& source)
{
    std::vector<DatasetEntry> out;
    detail::for_each_json_line(text, source, [&](const nlohmann::json& obj, std::size_t line) {
        out.push_back(parse_dataset_line(obj, source, line));
    });
    return out;
}

inline std::string format_dataset(const std::vector<DatasetEntry>& entries)
{
    std::string text;
    for (const auto& e : entries)
        text += to_json(e).dump() + "\n";
    return text;
}

inline std::vector<DatasetEntry> read_dataset(const std::filesystem::path& path)
{
    return parse_dataset(detail::read_text(path), path.string());
}

inline void write_dataset(const std::filesystem::path& path, const std::vector<DatasetEntry>& entries)
{
    detail::write_text(path, format_dataset(entries));
}

inline std::filesystem::path resolve_image(const std::filesystem::path& jsonl, const std::string& image_path)
{
    const std::filesystem::path p(image_path);
    return p.is_absolute() ? p : jsonl.parent_path() / p;
}

inline std::vector<PredictionEntry> parse_predictions(const std::string& text, const std::string& source)
{
    std::vector<PredictionEntry> out;
    detail::for_each_json_line(text, source, [&](const nlohmann::json& obj, std::size_t line) {
        out.push_back({detail::parse_path(obj, source, line), detail::parse_points(obj, source, line)});
    });
    return out;
}

inline std::string format_predictions(const std::vector<PredictionEntry>& entries)
{
    std::string text;
    for (const auto& e : entries)
        text += nlohmann::json{{"image_path", e.image_path}, {"landmarks", detail::points_json(e.landmarks)}}.dump() +
                "\n";
    return text;
}

inline std::vector<PredictionEntry> read_predictions(const std::filesystem::path& path)
{
    return parse_predictions(detail::read_text(path), path.string());
}

inline void write_predictions(const std::filesystem::path& path, const std::vector<PredictionEntry>& entries)
{
    detail::write_text(path, format_predictions(entries));
}

/// Dataset entry for a sample whose crop is the whole stored image.
inline DatasetEntry entry_from_sample(const TrainingSample& s, const std::string& image_path)
{
    return {image_path, s.bbox, s.landmarks, s.visibility, s.yaw_deg, s.params};
}

/// Loads and crops every entry; params are required.
inline std::vector<TrainingSample> load_training_samples(const std::filesystem::path& jsonl)
{
    const auto entries = read_dataset(jsonl);
    std::vector<TrainingSample> out;
    out.reserve(entries.size());
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& e = entries[i];
        if (!e.params)
            throw DataError(jsonl.string() + ": entry " + std::to_string(i + 1) + " ('" + e.image_path +
                            "') has no params; training needs 3DMM labels");
        const Image img = read_ppm(resolve_image(jsonl, e.image_path));
        FaceCrop crop = crop_face(img, e.bbox);
        TrainingSample s;
        s.image = std::move(crop.image);
        s.bbox = e.bbox;
        s.params = *e.params;
        s.landmarks = crop.affine.landmarks_to_crop(e.landmarks);
        s.visibility = e.visibility;
        s.yaw_deg = e.yaw_deg;
        out.push_back(std::move(s));
    }
    return out;
}

/// Evaluation samples pairing ground truth with predictions by image_path.
inline std::vector<EvalSample> match_predictions(const std::vector<DatasetEntry>& truth,
                                                 const std::vector<PredictionEntry>& predictions)
{
    std::vector<EvalSample> out;
    for (const auto& p : predictions) {
        const DatasetEntry* match = nullptr;
        for (const auto& t : truth)
            if (t.image_path == p.image_path) {
                match = &t;
                break;
            }
        if (!match)
            throw DataError("prediction for '" + p.image_path + "' has no ground-truth entry");
        out.push_back({p.image_path, match->landmarks, p.landmarks, match->visibility,
                       bbox_normalizer(match->bbox.w, match->bbox.h), match->yaw_deg});
    }
    return out;
}

} // namespace damd
