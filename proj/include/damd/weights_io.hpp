#pragma once

// DAMDWTS1 weights file:
//   "DAMDWTS1" | u64 LE manifest length | manifest JSON | float32 LE payload
// The manifest is an ordered array of {"name", "shape", "dtype"}; tensors are
// stored back to back in manifest order.

#include "damd/binary_io.hpp"
#include "damd/tensor.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace damd {

inline constexpr char kWeightsMagic[] = "DAMDWTS1";

struct WeightRecord {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

inline std::vector<char> encode_weights(const std::vector<WeightRecord>& records)
{
    nlohmann::json manifest = nlohmann::json::array();
    for (const auto& r : records) {
        if (numel_of(r.shape) != r.values.size())
            throw DimensionError("weights: '" + r.name + "' has shape " + shape_str(r.shape) + " but " +
                                 std::to_string(r.values.size()) + " values");
        manifest.push_back({{"name", r.name}, {"shape", r.shape}, {"dtype", "float32"}});
    }
    const std::string text = manifest.dump();
    std::vector<char> out;
    io::put_bytes(out, std::string_view(kWeightsMagic, 8));
    io::put_le<std::uint64_t>(out, text.size());
    io::put_bytes(out, text);
    for (const auto& r : records)
        for (float v : r.values)
            io::put_f32(out, v);
    return out;
}

inline std::vector<WeightRecord> decode_weights(std::vector<char> bytes, const std::string& source)
{
    io::Reader in(std::move(bytes), source);
    if (in.get_bytes(8) != std::string_view(kWeightsMagic, 8))
        throw DataError(source + ": not a DAMDWTS1 weights file");
    const auto len = in.get_le<std::uint64_t>();
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(in.get_bytes(static_cast<std::size_t>(len)));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(source + ": bad manifest: " + e.what());
    }
    if (!manifest.is_array())
        throw DataError(source + ": manifest must be a JSON array");
    std::vector<WeightRecord> records;
    for (const auto& entry : manifest) {
        WeightRecord r;
        try {
            r.name = entry.at("name").get<std::string>();
            r.shape = entry.at("shape").get<Shape>();
            if (entry.at("dtype").get<std::string>() != "float32")
                throw DataError(source + ": unsupported dtype for '" + r.name + "'");
        } catch (const nlohmann::json::exception& e) {
            throw DataError(source + ": bad manifest entry: " + e.what());
        }
        r.values.resize(numel_of(r.shape));
        for (float& v : r.values)
            v = in.get_f32();
        records.push_back(std::move(r));
    }
    if (in.position() != in.size())
        throw DataError(source + ": trailing bytes after payload");
    return records;
}

inline void write_weights(const std::filesystem::path& path, const std::vector<WeightRecord>& records)
{
    io::write_file(path, encode_weights(records));
}

inline std::vector<WeightRecord> read_weights(const std::filesystem::path& path)
{
    return decode_weights(io::read_file(path), path.string());
}

} // namespace damd
