#pragma once

// DAMD3DMM model file:
//   "DAMD3DMM" | u64 LE header length | header JSON | payload
// Header: {"N", "landmark_indices", "triangle_count", "id_dims", "exp_dims",
//          "offsets": {field: byte offset from payload start}}.
// Payload: float32 mean_shape, id_basis (column-major), exp_basis
// (column-major), param_std, mean_texture, then uint32 triangles.

#include "damd/binary_io.hpp"
#include "damd/morphable_model.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace damd {

inline constexpr char kModelMagic[] = "DAMD3DMM";

inline std::vector<char> encode_model(const MorphableModel& model)
{
    model.validate();
    std::vector<char> payload;
    nlohmann::json offsets;
    auto block = [&](const char* name, const std::vector<float>& values) {
        offsets[name] = payload.size();
        for (float v : values)
            io::put_f32(payload, v);
    };
    block("mean_shape", model.mean_shape);
    block("id_basis", model.id_basis);
    block("exp_basis", model.exp_basis);
    block("param_std", model.param_std);
    block("mean_texture", model.mean_texture);
    offsets["triangles"] = payload.size();
    for (const auto& t : model.triangles)
        for (auto i : {t.a, t.b, t.c})
            io::put_le<std::uint32_t>(payload, i);

    const nlohmann::json header = {{"N", model.num_vertices},
                                   {"landmark_indices", model.landmark_indices},
                                   {"triangle_count", model.triangles.size()},
                                   {"id_dims", kIdDims},
                                   {"exp_dims", kExpDims},
                                   {"offsets", offsets}};
    const std::string text = header.dump();
    std::vector<char> out;
    io::put_bytes(out, std::string_view(kModelMagic, 8));
    io::put_le<std::uint64_t>(out, text.size());
    io::put_bytes(out, text);
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

inline MorphableModel decode_model(std::vector<char> bytes, const std::string& source)
{
    const std::size_t total = bytes.size();
    io::Reader in(std::move(bytes), source);
    if (in.get_bytes(8) != std::string_view(kModelMagic, 8))
        throw DataError(source + ": not a DAMD3DMM model file");
    const auto len = static_cast<std::size_t>(in.get_le<std::uint64_t>());
    MorphableModel model;
    nlohmann::json offsets;
    std::size_t triangle_count = 0;
    try {
        const auto header = nlohmann::json::parse(in.get_bytes(len));
        model.num_vertices = header.at("N").get<std::size_t>();
        model.landmark_indices = header.at("landmark_indices").get<std::vector<std::uint32_t>>();
        triangle_count = header.at("triangle_count").get<std::size_t>();
        if (header.at("id_dims").get<std::size_t>() != kIdDims || header.at("exp_dims").get<std::size_t>() != kExpDims)
            throw DataError(source + ": unsupported basis dimensions");
        offsets = header.at("offsets");
    } catch (const nlohmann::json::exception& e) {
        throw DataError(source + ": bad header: " + e.what());
    }
    const std::size_t base = in.position();
    const std::size_t n3 = 3 * model.num_vertices;
    auto block = [&](const char* name, std::size_t count) {
        if (!offsets.contains(name))
            throw DataError(source + ": header lacks offset for " + name);
        in.seek(base + offsets[name].get<std::size_t>());
        std::vector<float> v(count);
        for (float& x : v)
            x = in.get_f32();
        return v;
    };
    model.mean_shape = block("mean_shape", n3);
    model.id_basis = block("id_basis", n3 * kIdDims);
    model.exp_basis = block("exp_basis", n3 * kExpDims);
    model.param_std = block("param_std", kParamDims);
    model.mean_texture = block("mean_texture", n3);
    if (!offsets.contains("triangles"))
        throw DataError(source + ": header lacks offset for triangles");
    in.seek(base + offsets["triangles"].get<std::size_t>());
    model.triangles.resize(triangle_count);
    for (auto& t : model.triangles) {
        t.a = in.get_le<std::uint32_t>();
        t.b = in.get_le<std::uint32_t>();
        t.c = in.get_le<std::uint32_t>();
    }
    if (in.position() != total)
        throw DataError(source + ": " + std::to_string(total - in.position()) + " trailing bytes");
    model.validate();
    return model;
}

inline void write_model(const std::filesystem::path& path, const MorphableModel& model)
{
    io::write_file(path, encode_model(model));
}

inline MorphableModel read_model(const std::filesystem::path& path)
{
    return decode_model(io::read_file(path), path.string());
}

} // namespace damd
