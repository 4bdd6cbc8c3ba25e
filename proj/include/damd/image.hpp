#pragma once

// RGB float images in [0,1] and binary PPM (P6, 8-bit) I/O.

#include "damd/binary_io.hpp"
#include "damd/error.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

namespace damd {

struct Image {
    std::size_t width = 0, height = 0;
    std::vector<float> rgb; ///< row-major, 3 floats per pixel

    Image() = default;
    Image(std::size_t w, std::size_t h, std::array<float, 3> fill = {0.0f, 0.0f, 0.0f})
        : width(w), height(h), rgb(3 * w * h)
    {
        for (std::size_t i = 0; i < w * h; ++i)
            std::copy(fill.begin(), fill.end(), rgb.begin() + static_cast<std::ptrdiff_t>(3 * i));
    }

    float& at(std::size_t x, std::size_t y, std::size_t c) { return rgb[3 * (y * width + x) + c]; }
    float at(std::size_t x, std::size_t y, std::size_t c) const { return rgb[3 * (y * width + x) + c]; }

    void set(std::size_t x, std::size_t y, std::array<float, 3> color)
    {
        for (std::size_t c = 0; c < 3; ++c)
            at(x, y, c) = color[c];
    }

    bool operator==(const Image&) const = default;
};

inline std::uint8_t to_byte(float v)
{
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline std::vector<char> encode_ppm(const Image& img)
{
    const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<char> out(header.begin(), header.end());
    out.reserve(out.size() + img.rgb.size());
    for (float v : img.rgb)
        out.push_back(static_cast<char>(to_byte(v)));
    return out;
}

inline Image decode_ppm(const std::vector<char>& bytes, const std::string& source)
{
    std::size_t pos = 0;
    auto token = [&]() {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#')
                while (pos < bytes.size() && bytes[pos] != '\n')
                    ++pos;
            else if (std::isspace(static_cast<unsigned char>(bytes[pos])))
                ++pos;
            else
                break;
        }
        std::string t;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos])))
            t.push_back(bytes[pos++]);
        return t;
    };
    if (token() != "P6")
        throw DataError(source + ": not a binary PPM (P6) image");
    Image img;
    std::size_t maxval = 0;
    try {
        img.width = std::stoul(token());
        img.height = std::stoul(token());
        maxval = std::stoul(token());
    } catch (const std::exception&) {
        throw DataError(source + ": malformed PPM header");
    }
    if (maxval != 255 || img.width == 0 || img.height == 0)
        throw DataError(source + ": only 8-bit PPM images with positive size are supported");
    ++pos; // single whitespace after maxval
    const std::size_t n = 3 * img.width * img.height;
    if (pos + n > bytes.size())
        throw DataError(source + ": truncated PPM pixel data");
    img.rgb.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        img.rgb[i] = static_cast<float>(static_cast<unsigned char>(bytes[pos + i])) / 255.0f;
    return img;
}

inline void write_ppm(const std::filesystem::path& path, const Image& img) { io::write_file(path, encode_ppm(img)); }

inline Image read_ppm(const std::filesystem::path& path) { return decode_ppm(io::read_file(path), path.string()); }

/// Values as stored in an 8-bit file, so in-memory and reloaded images compare equal.
inline Image quantize(Image img)
{
    for (float& v : img.rgb)
        v = static_cast<float>(to_byte(v)) / 255.0f;
    return img;
}

} // namespace damd
