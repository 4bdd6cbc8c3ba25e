#pragma once

// Little-endian primitives shared by the model and weights file formats.

#include "damd/error.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

namespace damd::io {

template <typename U>
void put_le(std::vector<char>& out, U value)
{
    static_assert(std::is_unsigned_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i)
        out.push_back(static_cast<char>((value >> (8 * i)) & 0xFFu));
}

inline void put_f32(std::vector<char>& out, float value) { put_le(out, std::bit_cast<std::uint32_t>(value)); }

inline void put_bytes(std::vector<char>& out, std::string_view bytes) { out.insert(out.end(), bytes.begin(), bytes.end()); }

/// Bounds-checked reader over an in-memory file.
class Reader {
public:
    Reader(std::vector<char> bytes, std::string source) : bytes_(std::move(bytes)), source_(std::move(source)) {}

    template <typename U>
    U get_le()
    {
        need(sizeof(U));
        U value = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i)
            value |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += sizeof(U);
        return value;
    }

    float get_f32() { return std::bit_cast<float>(get_le<std::uint32_t>()); }

    std::string get_bytes(std::size_t n)
    {
        need(n);
        std::string s(bytes_.data() + pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t position() const { return pos_; }
    void seek(std::size_t pos)
    {
        if (pos > bytes_.size())
            throw DataError(source_ + ": offset " + std::to_string(pos) + " past end of file");
        pos_ = pos;
    }
    std::size_t size() const { return bytes_.size(); }
    const std::string& source() const { return source_; }

private:
    void need(std::size_t n) const
    {
        if (pos_ + n > bytes_.size())
            throw DataError(source_ + ": truncated file (need " + std::to_string(n) + " bytes at offset " +
                            std::to_string(pos_) + ")");
    }

    std::vector<char> bytes_;
    std::string source_;
    std::size_t pos_ = 0;
};

inline std::vector<char> read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("cannot open " + path.string());
    return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, std::span<const char> bytes)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw DataError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw DataError("write failed for " + path.string());
}

} // namespace damd::io
