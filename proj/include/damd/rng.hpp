#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>

namespace damd {

inline std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s)
{
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

/// Derives independent, reproducible seeds for named components from one master seed.
/// Streams used by the tools: "model-gen", "data-gen", "init", "shuffle".
class SeedSplitter {
public:
    explicit SeedSplitter(std::uint64_t master) : master_(master) {}

    std::uint64_t seed(std::string_view stream, std::uint64_t index = 0) const
    {
        return splitmix64(splitmix64(master_ ^ fnv1a(stream)) + index);
    }

    std::mt19937_64 engine(std::string_view stream, std::uint64_t index = 0) const
    {
        return std::mt19937_64(seed(stream, index));
    }

private:
    std::uint64_t master_;
};

// Distributions are spelled out instead of using <random>'s, whose output is
// implementation-defined; generated files must be byte-identical across toolchains.

/// Uniform in [0, 1) with 53 random bits.
inline double uniform01(std::mt19937_64& eng)
{
    return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

inline double uniform(std::mt19937_64& eng, double lo, double hi)
{
    return lo + (hi - lo) * uniform01(eng);
}

/// Standard normal via Box-Muller (one draw per call, the sine branch is discarded).
inline double normal(std::mt19937_64& eng)
{
    double u1 = uniform01(eng);
    while (u1 <= 0.0)
        u1 = uniform01(eng);
    const double u2 = uniform01(eng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

} // namespace damd
