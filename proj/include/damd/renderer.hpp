#pragma once

// Z-buffer triangle rasterizer for mean-texture reconstructions and landmark
// overlays. Screen space is the image plane of the weak-perspective projection:
// x right, y down, pixel (i, j) covers [i, i+1) x [j, j+1) and is sampled at its
// center. Depth is the rotated z (toward the viewer), larger wins.

#include "damd/image.hpp"
#include "damd/morphable_model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

namespace damd {

struct Framebuffer {
    std::size_t width = 0, height = 0;
    Image color;
    std::vector<double> depth;        ///< -inf where nothing was drawn
    std::vector<std::int64_t> owner;  ///< winning triangle index, -1 where nothing was drawn

    Framebuffer(std::size_t w, std::size_t h, const Image* background = nullptr,
                std::array<float, 3> fill = {0.0f, 0.0f, 0.0f})
        : width(w), height(h), color(w, h, fill), depth(w * h, -std::numeric_limits<double>::infinity()),
          owner(w * h, -1)
    {
        if (w == 0 || h == 0)
            throw ConfigError("framebuffer dimensions must be positive");
        if (background) {
            if (background->width != w || background->height != h)
                throw DimensionError("background image size does not match the framebuffer");
            color = *background;
        }
    }
};

struct RasterStats {
    std::size_t degenerate = 0; ///< zero-area or non-finite triangles skipped
    std::size_t fragments = 0;  ///< covered pixel samples, before depth testing
};

struct ScreenVertex {
    double x, y, z;
};

namespace detail {

inline double edge(const ScreenVertex& a, const ScreenVertex& b, double px, double py)
{
    return (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x);
}

/// Edge a->b of a triangle whose interior has positive edge values. Samples
/// exactly on the edge belong to the triangle only for top and left edges.
inline bool top_left(const ScreenVertex& a, const ScreenVertex& b)
{
    const double dx = b.x - a.x, dy = b.y - a.y;
    return (dy == 0.0 && dx > 0.0) || dy < 0.0;
}

} // namespace detail

/// Fills triangles into `fb`. `colors` holds one RGB per vertex, `shade` one
/// multiplier per triangle (empty = 1). `order` optionally permutes the
/// drawing sequence; the result does not depend on it.
inline RasterStats rasterize(Framebuffer& fb, std::span<const ScreenVertex> verts,
                             std::span<const std::array<float, 3>> colors, std::span<const Triangle> tris,
                             std::span<const float> shade = {}, std::span<const std::size_t> order = {})
{
    RasterStats stats;
    std::vector<std::size_t> seq(tris.size());
    std::iota(seq.begin(), seq.end(), 0);
    if (!order.empty()) {
        if (order.size() != tris.size())
            throw DimensionError("rasterize: draw order must list every triangle once");
        seq.assign(order.begin(), order.end());
    }
    for (std::size_t ti : seq) {
        const Triangle& t = tris[ti];
        ScreenVertex v0 = verts[t.a], v1 = verts[t.b], v2 = verts[t.c];
        std::size_t i0 = t.a, i1 = t.b, i2 = t.c;
        double area = detail::edge(v0, v1, v2.x, v2.y);
        if (!std::isfinite(area) || area == 0.0) {
            ++stats.degenerate;
            continue;
        }
        if (area < 0.0) {
            std::swap(v1, v2);
            std::swap(i1, i2);
            area = -area;
        }
        const bool tl0 = detail::top_left(v1, v2), tl1 = detail::top_left(v2, v0), tl2 = detail::top_left(v0, v1);
        const double minx = std::min({v0.x, v1.x, v2.x}), maxx = std::max({v0.x, v1.x, v2.x});
        const double miny = std::min({v0.y, v1.y, v2.y}), maxy = std::max({v0.y, v1.y, v2.y});
        const auto lo = [](double v) { return static_cast<long long>(std::max(0.0, std::floor(v - 0.5))); };
        const long long x0 = lo(minx), y0 = lo(miny);
        const long long x1 = std::min(static_cast<long long>(fb.width) - 1, static_cast<long long>(std::ceil(maxx)));
        const long long y1 = std::min(static_cast<long long>(fb.height) - 1, static_cast<long long>(std::ceil(maxy)));
        const float s = shade.empty() ? 1.0f : shade[ti];
        for (long long py = y0; py <= y1; ++py)
            for (long long px = x0; px <= x1; ++px) {
                const double cx = static_cast<double>(px) + 0.5, cy = static_cast<double>(py) + 0.5;
                const double w0 = detail::edge(v1, v2, cx, cy);
                const double w1 = detail::edge(v2, v0, cx, cy);
                const double w2 = detail::edge(v0, v1, cx, cy);
                if (w0 < 0.0 || w1 < 0.0 || w2 < 0.0)
                    continue;
                if ((w0 == 0.0 && !tl0) || (w1 == 0.0 && !tl1) || (w2 == 0.0 && !tl2))
                    continue;
                ++stats.fragments;
                const double b0 = w0 / area, b1 = w1 / area, b2 = w2 / area;
                const double z = b0 * v0.z + b1 * v1.z + b2 * v2.z;
                const std::size_t pix = static_cast<std::size_t>(py) * fb.width + static_cast<std::size_t>(px);
                const auto idx = static_cast<std::int64_t>(ti);
                if (z < fb.depth[pix] || (z == fb.depth[pix] && fb.owner[pix] >= 0 && fb.owner[pix] < idx))
                    continue;
                fb.depth[pix] = z;
                fb.owner[pix] = idx;
                for (std::size_t c = 0; c < 3; ++c)
                    fb.color.at(static_cast<std::size_t>(px), static_cast<std::size_t>(py), c) =
                        s * static_cast<float>(b0 * colors[i0][c] + b1 * colors[i1][c] + b2 * colors[i2][c]);
            }
    }
    return stats;
}

struct RenderOptions {
    float ambient = 0.35f;
    float diffuse = 0.65f; ///< Lambertian term for a headlight along +z
};

/// Screen-space vertices of V(P) = M (S + t): (x, y) image position, z depth.
inline std::vector<ScreenVertex> screen_vertices(const MorphableModel& model, const ParamVector& p)
{
    const auto v = reconstruct_vertices(model, p);
    std::vector<ScreenVertex> out(model.num_vertices);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = {v[3 * i], v[3 * i + 1], v[3 * i + 2]};
    return out;
}

/// Flat Lambertian factor per triangle from its screen-space normal.
inline std::vector<float> headlight_shading(std::span<const ScreenVertex> verts, std::span<const Triangle> tris,
                                            const RenderOptions& opt = {})
{
    std::vector<float> shade(tris.size());
    for (std::size_t i = 0; i < tris.size(); ++i) {
        const auto& a = verts[tris[i].a];
        const auto& b = verts[tris[i].b];
        const auto& c = verts[tris[i].c];
        const Vec3 n = Vec3(b.x - a.x, b.y - a.y, b.z - a.z).cross(Vec3(c.x - a.x, c.y - a.y, c.z - a.z));
        const double len = n.norm();
        const double lambert = len > 0.0 ? std::abs(n.z()) / len : 0.0;
        shade[i] = opt.ambient + opt.diffuse * static_cast<float>(lambert);
    }
    return shade;
}

/// Mean-texture reconstruction of P drawn over `background` (or a flat fill).
inline Framebuffer render_model(const MorphableModel& model, const ParamVector& p, std::size_t width,
                                std::size_t height, const Image* background = nullptr,
                                std::array<float, 3> fill = {0.0f, 0.0f, 0.0f}, const RenderOptions& opt = {},
                                RasterStats* stats = nullptr)
{
    Framebuffer fb(width, height, background, fill);
    const auto verts = screen_vertices(model, p);
    std::vector<std::array<float, 3>> colors(model.num_vertices);
    for (std::size_t i = 0; i < colors.size(); ++i)
        colors[i] = {model.mean_texture[3 * i], model.mean_texture[3 * i + 1], model.mean_texture[3 * i + 2]};
    const auto shade = headlight_shading(verts, model.triangles, opt);
    const auto s = rasterize(fb, verts, colors, model.triangles, shade);
    if (stats)
        *stats = s;
    return fb;
}

inline constexpr std::array<float, 3> kVisibleColor{0.0f, 1.0f, 0.0f};
inline constexpr std::array<float, 3> kInvisibleColor{1.0f, 0.0f, 0.0f};

/// Filled discs (radius in pixels, measured from pixel centers) at each landmark;
/// points outside the frame are clipped.
inline void overlay_landmarks(Image& img, std::span<const double> landmarks, const std::vector<bool>& visibility,
                              double radius = 2.0)
{
    if (landmarks.size() % 2 != 0)
        throw DimensionError("overlay_landmarks: coordinate list must hold (x, y) pairs");
    const std::size_t n = landmarks.size() / 2;
    for (std::size_t j = 0; j < n; ++j) {
        const double x = landmarks[2 * j], y = landmarks[2 * j + 1];
        if (!std::isfinite(x) || !std::isfinite(y))
            throw DataError("overlay_landmarks: non-finite coordinate");
        const bool vis = j < visibility.size() ? visibility[j] : true;
        const long long x0 = static_cast<long long>(std::floor(x - radius - 1.0));
        const long long y0 = static_cast<long long>(std::floor(y - radius - 1.0));
        for (long long py = std::max(0LL, y0); py <= y0 + static_cast<long long>(2 * radius + 2.0); ++py)
            for (long long px = std::max(0LL, x0); px <= x0 + static_cast<long long>(2 * radius + 2.0); ++px) {
                if (px >= static_cast<long long>(img.width) || py >= static_cast<long long>(img.height))
                    continue;
                const double dx = static_cast<double>(px) + 0.5 - x, dy = static_cast<double>(py) + 0.5 - y;
                if (dx * dx + dy * dy <= radius * radius)
                    img.set(static_cast<std::size_t>(px), static_cast<std::size_t>(py),
                            vis ? kVisibleColor : kInvisibleColor);
            }
    }
}

} // namespace damd
