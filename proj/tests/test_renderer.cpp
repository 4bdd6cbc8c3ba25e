#include "damd/renderer.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <random>

using namespace damd;

namespace {

struct Scene {
    std::vector<ScreenVertex> verts;
    std::vector<std::array<float, 3>> colors;
    std::vector<Triangle> tris;
};

Scene random_scene(std::mt19937_64& eng, std::size_t size, std::size_t count)
{
    std::uniform_real_distribution<double> pos(-4.0, static_cast<double>(size) + 4.0), depth(-10.0, 10.0);
    std::uniform_real_distribution<float> col(0.0f, 1.0f);
    Scene s;
    for (std::size_t t = 0; t < count; ++t) {
        for (int k = 0; k < 3; ++k) {
            s.verts.push_back({pos(eng), pos(eng), depth(eng)});
            s.colors.push_back({col(eng), col(eng), col(eng)});
        }
        const auto b = static_cast<std::uint32_t>(3 * t);
        s.tris.push_back({b, b + 1, b + 2});
    }
    return s;
}

// Fragment list by an independent half-space test at every pixel center;
// samples exactly on an edge are dropped (measure zero for random scenes).
struct Fragment {
    std::size_t pixel;
    double z;
    std::size_t tri;
};

std::vector<Fragment> fragments(const Scene& s, std::size_t size)
{
    std::vector<Fragment> out;
    for (std::size_t t = 0; t < s.tris.size(); ++t) {
        const auto& a = s.verts[s.tris[t].a];
        const auto& b = s.verts[s.tris[t].b];
        const auto& c = s.verts[s.tris[t].c];
        const double det = (b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y);
        if (det == 0.0)
            continue;
        for (std::size_t py = 0; py < size; ++py)
            for (std::size_t px = 0; px < size; ++px) {
                const double x = static_cast<double>(px) + 0.5, y = static_cast<double>(py) + 0.5;
                // barycentric coordinates by Cramer's rule
                const double l1 = ((x - a.x) * (c.y - a.y) - (c.x - a.x) * (y - a.y)) / det;
                const double l2 = ((b.x - a.x) * (y - a.y) - (x - a.x) * (b.y - a.y)) / det;
                const double l0 = 1.0 - l1 - l2;
                if (l0 > 0.0 && l1 > 0.0 && l2 > 0.0)
                    out.push_back({py * size + px, l0 * a.z + l1 * b.z + l2 * c.z, t});
            }
    }
    return out;
}

} // namespace

TEST(Rasterize, DepthBufferEqualsFragmentListMaximum)
{
    std::mt19937_64 eng(11);
    const std::size_t size = 64;
    for (int trial = 0; trial < 20; ++trial) {
        const auto scene = random_scene(eng, size, 12);
        Framebuffer fb(size, size);
        rasterize(fb, scene.verts, scene.colors, scene.tris);
        std::vector<double> best(size * size, -std::numeric_limits<double>::infinity());
        std::vector<std::int64_t> owner(size * size, -1);
        for (const auto& f : fragments(scene, size))
            if (f.z > best[f.pixel]) {
                best[f.pixel] = f.z;
                owner[f.pixel] = static_cast<std::int64_t>(f.tri);
            }
        for (std::size_t i = 0; i < size * size; ++i) {
            if (std::isinf(best[i]))
                EXPECT_TRUE(std::isinf(fb.depth[i])) << "pixel " << i;
            else
                EXPECT_NEAR(fb.depth[i], best[i], 1e-9) << "pixel " << i;
            EXPECT_EQ(fb.owner[i], owner[i]) << "pixel " << i;
        }
    }
}

TEST(Rasterize, OrderIndependent)
{
    std::mt19937_64 eng(12);
    const std::size_t size = 64;
    for (int trial = 0; trial < 10; ++trial) {
        auto scene = random_scene(eng, size, 16);
        // shared depth plane on two triangles forces exact ties
        for (int k = 0; k < 3; ++k)
            scene.verts[3 + k] = {scene.verts[k].x + 1.0, scene.verts[k].y, 0.0};
        for (int k = 0; k < 3; ++k)
            scene.verts[k].z = 0.0;
        Framebuffer ref(size, size);
        rasterize(ref, scene.verts, scene.colors, scene.tris);
        std::vector<std::size_t> order(scene.tris.size());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), eng);
        Framebuffer fb(size, size);
        rasterize(fb, scene.verts, scene.colors, scene.tris, {}, order);
        EXPECT_EQ(fb.color, ref.color);
        EXPECT_EQ(fb.depth, ref.depth);
        EXPECT_EQ(fb.owner, ref.owner);
    }
}

TEST(Rasterize, AxisAlignedTriangleCoverage)
{
    // right triangle (2,2) (12,2) (2,12): pixel centers with x>2, y>2, x+y<14; centers on the
    // hypotenuse (a right edge) are excluded
    const std::vector<ScreenVertex> v{{2, 2, 0}, {12, 2, 0}, {2, 12, 0}};
    const std::vector<std::array<float, 3>> c(3, {1.0f, 1.0f, 1.0f});
    const std::vector<Triangle> t{{0, 1, 2}};
    Framebuffer fb(16, 16);
    const auto stats = rasterize(fb, v, c, t);
    std::size_t covered = 0;
    for (std::size_t y = 0; y < 16; ++y)
        for (std::size_t x = 0; x < 16; ++x) {
            const double cx = static_cast<double>(x) + 0.5, cy = static_cast<double>(y) + 0.5;
            const bool inside = cx > 2.0 && cy > 2.0 && cx + cy < 14.0;
            EXPECT_EQ(fb.owner[y * 16 + x] == 0, inside) << x << "," << y;
            covered += inside;
        }
    EXPECT_EQ(stats.fragments, covered);
    EXPECT_EQ(covered, 45u);
}

TEST(Rasterize, SharedEdgeIsPaintedOnce)
{
    // square split along its diagonal, diagonal passes through pixel centers
    const std::vector<ScreenVertex> v{{0, 0, 0}, {8, 0, 0}, {8, 8, 0}, {0, 8, 0}};
    const std::vector<std::array<float, 3>> c(4, {1.0f, 1.0f, 1.0f});
    const std::vector<Triangle> t{{0, 1, 2}, {0, 2, 3}};
    Framebuffer fb(8, 8);
    const auto stats = rasterize(fb, v, c, t);
    EXPECT_EQ(stats.fragments, 64u);
    for (auto o : fb.owner)
        EXPECT_GE(o, 0);
}

TEST(Rasterize, FrontTriangleWinsAndDegenerateCounted)
{
    const std::vector<ScreenVertex> v{{0, 0, 1}, {10, 0, 1}, {0, 10, 1}, {0, 0, 5}, {10, 0, 5}, {0, 10, 5},
                                      {1, 1, 0}, {2, 2, 0}, {3, 3, 0}};
    std::vector<std::array<float, 3>> c(9, {0.0f, 0.0f, 1.0f});
    c[3] = c[4] = c[5] = {1.0f, 0.0f, 0.0f};
    const std::vector<Triangle> t{{0, 1, 2}, {3, 4, 5}, {6, 7, 8}};
    Framebuffer fb(10, 10);
    const auto stats = rasterize(fb, v, c, t);
    EXPECT_EQ(stats.degenerate, 1u);
    EXPECT_FLOAT_EQ(fb.color.at(2, 2, 0), 1.0f);
    EXPECT_FLOAT_EQ(fb.color.at(2, 2, 2), 0.0f);
    EXPECT_FLOAT_EQ(fb.color.at(9, 9, 0), 0.0f); // background
}

TEST(Rasterize, BackgroundImageShowsThroughUntouchedPixels)
{
    Image bg(4, 4, {0.2f, 0.3f, 0.4f});
    Framebuffer fb(4, 4, &bg);
    EXPECT_EQ(fb.color, bg);
    Image wrong(3, 4);
    EXPECT_THROW(Framebuffer(4, 4, &wrong), DimensionError);
    EXPECT_THROW(Framebuffer(0, 4), ConfigError);
}

TEST(RenderModel, YawHalfTurnSwapsVisibleSurface)
{
    const auto model = generate_synthetic_model(3, 400);
    EulerPose pose;
    pose.f = 40.0;
    pose.t3d = Vec3(1.5, 1.5, 0.0);
    ParamVector front;
    auto p12 = pose_encode(pose);
    std::copy(p12.begin(), p12.end(), front.values.begin());
    pose.yaw = std::numbers::pi;
    pose.t3d = rotation_from_euler(0.0, pose.yaw, 0.0).transpose() * Vec3(60.0, 60.0, 0.0) / pose.f;
    ParamVector back;
    p12 = pose_encode(pose);
    std::copy(p12.begin(), p12.end(), back.values.begin());

    const auto fb_front = render_model(model, front, 120, 120);
    const auto fb_back = render_model(model, back, 120, 120);
    // Every winning triangle faces the viewer in its own render: its normal z is positive.
    auto facing = [&](const ParamVector& p, std::int64_t tri) {
        const auto sv = screen_vertices(model, p);
        const auto& t = model.triangles[static_cast<std::size_t>(tri)];
        const auto &a = sv[t.a], &b = sv[t.b], &c = sv[t.c];
        return (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    };
    std::size_t front_pos = 0, front_total = 0, back_pos = 0, back_total = 0;
    for (std::size_t i = 0; i < fb_front.owner.size(); ++i) {
        if (fb_front.owner[i] >= 0) {
            ++front_total;
            front_pos += facing(front, fb_front.owner[i]) > 0.0;
        }
        if (fb_back.owner[i] >= 0) {
            ++back_total;
            back_pos += facing(back, fb_back.owner[i]) > 0.0;
        }
    }
    ASSERT_GT(front_total, 100u);
    ASSERT_GT(back_total, 100u);
    // the half turn mirrors x, flipping the winding of whichever surface wins
    const double f = static_cast<double>(front_pos) / static_cast<double>(front_total);
    const double b = static_cast<double>(back_pos) / static_cast<double>(back_total);
    EXPECT_GT(std::abs(f - b), 0.5) << f << " " << b;
}

TEST(Overlay, DiscMatchesDistanceOracle)
{
    std::mt19937_64 eng(13);
    std::uniform_real_distribution<double> pos(-3.0, 35.0);
    for (int trial = 0; trial < 50; ++trial) {
        Image img(32, 32);
        const double x = pos(eng), y = pos(eng);
        const std::vector<double> pts{x, y};
        const bool vis = trial % 2 == 0;
        overlay_landmarks(img, pts, {vis});
        for (std::size_t py = 0; py < 32; ++py)
            for (std::size_t px = 0; px < 32; ++px) {
                const double dx = static_cast<double>(px) + 0.5 - x, dy = static_cast<double>(py) + 0.5 - y;
                const bool in = dx * dx + dy * dy <= 4.0;
                const auto expect = in ? (vis ? kVisibleColor : kInvisibleColor) : std::array<float, 3>{0, 0, 0};
                for (std::size_t c = 0; c < 3; ++c)
                    ASSERT_EQ(img.at(px, py, c), expect[c]) << px << "," << py;
            }
    }
}

TEST(Overlay, CenterAndOutOfFrame)
{
    Image img(21, 21, {0.5f, 0.5f, 0.5f});
    const Image orig = img;
    std::vector<double> outside;
    for (int j = 0; j < 68; ++j) {
        outside.push_back(-50.0 - j);
        outside.push_back(100.0 + j);
    }
    overlay_landmarks(img, outside, std::vector<bool>(68, true));
    EXPECT_EQ(img, orig);
    overlay_landmarks(img, std::vector<double>{10.5, 10.5}, {true});
    EXPECT_EQ(img.at(10, 10, 1), 1.0f);
    EXPECT_THROW(overlay_landmarks(img, std::vector<double>{1.0}, {true}), DimensionError);
}
