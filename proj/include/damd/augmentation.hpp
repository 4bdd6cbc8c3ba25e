#pragma once

// Input cropping and label-level pose augmentation.
//
// A crop enlarges the detector box by 25% about its center, takes the square of
// side max(w', h') and resamples it to 120x120. Crop coordinates map back to the
// source by src = origin + scale * crop (continuous coordinates, pixel centers
// at +0.5).

#include "damd/image.hpp"
#include "damd/morphable_model.hpp"
#include "damd/ops.hpp"
#include "damd/renderer.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <vector>

namespace damd {

inline constexpr std::size_t kCropSize = 120;
inline constexpr double kBoxEnlarge = 1.25;

struct BBox {
    double x = 0, y = 0, w = 0, h = 0;
    bool operator==(const BBox&) const = default;
};

/// crop -> source: src = origin + scale * crop.
struct CropAffine {
    double scale = 1.0;
    double ox = 0.0, oy = 0.0;

    std::array<double, 2> to_source(double cx, double cy) const { return {ox + scale * cx, oy + scale * cy}; }
    std::array<double, 2> to_crop(double sx, double sy) const { return {(sx - ox) / scale, (sy - oy) / scale}; }

    std::vector<double> landmarks_to_source(std::span<const double> pts) const
    {
        std::vector<double> out(pts.size());
        for (std::size_t j = 0; j + 1 < pts.size(); j += 2) {
            const auto s = to_source(pts[j], pts[j + 1]);
            out[j] = s[0];
            out[j + 1] = s[1];
        }
        return out;
    }
    std::vector<double> landmarks_to_crop(std::span<const double> pts) const
    {
        std::vector<double> out(pts.size());
        for (std::size_t j = 0; j + 1 < pts.size(); j += 2) {
            const auto c = to_crop(pts[j], pts[j + 1]);
            out[j] = c[0];
            out[j + 1] = c[1];
        }
        return out;
    }
};

struct FaceCrop {
    BBox source_bbox;
    Image image; ///< kCropSize x kCropSize, RGB in [0,1]
    CropAffine affine;
};

/// The enlarged square region (x, y, side, side) a bbox is cropped from.
inline BBox crop_square(const BBox& b)
{
    if (!(b.w > 0.0) || !(b.h > 0.0))
        throw DataError("bbox width and height must be positive");
    const double side = kBoxEnlarge * std::max(b.w, b.h);
    const double cx = b.x + 0.5 * b.w, cy = b.y + 0.5 * b.h;
    return {cx - 0.5 * side, cy - 0.5 * side, side, side};
}

/// Bilinear sample at continuous position (x, y); outside pixels are black.
inline std::array<float, 3> sample_bilinear(const Image& img, double x, double y)
{
    const double u = x - 0.5, v = y - 0.5;
    const double fx = std::floor(u), fy = std::floor(v);
    const double ax = u - fx, ay = v - fy;
    std::array<float, 3> out{0.0f, 0.0f, 0.0f};
    for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
            const double wgt = (dx ? ax : 1.0 - ax) * (dy ? ay : 1.0 - ay);
            const long long px = static_cast<long long>(fx) + dx, py = static_cast<long long>(fy) + dy;
            if (wgt == 0.0 || px < 0 || py < 0 || px >= static_cast<long long>(img.width) ||
                py >= static_cast<long long>(img.height))
                continue;
            for (std::size_t c = 0; c < 3; ++c)
                out[c] += static_cast<float>(wgt) * img.at(static_cast<std::size_t>(px), static_cast<std::size_t>(py), c);
        }
    return out;
}

inline FaceCrop crop_face(const Image& img, const BBox& bbox, std::size_t size = kCropSize)
{
    const BBox sq = crop_square(bbox);
    if (sq.x >= static_cast<double>(img.width) || sq.y >= static_cast<double>(img.height) || sq.x + sq.w <= 0.0 ||
        sq.y + sq.h <= 0.0)
        throw DataError("crop_face: enlarged bbox does not intersect the image");
    FaceCrop crop;
    crop.source_bbox = bbox;
    crop.affine = {sq.w / static_cast<double>(size), sq.x, sq.y};
    crop.image = Image(size, size);
    for (std::size_t j = 0; j < size; ++j)
        for (std::size_t i = 0; i < size; ++i) {
            const auto s = crop.affine.to_source(static_cast<double>(i) + 0.5, static_cast<double>(j) + 0.5);
            crop.image.set(i, j, sample_bilinear(img, s[0], s[1]));
        }
    return crop;
}

/// Crop-space parameters re-expressed in source coordinates:
/// M' = s M and t' = t + M'^-1 (ox, oy, 0), so M'(S + t') = s M (S + t) + o.
inline ParamVector params_to_source(const ParamVector& p, const CropAffine& affine)
{
    const Mat3 m = affine.scale * p.scaled_rotation();
    if (!(std::abs(m.determinant()) > 0.0))
        throw DataError("params_to_source: singular pose matrix");
    const Vec3 t = p.translation() + m.inverse() * Vec3(affine.ox, affine.oy, 0.0);
    ParamVector out = p;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c)
            out.values[static_cast<std::size_t>(3 * r + c)] = m(r, c);
    for (int i = 0; i < 3; ++i)
        out.values[static_cast<std::size_t>(9 + i)] = t[i];
    return out;
}

/// bbox whose enlarged square is exactly [0,size)^2.
inline BBox full_frame_bbox(std::size_t size = kCropSize)
{
    const double side = static_cast<double>(size) / kBoxEnlarge;
    const double m = 0.5 * (static_cast<double>(size) - side);
    return {m, m, side, side};
}

/// Network input [N,3,S,S] with values mapped from [0,1] to [-1,1].
template <typename T>
Tensor<T> network_input(const std::vector<const Image*>& images)
{
    if (images.empty())
        throw DimensionError("network_input: empty batch");
    const std::size_t s = images.front()->width;
    std::vector<T> data;
    data.reserve(images.size() * 3 * s * s);
    for (const Image* img : images) {
        if (img->width != s || img->height != s)
            throw DimensionError("network_input: images must share one square size");
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < s; ++y)
                for (std::size_t x = 0; x < s; ++x)
                    data.push_back(static_cast<T>(2.0f * img->at(x, y, c) - 1.0f));
    }
    return Tensor<T>(Shape{images.size(), 3, s, s}, std::move(data));
}

// ---------------------------------------------------------------------------
// Training samples

struct TrainingSample {
    Image image;             ///< 120x120 crop
    BBox bbox;               ///< detector box in image coordinates
    ParamVector params;      ///< ground truth in crop coordinates
    std::vector<double> landmarks;  ///< 68 (x, y) pairs
    std::vector<bool> visibility;   ///< 68 flags
    double yaw_deg = 0.0;
};

/// Per-vertex visibility: the area-weighted vertex normal of V(P) faces the viewer (+z).
inline std::vector<bool> vertex_visibility(const MorphableModel& model, const ParamVector& p)
{
    const auto v = reconstruct_vertices(model, p);
    std::vector<Vec3> normals(model.num_vertices, Vec3::Zero());
    auto at = [&v](std::uint32_t i) { return Vec3(v[3 * i], v[3 * i + 1], v[3 * i + 2]); };
    for (const auto& t : model.triangles) {
        const Vec3 n = (at(t.b) - at(t.a)).cross(at(t.c) - at(t.a));
        normals[t.a] += n;
        normals[t.b] += n;
        normals[t.c] += n;
    }
    std::vector<bool> out(model.num_vertices);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = normals[i].z() > 0.0;
    return out;
}

inline std::vector<bool> landmark_visibility(const MorphableModel& model, const ParamVector& p)
{
    const auto all = vertex_visibility(model, p);
    std::vector<bool> out(kNumLandmarks);
    for (std::size_t j = 0; j < kNumLandmarks; ++j)
        out[j] = all[model.landmark_indices[j]];
    return out;
}

inline double yaw_degrees(const ParamVector& p) { return pose_decode(p.pose12()).yaw * 180.0 / std::numbers::pi; }

/// Labels recomputed from params (landmarks, visibility, yaw).
inline void relabel(TrainingSample& s, const MorphableModel& model)
{
    s.landmarks = project_landmarks(model, s.params);
    s.visibility = landmark_visibility(model, s.params);
    s.yaw_deg = yaw_degrees(s.params);
}

/// Largest landmark disagreement between the stored labels and the projection of params.
inline double label_inconsistency(const TrainingSample& s, const MorphableModel& model)
{
    const auto lm = project_landmarks(model, s.params);
    if (s.landmarks.size() != lm.size())
        return std::numeric_limits<double>::infinity();
    double worst = 0.0;
    for (std::size_t i = 0; i < lm.size(); ++i)
        worst = std::max(worst, std::abs(lm[i] - s.landmarks[i]));
    return worst;
}

/// Extra head yaw of delta degrees about the model's own vertical axis:
/// M' = M Ry(delta), t' = Ry(-delta) t (the model origin stays at the same pixel).
/// Labels are recomputed; the image is left unchanged.
inline TrainingSample rotate_profile(const TrainingSample& sample, const MorphableModel& model, double delta_deg)
{
    if (!(std::abs(delta_deg) <= 90.0))
        throw ConfigError("rotate_profile: |delta| must be at most 90 degrees");
    const Mat3 m = sample.params.scaled_rotation();
    if (!m.allFinite() || !(m.determinant() > 0.0))
        throw DataError("rotate_profile: invalid pose, det(M) <= 0");
    if (delta_deg == 0.0)
        return sample;
    const double d = delta_deg * std::numbers::pi / 180.0;
    const Mat3 ry = rotation_from_euler(0.0, d, 0.0);
    const Mat3 m2 = m * ry;
    const Vec3 t2 = ry.transpose() * sample.params.translation();
    TrainingSample out = sample;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c)
            out.params.values[static_cast<std::size_t>(3 * r + c)] = m2(r, c);
    for (int i = 0; i < 3; ++i)
        out.params.values[static_cast<std::size_t>(9 + i)] = t2[i];
    relabel(out, model);
    return out;
}

struct VirtualSampleOptions {
    double max_yaw_deg = 90.0;
    double max_pitch_deg = 30.0;
    double max_roll_deg = 30.0;
    double fill = 0.8;          ///< fraction of the frame covered by the model's [-1,1] extent
    double scale_jitter = 0.05; ///< relative
    double shift_jitter = 3.0;  ///< pixels
    std::array<float, 3> background{0.25f, 0.25f, 0.3f};
};

/// Random full-parameter face rendered into a 120x120 crop with exact labels.
inline TrainingSample synthesize_virtual_sample(const MorphableModel& model, std::uint64_t seed,
                                                const VirtualSampleOptions& opt = {})
{
    std::mt19937_64 eng(seed);
    const double deg = std::numbers::pi / 180.0;
    TrainingSample s;
    for (std::size_t k = 0; k < kIdDims + kExpDims; ++k)
        s.params.values[kPoseDims + k] = model.param_std[kPoseDims + k] * normal(eng);
    EulerPose pose;
    pose.yaw = uniform(eng, -opt.max_yaw_deg, opt.max_yaw_deg) * deg;
    pose.pitch = uniform(eng, -opt.max_pitch_deg, opt.max_pitch_deg) * deg;
    pose.roll = uniform(eng, -opt.max_roll_deg, opt.max_roll_deg) * deg;
    const double size = static_cast<double>(kCropSize);
    pose.f = opt.fill * size / 2.0 * (1.0 + uniform(eng, -opt.scale_jitter, opt.scale_jitter));
    const Vec3 center(0.5 * size + uniform(eng, -opt.shift_jitter, opt.shift_jitter),
                      0.5 * size + uniform(eng, -opt.shift_jitter, opt.shift_jitter), 0.0);
    pose.t3d = rotation_from_euler(pose.pitch, pose.yaw, pose.roll).transpose() * center / pose.f;
    const auto p12 = pose_encode(pose);
    std::copy(p12.begin(), p12.end(), s.params.values.begin());

    s.image = quantize(render_model(model, s.params, kCropSize, kCropSize, nullptr, opt.background).color);
    s.bbox = full_frame_bbox();
    s.landmarks = project_landmarks(model, s.params);
    s.visibility = landmark_visibility(model, s.params);
    s.yaw_deg = pose.yaw / deg;
    return s;
}

} // namespace damd
