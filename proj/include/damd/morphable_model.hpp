#pragma once

// 3D morphable model: shape synthesis S = mean + A_id*a_id + A_exp*a_exp,
// pose parameterization and weak-perspective projection
// S_2d = f * Pr * R * (S + t3d).
//
// Conventions used throughout the library:
//   * model/image axes: x right, y down, z toward the viewer (larger z is nearer);
//   * R = Rz(roll) * Ry(yaw) * Rx(pitch);
//   * pose12 = row-major M = f*R (9 values) followed by t3d in model units
//     (t3d is added before the rotation, not premultiplied by f).

#include "damd/error.hpp"
#include "damd/rng.hpp"

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/LU>
#include <Eigen/SVD>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

namespace damd {

inline constexpr std::size_t kNumLandmarks = 68;
inline constexpr std::size_t kIdDims = 40;
inline constexpr std::size_t kExpDims = 10;
inline constexpr std::size_t kPoseDims = 12;
inline constexpr std::size_t kParamDims = kPoseDims + kIdDims + kExpDims;

using Mat3 = Eigen::Matrix3d;
using Vec3 = Eigen::Vector3d;
using Shape3D = std::vector<double>; ///< 3N values, xyz interleaved per vertex

struct Triangle {
    std::uint32_t a, b, c;
    bool operator==(const Triangle&) const = default;
};

struct MorphableModel {
    std::size_t num_vertices = 0;
    std::vector<float> mean_shape;   ///< 3N
    std::vector<float> id_basis;     ///< 3N x 40, column-major
    std::vector<float> exp_basis;    ///< 3N x 10, column-major
    std::vector<Triangle> triangles;
    std::vector<std::uint32_t> landmark_indices; ///< 68 vertex ids
    std::vector<float> param_std;    ///< 62 per-parameter standard deviations
    std::vector<float> mean_texture; ///< 3N RGB in [0,1]

    float id_at(std::size_t row, std::size_t k) const { return id_basis[k * 3 * num_vertices + row]; }
    float exp_at(std::size_t row, std::size_t k) const { return exp_basis[k * 3 * num_vertices + row]; }

    bool operator==(const MorphableModel&) const = default;

    /// Throws DataError naming the first broken invariant.
    void validate() const
    {
        const std::size_t n3 = 3 * num_vertices;
        if (num_vertices < kNumLandmarks)
            throw DataError("morphable model: needs at least 68 vertices, has " + std::to_string(num_vertices));
        if (mean_shape.size() != n3 || id_basis.size() != n3 * kIdDims || exp_basis.size() != n3 * kExpDims ||
            mean_texture.size() != n3)
            throw DataError("morphable model: array sizes do not match " + std::to_string(num_vertices) + " vertices");
        if (landmark_indices.size() != kNumLandmarks)
            throw DataError("morphable model: expected 68 landmark indices, got " +
                            std::to_string(landmark_indices.size()));
        for (auto i : landmark_indices)
            if (i >= num_vertices)
                throw DataError("morphable model: landmark index " + std::to_string(i) + " out of range");
        for (const auto& t : triangles)
            if (t.a >= num_vertices || t.b >= num_vertices || t.c >= num_vertices)
                throw DataError("morphable model: triangle index out of range");
        if (param_std.size() != kParamDims)
            throw DataError("morphable model: param_std must have 62 entries");
        for (float s : param_std)
            if (!(s > 0.0f) || !std::isfinite(s))
                throw DataError("morphable model: param_std entries must be positive and finite");
        for (const auto* v : {&mean_shape, &id_basis, &exp_basis, &mean_texture})
            for (float x : *v)
                if (!std::isfinite(x))
                    throw DataError("morphable model: non-finite value in model arrays");
    }
};

/// The 62-dim regression target: pose12 | alpha_id (40) | alpha_exp (10).
struct ParamVector {
    std::array<double, kParamDims> values{};

    ParamVector() = default;
    explicit ParamVector(std::span<const double> v)
    {
        if (v.size() != kParamDims)
            throw DimensionError("ParamVector: expected 62 values, got " + std::to_string(v.size()));
        std::copy(v.begin(), v.end(), values.begin());
    }

    std::span<double, kPoseDims> pose12() { return std::span(values).first<kPoseDims>(); }
    std::span<const double, kPoseDims> pose12() const { return std::span(values).first<kPoseDims>(); }
    std::span<double, kIdDims> alpha_id() { return std::span(values).subspan<kPoseDims, kIdDims>(); }
    std::span<const double, kIdDims> alpha_id() const { return std::span(values).subspan<kPoseDims, kIdDims>(); }
    std::span<double, kExpDims> alpha_exp() { return std::span(values).subspan<kPoseDims + kIdDims, kExpDims>(); }
    std::span<const double, kExpDims> alpha_exp() const
    {
        return std::span(values).subspan<kPoseDims + kIdDims, kExpDims>();
    }

    Mat3 scaled_rotation() const
    {
        Mat3 m;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c)
                m(r, c) = values[static_cast<std::size_t>(3 * r + c)];
        return m;
    }
    Vec3 translation() const { return {values[9], values[10], values[11]}; }

    bool operator==(const ParamVector&) const = default;
};

struct EulerPose {
    double f = 1.0;
    double pitch = 0.0, yaw = 0.0, roll = 0.0; ///< radians
    Vec3 t3d = Vec3::Zero();
};

// ---------------------------------------------------------------------------

inline Shape3D synthesize_shape(const MorphableModel& model, std::span<const double> alpha_id,
                                std::span<const double> alpha_exp)
{
    if (alpha_id.size() != kIdDims)
        throw DimensionError("synthesize_shape: alpha_id needs 40 values, got " + std::to_string(alpha_id.size()));
    if (alpha_exp.size() != kExpDims)
        throw DimensionError("synthesize_shape: alpha_exp needs 10 values, got " + std::to_string(alpha_exp.size()));
    const std::size_t n3 = 3 * model.num_vertices;
    Shape3D s(model.mean_shape.begin(), model.mean_shape.end());
    for (std::size_t k = 0; k < kIdDims; ++k) {
        if (alpha_id[k] == 0.0)
            continue;
        const float* col = model.id_basis.data() + k * n3;
        for (std::size_t r = 0; r < n3; ++r)
            s[r] += alpha_id[k] * col[r];
    }
    for (std::size_t k = 0; k < kExpDims; ++k) {
        if (alpha_exp[k] == 0.0)
            continue;
        const float* col = model.exp_basis.data() + k * n3;
        for (std::size_t r = 0; r < n3; ++r)
            s[r] += alpha_exp[k] * col[r];
    }
    return s;
}

inline Mat3 rotation_from_euler(double pitch, double yaw, double roll)
{
    const double cp = std::cos(pitch), sp = std::sin(pitch);
    const double cy = std::cos(yaw), sy = std::sin(yaw);
    const double cr = std::cos(roll), sr = std::sin(roll);
    Mat3 rx, ry, rz;
    rx << 1, 0, 0, 0, cp, -sp, 0, sp, cp;
    ry << cy, 0, sy, 0, 1, 0, -sy, 0, cy;
    rz << cr, -sr, 0, sr, cr, 0, 0, 0, 1;
    return rz * ry * rx;
}

struct EulerAngles {
    double pitch, yaw, roll;
};

/// Inverse of rotation_from_euler. At gimbal lock (|yaw| = pi/2) roll is set to 0.
inline EulerAngles euler_from_rotation(const Mat3& r)
{
    const double cy = std::hypot(r(0, 0), r(1, 0));
    const double yaw = std::atan2(-r(2, 0), cy);
    if (cy > 1e-12)
        return {std::atan2(r(2, 1), r(2, 2)), yaw, std::atan2(r(1, 0), r(0, 0))};
    // R01 = sy*sin(p) - ..., with roll = 0: R01 = sy*sin(p), R02 = sy*cos(p)
    const double sy = r(2, 0) < 0 ? 1.0 : -1.0;
    return {std::atan2(sy * r(0, 1), sy * r(0, 2)), yaw, 0.0};
}

inline std::array<double, kPoseDims> pose_encode(const EulerPose& pose)
{
    if (!(pose.f > 0.0))
        throw DataError("pose_encode: scale f must be positive");
    const Mat3 m = pose.f * rotation_from_euler(pose.pitch, pose.yaw, pose.roll);
    std::array<double, kPoseDims> out{};
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c)
            out[static_cast<std::size_t>(3 * r + c)] = m(r, c);
    for (int i = 0; i < 3; ++i)
        out[static_cast<std::size_t>(9 + i)] = pose.t3d[i];
    return out;
}

/// f = cbrt(det M), R = nearest rotation to M/f (orthogonal Procrustes).
inline EulerPose pose_decode(std::span<const double> pose12)
{
    if (pose12.size() != kPoseDims)
        throw DimensionError("pose_decode: expected 12 values, got " + std::to_string(pose12.size()));
    Mat3 m;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c)
            m(r, c) = pose12[static_cast<std::size_t>(3 * r + c)];
    if (!m.allFinite())
        throw DataError("pose_decode: non-finite pose matrix");
    const double det = m.determinant();
    if (!(det > 0.0))
        throw DataError("pose_decode: invalid pose, det(M) = " + std::to_string(det) + " <= 0");
    EulerPose pose;
    pose.f = std::cbrt(det);
    Eigen::JacobiSVD<Mat3> svd(m / pose.f, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 d = Mat3::Identity();
    d(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0 ? -1.0 : 1.0;
    const Mat3 rot = svd.matrixU() * d * svd.matrixV().transpose();
    const EulerAngles a = euler_from_rotation(rot);
    pose.pitch = a.pitch;
    pose.yaw = a.yaw;
    pose.roll = a.roll;
    pose.t3d = Vec3(pose12[9], pose12[10], pose12[11]);
    return pose;
}

namespace detail {

inline void check_finite(std::span<const double> v, const char* op)
{
    for (double x : v)
        if (!std::isfinite(x))
            throw DataError(std::string(op) + ": non-finite coordinate");
}

/// x' = M * (x + t) for every vertex.
inline Shape3D rigid_apply(std::span<const double> shape, const Mat3& m, const Vec3& t)
{
    Shape3D out(shape.size());
    for (std::size_t v = 0; v < shape.size() / 3; ++v) {
        const Vec3 p = m * (Vec3(shape[3 * v], shape[3 * v + 1], shape[3 * v + 2]) + t);
        out[3 * v] = p.x();
        out[3 * v + 1] = p.y();
        out[3 * v + 2] = p.z();
    }
    return out;
}

inline void require_valid_pose(const Mat3& m, const char* op)
{
    if (!m.allFinite() || !(m.determinant() > 0.0))
        throw DataError(std::string(op) + ": invalid pose, det(M) <= 0");
}

} // namespace detail

/// Weak-perspective projection of every vertex: 2N values (x, y per vertex).
inline std::vector<double> project(std::span<const double> shape, const EulerPose& pose)
{
    if (shape.size() % 3 != 0)
        throw DimensionError("project: shape length must be a multiple of 3");
    if (!(pose.f > 0.0))
        throw DataError("project: scale f must be positive");
    detail::check_finite(shape, "project");
    const Mat3 m = pose.f * rotation_from_euler(pose.pitch, pose.yaw, pose.roll);
    const Shape3D v = detail::rigid_apply(shape, m, pose.t3d);
    std::vector<double> out(2 * (shape.size() / 3));
    for (std::size_t i = 0; i < shape.size() / 3; ++i) {
        out[2 * i] = v[3 * i];
        out[2 * i + 1] = v[3 * i + 1];
    }
    return out;
}

/// V(P) = M * (S(P) + t3d): the 3D vertices before the Pr truncation.
inline Shape3D reconstruct_vertices(const MorphableModel& model, const ParamVector& p)
{
    const Mat3 m = p.scaled_rotation();
    detail::require_valid_pose(m, "reconstruct_vertices");
    const Shape3D s = synthesize_shape(model, p.alpha_id(), p.alpha_exp());
    return detail::rigid_apply(s, m, p.translation());
}

/// V(P) restricted to the 68 landmark vertices (204 values).
inline std::vector<double> reconstruct_landmarks(const MorphableModel& model, const ParamVector& p)
{
    const Mat3 m = p.scaled_rotation();
    detail::require_valid_pose(m, "reconstruct_landmarks");
    const std::size_t n3 = 3 * model.num_vertices;
    std::vector<double> s(3 * kNumLandmarks);
    for (std::size_t j = 0; j < kNumLandmarks; ++j)
        for (std::size_t c = 0; c < 3; ++c) {
            const std::size_t row = 3 * model.landmark_indices[j] + c;
            double v = model.mean_shape[row];
            for (std::size_t k = 0; k < kIdDims; ++k)
                v += p.alpha_id()[k] * model.id_basis[k * n3 + row];
            for (std::size_t k = 0; k < kExpDims; ++k)
                v += p.alpha_exp()[k] * model.exp_basis[k * n3 + row];
            s[3 * j + c] = v;
        }
    return detail::rigid_apply(s, m, p.translation());
}

/// 68 projected landmarks as (x, y) pairs, 136 values.
inline std::vector<double> project_landmarks(const MorphableModel& model, const ParamVector& p)
{
    const auto v = reconstruct_landmarks(model, p);
    std::vector<double> out(2 * kNumLandmarks);
    for (std::size_t j = 0; j < kNumLandmarks; ++j) {
        out[2 * j] = v[3 * j];
        out[2 * j + 1] = v[3 * j + 1];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic model generator

namespace detail {

/// (u, v) in [-1,1]^2 positions of the 68-point markup on the face grid
/// (u to the right, v downward).
inline std::vector<std::array<double, 2>> landmark_layout()
{
    std::vector<std::array<double, 2>> pts;
    const double pi = std::numbers::pi;
    for (int i = 0; i < 17; ++i) { // jaw
        const double a = pi - pi * i / 16.0;
        pts.push_back({0.92 * std::cos(a), -0.1 + 0.85 * std::sin(a)});
    }
    for (int side : {-1, 1}) // brows
        for (int i = 0; i < 5; ++i) {
            const double u = side < 0 ? -0.72 + 0.13 * i : 0.2 + 0.13 * i;
            pts.push_back({u, -0.45 - 0.06 * std::sin(pi * (u * side - 0.2) / 0.55)});
        }
    for (int i = 0; i < 4; ++i) // nose bridge
        pts.push_back({0.0, -0.3 + 0.11 * i});
    for (int i = 0; i < 5; ++i) // nostrils
        pts.push_back({-0.2 + 0.1 * i, 0.15 + 0.03 * (2 - std::abs(i - 2))});
    for (double cx : {-0.4, 0.4}) // eyes
        for (int i = 0; i < 6; ++i) {
            const double a = pi + 2.0 * pi * i / 6.0;
            pts.push_back({cx + 0.17 * std::cos(a), -0.25 + 0.06 * std::sin(a)});
        }
    for (int i = 0; i < 12; ++i) { // outer lip
        const double a = pi + 2.0 * pi * i / 12.0;
        pts.push_back({0.35 * std::cos(a), 0.45 + 0.12 * std::sin(a)});
    }
    for (int i = 0; i < 8; ++i) { // inner lip
        const double a = pi + 2.0 * pi * i / 8.0;
        pts.push_back({0.22 * std::cos(a), 0.45 + 0.05 * std::sin(a)});
    }
    return pts;
}

inline double smooth_bump(double u, double v, double cu, double cv, double su, double sv)
{
    const double du = (u - cu) / su, dv = (v - cv) / sv;
    return std::exp(-0.5 * (du * du + dv * dv));
}

} // namespace detail

/// Deterministic face-like model with `n` vertices: a grid over the front of an
/// ellipsoid with a nose bump, scaled into [-1,1]^3, plus smooth random bases
/// orthonormalized jointly ([A_id | A_exp] has orthonormal columns).
inline MorphableModel generate_synthetic_model(std::uint64_t seed, std::size_t n)
{
    if (n < kNumLandmarks)
        throw ConfigError("generate_synthetic_model: need at least 68 vertices, got " + std::to_string(n));
    const double pi = std::numbers::pi;
    std::mt19937_64 rng(seed);

    MorphableModel model;
    model.num_vertices = n;
    const std::size_t cols = static_cast<std::size_t>(std::sqrt(static_cast<double>(n)));
    const std::size_t rows = n / cols;
    const std::size_t extra = n - rows * cols;

    std::vector<std::array<double, 2>> uv(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t r = i / cols, c = i % cols;
        const double u = -1.0 + 2.0 * static_cast<double>(c) / static_cast<double>(cols - 1);
        // the partial row (if any) sits below the last full row
        const double v = -1.0 + 2.0 * static_cast<double>(r) / static_cast<double>(extra ? rows : rows - 1);
        uv[i] = {u, v};
    }

    std::vector<Vec3> pos(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto [u, v] = uv[i];
        const double th = u * 0.42 * pi, ph = v * 0.42 * pi;
        Vec3 p(0.8 * std::sin(th) * std::cos(ph), std::sin(ph), 0.7 * std::cos(th) * std::cos(ph));
        p.z() += 0.3 * detail::smooth_bump(u, v, 0.0, 0.0, 0.12, 0.22);
        p.z() += 0.05 * detail::smooth_bump(u, v, 0.0, 0.85, 0.3, 0.12); // chin
        p.z() -= 0.06 * (detail::smooth_bump(u, v, -0.4, -0.25, 0.15, 0.08) +
                         detail::smooth_bump(u, v, 0.4, -0.25, 0.15, 0.08)); // eye sockets
        pos[i] = p;
    }
    Vec3 lo = pos[0], hi = pos[0];
    for (const auto& p : pos) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    const Vec3 center = 0.5 * (lo + hi);
    const double half = 0.5 * (hi - lo).maxCoeff();
    model.mean_shape.resize(3 * n);
    for (std::size_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c)
            model.mean_shape[3 * i + static_cast<std::size_t>(c)] = static_cast<float>((pos[i][c] - center[c]) / half);

    // counter-clockwise in (x right, y down) so frontal normals point to +z
    auto id = [cols](std::size_t r, std::size_t c) { return static_cast<std::uint32_t>(r * cols + c); };
    for (std::size_t r = 0; r + 1 < rows; ++r)
        for (std::size_t c = 0; c + 1 < cols; ++c) {
            model.triangles.push_back({id(r, c), id(r, c + 1), id(r + 1, c)});
            model.triangles.push_back({id(r, c + 1), id(r + 1, c + 1), id(r + 1, c)});
        }
    for (std::size_t c = 0; c + 1 < extra; ++c) {
        model.triangles.push_back({id(rows - 1, c), id(rows - 1, c + 1), id(rows, c)});
        model.triangles.push_back({id(rows - 1, c + 1), id(rows, c + 1), id(rows, c)});
    }

    std::vector<bool> used(n, false);
    for (const auto& [lu, lv] : detail::landmark_layout()) {
        std::size_t best = 0;
        double best_d = 1e300;
        for (std::size_t i = 0; i < n; ++i) {
            if (used[i])
                continue;
            const double d = (uv[i][0] - lu) * (uv[i][0] - lu) + (uv[i][1] - lv) * (uv[i][1] - lv);
            if (d < best_d) {
                best_d = d;
                best = i;
            }
        }
        used[best] = true;
        model.landmark_indices.push_back(static_cast<std::uint32_t>(best));
    }

    // smooth random displacement fields, then modified Gram-Schmidt (two passes)
    const std::size_t n3 = 3 * n, dims = kIdDims + kExpDims;
    std::vector<std::vector<double>> basis(dims, std::vector<double>(n3));
    for (std::size_t k = 0; k < dims; ++k) {
        const double freq = 0.5 + 1.5 * static_cast<double>(k) / static_cast<double>(dims);
        for (int c = 0; c < 3; ++c) {
            const Vec3 w(freq * normal(rng), freq * normal(rng), freq * normal(rng));
            const double phase = uniform(rng, 0.0, 2.0 * pi);
            for (std::size_t i = 0; i < n; ++i) {
                const Vec3 p(model.mean_shape[3 * i], model.mean_shape[3 * i + 1], model.mean_shape[3 * i + 2]);
                basis[k][3 * i + static_cast<std::size_t>(c)] = std::sin(w.dot(p) + phase);
            }
        }
    }
    for (int pass = 0; pass < 2; ++pass)
        for (std::size_t k = 0; k < dims; ++k) {
            for (std::size_t j = 0; j < k; ++j) {
                double dot = 0.0;
                for (std::size_t r = 0; r < n3; ++r)
                    dot += basis[k][r] * basis[j][r];
                for (std::size_t r = 0; r < n3; ++r)
                    basis[k][r] -= dot * basis[j][r];
            }
            double norm = 0.0;
            for (double x : basis[k])
                norm += x * x;
            norm = std::sqrt(norm);
            for (double& x : basis[k])
                x /= norm;
        }
    model.id_basis.resize(n3 * kIdDims);
    model.exp_basis.resize(n3 * kExpDims);
    for (std::size_t k = 0; k < dims; ++k) {
        float* dst = k < kIdDims ? model.id_basis.data() + k * n3 : model.exp_basis.data() + (k - kIdDims) * n3;
        for (std::size_t r = 0; r < n3; ++r)
            dst[r] = static_cast<float>(basis[k][r]);
    }

    // A unit column spreads over 3N coordinates; scaling the std by sqrt(3N)
    // keeps per-vertex deformation amplitudes independent of N.
    const double spread = std::sqrt(static_cast<double>(n3));
    model.param_std.assign(kParamDims, 1.0f); // pose entries: placeholders, see training statistics
    for (std::size_t k = 0; k < kIdDims; ++k)
        model.param_std[kPoseDims + k] = static_cast<float>(0.02 * spread / std::sqrt(1.0 + k));
    for (std::size_t k = 0; k < kExpDims; ++k)
        model.param_std[kPoseDims + kIdDims + k] = static_cast<float>(0.015 * spread / std::sqrt(1.0 + k));

    model.mean_texture.resize(n3);
    for (std::size_t i = 0; i < n; ++i) {
        const auto [u, v] = uv[i];
        const double lips = detail::smooth_bump(u, v, 0.0, 0.45, 0.3, 0.08);
        const double eyes = detail::smooth_bump(u, v, -0.4, -0.25, 0.12, 0.05) +
                            detail::smooth_bump(u, v, 0.4, -0.25, 0.12, 0.05);
        const double brows = detail::smooth_bump(u, v, -0.45, -0.47, 0.2, 0.04) +
                             detail::smooth_bump(u, v, 0.45, -0.47, 0.2, 0.04);
        const double dark = std::min(1.0, 0.7 * eyes + 0.6 * brows);
        const double rgb[3] = {0.86 - 0.5 * dark + 0.05 * lips, 0.68 - 0.45 * dark - 0.3 * lips,
                               0.58 - 0.4 * dark - 0.25 * lips};
        for (int c = 0; c < 3; ++c)
            model.mean_texture[3 * i + static_cast<std::size_t>(c)] = static_cast<float>(std::clamp(rgb[c], 0.0, 1.0));
    }
    model.validate();
    return model;
}

} // namespace damd
