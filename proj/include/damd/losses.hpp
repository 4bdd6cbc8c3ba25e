#pragma once

// Training objectives: weighted parameter distance (WPDC), the Wing loss on
// reconstructed vertices, and their weighted sum.
//
// Two routes are provided. The plain double functions evaluate one parameter
// vector pair and serve as the reference; the tensor functions evaluate a
// batch [N,62] on the tape for training.

#include "damd/morphable_model.hpp"
#include "damd/ops.hpp"

#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace damd {

struct WpdcWeights {
    std::vector<double> w; ///< 62 positive entries

    void validate() const
    {
        if (w.size() != kParamDims)
            throw DimensionError("WPDC weights: expected 62 entries, got " + std::to_string(w.size()));
        for (double x : w)
            if (!(x > 0.0) || !std::isfinite(x))
                throw ConfigError("WPDC weights must be positive and finite");
    }
};

struct WingConfig {
    double omega = 10.0;
    double epsilon = 2.0;

    double c() const { return omega - omega * std::log1p(omega / epsilon); }
    void validate() const
    {
        if (!(omega > 0.0) || !(epsilon > 0.0))
            throw ConfigError("wing loss: omega and epsilon must be positive");
    }
};

struct CombinedLossConfig {
    double lambda1 = 0.5;
    double lambda2 = 1.0;
    bool all_vertices = false; ///< wing over every vertex instead of the 68 landmarks

    void validate() const
    {
        if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0))
            throw ConfigError("combined loss: lambdas must be nonnegative");
        if (lambda1 == 0.0 && lambda2 == 0.0)
            throw ConfigError("combined loss: lambda1 and lambda2 are both zero");
    }
};

/// w_k = 1/std_k, rescaled so the largest weight is 1.
template <typename S>
WpdcWeights wpdc_weights_from_std(std::span<const S> param_std)
{
    if (param_std.size() != kParamDims)
        throw DimensionError("wpdc_weights_from_std: expected 62 values, got " + std::to_string(param_std.size()));
    WpdcWeights out;
    double top = 0.0;
    for (S s : param_std) {
        if (!(s > S(0)) || !std::isfinite(static_cast<double>(s)))
            throw ConfigError("wpdc_weights_from_std: standard deviations must be positive");
        out.w.push_back(1.0 / static_cast<double>(s));
        top = std::max(top, out.w.back());
    }
    for (double& w : out.w)
        w /= top;
    return out;
}

inline WpdcWeights wpdc_weights_from_std(const std::vector<float>& s) { return wpdc_weights_from_std<float>(s); }
inline WpdcWeights wpdc_weights_from_std(const std::vector<double>& s) { return wpdc_weights_from_std<double>(s); }

// ---------------------------------------------------------------------------
// Reference route

inline double wpdc(std::span<const double> pred, std::span<const double> gt, const WpdcWeights& weights)
{
    if (pred.size() != kParamDims || gt.size() != kParamDims)
        throw DimensionError("wpdc: parameter vectors must have 62 entries");
    weights.validate();
    double s = 0.0;
    for (std::size_t k = 0; k < kParamDims; ++k) {
        const double d = gt[k] - pred[k];
        s += weights.w[k] * d * d;
    }
    return s;
}

inline double wing(double delta, const WingConfig& cfg = {})
{
    const double a = std::abs(delta);
    return a < cfg.omega ? cfg.omega * std::log1p(a / cfg.epsilon) : a - cfg.c();
}

inline double vertex_wing(const MorphableModel& model, const ParamVector& pred, const ParamVector& gt,
                          const WingConfig& cfg = {}, bool all_vertices = false)
{
    const auto vp = all_vertices ? reconstruct_vertices(model, pred) : reconstruct_landmarks(model, pred);
    const auto vg = all_vertices ? reconstruct_vertices(model, gt) : reconstruct_landmarks(model, gt);
    double s = 0.0;
    for (std::size_t i = 0; i < vp.size(); ++i)
        s += wing(vg[i] - vp[i], cfg);
    return s / static_cast<double>(vp.size());
}

inline double combined(const ParamVector& pred, const ParamVector& gt, const MorphableModel& model,
                       const WpdcWeights& weights, const WingConfig& wing_cfg = {},
                       const CombinedLossConfig& cfg = {})
{
    cfg.validate();
    return cfg.lambda1 * wpdc(pred.values, gt.values, weights) +
           cfg.lambda2 * vertex_wing(model, pred, gt, wing_cfg, cfg.all_vertices);
}

// ---------------------------------------------------------------------------
// Tape route

/// Constants needed to evaluate the losses on a batch.
template <typename T>
struct LossContext {
    Tensor<T> basis;      ///< [3K, 50] rows of [A_id | A_exp] for the K vertices used
    Tensor<T> mean;       ///< [3K]
    Tensor<T> weights;    ///< [1, 62]
    std::size_t vertices = 0;
    WingConfig wing;
    CombinedLossConfig combined;
};

template <typename T>
LossContext<T> make_loss_context(const MorphableModel& model, const WpdcWeights& weights,
                                 const WingConfig& wing_cfg = {}, const CombinedLossConfig& cfg = {})
{
    weights.validate();
    wing_cfg.validate();
    cfg.validate();
    std::vector<std::size_t> ids;
    if (cfg.all_vertices)
        for (std::size_t i = 0; i < model.num_vertices; ++i)
            ids.push_back(i);
    else
        ids.assign(model.landmark_indices.begin(), model.landmark_indices.end());
    const std::size_t rows = 3 * ids.size(), dims = kIdDims + kExpDims;
    std::vector<T> basis(rows * dims), mean(rows);
    for (std::size_t j = 0; j < ids.size(); ++j)
        for (std::size_t c = 0; c < 3; ++c) {
            const std::size_t src = 3 * ids[j] + c, dst = 3 * j + c;
            mean[dst] = static_cast<T>(model.mean_shape[src]);
            for (std::size_t k = 0; k < kIdDims; ++k)
                basis[dst * dims + k] = static_cast<T>(model.id_at(src, k));
            for (std::size_t k = 0; k < kExpDims; ++k)
                basis[dst * dims + kIdDims + k] = static_cast<T>(model.exp_at(src, k));
        }
    LossContext<T> ctx;
    ctx.basis = Tensor<T>(Shape{rows, dims}, std::move(basis));
    ctx.mean = Tensor<T>(Shape{rows}, std::move(mean));
    std::vector<T> w(kParamDims);
    for (std::size_t k = 0; k < kParamDims; ++k)
        w[k] = static_cast<T>(weights.w[k]);
    ctx.weights = Tensor<T>(Shape{1, kParamDims}, std::move(w));
    ctx.vertices = ids.size();
    ctx.wing = wing_cfg;
    ctx.combined = cfg;
    return ctx;
}

namespace detail {

template <typename T>
void require_param_batch(const Tensor<T>& p, const char* op)
{
    if (p.rank() != 2 || p.dim(1) != kParamDims)
        throw DimensionError(std::string(op) + ": expected [N,62] parameters, got " + shape_str(p.shape()));
}

} // namespace detail

/// V = M (S + t) for the context's vertices: [N,62] -> [N,K,3].
template <typename T>
Tensor<T> reconstruct_batch(const LossContext<T>& ctx, const Tensor<T>& params)
{
    detail::require_param_batch(params, "reconstruct_batch");
    const std::size_t n = params.dim(0), k = ctx.vertices;
    const auto alpha = slice(params, 1, kPoseDims, kIdDims + kExpDims);
    const auto shape = reshape(linear(alpha, ctx.basis, ctx.mean), Shape{n, k, 1, 3});
    const auto t = reshape(slice(params, 1, 9, 3), Shape{n, 1, 1, 3});
    const auto m = reshape(slice(params, 1, 0, 9), Shape{n, 1, 3, 3});
    return reduce_sum(mul(m, add(shape, t)), {3}, false);
}

/// Batch mean of sum_k w_k (gt_k - pred_k)^2.
template <typename T>
Tensor<T> wpdc_loss(const LossContext<T>& ctx, const Tensor<T>& pred, const Tensor<T>& gt)
{
    detail::require_param_batch(pred, "wpdc_loss");
    detail::require_param_batch(gt, "wpdc_loss");
    const auto per = mul(square(sub(gt, pred)), ctx.weights);
    return scale(sum(per), static_cast<T>(1.0 / static_cast<double>(pred.dim(0))));
}

/// Mean over batch and vertex coordinates of wing(V(gt) - V(pred)).
template <typename T>
Tensor<T> vertex_wing_loss(const LossContext<T>& ctx, const Tensor<T>& pred, const Tensor<T>& gt)
{
    const auto delta = sub(reconstruct_batch(ctx, gt), reconstruct_batch(ctx, pred));
    return mean(wing(delta, static_cast<T>(ctx.wing.omega), static_cast<T>(ctx.wing.epsilon)));
}

template <typename T>
struct LossTerms {
    Tensor<T> total;
    Tensor<T> wpdc;
    Tensor<T> wing;
};

template <typename T>
LossTerms<T> combined_loss(const LossContext<T>& ctx, const Tensor<T>& pred, const Tensor<T>& gt)
{
    LossTerms<T> out;
    out.wpdc = wpdc_loss(ctx, pred, gt);
    out.wing = vertex_wing_loss(ctx, pred, gt);
    out.total = add(scale(out.wpdc, static_cast<T>(ctx.combined.lambda1)),
                    scale(out.wing, static_cast<T>(ctx.combined.lambda2)));
    return out;
}

} // namespace damd
