#pragma once

#include "damd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

namespace damd {

struct GradCheckResult {
    double max_rel_error = 0.0;  ///< max |analytic - central| / max(1, |analytic|)
    std::size_t worst_tensor = 0;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
    std::size_t skipped = 0;      ///< probes whose stencil crossed a ReLU/Wing branch point
    bool finite = true;           ///< false if any evaluation produced NaN/Inf

    bool passed(double tolerance) const { return finite && max_rel_error < tolerance; }
};

namespace detail {

inline std::vector<std::size_t> probe_indices(std::size_t numel, std::size_t max_coords)
{
    std::vector<std::size_t> idx;
    if (max_coords == 0 || max_coords >= numel) {
        idx.resize(numel);
        for (std::size_t i = 0; i < numel; ++i)
            idx[i] = i;
        return idx;
    }
    for (std::size_t j = 0; j < max_coords; ++j)
        idx.push_back(j * numel / max_coords);
    return idx;
}

} // namespace detail

/// Compares the tape gradient of the scalar `f()` with respect to every tensor in
/// `inputs` against central differences with step `h`. `f` must rebuild its graph
/// from the current contents of `inputs` on each call. With `max_coords > 0` only
/// that many evenly spaced coordinates per tensor are probed.
///
/// A central difference is only meaningful where f is differentiable on the
/// whole stencil [x-h, x+h]. Probes whose perturbations change the branch taken
/// by any ReLU or Wing element are counted in `skipped` instead of compared.
template <typename F>
GradCheckResult finite_diff_check(F&& f, std::vector<Tensor<double>> inputs, double h, std::size_t max_coords = 0)
{
    GradCheckResult result;
    const auto fail = [&result] {
        result.finite = false;
        result.max_rel_error = std::numeric_limits<double>::infinity();
        return result;
    };

    for (auto& x : inputs) {
        x.set_requires_grad(true);
        x.zero_grad();
    }
    {
        const Tensor<double> loss = f();
        if (!std::isfinite(loss.item()))
            return fail();
        backward(loss);
    }

    NoGradGuard no_grad;
    auto& trace = detail::branch_trace();
    struct TraceScope {
        detail::BranchTrace& t;
        ~TraceScope() { t.active = false; }
    } scope{trace};
    auto eval = [&](std::uint64_t& signature) {
        trace.active = true;
        trace.hash = detail::BranchTrace{}.hash;
        const double v = f().item();
        trace.active = false;
        signature = trace.hash;
        return v;
    };
    std::uint64_t base_sig = 0;
    eval(base_sig);
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        Tensor<double>& x = inputs[t];
        std::vector<double> analytic(x.numel(), 0.0);
        if (x.has_grad())
            std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
        for (std::size_t i : detail::probe_indices(x.numel(), max_coords)) {
            const double saved = x[i];
            std::uint64_t up_sig = 0, down_sig = 0;
            x[i] = saved + h;
            const double up = eval(up_sig);
            x[i] = saved - h;
            const double down = eval(down_sig);
            x[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            if (!std::isfinite(up) || !std::isfinite(down) || !std::isfinite(analytic[i]))
                return fail();
            if (up_sig != base_sig || down_sig != base_sig) {
                ++result.skipped;
                continue;
            }
            const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
            ++result.checked;
            if (err > result.max_rel_error) {
                result.max_rel_error = err;
                result.worst_tensor = t;
                result.worst_index = i;
            }
        }
    }
    return result;
}

template <typename F>
GradCheckResult finite_diff_check(F&& f, const Tensor<double>& x, double h, std::size_t max_coords = 0)
{
    return finite_diff_check(std::forward<F>(f), std::vector<Tensor<double>>{x}, h, max_coords);
}

} // namespace damd
