#pragma once

#include "damd/tensor.hpp"

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace damd {

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T> value;
};

template <typename T>
struct AdamState {
    std::size_t step = 0;
    std::vector<std::vector<T>> m, v;
    T lr = T(0.01);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
};

/// One Adam update over `params` using their accumulated gradients (absent == 0).
/// A non-finite gradient aborts the whole step before anything is modified.
template <typename T>
void adam_step(std::span<NamedTensor<T>> params, AdamState<T>& state)
{
    for (auto& p : params)
        for (T g : p.value.grad())
            if (!std::isfinite(g))
                throw NumericError("adam_step: non-finite gradient in parameter '" + p.name + "'");

    if (state.m.empty()) {
        for (auto& p : params) {
            state.m.emplace_back(p.value.numel(), T(0));
            state.v.emplace_back(p.value.numel(), T(0));
        }
    }
    if (state.m.size() != params.size())
        throw DimensionError("adam_step: state tracks " + std::to_string(state.m.size()) + " tensors, got " +
                             std::to_string(params.size()));
    for (std::size_t k = 0; k < params.size(); ++k)
        if (state.m[k].size() != params[k].value.numel())
            throw DimensionError("adam_step: moment buffer size mismatch for '" + params[k].name + "'");

    ++state.step;
    const double t = static_cast<double>(state.step);
    const T c1 = static_cast<T>(1.0 - std::pow(static_cast<double>(state.beta1), t));
    const T c2 = static_cast<T>(1.0 - std::pow(static_cast<double>(state.beta2), t));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor<T>& p = params[k].value;
        const auto grad = p.grad();
        auto& m = state.m[k];
        auto& v = state.v[k];
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const T g = grad.empty() ? T(0) : grad[i];
            m[i] = state.beta1 * m[i] + (T(1) - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (T(1) - state.beta2) * g * g;
            const T mhat = m[i] / c1;
            const T vhat = v[i] / c2;
            p[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

template <typename T>
void adam_step(std::vector<NamedTensor<T>>& params, AdamState<T>& state)
{
    adam_step(std::span<NamedTensor<T>>(params), state);
}

} // namespace damd
