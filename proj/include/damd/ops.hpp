#pragma once

// The closed op set of the tensor engine. Everything else in the library
// (attention blocks, losses, reconstruction) is composed from these.

#include "damd/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

namespace damd {

namespace detail {

inline std::vector<std::size_t> contiguous_strides(const Shape& shape)
{
    std::vector<std::size_t> strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;)
        strides[i - 1] = strides[i] * shape[i];
    return strides;
}

/// Strides of `shape` laid against the right-aligned broadcast shape `out`
/// (0 along broadcast axes).
inline std::vector<std::size_t> broadcast_strides(const Shape& shape, const Shape& out)
{
    const auto own = contiguous_strides(shape);
    std::vector<std::size_t> strides(out.size(), 0);
    const std::size_t offset = out.size() - shape.size();
    for (std::size_t i = 0; i < shape.size(); ++i)
        strides[offset + i] = shape[i] == 1 ? 0 : own[i];
    return strides;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op)
{
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank, 1);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1)
            throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                                 shape_str(b) + " (axis " + std::to_string(i) + ")");
        out[i] = std::max(da, db);
    }
    return out;
}

/// Odometer walk over `out`, handing f(out_index, offset_a, offset_b).
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f)
{
    const std::size_t n = numel_of(out);
    const std::size_t rank = out.size();
    std::vector<std::size_t> idx(rank, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t i = 0; i < n; ++i) {
        f(i, ia, ib);
        for (std::size_t ax = rank; ax-- > 0;) {
            ++idx[ax];
            ia += sa[ax];
            ib += sb[ax];
            if (idx[ax] < out[ax])
                break;
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

template <typename T, typename Fwd, typename GradA, typename GradB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd, GradA grad_a,
                    GradB grad_b)
{
    const Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
    const auto sa = broadcast_strides(a.shape(), out_shape);
    const auto sb = broadcast_strides(b.shape(), out_shape);
    std::vector<T> out(numel_of(out_shape));
    const auto da = a.data();
    const auto db = b.data();
    if (a.shape() == b.shape()) {
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = fwd(da[i], db[i]);
    } else {
        for_each_broadcast(out_shape, sa, sb,
                           [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = fwd(da[ia], db[ib]); });
    }
    return make_result<T>(out_shape, std::move(out), {a, b},
                          [an = a.node(), bn = b.node(), out_shape, sa, sb, grad_a, grad_b](detail::Node<T>& o) {
                              const bool ga = an->requires_grad, gb = bn->requires_grad;
                              if (ga)
                                  an->ensure_grad();
                              if (gb)
                                  bn->ensure_grad();
                              for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                                  const T g = o.grad[i];
                                  if (ga)
                                      an->grad[ia] += grad_a(g, an->data[ia], bn->data[ib]);
                                  if (gb)
                                      bn->grad[ib] += grad_b(g, an->data[ia], bn->data[ib]);
                              });
                          });
}

/// Elementwise map; `grad(g, x, y)` returns the input gradient given output y.
template <typename T, typename Fwd, typename Grad>
Tensor<T> unary_op(const Tensor<T>& x, Fwd fwd, Grad grad)
{
    std::vector<T> out(x.numel());
    const auto dx = x.data();
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = fwd(dx[i]);
    return make_result<T>(x.shape(), std::move(out), {x}, [xn = x.node(), grad](detail::Node<T>& o) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < o.data.size(); ++i)
            xn->grad[i] += grad(o.grad[i], xn->data[i], o.data[i]);
    });
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op, const char* what)
{
    if (s.size() != rank)
        throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                             ", got " + shape_str(s));
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b)
{
    return detail::binary_op(
        a, b, "add", [](T x, T y) { return x + y; }, [](T g, T, T) { return g; }, [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b)
{
    return detail::binary_op(
        a, b, "sub", [](T x, T y) { return x - y; }, [](T g, T, T) { return g; }, [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b)
{
    return detail::binary_op(
        a, b, "mul", [](T x, T y) { return x * y; }, [](T g, T, T y) { return g * y; },
        [](T g, T x, T) { return g * x; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor)
{
    return detail::unary_op(
        x, [factor](T v) { return v * factor; }, [factor](T g, T, T) { return g * factor; });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x)
{
    return detail::unary_op(x, [](T v) { return v * v; }, [](T g, T v, T) { return T(2) * v * g; });
}

/// 1 / sqrt(x + eps)
template <typename T>
Tensor<T> rsqrt(const Tensor<T>& x, T eps)
{
    return detail::unary_op(
        x, [eps](T v) { return T(1) / std::sqrt(v + eps); },
        [](T g, T, T y) { return g * T(-0.5) * y * y * y; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x)
{
    if (auto& trace = detail::branch_trace(); trace.active)
        for (T v : x.data())
            trace.record(v > T(0) ? 1u : (v < T(0) ? 0u : 2u));
    return detail::unary_op(
        x, [](T v) { return v > T(0) ? v : T(0); }, [](T g, T v, T) { return v > T(0) ? g : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x)
{
    return detail::unary_op(
        x,
        [](T v) {
            // split on sign so exp never overflows
            if (v >= T(0))
                return T(1) / (T(1) + std::exp(-v));
            const T e = std::exp(v);
            return e / (T(1) + e);
        },
        [](T g, T, T y) { return g * y * (T(1) - y); });
}

/// Elementwise Wing loss: omega*ln(1+|x|/epsilon) for |x| < omega, |x| - C otherwise,
/// with C = omega - omega*ln(1+omega/epsilon).
template <typename T>
Tensor<T> wing(const Tensor<T>& x, T omega, T epsilon)
{
    const T c = omega - omega * std::log1p(omega / epsilon);
    if (auto& trace = detail::branch_trace(); trace.active)
        for (T v : x.data())
            trace.record((std::abs(v) < omega ? 0u : 3u) + (v > T(0) ? 1u : (v < T(0) ? 0u : 2u)));
    return detail::unary_op(
        x,
        [=](T v) {
            const T a = std::abs(v);
            return a < omega ? omega * std::log1p(a / epsilon) : a - c;
        },
        [=](T g, T v, T) {
            const T a = std::abs(v);
            const T s = v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
            return a < omega ? g * s * omega / (epsilon + a) : g * s;
        });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape)
{
    if (numel_of(shape) != x.numel())
        throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                             " changes the element count");
    std::vector<T> data(x.data().begin(), x.data().end());
    return make_result<T>(std::move(shape), std::move(data), {x}, [xn = x.node()](detail::Node<T>& o) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i)
            xn->grad[i] += o.grad[i];
    });
}

/// Elements [start, start+length) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length)
{
    if (axis >= x.rank())
        throw DimensionError("slice: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
    if (start + length > x.shape()[axis])
        throw DimensionError("slice: range [" + std::to_string(start) + "," + std::to_string(start + length) +
                             ") exceeds axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
    Shape out_shape = x.shape();
    out_shape[axis] = length;
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i)
        outer *= x.shape()[i];
    for (std::size_t i = axis + 1; i < x.rank(); ++i)
        inner *= x.shape()[i];
    const std::size_t full = x.shape()[axis];
    std::vector<T> out(numel_of(out_shape));
    const auto dx = x.data();
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(dx.begin() + static_cast<std::ptrdiff_t>((o * full + start) * inner), length * inner,
                    out.begin() + static_cast<std::ptrdiff_t>(o * length * inner));
    return make_result<T>(out_shape, std::move(out), {x},
                          [xn = x.node(), outer, inner, full, start, length](detail::Node<T>& o) {
                              xn->ensure_grad();
                              for (std::size_t b = 0; b < outer; ++b)
                                  for (std::size_t i = 0; i < length * inner; ++i)
                                      xn->grad[(b * full + start) * inner + i] += o.grad[b * length * inner + i];
                          });
}

/// Concatenation along axis 1 (channels).
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts)
{
    if (parts.empty())
        throw DimensionError("concat_channels: no inputs");
    const Shape& first = parts.front().shape();
    if (first.size() < 2)
        throw DimensionError("concat_channels: inputs need rank >= 2, got " + shape_str(first));
    std::size_t channels = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i)
            ok = i == 1 || s[i] == first[i];
        if (!ok)
            throw DimensionError("concat_channels: " + shape_str(s) + " does not match " + shape_str(first) +
                                 " outside axis 1");
        channels += s[1];
    }
    const std::size_t batch = first[0];
    std::size_t inner = 1;
    for (std::size_t i = 2; i < first.size(); ++i)
        inner *= first[i];
    Shape out_shape = first;
    out_shape[1] = channels;
    std::vector<T> out(numel_of(out_shape));
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        offsets.push_back(offset);
        const std::size_t c = p.shape()[1];
        const auto d = p.data();
        for (std::size_t n = 0; n < batch; ++n)
            std::copy_n(d.begin() + static_cast<std::ptrdiff_t>(n * c * inner), c * inner,
                        out.begin() + static_cast<std::ptrdiff_t>((n * channels + offset) * inner));
        offset += c;
    }
    std::vector<std::shared_ptr<detail::Node<T>>> nodes;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        nodes.push_back(p.node());
        widths.push_back(p.shape()[1]);
    }
    return make_result<T>(out_shape, std::move(out), parts,
                          [nodes, widths, offsets, batch, inner, channels](detail::Node<T>& o) {
                              for (std::size_t k = 0; k < nodes.size(); ++k) {
                                  auto& pn = *nodes[k];
                                  if (!pn.requires_grad)
                                      continue;
                                  pn.ensure_grad();
                                  const std::size_t c = widths[k];
                                  for (std::size_t n = 0; n < batch; ++n)
                                      for (std::size_t i = 0; i < c * inner; ++i)
                                          pn.grad[n * c * inner + i] += o.grad[(n * channels + offsets[k]) * inner + i];
                              }
                          });
}

// ---------------------------------------------------------------------------
// Reductions (accumulated in double)

namespace detail {

/// factor * (sum over `axes`), accumulated and scaled in double.
template <typename T>
Tensor<T> reduce_scaled(const Tensor<T>& x, const std::vector<std::size_t>& axes, bool keepdim, double factor,
                        const char* op)
{
    const Shape& in = x.shape();
    std::vector<bool> reduced(in.size(), false);
    for (std::size_t a : axes) {
        if (a >= in.size())
            throw DimensionError(std::string(op) + ": axis " + std::to_string(a) + " out of range for " +
                                 shape_str(in));
        reduced[a] = true;
    }
    Shape kept(in.size());
    Shape out_shape;
    for (std::size_t i = 0; i < in.size(); ++i) {
        kept[i] = reduced[i] ? 1 : in[i];
        if (keepdim || !reduced[i])
            out_shape.push_back(kept[i]);
    }
    // offset into the keepdim-shaped output for every input position
    const auto so = broadcast_strides(kept, in);
    const auto si = contiguous_strides(in);
    std::vector<double> acc(numel_of(kept), 0.0);
    const auto dx = x.data();
    for_each_broadcast(in, si, so, [&](std::size_t, std::size_t ii, std::size_t io) { acc[io] += dx[ii]; });
    std::vector<T> out(acc.size());
    for (std::size_t i = 0; i < acc.size(); ++i)
        out[i] = static_cast<T>(acc[i] * factor);
    return make_result<T>(out_shape, std::move(out), {x}, [xn = x.node(), in, si, so, factor](detail::Node<T>& o) {
        xn->ensure_grad();
        const T f = static_cast<T>(factor);
        for_each_broadcast(in, si, so,
                           [&](std::size_t, std::size_t ii, std::size_t io) { xn->grad[ii] += f * o.grad[io]; });
    });
}

} // namespace detail

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x, const std::vector<std::size_t>& axes, bool keepdim)
{
    return detail::reduce_scaled(x, axes, keepdim, 1.0, "reduce_sum");
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x, const std::vector<std::size_t>& axes, bool keepdim)
{
    std::size_t count = 1;
    for (std::size_t a : axes)
        count *= x.dim(a);
    return detail::reduce_scaled(x, axes, keepdim, 1.0 / static_cast<double>(count), "reduce_mean");
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x)
{
    std::vector<std::size_t> axes(x.rank());
    std::iota(axes.begin(), axes.end(), std::size_t{0});
    return reduce_sum(x, axes, false);
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x)
{
    std::vector<std::size_t> axes(x.rank());
    std::iota(axes.begin(), axes.end(), std::size_t{0});
    return reduce_mean(x, axes, false);
}

/// [N,C,H,W] -> [N,C,1,1]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x)
{
    detail::require_rank(x.shape(), 4, "global_avg_pool", "input");
    return reduce_mean(x, {2, 3}, true);
}

// ---------------------------------------------------------------------------
// Dense layers

/// x[N,in] * W[out,in]^T + b[out]; `bias` may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = Tensor<T>())
{
    detail::require_rank(x.shape(), 2, "linear", "input");
    detail::require_rank(weight.shape(), 2, "linear", "weight");
    const std::size_t n = x.dim(0), in = x.dim(1), out = weight.dim(0);
    if (weight.dim(1) != in)
        throw DimensionError("linear: input features (axis 1) = " + std::to_string(in) + " but weight expects " +
                             std::to_string(weight.dim(1)));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out))
        throw DimensionError("linear: bias shape " + shape_str(bias.shape()) + " does not match " +
                             std::to_string(out) + " outputs");
    using Mat = detail::RowMat<T>;
    std::vector<T> y(n * out);
    Eigen::Map<const Mat> X(x.data().data(), n, in);
    Eigen::Map<const Mat> W(weight.data().data(), out, in);
    Eigen::Map<Mat> Y(y.data(), n, out);
    Y.noalias() = X * W.transpose();
    if (bias.defined()) {
        Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> B(bias.data().data(), out);
        Y.rowwise() += B;
    }
    std::vector<Tensor<T>> inputs{x, weight};
    if (bias.defined())
        inputs.push_back(bias);
    return make_result<T>(Shape{n, out}, std::move(y), inputs,
                          [xn = x.node(), wn = weight.node(), bn = bias.node(), n, in, out](detail::Node<T>& o) {
                              Eigen::Map<const Mat> G(o.grad.data(), n, out);
                              if (xn->requires_grad) {
                                  xn->ensure_grad();
                                  Eigen::Map<Mat> GX(xn->grad.data(), n, in);
                                  Eigen::Map<const Mat> W(wn->data.data(), out, in);
                                  GX.noalias() += G * W;
                              }
                              if (wn->requires_grad) {
                                  wn->ensure_grad();
                                  Eigen::Map<Mat> GW(wn->grad.data(), out, in);
                                  Eigen::Map<const Mat> X(xn->data.data(), n, in);
                                  GW.noalias() += G.transpose() * X;
                              }
                              if (bn && bn->requires_grad) {
                                  bn->ensure_grad();
                                  for (std::size_t r = 0; r < n; ++r)
                                      for (std::size_t c = 0; c < out; ++c)
                                          bn->grad[c] += o.grad[r * out + c];
                              }
                          });
}

// ---------------------------------------------------------------------------
// Convolutions

namespace detail {

inline std::size_t conv_out_dim(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad, const char* op,
                                const char* axis)
{
    if (stride == 0)
        throw DimensionError(std::string(op) + ": stride must be positive");
    if (in + 2 * pad < k)
        throw DimensionError(std::string(op) + ": " + axis + " extent " + std::to_string(in) + " with padding " +
                             std::to_string(pad) + " is smaller than kernel " + std::to_string(k));
    return (in + 2 * pad - k) / stride + 1;
}

struct ConvGeometry {
    std::size_t channels, height, width, kernel, stride, pad, out_h, out_w;

    std::size_t rows() const { return channels * kernel * kernel; }
    std::size_t cols() const { return out_h * out_w; }
    bool pointwise() const { return kernel == 1 && stride == 1 && pad == 0; }
};

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col)
{
    for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t ki = 0; ki < g.kernel; ++ki)
            for (std::size_t kj = 0; kj < g.kernel; ++kj) {
                T* row = col + ((c * g.kernel + ki) * g.kernel + kj) * g.cols();
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                                              static_cast<std::ptrdiff_t>(g.pad);
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                                                  static_cast<std::ptrdiff_t>(g.pad);
                        const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.height) &&
                                            ix < static_cast<std::ptrdiff_t>(g.width);
                        row[oy * g.out_w + ox] =
                            inside ? x[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                                       static_cast<std::size_t>(ix)]
                                   : T(0);
                    }
                }
            }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* x)
{
    for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t ki = 0; ki < g.kernel; ++ki)
            for (std::size_t kj = 0; kj < g.kernel; ++kj) {
                const T* row = col + ((c * g.kernel + ki) * g.kernel + kj) * g.cols();
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                                              static_cast<std::ptrdiff_t>(g.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height))
                        continue;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                                                  static_cast<std::ptrdiff_t>(g.pad);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width))
                            continue;
                        x[(c * g.height + static_cast<std::size_t>(iy)) * g.width + static_cast<std::size_t>(ix)] +=
                            row[oy * g.out_w + ox];
                    }
                }
            }
}

} // namespace detail

/// Cross-correlation of x[N,Cin,H,W] with weight[Cout,Cin,k,k]; `bias` may be undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding)
{
    detail::require_rank(x.shape(), 4, "conv2d", "input");
    detail::require_rank(weight.shape(), 4, "conv2d", "weight");
    const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t cout = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != cin)
        throw DimensionError("conv2d: input channels (axis 1) = " + std::to_string(cin) + " but weight expects " +
                             std::to_string(weight.dim(1)));
    if (weight.dim(3) != k)
        throw DimensionError("conv2d: only square kernels are supported, got " + shape_str(weight.shape()));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout))
        throw DimensionError("conv2d: bias shape " + shape_str(bias.shape()) + " does not match " +
                             std::to_string(cout) + " output channels");
    const detail::ConvGeometry g{cin,
                                 h,
                                 w,
                                 k,
                                 stride,
                                 padding,
                                 detail::conv_out_dim(h, k, stride, padding, "conv2d", "height (axis 2)"),
                                 detail::conv_out_dim(w, k, stride, padding, "conv2d", "width (axis 3)")};
    using Mat = detail::RowMat<T>;
    const std::size_t in_plane = cin * h * w, out_plane = cout * g.cols();
    std::vector<T> y(n * out_plane);
    std::vector<T> col(g.pointwise() ? 0 : g.rows() * g.cols());
    Eigen::Map<const Mat> W(weight.data().data(), cout, g.rows());
    for (std::size_t b = 0; b < n; ++b) {
        const T* xb = x.data().data() + b * in_plane;
        const T* cp = xb;
        if (!g.pointwise()) {
            detail::im2col(xb, g, col.data());
            cp = col.data();
        }
        Eigen::Map<const Mat> C(cp, g.rows(), g.cols());
        Eigen::Map<Mat> Y(y.data() + b * out_plane, cout, g.cols());
        Y.noalias() = W * C;
        if (bias.defined())
            Y.colwise() += Eigen::Map<const detail::ColVec<T>>(bias.data().data(), cout);
    }
    std::vector<Tensor<T>> inputs{x, weight};
    if (bias.defined())
        inputs.push_back(bias);
    return make_result<T>(
        Shape{n, cout, g.out_h, g.out_w}, std::move(y), inputs,
        [xn = x.node(), wn = weight.node(), bn = bias.node(), g, n, cout, in_plane, out_plane](detail::Node<T>& o) {
            std::vector<T> col(g.pointwise() ? 0 : g.rows() * g.cols());
            std::vector<T> gcol(g.pointwise() ? 0 : g.rows() * g.cols());
            Eigen::Map<const Mat> W(wn->data.data(), cout, g.rows());
            if (xn->requires_grad)
                xn->ensure_grad();
            if (wn->requires_grad)
                wn->ensure_grad();
            if (bn && bn->requires_grad)
                bn->ensure_grad();
            for (std::size_t b = 0; b < n; ++b) {
                Eigen::Map<const Mat> G(o.grad.data() + b * out_plane, cout, g.cols());
                if (wn->requires_grad) {
                    const T* cp = xn->data.data() + b * in_plane;
                    if (!g.pointwise()) {
                        detail::im2col(cp, g, col.data());
                        cp = col.data();
                    }
                    Eigen::Map<const Mat> C(cp, g.rows(), g.cols());
                    Eigen::Map<Mat> GW(wn->grad.data(), cout, g.rows());
                    GW.noalias() += G * C.transpose();
                }
                if (bn && bn->requires_grad)
                    Eigen::Map<detail::ColVec<T>>(bn->grad.data(), cout) += G.rowwise().sum();
                if (xn->requires_grad) {
                    if (g.pointwise()) {
                        Eigen::Map<Mat> GX(xn->grad.data() + b * in_plane, g.rows(), g.cols());
                        GX.noalias() += W.transpose() * G;
                    } else {
                        Eigen::Map<Mat> GC(gcol.data(), g.rows(), g.cols());
                        GC.noalias() = W.transpose() * G;
                        detail::col2im_add(gcol.data(), g, xn->grad.data() + b * in_plane);
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, std::size_t stride, std::size_t padding)
{
    return conv2d(x, weight, Tensor<T>(), stride, padding);
}

/// One k x k filter per channel: weight[C,1,k,k].
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight, std::size_t stride, std::size_t padding)
{
    detail::require_rank(x.shape(), 4, "depthwise_conv2d", "input");
    detail::require_rank(weight.shape(), 4, "depthwise_conv2d", "weight");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), k = weight.dim(2);
    if (weight.dim(0) != c)
        throw DimensionError("depthwise_conv2d: weight has " + std::to_string(weight.dim(0)) +
                             " filters (axis 0) but input has " + std::to_string(c) + " channels (axis 1)");
    if (weight.dim(1) != 1 || weight.dim(3) != k)
        throw DimensionError("depthwise_conv2d: weight must be [C,1,k,k], got " + shape_str(weight.shape()));
    const std::size_t oh = detail::conv_out_dim(h, k, stride, padding, "depthwise_conv2d", "height (axis 2)");
    const std::size_t ow = detail::conv_out_dim(w, k, stride, padding, "depthwise_conv2d", "width (axis 3)");
    std::vector<T> y(n * c * oh * ow, T(0));
    const T* xd = x.data().data();
    const T* wd = weight.data().data();

    // visits every (output, input, tap) triple inside the padded frame
    auto sweep = [=](auto&& f) {
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const std::size_t plane = b * c + ch;
                for (std::size_t oy = 0; oy < oh; ++oy)
                    for (std::size_t ki = 0; ki < k; ++ki) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ki) -
                                                  static_cast<std::ptrdiff_t>(padding);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h))
                            continue;
                        for (std::size_t ox = 0; ox < ow; ++ox)
                            for (std::size_t kj = 0; kj < k; ++kj) {
                                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kj) -
                                                          static_cast<std::ptrdiff_t>(padding);
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w))
                                    continue;
                                f((plane * oh + oy) * ow + ox,
                                  (plane * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix),
                                  (ch * k + ki) * k + kj);
                            }
                    }
            }
    };
    sweep([&](std::size_t io, std::size_t ii, std::size_t iw) { y[io] += xd[ii] * wd[iw]; });
    return make_result<T>(Shape{n, c, oh, ow}, std::move(y), {x, weight},
                          [xn = x.node(), wn = weight.node(), sweep](detail::Node<T>& o) {
                              const bool gx = xn->requires_grad, gw = wn->requires_grad;
                              if (gx)
                                  xn->ensure_grad();
                              if (gw)
                                  wn->ensure_grad();
                              sweep([&](std::size_t io, std::size_t ii, std::size_t iw) {
                                  const T g = o.grad[io];
                                  if (gx)
                                      xn->grad[ii] += g * wn->data[iw];
                                  if (gw)
                                      wn->grad[iw] += g * xn->data[ii];
                              });
                          });
}

// ---------------------------------------------------------------------------
// Batch normalization

/// Running statistics carried between calls. Updated in training mode as
/// running = momentum * running + (1 - momentum) * batch (unbiased batch variance).
template <typename T>
struct BatchNormStats {
    Tensor<T> running_mean;
    Tensor<T> running_var;
    T momentum = T(0.9);
    T eps = T(1e-5);

    explicit BatchNormStats(std::size_t channels = 0)
        : running_mean(Shape{channels}, T(0)), running_var(Shape{channels}, T(1))
    {
    }
};

/// Per-channel normalization of x[N,C,...] over every axis except 1.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormStats<T>& stats,
                     bool training)
{
    if (x.rank() < 2)
        throw DimensionError("batch_norm: input needs rank >= 2, got " + shape_str(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1);
    const std::size_t inner = x.numel() / (n * c);
    for (const Tensor<T>* p : std::initializer_list<const Tensor<T>*>{&gamma, &beta, &stats.running_mean, &stats.running_var})
        if (p->rank() != 1 || p->dim(0) != c)
            throw DimensionError("batch_norm: per-channel parameter shape " + shape_str(p->shape()) +
                                 " does not match " + std::to_string(c) + " channels (axis 1)");
    const std::size_t count = n * inner;
    if (training && count < 2)
        throw DimensionError("batch_norm: training mode needs more than one value per channel");

    const T* xd = x.data().data();
    std::vector<T> mean(c), invstd(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
        if (training) {
            double s = 0.0;
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t i = 0; i < inner; ++i)
                    s += xd[(b * c + ch) * inner + i];
            const double m = s / static_cast<double>(count);
            double v = 0.0;
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t i = 0; i < inner; ++i) {
                    const double d = xd[(b * c + ch) * inner + i] - m;
                    v += d * d;
                }
            const double var = v / static_cast<double>(count);
            mean[ch] = static_cast<T>(m);
            invstd[ch] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(stats.eps)));
            const double unbiased = v / static_cast<double>(count - 1);
            stats.running_mean[ch] = stats.momentum * stats.running_mean[ch] + (T(1) - stats.momentum) * static_cast<T>(m);
            stats.running_var[ch] =
                stats.momentum * stats.running_var[ch] + (T(1) - stats.momentum) * static_cast<T>(unbiased);
        } else {
            mean[ch] = stats.running_mean[ch];
            invstd[ch] = T(1) / std::sqrt(stats.running_var[ch] + stats.eps);
        }
    }
    std::vector<T> xhat(x.numel()), y(x.numel());
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t idx = (b * c + ch) * inner + i;
                xhat[idx] = (xd[idx] - mean[ch]) * invstd[ch];
                y[idx] = gamma[ch] * xhat[idx] + beta[ch];
            }
    return make_result<T>(
        x.shape(), std::move(y), {x, gamma, beta},
        [xn = x.node(), gn = gamma.node(), bn = beta.node(), xhat = std::move(xhat), invstd, n, c, inner, count,
         training](detail::Node<T>& o) {
            std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t i = 0; i < inner; ++i) {
                        const std::size_t idx = (b * c + ch) * inner + i;
                        sum_g[ch] += o.grad[idx];
                        sum_gx[ch] += static_cast<double>(o.grad[idx]) * xhat[idx];
                    }
            if (gn->requires_grad) {
                gn->ensure_grad();
                for (std::size_t ch = 0; ch < c; ++ch)
                    gn->grad[ch] += static_cast<T>(sum_gx[ch]);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t ch = 0; ch < c; ++ch)
                    bn->grad[ch] += static_cast<T>(sum_g[ch]);
            }
            if (!xn->requires_grad)
                return;
            xn->ensure_grad();
            const double m = static_cast<double>(count);
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const double gam = gn->data[ch], is = invstd[ch];
                    for (std::size_t i = 0; i < inner; ++i) {
                        const std::size_t idx = (b * c + ch) * inner + i;
                        const double g = o.grad[idx];
                        const double dx = training
                                              ? gam * is * (g - sum_g[ch] / m - xhat[idx] * sum_gx[ch] / m)
                                              : gam * is * g;
                        xn->grad[idx] += static_cast<T>(dx);
                    }
                }
        });
}

} // namespace damd
