#pragma once

// Attention modules and the executable DAMDNet family. The network is an
// interpreter over a NetworkSpec graph; weights are created per layer from the
// descriptors, so the executable weight set and count_params() agree by
// construction.

#include "damd/adam.hpp"
#include "damd/network_spec.hpp"
#include "damd/ops.hpp"
#include "damd/rng.hpp"
#include "damd/weights_io.hpp"

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace damd {

// ---------------------------------------------------------------------------
// Attention modules

template <typename T>
struct SEWeights {
    Tensor<T> fc1_weight; ///< [m, C]
    Tensor<T> fc1_bias;   ///< [m]
    Tensor<T> fc2_weight; ///< [C, m]
    Tensor<T> fc2_bias;   ///< [C]
};

/// Channel attention: x * sigmoid(FC2(ReLU(FC1(GAP(x))))). `gates`, when given,
/// receives the [N,C] gate values.
template <typename T>
Tensor<T> se_module(const Tensor<T>& x, const SEWeights<T>& w, Tensor<T>* gates = nullptr)
{
    detail::require_rank(x.shape(), 4, "se_module", "input");
    const std::size_t n = x.dim(0), c = x.dim(1);
    if (w.fc1_weight.rank() != 2 || w.fc1_weight.dim(1) != c || w.fc2_weight.rank() != 2 || w.fc2_weight.dim(0) != c)
        throw DimensionError("se_module: weights do not match " + std::to_string(c) + " input channels (axis 1)");
    const auto squeezed = reshape(global_avg_pool(x), Shape{n, c});
    const auto hidden = relu(linear(squeezed, w.fc1_weight, w.fc1_bias));
    const auto g = sigmoid(linear(hidden, w.fc2_weight, w.fc2_bias));
    if (gates)
        *gates = g;
    return mul(x, reshape(g, Shape{n, c, 1, 1}));
}

template <typename T>
struct SGETrace {
    Tensor<T> normalized; ///< [N,g,1,HW] similarity map before the affine step
    Tensor<T> mask;       ///< [N,g,1,HW]
};

inline constexpr double kSgeEps = 1e-8;

/// Spatial group-wise enhancement with per-group affine (gamma, beta), each [g].
template <typename T>
Tensor<T> sge_module(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, std::size_t groups,
                     SGETrace<T>* trace = nullptr)
{
    detail::require_rank(x.shape(), 4, "sge_module", "input");
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (groups == 0 || c % groups != 0)
        throw ConfigError("sge_module: " + std::to_string(c) + " channels not divisible into " +
                          std::to_string(groups) + " groups");
    if (gamma.numel() != groups || beta.numel() != groups)
        throw DimensionError("sge_module: gamma/beta need " + std::to_string(groups) + " entries");
    const auto xg = reshape(x, Shape{n, groups, c / groups, hw});
    const auto pooled = reduce_mean(xg, {3}, true);
    const auto sim = reduce_sum(mul(xg, pooled), {2}, true);
    const auto centered = sub(sim, reduce_mean(sim, {3}, true));
    const auto var = reduce_mean(square(centered), {3}, true);
    const auto normalized = mul(centered, rsqrt(var, static_cast<T>(kSgeEps)));
    const auto affine = add(mul(normalized, reshape(gamma, Shape{1, groups, 1, 1})), reshape(beta, Shape{1, groups, 1, 1}));
    const auto mask = sigmoid(affine);
    if (trace) {
        trace->normalized = normalized;
        trace->mask = mask;
    }
    return reshape(mul(xg, mask), x.shape());
}

/// Fixed (non-trainable) average pooling, zero padding counted in the divisor.
template <typename T>
Tensor<T> avg_pool(const Tensor<T>& x, std::size_t k, std::size_t stride, std::size_t padding)
{
    detail::require_rank(x.shape(), 4, "avg_pool", "input");
    const Tensor<T> w(Shape{x.dim(1), 1, k, k}, static_cast<T>(1.0 / static_cast<double>(k * k)));
    return depthwise_conv2d(x, w, stride, padding);
}

// ---------------------------------------------------------------------------
// Executable network

/// Statistics buffers and parameters of one layer, keyed by the layer index.
template <typename T>
struct LayerWeights {
    Tensor<T> weight, bias;          ///< conv / linear
    Tensor<T> gamma, beta;           ///< batch-norm affine, SGE affine
    std::optional<BatchNormStats<T>> stats;
    SEWeights<T> se;
};

template <typename T>
class DamdNet {
public:
    DamdNet() = default;

    /// Kaiming (fan-in) normal init for conv/linear weights, zero biases,
    /// batch-norm gamma=1 beta=0, SGE gamma=1 beta=0.
    DamdNet(NetworkSpec spec, std::uint64_t init_seed) : spec_(std::move(spec))
    {
        const auto stats = analyze(spec_, spec_.input_size);
        std::mt19937_64 eng(init_seed);
        layers_.resize(spec_.layers.size());
        auto kaiming = [&eng](Shape shape, std::size_t fan_in) {
            Tensor<T> t(std::move(shape), T(0), true);
            const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
            for (auto& v : t.data())
                v = static_cast<T>(sd * normal(eng));
            return t;
        };
        for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
            const auto& l = spec_.layers[i];
            const std::size_t cin = stats[i].in.c;
            auto& lw = layers_[i];
            switch (l.kind) {
            case LayerKind::Conv:
                if (l.groups != 1 && !(l.groups == cin && l.groups == l.out_channels))
                    throw ConfigError("layer '" + l.name + "': only dense and depthwise convolutions are executable");
                lw.weight = kaiming(Shape{l.out_channels, cin / l.groups, l.kernel, l.kernel},
                                    cin / l.groups * l.kernel * l.kernel);
                if (l.bias)
                    lw.bias = Tensor<T>(Shape{l.out_channels}, T(0), true);
                break;
            case LayerKind::Linear:
                lw.weight = kaiming(Shape{l.out_channels, stats[i].in.numel()}, stats[i].in.numel());
                if (l.bias)
                    lw.bias = Tensor<T>(Shape{l.out_channels}, T(0), true);
                break;
            case LayerKind::BatchNorm:
                lw.gamma = Tensor<T>(Shape{cin}, T(1), true);
                lw.beta = Tensor<T>(Shape{cin}, T(0), true);
                lw.stats.emplace(cin);
                break;
            case LayerKind::SE: {
                const std::size_t m = se_bottleneck(cin, l.reduction);
                lw.se.fc1_weight = kaiming(Shape{m, cin}, cin);
                lw.se.fc1_bias = Tensor<T>(Shape{m}, T(0), true);
                lw.se.fc2_weight = kaiming(Shape{cin, m}, m);
                lw.se.fc2_bias = Tensor<T>(Shape{cin}, T(0), true);
                break;
            }
            case LayerKind::SGE:
                lw.gamma = Tensor<T>(Shape{l.groups}, T(1), true);
                lw.beta = Tensor<T>(Shape{l.groups}, T(0), true);
                break;
            case LayerKind::MaxPool:
                throw ConfigError("layer '" + l.name + "': max pooling is not executable");
            default:
                break;
            }
        }
        output_mean_ = Tensor<T>(Shape{1, spec_.output_dim}, T(0));
        output_std_ = Tensor<T>(Shape{1, spec_.output_dim}, T(1));
        collect();
    }

    const NetworkSpec& spec() const { return spec_; }

    /// Every layer output, in graph order.
    std::vector<Tensor<T>> forward_all(const Tensor<T>& x, bool training)
    {
        detail::require_rank(x.shape(), 4, "damdnet_forward", "input");
        if (x.dim(1) != spec_.input_channels || x.dim(2) != spec_.input_size || x.dim(3) != spec_.input_size)
            throw DimensionError("damdnet_forward: expected input [N," + std::to_string(spec_.input_channels) + "," +
                                 std::to_string(spec_.input_size) + "," + std::to_string(spec_.input_size) +
                                 "], got " + shape_str(x.shape()));
        std::vector<Tensor<T>> outs(spec_.layers.size());
        for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
            const auto& l = spec_.layers[i];
            auto& lw = layers_[i];
            auto input = [&](std::size_t j) -> const Tensor<T>& {
                if (l.inputs.empty())
                    return i == 0 ? x : outs[i - 1];
                return l.inputs[j] == kNetworkInput ? x : outs[l.inputs[j]];
            };
            const Tensor<T>& in = input(0);
            switch (l.kind) {
            case LayerKind::Conv:
                outs[i] = l.groups == 1 ? conv2d(in, lw.weight, lw.bias, l.stride, l.padding)
                                        : (lw.bias.defined()
                                               ? add(depthwise_conv2d(in, lw.weight, l.stride, l.padding),
                                                     reshape(lw.bias, Shape{1, l.out_channels, 1, 1}))
                                               : depthwise_conv2d(in, lw.weight, l.stride, l.padding));
                break;
            case LayerKind::BatchNorm: outs[i] = batch_norm(in, lw.gamma, lw.beta, *lw.stats, training); break;
            case LayerKind::ReLU: outs[i] = relu(in); break;
            case LayerKind::Sigmoid: outs[i] = sigmoid(in); break;
            case LayerKind::AvgPool: outs[i] = avg_pool(in, l.kernel, l.stride, l.padding); break;
            case LayerKind::GlobalAvgPool: outs[i] = global_avg_pool(in); break;
            case LayerKind::Linear:
                outs[i] = linear(reshape(in, Shape{in.dim(0), in.numel() / in.dim(0)}), lw.weight, lw.bias);
                break;
            case LayerKind::SE: outs[i] = se_module(in, lw.se); break;
            case LayerKind::SGE: outs[i] = sge_module(in, lw.gamma, lw.beta, l.groups); break;
            case LayerKind::Concat: {
                std::vector<Tensor<T>> parts;
                for (std::size_t j = 0; j < l.inputs.size(); ++j)
                    parts.push_back(input(j));
                outs[i] = concat_channels(parts);
                break;
            }
            case LayerKind::Add: {
                Tensor<T> acc = input(0);
                for (std::size_t j = 1; j < l.inputs.size(); ++j)
                    acc = add(acc, input(j));
                outs[i] = acc;
                break;
            }
            case LayerKind::MaxPool: throw ConfigError("max pooling is not executable");
            }
        }
        return outs;
    }

    /// Raw head output z ([N,62]); the parameter estimate is mean + std * z.
    Tensor<T> forward_normalized(const Tensor<T>& x, bool training) { return forward_all(x, training).back(); }

    /// Parameter estimate [N,62] in original units.
    Tensor<T> forward(const Tensor<T>& x, bool training)
    {
        return add(mul(forward_normalized(x, training), output_std_), output_mean_);
    }

    /// Target normalization applied by forward(): p = mean + std * z.
    void set_output_normalization(std::span<const double> mean, std::span<const double> std)
    {
        if (mean.size() != spec_.output_dim || std.size() != spec_.output_dim)
            throw DimensionError("output normalization needs " + std::to_string(spec_.output_dim) + " entries");
        for (std::size_t k = 0; k < spec_.output_dim; ++k) {
            if (!(std[k] > 0.0))
                throw ConfigError("output normalization std must be positive");
            output_mean_[k] = static_cast<T>(mean[k]);
            output_std_[k] = static_cast<T>(std[k]);
        }
    }
    const Tensor<T>& output_mean() const { return output_mean_; }
    const Tensor<T>& output_std() const { return output_std_; }

    std::vector<NamedTensor<T>>& parameters() { return params_; }
    const std::vector<NamedTensor<T>>& parameters() const { return params_; }
    /// Non-trainable state: batch-norm running statistics and output normalization.
    const std::vector<NamedTensor<T>>& buffers() const { return buffers_; }

    std::size_t parameter_count() const
    {
        std::size_t n = 0;
        for (const auto& p : params_)
            n += p.value.numel();
        return n;
    }

    void zero_grad()
    {
        for (auto& p : params_)
            p.value.zero_grad();
    }

    LayerWeights<T>& layer(const std::string& name)
    {
        for (std::size_t i = 0; i < spec_.layers.size(); ++i)
            if (spec_.layers[i].name == name)
                return layers_[i];
        throw ConfigError("no layer named '" + name + "'");
    }

    std::vector<WeightRecord> to_records() const
    {
        std::vector<WeightRecord> out;
        for (const auto* list : {&params_, &buffers_})
            for (const auto& p : *list) {
                WeightRecord r{p.name, p.value.shape(), {}};
                for (T v : p.value.data())
                    r.values.push_back(static_cast<float>(v));
                out.push_back(std::move(r));
            }
        return out;
    }

    /// Loads every parameter and buffer by name. Records for tensors this
    /// network does not have are ignored unless `strict`; missing ones always fail.
    void load_records(const std::vector<WeightRecord>& records, bool strict = true)
    {
        std::map<std::string, const WeightRecord*> by_name;
        for (const auto& r : records)
            by_name[r.name] = &r;
        std::size_t used = 0;
        for (auto* list : {&params_, &buffers_})
            for (auto& p : *list) {
                auto it = by_name.find(p.name);
                if (it == by_name.end())
                    throw DataError("weights: missing tensor '" + p.name + "'");
                if (it->second->shape != p.value.shape())
                    throw DataError("weights: '" + p.name + "' has shape " + shape_str(it->second->shape) +
                                    ", network expects " + shape_str(p.value.shape()));
                for (std::size_t k = 0; k < p.value.numel(); ++k)
                    p.value[k] = static_cast<T>(it->second->values[k]);
                ++used;
            }
        if (strict && used != records.size())
            throw DataError("weights: file holds tensors this network does not use");
    }

    template <typename U>
    DamdNet<U> cast() const
    {
        DamdNet<U> out(spec_, 0);
        out.copy_from(*this);
        return out;
    }

    template <typename U>
    void copy_from(const DamdNet<U>& other)
    {
        const auto& op = other.parameters();
        const auto& ob = other.buffers();
        if (op.size() != params_.size() || ob.size() != buffers_.size())
            throw ConfigError("copy_from: networks have different layouts");
        auto copy = [](const auto& src, auto& dst) {
            for (std::size_t i = 0; i < dst.size(); ++i) {
                if (src[i].name != dst[i].name || src[i].value.shape() != dst[i].value.shape())
                    throw ConfigError("copy_from: tensor '" + dst[i].name + "' does not match");
                auto d = dst[i].value;
                for (std::size_t k = 0; k < d.numel(); ++k)
                    d[k] = static_cast<T>(src[i].value[k]);
            }
        };
        copy(op, params_);
        copy(ob, buffers_);
    }

private:
    void collect()
    {
        params_.clear();
        buffers_.clear();
        for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
            const auto& name = spec_.layers[i].name;
            auto& lw = layers_[i];
            auto param = [&](const std::string& suffix, const Tensor<T>& t) {
                if (t.defined())
                    params_.push_back({name + suffix, t});
            };
            param(".weight", lw.weight);
            param(".bias", lw.bias);
            param(".gamma", lw.gamma);
            param(".beta", lw.beta);
            param(".fc1.weight", lw.se.fc1_weight);
            param(".fc1.bias", lw.se.fc1_bias);
            param(".fc2.weight", lw.se.fc2_weight);
            param(".fc2.bias", lw.se.fc2_bias);
            if (lw.stats) {
                buffers_.push_back({name + ".running_mean", lw.stats->running_mean});
                buffers_.push_back({name + ".running_var", lw.stats->running_var});
            }
        }
        buffers_.push_back({"head.param_mean", output_mean_});
        buffers_.push_back({"head.param_std", output_std_});
    }

    NetworkSpec spec_;
    std::vector<LayerWeights<T>> layers_;
    Tensor<T> output_mean_, output_std_;
    std::vector<NamedTensor<T>> params_;
    std::vector<NamedTensor<T>> buffers_;
};

template <typename T>
void save_network(const std::filesystem::path& path, const DamdNet<T>& net)
{
    write_weights(path, net.to_records());
}

} // namespace damd
