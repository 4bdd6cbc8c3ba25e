#pragma once

// Mini-batch Adam training of DamdNet with the combined loss, and inference
// from face crops to 2D landmarks.

#include "damd/adam.hpp"
#include "damd/augmentation.hpp"
#include "damd/losses.hpp"
#include "damd/network.hpp"
#include "damd/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

namespace damd {

inline constexpr std::array<std::size_t, 3> kReferenceMilestones{15, 25, 30};
inline constexpr std::size_t kReferenceEpochs = 40;

/// The 15/25/30-of-40 milestones rescaled to `epochs`.
inline std::vector<std::size_t> scaled_milestones(std::size_t epochs)
{
    std::vector<std::size_t> out;
    for (std::size_t m : kReferenceMilestones)
        out.push_back(static_cast<std::size_t>(
            std::lround(static_cast<double>(m) * static_cast<double>(epochs) / static_cast<double>(kReferenceEpochs))));
    return out;
}

struct TrainConfig {
    double lr = 0.01;
    std::size_t batch = 16;
    std::size_t epochs = 40;
    std::vector<std::size_t> milestones; ///< empty: scaled_milestones(epochs)
    double lr_factor = 0.2;
    WingConfig wing;
    CombinedLossConfig loss;
    double width = 0.125;
    Variant variant = Variant::DAMDNet;
    std::uint64_t seed = 0;

    std::vector<std::size_t> effective_milestones() const
    {
        return milestones.empty() ? scaled_milestones(epochs) : milestones;
    }

    void validate() const
    {
        if (!(lr > 0.0) || !std::isfinite(lr))
            throw ConfigError("learning rate must be positive");
        if (batch == 0 || epochs == 0)
            throw ConfigError("batch size and epoch count must be positive");
        if (!(lr_factor > 0.0) || !(lr_factor <= 1.0))
            throw ConfigError("lr factor must be in (0, 1]");
        if (!(width > 0.0))
            throw ConfigError("width multiplier must be positive");
        const auto ms = effective_milestones();
        if (!std::is_sorted(ms.begin(), ms.end()))
            throw ConfigError("milestones must be ascending");
        wing.validate();
        loss.validate();
    }
};

/// Learning rate for a 0-based epoch: lr * factor^(milestones passed).
inline double lr_for_epoch(const TrainConfig& cfg, std::size_t epoch)
{
    double lr = cfg.lr;
    for (std::size_t m : cfg.effective_milestones())
        if (epoch >= m)
            lr *= cfg.lr_factor;
    return lr;
}

struct StepLog {
    std::size_t step = 0;
    std::size_t epoch = 0;
    double lr = 0.0;
    double loss = 0.0;
    double wpdc = 0.0;
    double wing = 0.0;
};

inline std::string format_loss_csv(const std::vector<StepLog>& rows)
{
    std::string out = "step,epoch,lr,loss,wpdc,wing\n";
    char line[160];
    for (const auto& r : rows) {
        std::snprintf(line, sizeof line, "%zu,%zu,%.9g,%.9g,%.9g,%.9g\n", r.step, r.epoch, r.lr, r.loss, r.wpdc,
                      r.wing);
        out += line;
    }
    return out;
}

struct ParamStats {
    std::vector<double> mean, std;
};

/// Per-parameter mean and population std over the samples; a vanishing std is replaced by 1.
inline ParamStats param_stats(const std::vector<TrainingSample>& samples)
{
    if (samples.empty())
        throw DataError("param_stats: no samples");
    ParamStats s{std::vector<double>(kParamDims, 0.0), std::vector<double>(kParamDims, 0.0)};
    const double n = static_cast<double>(samples.size());
    for (const auto& x : samples)
        for (std::size_t k = 0; k < kParamDims; ++k)
            s.mean[k] += x.params.values[k] / n;
    for (const auto& x : samples)
        for (std::size_t k = 0; k < kParamDims; ++k) {
            const double d = x.params.values[k] - s.mean[k];
            s.std[k] += d * d / n;
        }
    for (double& v : s.std) {
        v = std::sqrt(v);
        if (!(v > 1e-8))
            v = 1.0;
    }
    return s;
}

/// WPDC weights from the model's shape std and the training set's pose std.
inline WpdcWeights training_wpdc_weights(const MorphableModel& model, const ParamStats& stats)
{
    std::vector<double> sd(kParamDims);
    for (std::size_t k = 0; k < kParamDims; ++k)
        sd[k] = k < kPoseDims ? stats.std[k] : static_cast<double>(model.param_std[k]);
    return wpdc_weights_from_std(sd);
}

template <typename T>
Tensor<T> param_batch(const std::vector<const ParamVector*>& params)
{
    std::vector<T> data;
    data.reserve(params.size() * kParamDims);
    for (const ParamVector* p : params)
        for (double v : p->values)
            data.push_back(static_cast<T>(v));
    return Tensor<T>(Shape{params.size(), kParamDims}, std::move(data));
}

struct TrainResult {
    DamdNet<float> net;           ///< last network whose loss was finite
    std::vector<StepLog> log;
    bool diverged = false;
    std::string message;
};

/// Runs the full schedule. On a non-finite loss or gradient training stops and
/// the result holds the weights from before the failing step.
inline TrainResult train(const MorphableModel& model, const std::vector<TrainingSample>& samples,
                         const TrainConfig& cfg, const std::function<void(const StepLog&)>& on_step = {})
{
    cfg.validate();
    if (samples.empty())
        throw DataError("train: empty training set");
    for (std::size_t i = 0; i < samples.size(); ++i)
        for (double v : samples[i].params.values)
            if (!std::isfinite(v))
                throw DataError("train: sample " + std::to_string(i) + " has non-finite params");
    const SeedSplitter seeds(cfg.seed);
    TrainResult result;
    result.net = DamdNet<float>(build_variant(cfg.variant, cfg.width, kCropSize), seeds.seed("init"));
    const auto stats = param_stats(samples);
    result.net.set_output_normalization(stats.mean, stats.std);
    const auto ctx = make_loss_context<float>(model, training_wpdc_weights(model, stats), cfg.wing, cfg.loss);

    AdamState<float> adam;
    std::vector<std::size_t> order(samples.size());
    std::size_t step = 0;
    std::vector<std::vector<float>> params_before;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        auto eng = seeds.engine("shuffle", epoch);
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(eng() % i)]);
        const double lr = lr_for_epoch(cfg, epoch);
        adam.lr = static_cast<float>(lr);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
            const std::size_t end = std::min(order.size(), start + cfg.batch);
            std::vector<const Image*> images;
            std::vector<const ParamVector*> targets;
            for (std::size_t i = start; i < end; ++i) {
                images.push_back(&samples[order[i]].image);
                targets.push_back(&samples[order[i]].params);
            }
            const auto x = network_input<float>(images);
            const auto gt = param_batch<float>(targets);

            // the weights that produced a finite loss, restored if this step fails
            auto snapshot = [](const std::vector<NamedTensor<float>>& list) {
                std::vector<std::vector<float>> out;
                for (const auto& t : list)
                    out.emplace_back(t.value.data().begin(), t.value.data().end());
                return out;
            };
            auto restore = [](const std::vector<NamedTensor<float>>& list, const std::vector<std::vector<float>>& saved) {
                for (std::size_t i = 0; i < list.size(); ++i) {
                    Tensor<float> dst = list[i].value; // shares storage
                    std::copy(saved[i].begin(), saved[i].end(), dst.data().begin());
                }
            };
            const auto buffers_before = snapshot(result.net.buffers());
            result.net.zero_grad();
            const auto terms = combined_loss(ctx, result.net.forward(x, true), gt);
            StepLog row{step, epoch, lr, terms.total.item(), terms.wpdc.item(), terms.wing.item()};
            if (!std::isfinite(row.loss)) {
                restore(result.net.buffers(), buffers_before);
                if (!params_before.empty())
                    restore(result.net.parameters(), params_before);
                result.diverged = true;
                result.message = "non-finite loss at step " + std::to_string(step);
                return result;
            }
            backward(terms.total);
            params_before = snapshot(result.net.parameters());
            try {
                adam_step(result.net.parameters(), adam);
            } catch (const NumericError& e) {
                restore(result.net.buffers(), buffers_before);
                restore(result.net.parameters(), params_before);
                result.diverged = true;
                result.message = "step " + std::to_string(step) + ": " + e.what();
                return result;
            }
            result.log.push_back(row);
            if (on_step)
                on_step(row);
            ++step;
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Inference

/// Parameter estimates for a batch of 120x120 crops (eval mode, no tape).
template <typename T>
std::vector<ParamVector> predict_params(DamdNet<T>& net, const std::vector<const Image*>& crops,
                                        std::size_t batch = 16)
{
    NoGradGuard guard;
    std::vector<ParamVector> out;
    for (std::size_t start = 0; start < crops.size(); start += batch) {
        const std::vector<const Image*> chunk(crops.begin() + static_cast<std::ptrdiff_t>(start),
                                              crops.begin() + static_cast<std::ptrdiff_t>(std::min(crops.size(), start + batch)));
        const auto p = net.forward(network_input<T>(chunk), false);
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            ParamVector pv;
            for (std::size_t k = 0; k < kParamDims; ++k)
                pv.values[k] = static_cast<double>(p[i * kParamDims + k]);
            out.push_back(pv);
        }
    }
    return out;
}

/// 68 landmarks in source-image coordinates for a crop's parameter estimate.
inline std::vector<double> landmarks_in_source(const MorphableModel& model, const ParamVector& p,
                                               const CropAffine& affine)
{
    return affine.landmarks_to_source(project_landmarks(model, p));
}

} // namespace damd
