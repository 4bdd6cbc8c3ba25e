#pragma once

// Landmark accuracy: normalized mean error over visible points, cumulative
// error distribution, and absolute-yaw binned reporting.

#include "damd/error.hpp"
#include "damd/morphable_model.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

namespace damd {

struct EvalSample {
    std::string id;                  ///< used in error messages
    std::vector<double> truth;       ///< 68 (x, y) pairs
    std::vector<double> prediction;  ///< 68 (x, y) pairs
    std::vector<bool> visibility;    ///< 68 flags
    double normalizer = 1.0;         ///< sqrt(bbox_w * bbox_h)
    double yaw_deg = 0.0;
};

inline double bbox_normalizer(double w, double h) { return std::sqrt(w * h); }

/// Per-sample error in percent: mean visible-point distance / d * 100.
inline double sample_nme(const EvalSample& s)
{
    const std::size_t n = s.visibility.size();
    if (s.truth.size() != 2 * n || s.prediction.size() != 2 * n)
        throw DimensionError("sample '" + s.id + "': landmark and visibility counts disagree");
    if (!(s.normalizer > 0.0))
        throw DataError("sample '" + s.id + "': normalizer must be positive");
    double total = 0.0;
    std::size_t visible = 0;
    for (std::size_t j = 0; j < n; ++j) {
        if (!s.visibility[j])
            continue;
        total += std::hypot(s.prediction[2 * j] - s.truth[2 * j], s.prediction[2 * j + 1] - s.truth[2 * j + 1]);
        ++visible;
    }
    if (visible == 0)
        throw DataError("sample '" + s.id + "' has no visible landmarks");
    return 100.0 * total / (s.normalizer * static_cast<double>(visible));
}

/// Mean of the per-sample errors, in percent.
inline double nme(const std::vector<EvalSample>& samples)
{
    if (samples.empty())
        throw DataError("nme: no samples");
    double total = 0.0;
    for (const auto& s : samples)
        total += sample_nme(s);
    return total / static_cast<double>(samples.size());
}

/// (threshold, fraction of samples with per-sample NME <= threshold); thresholds in percent.
inline std::vector<std::pair<double, double>> ced_curve(const std::vector<EvalSample>& samples,
                                                        const std::vector<double>& thresholds)
{
    if (samples.empty())
        throw DataError("ced_curve: no samples");
    for (std::size_t i = 1; i < thresholds.size(); ++i)
        if (thresholds[i] < thresholds[i - 1])
            throw ConfigError("ced_curve: thresholds must be sorted ascending");
    std::vector<double> errors;
    for (const auto& s : samples)
        errors.push_back(sample_nme(s));
    std::vector<std::pair<double, double>> out;
    for (double t : thresholds) {
        std::size_t below = 0;
        for (double e : errors)
            below += e <= t ? 1 : 0;
        out.emplace_back(t, static_cast<double>(below) / static_cast<double>(errors.size()));
    }
    return out;
}

inline std::vector<double> default_ced_thresholds(double max_percent = 10.0, std::size_t steps = 100)
{
    std::vector<double> t;
    for (std::size_t i = 0; i <= steps; ++i)
        t.push_back(max_percent * static_cast<double>(i) / static_cast<double>(steps));
    return t;
}

inline constexpr std::array<const char*, 3> kYawBinLabels{"[0,30]", "(30,60]", "(60,90]"};

struct BinReport {
    std::array<std::optional<double>, 3> bins; ///< NME% per bin, empty when the bin has no samples
    std::array<std::size_t, 3> counts{};
    double mean = 0.0;
    double std = 0.0;            ///< population std over the present bins
    bool missing_bins = false;   ///< some bin was empty and left out of mean/std
    double overall = 0.0;        ///< NME over all samples
};

/// Bin index for |yaw|: boundaries go to the lower bin.
inline std::size_t yaw_bin(double yaw_deg)
{
    const double a = std::abs(yaw_deg);
    if (!(a <= 90.0 + 1e-6))
        throw DataError("yaw " + std::to_string(yaw_deg) + " outside [-90, 90] degrees");
    return a <= 30.0 ? 0 : (a <= 60.0 ? 1 : 2);
}

/// Mean and population std of the present values.
inline std::pair<double, double> mean_and_std(const std::vector<double>& values)
{
    if (values.empty())
        return {0.0, 0.0};
    double m = 0.0;
    for (double v : values)
        m += v;
    m /= static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values)
        var += (v - m) * (v - m);
    return {m, std::sqrt(var / static_cast<double>(values.size()))};
}

inline BinReport summarize_bins(const std::array<std::optional<double>, 3>& bins)
{
    BinReport r;
    r.bins = bins;
    std::vector<double> present;
    for (const auto& b : bins) {
        if (b)
            present.push_back(*b);
        else
            r.missing_bins = true;
    }
    std::tie(r.mean, r.std) = mean_and_std(present);
    return r;
}

inline BinReport yaw_bin_report(const std::vector<EvalSample>& samples)
{
    if (samples.empty())
        throw DataError("yaw_bin_report: no samples");
    std::array<std::vector<EvalSample>, 3> groups;
    for (const auto& s : samples)
        groups[yaw_bin(s.yaw_deg)].push_back(s);
    std::array<std::optional<double>, 3> bins;
    for (std::size_t b = 0; b < 3; ++b)
        if (!groups[b].empty())
            bins[b] = nme(groups[b]);
    BinReport r = summarize_bins(bins);
    for (std::size_t b = 0; b < 3; ++b)
        r.counts[b] = groups[b].size();
    r.overall = nme(samples);
    return r;
}

inline nlohmann::json to_json(const BinReport& r)
{
    nlohmann::json bins = nlohmann::json::array();
    for (std::size_t b = 0; b < 3; ++b)
        bins.push_back({{"range_deg", kYawBinLabels[b]},
                        {"nme_percent", r.bins[b] ? nlohmann::json(*r.bins[b]) : nlohmann::json(nullptr)},
                        {"count", r.counts[b]}});
    return {{"bins", bins},
            {"mean", r.mean},
            {"std", r.std},
            {"missing_bins", r.missing_bins},
            {"overall_nme_percent", r.overall}};
}

/// One-row table in the column layout of the yaw-binned comparison.
inline std::string format_table(const BinReport& r, const std::string& method)
{
    auto cell = [](const std::optional<double>& v) {
        char buf[32];
        if (v)
            std::snprintf(buf, sizeof buf, "%.3f", *v);
        else
            std::snprintf(buf, sizeof buf, "-");
        return std::string(buf);
    };
    char line[256];
    std::ostringstream os;
    std::snprintf(line, sizeof line, "%-12s %10s %10s %10s %10s %10s\n", "Method", kYawBinLabels[0], kYawBinLabels[1],
                  kYawBinLabels[2], "Mean", "Std");
    os << line;
    std::snprintf(line, sizeof line, "%-12s %10s %10s %10s %10s %10s\n", method.c_str(), cell(r.bins[0]).c_str(),
                  cell(r.bins[1]).c_str(), cell(r.bins[2]).c_str(), cell(r.mean).c_str(), cell(r.std).c_str());
    os << line;
    if (r.missing_bins)
        os << "warning: empty yaw bins excluded from Mean/Std\n";
    return os.str();
}

inline std::string format_ced_csv(const std::vector<std::pair<double, double>>& curve)
{
    std::ostringstream os;
    os << "threshold,fraction\n";
    char line[64];
    for (const auto& [t, f] : curve) {
        std::snprintf(line, sizeof line, "%.6g,%.6g\n", t, f);
        os << line;
    }
    return os.str();
}

} // namespace damd
