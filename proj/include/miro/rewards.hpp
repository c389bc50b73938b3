#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <iostream>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "miro/digest.hpp"
#include "miro/error.hpp"

namespace miro {

struct Point2 {
    double x = 0.0;
    double y = 0.0;
    friend bool operator==(const Point2&, const Point2&) = default;
};

/// Sink for non-fatal diagnostics; replaceable in tests.
inline std::function<void(const std::string&)>& warning_sink() {
    static std::function<void(const std::string&)> sink = [](const std::string& msg) {
        std::cerr << "warning: " << msg << '\n';
    };
    return sink;
}

inline void warn(const std::string& msg) { warning_sink()(msg); }

}  // namespace miro

namespace miro::rewards {

inline constexpr std::size_t kRewardCount = 4;
inline constexpr std::size_t kDefaultConditions = 8;
inline constexpr std::size_t kDefaultBins = 8;

struct RewardSpec {
    std::size_t id;
    const char* name;
    const char* description;
    double range_min;
    double range_max;
};

inline const std::array<RewardSpec, kRewardCount>& suite() {
    static const std::array<RewardSpec, kRewardCount> specs{{
        {0, "radius_fidelity", "-| |x| - 1 |, peaks on the unit circle", -1.0, 0.0},
        {1, "condition_alignment", "cos(angle(x) - 2*pi*c/C), peaks on the condition's ray", -1.0, 1.0},
        {2, "axis_preference", "-|x2|, peaks on the horizontal axis", -2.0, 0.0},
        {3, "outer_ring", "-(|x| - 1.5)^2, peaks on the radius-1.5 ring", -2.25, 0.0},
    }};
    return specs;
}

/// Raw scores of one sample. values[j] = r_j(x, c).
struct RewardVector {
    std::array<double, kRewardCount> values{};
    double operator[](std::size_t j) const { return values[j]; }
    friend bool operator==(const RewardVector&, const RewardVector&) = default;
};

inline RewardVector score_sample(Point2 p, std::size_t condition, std::size_t conditions = kDefaultConditions) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw NonFiniteError("score_sample: point is not finite");
    if (conditions == 0 || condition >= conditions) {
        throw ValidationError("score_sample: condition " + std::to_string(condition) + " outside [0, " +
                              std::to_string(conditions) + ")");
    }
    const double radius = std::hypot(p.x, p.y);
    // atan2(0, 0) is 0 on IEEE platforms; stated here since r1 relies on it.
    const double angle = (p.x == 0.0 && p.y == 0.0) ? 0.0 : std::atan2(p.y, p.x);
    const double target_angle = 2.0 * std::numbers::pi * static_cast<double>(condition) / static_cast<double>(conditions);
    RewardVector r;
    r.values[0] = -std::abs(radius - 1.0);
    r.values[1] = std::cos(angle - target_angle);
    r.values[2] = -std::abs(p.y);
    r.values[3] = -(radius - 1.5) * (radius - 1.5);
    return r;
}

/// Interior quantile edges per reward. Bin of s is the number of edges < s.
struct BinCalibration {
    static constexpr int kVersion = 1;
    std::size_t bins = kDefaultBins;
    std::size_t calibration_size = 0;
    std::vector<std::vector<double>> edges;
    std::vector<std::string> reward_names;

    std::size_t rewards() const noexcept { return edges.size(); }

    nlohmann::json to_json() const {
        return {{"version", kVersion},
                {"B", bins},
                {"calibration_size", calibration_size},
                {"edges", edges},
                {"reward_names", reward_names}};
    }

    static BinCalibration from_json(const nlohmann::json& j) {
        try {
            if (j.at("version").get<int>() != kVersion) {
                throw FormatError("calibration: unsupported version " + j.at("version").dump());
            }
            BinCalibration cal;
            cal.bins = j.at("B").get<std::size_t>();
            cal.calibration_size = j.at("calibration_size").get<std::size_t>();
            cal.edges = j.at("edges").get<std::vector<std::vector<double>>>();
            cal.reward_names = j.at("reward_names").get<std::vector<std::string>>();
            cal.validate();
            return cal;
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("calibration: ") + e.what());
        }
    }

    void validate() const {
        if (bins < 2) throw FormatError("calibration: B must be >= 2");
        if (reward_names.size() != edges.size()) throw FormatError("calibration: names/edges length mismatch");
        for (const auto& e : edges) {
            if (e.size() != bins - 1) throw FormatError("calibration: edge list length != B-1");
            if (!std::is_sorted(e.begin(), e.end())) throw FormatError("calibration: edges not sorted");
        }
    }

    std::string digest() const { return sha256_hex(to_json().dump()); }

    friend bool operator==(const BinCalibration&, const BinCalibration&) = default;
};

/// Equal-population edges: edge k is the element at sorted rank
/// ceil((k+1) M / B) - 1, computed independently per reward.
inline BinCalibration calibrate_bins(const std::vector<std::vector<double>>& scores, std::size_t bins) {
    if (bins < 2) throw ValidationError("calibrate_bins: B must be >= 2, got " + std::to_string(bins));
    if (scores.empty()) throw ValidationError("calibrate_bins: no reward score lists");
    BinCalibration cal;
    cal.bins = bins;
    cal.calibration_size = scores.front().size();
    for (std::size_t j = 0; j < scores.size(); ++j) {
        const auto& column = scores[j];
        const std::size_t m = column.size();
        if (m != cal.calibration_size) throw ValidationError("calibrate_bins: score lists differ in length");
        if (m < bins) {
            throw ValidationError("calibrate_bins: reward " + std::to_string(j) + " has " + std::to_string(m) +
                                  " samples, need at least B=" + std::to_string(bins));
        }
        for (double v : column) {
            if (!std::isfinite(v)) throw NonFiniteError("calibrate_bins: non-finite score for reward " + std::to_string(j));
        }
        std::vector<double> sorted = column;
        std::sort(sorted.begin(), sorted.end());
        std::vector<double> edges;
        for (std::size_t k = 0; k + 1 < bins; ++k) {
            const std::size_t rank = ((k + 1) * m + bins - 1) / bins - 1;
            edges.push_back(sorted[rank]);
        }
        if (sorted.front() == sorted.back()) {
            warn("calibrate_bins: reward " + std::to_string(j) +
                 " has a constant score distribution; every sample falls in bin 0");
        }
        cal.edges.push_back(std::move(edges));
        cal.reward_names.emplace_back(j < kRewardCount ? suite()[j].name : "reward_" + std::to_string(j));
    }
    return cal;
}

inline std::size_t assign_bin(const BinCalibration& cal, std::size_t reward, double score) {
    if (!std::isfinite(score)) throw NonFiniteError("assign_bin: non-finite score");
    if (reward >= cal.rewards()) {
        throw ValidationError("assign_bin: reward " + std::to_string(reward) + " outside calibration");
    }
    const auto& e = cal.edges[reward];
    return static_cast<std::size_t>(std::lower_bound(e.begin(), e.end(), score) - e.begin());
}

/// Bin position (possibly fractional) mapped onto [0, 1].
inline double normalize_target(double bin, std::size_t bins) {
    if (bins < 2) throw ValidationError("normalize_target: B must be >= 2");
    const double top = static_cast<double>(bins - 1);
    if (!(bin >= 0.0 && bin <= top)) {
        throw ValidationError("normalize_target: bin " + std::to_string(bin) + " outside [0, " + std::to_string(bins - 1) + "]");
    }
    return bin / top;
}

}  // namespace miro::rewards
