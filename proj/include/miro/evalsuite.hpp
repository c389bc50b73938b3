#pragma once

// Experiment curves (reward-weight sweeps, best-of-N scaling), reward
// statistics and the JSON/CSV report format with self-auditing verdicts.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "miro/error.hpp"
#include "miro/model.hpp"
#include "miro/rewards.hpp"
#include "miro/rng.hpp"
#include "miro/sample.hpp"

namespace miro::eval {

using rewards::kRewardCount;
using nlohmann::json;

inline constexpr std::size_t kMinSamplesPerPoint = 100;
inline constexpr std::size_t kDefaultSamplesPerPoint = 512;

struct RewardStats {
    std::size_t count = 0;
    std::array<double, kRewardCount> mean{};
    std::array<double, kRewardCount> stddev{};  // sample (n-1) standard deviation
    std::array<double, kRewardCount> min{};
    std::array<double, kRewardCount> max{};

    double standard_error(std::size_t j) const {
        return count ? stddev[j] / std::sqrt(static_cast<double>(count)) : 0.0;
    }

    json to_json() const {
        return {{"count", count}, {"mean", mean}, {"std", stddev}, {"min", min}, {"max", max}};
    }
};

inline RewardStats stats_of(std::span<const rewards::RewardVector> scores) {
    if (scores.empty()) throw ValidationError("measure_rewards: empty sample set");
    RewardStats st;
    st.count = scores.size();
    const double n = static_cast<double>(st.count);
    for (std::size_t j = 0; j < kRewardCount; ++j) {
        // Values are sorted before summation so the statistics do not depend
        // on sample order.
        std::vector<double> col(scores.size());
        for (std::size_t i = 0; i < scores.size(); ++i) col[i] = scores[i][j];
        std::sort(col.begin(), col.end());
        const double mean = std::accumulate(col.begin(), col.end(), 0.0) / n;
        double ss = 0.0;
        for (double v : col) ss += (v - mean) * (v - mean);
        st.mean[j] = mean;
        st.stddev[j] = st.count > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
        st.min[j] = col.front();
        st.max[j] = col.back();
    }
    return st;
}

inline std::vector<rewards::RewardVector> score_all(std::span<const Point2> points, std::span<const std::size_t> conditions,
                                                    std::size_t n_conditions) {
    if (points.size() != conditions.size()) throw ValidationError("measure_rewards: points and conditions differ in length");
    std::vector<rewards::RewardVector> out;
    out.reserve(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) out.push_back(rewards::score_sample(points[i], conditions[i], n_conditions));
    return out;
}

inline RewardStats measure_rewards(std::span<const Point2> points, std::span<const std::size_t> conditions,
                                   std::size_t n_conditions = rewards::kDefaultConditions) {
    if (points.empty()) throw ValidationError("measure_rewards: empty sample set");
    const auto scores = score_all(points, conditions, n_conditions);
    return stats_of(scores);
}

/// Spearman rank correlation with average ranks for ties.
inline double spearman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.size() < 2) throw ValidationError("spearman: need two equal-length series of >= 2 values");
    auto ranks = [](std::span<const double> v) {
        std::vector<std::size_t> idx(v.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
        std::vector<double> r(v.size());
        for (std::size_t i = 0; i < idx.size();) {
            std::size_t k = i;
            while (k + 1 < idx.size() && v[idx[k + 1]] == v[idx[i]]) ++k;
            const double avg = 0.5 * static_cast<double>(i + k) + 1.0;
            for (std::size_t q = i; q <= k; ++q) r[idx[q]] = avg;
            i = k + 1;
        }
        return r;
    };
    const auto ra = ranks(a);
    const auto rb = ranks(b);
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

struct CurvePoint {
    double axis = 0.0;
    std::array<double, kRewardCount> mean{};
    std::array<double, kRewardCount> se{};
    std::size_t n = 0;
    friend bool operator==(const CurvePoint&, const CurvePoint&) = default;
};

struct SweepCurve {
    std::string name;
    std::string axis_label;
    std::vector<CurvePoint> points;
    json provenance = json::object();

    std::vector<double> axis() const {
        std::vector<double> a;
        for (const auto& p : points) a.push_back(p.axis);
        return a;
    }

    std::vector<double> means(std::size_t j) const {
        std::vector<double> m;
        for (const auto& p : points) m.push_back(p.mean.at(j));
        return m;
    }

    void validate() const {
        if (points.empty()) throw ValidationError("curve '" + name + "': no points");
        for (std::size_t i = 0; i < points.size(); ++i) {
            if (i > 0 && !(points[i].axis > points[i - 1].axis)) {
                throw ValidationError("curve '" + name + "': axis must be strictly increasing");
            }
            if (points[i].n < kMinSamplesPerPoint) {
                throw ValidationError("curve '" + name + "': point " + std::to_string(i) + " has " +
                                      std::to_string(points[i].n) + " samples, need >= " +
                                      std::to_string(kMinSamplesPerPoint));
            }
        }
    }

    json to_json() const {
        json pts = json::array();
        for (const auto& p : points) pts.push_back({{"axis", p.axis}, {"mean", p.mean}, {"se", p.se}, {"n", p.n}});
        return {{"name", name}, {"axis_label", axis_label}, {"points", pts}, {"provenance", provenance}};
    }

    static SweepCurve from_json(const json& j) {
        SweepCurve c;
        c.name = j.at("name").get<std::string>();
        c.axis_label = j.at("axis_label").get<std::string>();
        c.provenance = j.at("provenance");
        for (const auto& p : j.at("points")) {
            c.points.push_back({p.at("axis").get<double>(), p.at("mean").get<std::array<double, kRewardCount>>(),
                                p.at("se").get<std::array<double, kRewardCount>>(), p.at("n").get<std::size_t>()});
        }
        return c;
    }

    std::string to_csv() const {
        std::ostringstream os;
        os << "axis";
        for (std::size_t j = 0; j < kRewardCount; ++j) os << ",mean_r" << j << ",se_r" << j;
        os << ",n\n";
        char buf[64];
        for (const auto& p : points) {
            std::snprintf(buf, sizeof buf, "%.17g", p.axis);
            os << buf;
            for (std::size_t j = 0; j < kRewardCount; ++j) {
                std::snprintf(buf, sizeof buf, ",%.17g,%.17g", p.mean[j], p.se[j]);
                os << buf;
            }
            os << ',' << p.n << '\n';
        }
        return os.str();
    }

    friend bool operator==(const SweepCurve&, const SweepCurve&) = default;
};

inline CurvePoint curve_point(double axis, std::span<const rewards::RewardVector> scores) {
    const auto st = stats_of(scores);
    CurvePoint p;
    p.axis = axis;
    p.n = st.count;
    p.mean = st.mean;
    for (std::size_t j = 0; j < kRewardCount; ++j) p.se[j] = st.standard_error(j);
    return p;
}

struct SamplingOptions {
    double omega = sample::kDefaultOmega;
    std::size_t ode_steps = sample::kDefaultSteps;
    std::uint64_t seed = 0;
};

/// Conditions cycle 0, 1, ..., C-1, 0, ... over a sample set.
inline std::vector<std::size_t> cycled_conditions(std::size_t count, std::size_t n_conditions) {
    std::vector<std::size_t> cs(count);
    for (std::size_t i = 0; i < count; ++i) cs[i] = i % n_conditions;
    return cs;
}

/// For each g in grid: s+_j = g, other components 1, s- = zeros. Every grid
/// point reuses the same noise so the curve reflects the target alone.
inline SweepCurve sweep_reward_weight(const model::ModelCheckpoint& ckpt, std::size_t j, std::span<const double> grid,
                                      std::size_t samples_per_point = kDefaultSamplesPerPoint,
                                      const SamplingOptions& opt = {}) {
    if (grid.empty()) throw ValidationError("sweep: empty grid");
    if (j >= ckpt.params.rewards) throw ValidationError("sweep: reward index out of range");
    if (samples_per_point < kMinSamplesPerPoint) {
        throw ValidationError("sweep: samples per point must be >= " + std::to_string(kMinSamplesPerPoint));
    }
    for (double g : grid) {
        if (!(g >= 0.0 && g <= 1.0)) throw ValidationError("sweep: grid values must lie in [0, 1]");
    }
    const auto cs = cycled_conditions(samples_per_point, ckpt.params.conditions);
    SweepCurve curve;
    curve.name = "sweep_r" + std::to_string(j);
    curve.axis_label = "s_plus_r" + std::to_string(j);
    for (double g : grid) {
        auto spec = sample::GuidanceSpec::defaults(ckpt.params.rewards, opt.omega);
        spec.s_plus[j] = g;
        const auto pts = sample::sample_points(sample::CheckpointField{ckpt}, opt.ode_steps, opt.seed, cs, spec);
        curve.points.push_back(curve_point(g, score_all(pts, cs, ckpt.params.conditions)));
    }
    curve.provenance = {{"kind", "sweep_reward_weight"},
                        {"checkpoint_digest", ckpt.digest()},
                        {"reward", j},
                        {"grid", std::vector<double>(grid.begin(), grid.end())},
                        {"samples_per_point", samples_per_point},
                        {"omega", opt.omega},
                        {"ode_steps", opt.ode_steps},
                        {"seed", opt.seed}};
    curve.validate();
    return curve;
}

/// Evenly spaced grid over [0, 1] with `points` entries.
inline std::vector<double> unit_grid(std::size_t points) {
    if (points < 2) throw ValidationError("grid: need at least 2 points");
    std::vector<double> g(points);
    for (std::size_t i = 0; i < points; ++i) g[i] = static_cast<double>(i) / static_cast<double>(points - 1);
    return g;
}

/// Seed of best-of-N trial t.
inline std::uint64_t trial_seed(std::uint64_t seed, std::size_t trial) { return derive_seed(seed, Stream::trial, trial); }

/// Mean selected reward of best_of_n over `trials` trials for every N in
/// `ns`. Trial t runs at condition t mod C with seed trial_seed(seed, t).
/// best_of_n's candidate k depends only on (seed, k), so the best of the
/// first N of max(ns) candidates is exactly best_of_n(N); all N are read off
/// one candidate pool per trial.
inline SweepCurve scaling_curve(const model::ModelCheckpoint& ckpt, std::span<const std::size_t> ns, std::size_t selector,
                                std::size_t trials, const sample::GuidanceSpec& guidance, std::size_t ode_steps = sample::kDefaultSteps,
                                std::uint64_t seed = 0) {
    if (ns.empty()) throw ValidationError("scaling_curve: empty N list");
    for (std::size_t n : ns) {
        if (n == 0 || (n & (n - 1)) != 0) throw ValidationError("scaling_curve: N values must be powers of two");
    }
    if (selector >= kRewardCount) throw ValidationError("scaling_curve: selector out of range");
    if (trials < kMinSamplesPerPoint) {
        throw ValidationError("scaling_curve: trials must be >= " + std::to_string(kMinSamplesPerPoint));
    }
    guidance.validate(ckpt.params.rewards);
    const std::size_t max_n = *std::max_element(ns.begin(), ns.end());
    const std::size_t C = ckpt.params.conditions;
    // Trials are integrated in chunks so each forward pass has ~1k rows.
    const std::size_t chunk = std::max<std::size_t>(1, 1024 / max_n);
    std::vector<std::vector<rewards::RewardVector>> best(ns.size(), std::vector<rewards::RewardVector>(trials));
    for (std::size_t t0 = 0; t0 < trials; t0 += chunk) {
        const std::size_t t1 = std::min(trials, t0 + chunk);
        const std::size_t rows = (t1 - t0) * max_n;
        diff::Array x = diff::Array::zeros({rows, 2});
        std::vector<std::size_t> cs(rows);
        for (std::size_t t = t0; t < t1; ++t) {
            for (std::size_t k = 0; k < max_n; ++k) {
                const std::size_t r = (t - t0) * max_n + k;
                const Point2 e = sample::initial_noise(trial_seed(seed, t), k);
                x[2 * r] = e.x;
                x[2 * r + 1] = e.y;
                cs[r] = t % C;
            }
        }
        const auto pts = sample::to_points(sample::integrate(sample::CheckpointField{ckpt}, ode_steps, std::move(x), cs, guidance));
        for (std::size_t t = t0; t < t1; ++t) {
            std::vector<rewards::RewardVector> scores;
            for (std::size_t k = 0; k < max_n; ++k) {
                const std::size_t r = (t - t0) * max_n + k;
                scores.push_back(rewards::score_sample(pts[r], cs[r], C));
            }
            for (std::size_t q = 0; q < ns.size(); ++q) {
                std::size_t arg = 0;
                for (std::size_t k = 1; k < ns[q]; ++k) {
                    if (scores[k][selector] > scores[arg][selector]) arg = k;
                }
                best[q][t] = scores[arg];
            }
        }
    }
    SweepCurve curve;
    curve.name = "scaling_r" + std::to_string(selector);
    curve.axis_label = "N";
    for (std::size_t q = 0; q < ns.size(); ++q) curve.points.push_back(curve_point(static_cast<double>(ns[q]), best[q]));
    curve.provenance = {{"kind", "scaling_curve"},
                        {"checkpoint_digest", ckpt.digest()},
                        {"selector", selector},
                        {"ns", std::vector<std::size_t>(ns.begin(), ns.end())},
                        {"trials", trials},
                        {"s_plus", guidance.s_plus},
                        {"s_minus", guidance.s_minus},
                        {"omega", guidance.omega},
                        {"ode_steps", ode_steps},
                        {"seed", seed}};
    curve.validate();
    return curve;
}

inline std::vector<std::size_t> powers_of_two(std::size_t max_n) {
    std::vector<std::size_t> ns;
    for (std::size_t n = 1; n <= max_n; n *= 2) ns.push_back(n);
    return ns;
}

/// Infinite values (an unreached speedup) are not representable in JSON;
/// they are stored as null and read back as +inf.
inline json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

/// A pass/fail verdict. Curve-derived kinds can be recomputed from the
/// report's curves; `scalar` verdicts carry an externally measured value.
///
/// kinds and args:
///   spearman   {curve, reward}            value = rho(axis, mean_r)
///   cross_spearman {curve_x, reward_x?, curve_y, reward} value = rho(axis of curve_x, mean_r of curve_y)
///   max_drop   {curve, reward}            value = largest decrease between consecutive points
///   dominance  {curve, other, reward}     value = min over points of (curve - other)
///   gap        {curve, reward}            value = mean at last point - mean at first point
///   scalar     {}                         value supplied by the caller
struct Criterion {
    std::string name;
    std::string kind = "scalar";
    json args = json::object();
    std::string comparator = ">";  // value <comparator> threshold
    double threshold = 0.0;
    double value = 0.0;
    bool passed = false;
    std::string detail;

    json to_json() const {
        return {{"name", name},           {"kind", kind},   {"args", args},     {"comparator", comparator},
                {"threshold", threshold}, {"value", finite_or_null(value)}, {"passed", passed}, {"detail", detail}};
    }

    static Criterion from_json(const json& j) {
        Criterion c;
        c.name = j.at("name").get<std::string>();
        c.kind = j.at("kind").get<std::string>();
        c.args = j.at("args");
        c.comparator = j.at("comparator").get<std::string>();
        c.threshold = j.at("threshold").get<double>();
        c.value = j.at("value").is_null() ? std::numeric_limits<double>::infinity() : j.at("value").get<double>();
        c.passed = j.at("passed").get<bool>();
        c.detail = j.at("detail").get<std::string>();
        return c;
    }
};

inline bool compare(double value, const std::string& op, double threshold) {
    if (op == ">") return value > threshold;
    if (op == ">=") return value >= threshold;
    if (op == "<") return value < threshold;
    if (op == "<=") return value <= threshold;
    throw ValidationError("criterion: unknown comparator '" + op + "'");
}

inline const SweepCurve& find_curve(std::span<const SweepCurve> curves, const std::string& name) {
    for (const auto& c : curves) {
        if (c.name == name) return c;
    }
    throw ValidationError("criterion: no curve named '" + name + "'");
}

/// Value of a curve-derived criterion; nullopt for `scalar`.
inline std::optional<double> criterion_value(const Criterion& c, std::span<const SweepCurve> curves) {
    if (c.kind == "scalar") return std::nullopt;
    const std::size_t j = c.args.at("reward").get<std::size_t>();
    if (c.kind == "spearman") {
        const auto& cv = find_curve(curves, c.args.at("curve").get<std::string>());
        return spearman(cv.axis(), cv.means(j));
    }
    if (c.kind == "cross_spearman") {
        const auto& cx = find_curve(curves, c.args.at("curve_x").get<std::string>());
        const auto& cy = find_curve(curves, c.args.at("curve_y").get<std::string>());
        return spearman(cx.axis(), cy.means(j));
    }
    if (c.kind == "max_drop") {
        const auto m = find_curve(curves, c.args.at("curve").get<std::string>()).means(j);
        double drop = 0.0;
        for (std::size_t i = 1; i < m.size(); ++i) drop = std::max(drop, m[i - 1] - m[i]);
        return drop;
    }
    if (c.kind == "dominance") {
        const auto a = find_curve(curves, c.args.at("curve").get<std::string>()).means(j);
        const auto b = find_curve(curves, c.args.at("other").get<std::string>()).means(j);
        if (a.size() != b.size()) throw ValidationError("criterion: dominance curves differ in length");
        double margin = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < a.size(); ++i) margin = std::min(margin, a[i] - b[i]);
        return margin;
    }
    if (c.kind == "gap") {
        const auto m = find_curve(curves, c.args.at("curve").get<std::string>()).means(j);
        return m.back() - m.front();
    }
    throw ValidationError("criterion: unknown kind '" + c.kind + "'");
}

/// Fills value (for curve kinds) and passed.
inline Criterion evaluate(Criterion c, std::span<const SweepCurve> curves) {
    if (auto v = criterion_value(c, curves)) c.value = *v;
    c.passed = std::isfinite(c.value) || c.value == std::numeric_limits<double>::infinity()
                   ? compare(c.value, c.comparator, c.threshold)
                   : false;
    return c;
}

struct Report {
    static constexpr int kVersion = 1;
    std::string title;
    json config = json::object();
    std::vector<SweepCurve> curves;
    std::vector<Criterion> criteria;
    json extra = json::object();

    bool all_passed() const {
        return std::all_of(criteria.begin(), criteria.end(), [](const Criterion& c) { return c.passed; });
    }

    json to_json() const {
        json cs = json::array();
        for (const auto& c : curves) cs.push_back(c.to_json());
        json cr = json::array();
        for (const auto& c : criteria) cr.push_back(c.to_json());
        return {{"format", "miro-report"}, {"version", kVersion}, {"title", title}, {"config", config},
                {"curves", cs},            {"criteria", cr},      {"extra", extra}};
    }

    static Report from_json(const json& j) {
        try {
            if (j.at("format").get<std::string>() != "miro-report") throw FormatError("report: wrong format tag");
            if (j.at("version").get<int>() != kVersion) throw FormatError("report: unsupported version " + j.at("version").dump());
            Report r;
            r.title = j.at("title").get<std::string>();
            r.config = j.at("config");
            for (const auto& c : j.at("curves")) r.curves.push_back(SweepCurve::from_json(c));
            for (const auto& c : j.at("criteria")) r.criteria.push_back(Criterion::from_json(c));
            r.extra = j.at("extra");
            return r;
        } catch (const json::exception& e) {
            throw FormatError(std::string("report: ") + e.what());
        }
    }
};

/// Criteria whose stored verdict disagrees with a recomputation from the
/// embedded curves.
inline std::vector<std::string> audit_report(const Report& r) {
    std::vector<std::string> mismatches;
    for (const auto& c : r.criteria) {
        const Criterion again = evaluate(c, r.curves);
        if (again.passed != c.passed || (c.kind != "scalar" && again.value != c.value)) mismatches.push_back(c.name);
    }
    return mismatches;
}

/// Sibling CSV path of one curve: <dir>/<stem>.<curve>.csv
inline std::filesystem::path curve_csv_path(const std::filesystem::path& report_path, const std::string& curve) {
    return report_path.parent_path() / (report_path.stem().string() + "." + curve + ".csv");
}

inline void emit_report(const Report& r, const std::filesystem::path& path) {
    if (r.curves.empty() && r.criteria.empty() && r.extra.empty()) {
        throw ValidationError("emit_report: empty run, nothing to report");
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open report '" + path.string() + "' for writing");
    out << r.to_json().dump(2) << '\n';
    if (!out) throw IoError("write failed for '" + path.string() + "'");
    for (const auto& c : r.curves) {
        std::ofstream csv(curve_csv_path(path, c.name), std::ios::binary | std::ios::trunc);
        if (!csv) throw IoError("cannot write curve CSV for '" + c.name + "'");
        csv << c.to_csv();
    }
}

inline Report load_report(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open report '" + path.string() + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw FormatError("report '" + path.string() + "': " + e.what());
    }
    return Report::from_json(j);
}

}  // namespace miro::eval
