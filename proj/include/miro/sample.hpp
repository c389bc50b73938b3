#pragma once

// Reward-guided Euler sampling.
//
// Guided velocity: v+ + omega * (v+ - v-), where v+/v- are the field at the
// positive/negative reward targets. Integration runs from t=1 (pure noise)
// to t=0 with the velocity evaluated at each interval's upper time.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "miro/diffcore.hpp"
#include "miro/error.hpp"
#include "miro/model.hpp"
#include "miro/rewards.hpp"
#include "miro/rng.hpp"

namespace miro::sample {

using diff::Array;

inline constexpr double kDefaultOmega = 2.0;
inline constexpr std::size_t kDefaultSteps = 50;

struct GuidanceSpec {
    std::vector<double> s_plus;
    std::vector<double> s_minus;
    double omega = kDefaultOmega;

    /// s+ = all ones, s- = all zeros.
    static GuidanceSpec defaults(std::size_t n = rewards::kRewardCount, double omega = kDefaultOmega) {
        return {std::vector<double>(n, 1.0), std::vector<double>(n, 0.0), omega};
    }

    void validate(std::size_t n) const {
        auto check = [n](const std::vector<double>& v, const char* name) {
            if (v.size() != n) {
                throw ValidationError(std::string(name) + ": expected " + std::to_string(n) + " components, got " +
                                      std::to_string(v.size()));
            }
            for (double x : v) {
                if (!(x >= 0.0 && x <= 1.0)) throw ValidationError(std::string(name) + ": components must lie in [0, 1]");
            }
        };
        check(s_plus, "s_plus");
        check(s_minus, "s_minus");
        if (!std::isfinite(omega) || omega < 0.0) throw ValidationError("omega: must be finite and >= 0");
    }

    friend bool operator==(const GuidanceSpec&, const GuidanceSpec&) = default;
};

struct SamplerConfig {
    std::size_t steps = kDefaultSteps;
    std::uint64_t seed = 0;
    GuidanceSpec guidance = GuidanceSpec::defaults();
    std::size_t condition = 0;
};

/// Anything that maps (x_t [m,2], t, per-row conditions, shared target) to
/// velocities [m,2].
template <class F>
concept VelocityField = requires(const F& f, const Array& x, double t, std::span<const std::size_t> c,
                                 std::span<const double> s) {
    { f(x, t, c, s) } -> std::convertible_to<Array>;
};

/// Adapter exposing a checkpoint as a VelocityField. Holds a reference; the
/// checkpoint must outlive it.
struct CheckpointField {
    const model::ModelCheckpoint& checkpoint;

    Array operator()(const Array& x, double t, std::span<const std::size_t> c, std::span<const double> s) const {
        return model::evaluate_field(checkpoint.params, checkpoint.mode, x, t, c, s);
    }

    /// Baseline checkpoints have no reward tokens, so v(s+) == v(s-).
    bool ignores_targets() const { return checkpoint.mode.kind == model::Mode::Kind::baseline; }
};

template <VelocityField F>
Array guided_velocity(const F& field, const Array& x_t, double t, std::span<const std::size_t> conditions,
                      const GuidanceSpec& g) {
    const Array plus = field(x_t, t, conditions, std::span<const double>(g.s_plus));
    const Array minus = field(x_t, t, conditions, std::span<const double>(g.s_minus));
    if (!plus.all_finite() || !minus.all_finite()) throw NonFiniteError("guided_velocity: field output is not finite");
    Array out = plus;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = plus[i] + g.omega * (plus[i] - minus[i]);
    return out;
}

template <VelocityField F>
Point2 guided_velocity(const F& field, Point2 x_t, double t, std::size_t c, const GuidanceSpec& g) {
    const std::size_t cs[1] = {c};
    const Array v = guided_velocity(field, Array({1, 2}, {x_t.x, x_t.y}), t, cs, g);
    return {v[0], v[1]};
}

/// Initial noise of sample i under `seed`.
inline Point2 initial_noise(std::uint64_t seed, std::uint64_t index) {
    Rng rng = make_rng(seed, Stream::sample, index);
    std::normal_distribution<double> n01(0.0, 1.0);
    const double a = n01(rng);
    const double b = n01(rng);
    return {a, b};
}

/// Euler integration from t=1 to t=0 of every row of `x` (shape [m,2]).
template <VelocityField F>
Array integrate(const F& field, std::size_t steps, Array x, std::span<const std::size_t> conditions, const GuidanceSpec& g) {
    if (steps == 0) throw ValidationError("sampler: steps must be >= 1");
    if (x.rank() != 2 || x.cols() != 2 || x.rows() != conditions.size()) {
        throw ShapeError("sampler: initial points and conditions disagree");
    }
    bool single_eval = g.omega == 0.0 || g.s_plus == g.s_minus;
    if constexpr (requires { field.ignores_targets(); }) {
        single_eval = single_eval || field.ignores_targets();
    }
    const double dt = 1.0 / static_cast<double>(steps);
    for (std::size_t k = steps; k-- > 0;) {
        const double t_hi = static_cast<double>(k + 1) * dt;
        // When the guidance term vanishes identically the guided velocity is
        // the positive-target field, bit for bit.
        const Array v = single_eval ? field(x, t_hi, conditions, std::span<const double>(g.s_plus))
                                    : guided_velocity(field, x, t_hi, conditions, g);
        if (!v.all_finite()) throw NonFiniteError("sampler: field output is not finite at step " + std::to_string(k));
        auto xs = x.mutable_data();
        for (std::size_t i = 0; i < xs.size(); ++i) xs[i] -= dt * v[i];
        if (!x.all_finite()) throw NonFiniteError("sampler: trajectory became non-finite at step " + std::to_string(k));
    }
    return x;
}

inline std::vector<Point2> to_points(const Array& x) {
    std::vector<Point2> out(x.rows());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = {x[2 * i], x[2 * i + 1]};
    return out;
}

/// Integrates one trajectory per entry of `conditions`; trajectory i starts
/// from initial_noise(seed, i).
template <VelocityField F>
std::vector<Point2> sample_points(const F& field, std::size_t steps, std::uint64_t seed,
                                  std::span<const std::size_t> conditions, const GuidanceSpec& g) {
    const std::size_t m = conditions.size();
    Array x = Array::zeros({m, 2});
    for (std::size_t i = 0; i < m; ++i) {
        const Point2 e = initial_noise(seed, i);
        x[2 * i] = e.x;
        x[2 * i + 1] = e.y;
    }
    return to_points(integrate(field, steps, std::move(x), conditions, g));
}

template <VelocityField F>
Point2 sample_ode(const F& field, const SamplerConfig& cfg) {
    const std::size_t cs[1] = {cfg.condition};
    return sample_points(field, cfg.steps, cfg.seed, cs, cfg.guidance).front();
}

struct BestOfN {
    Point2 best;
    std::size_t index = 0;
    std::vector<Point2> candidates;
    std::vector<rewards::RewardVector> scores;
};

/// Draws n candidates (candidate k from initial_noise(cfg.seed, k)), scores
/// them and keeps the argmax of the selector reward, lowest index on ties.
template <VelocityField F>
BestOfN best_of_n(const F& field, const SamplerConfig& cfg, std::size_t n, std::size_t selector,
                  std::size_t conditions = rewards::kDefaultConditions) {
    if (n == 0) throw ValidationError("best_of_n: N must be >= 1");
    if (selector >= rewards::kRewardCount) throw ValidationError("best_of_n: selector out of range");
    const std::vector<std::size_t> cs(n, cfg.condition);
    BestOfN r;
    r.candidates = sample_points(field, cfg.steps, cfg.seed, cs, cfg.guidance);
    for (const auto& p : r.candidates) r.scores.push_back(rewards::score_sample(p, cfg.condition, conditions));
    for (std::size_t k = 1; k < n; ++k) {
        if (r.scores[k][selector] > r.scores[r.index][selector]) r.index = k;
    }
    r.best = r.candidates[r.index];
    return r;
}

/// s+ = ones; s- = ones except s-_j = 0. The guidance direction then only
/// contrasts reward j.
inline GuidanceSpec isolate_reward(std::size_t j, std::size_t n = rewards::kRewardCount, double omega = kDefaultOmega) {
    if (j >= n) throw ValidationError("isolate_reward: reward " + std::to_string(j) + " out of range");
    GuidanceSpec g{std::vector<double>(n, 1.0), std::vector<double>(n, 1.0), omega};
    g.s_minus[j] = 0.0;
    return g;
}

/// s+ = ones; s- = ones except s-_a = t and s-_b = 1 - t.
inline GuidanceSpec pairwise_interpolation(std::size_t a, std::size_t b, double t, std::size_t n = rewards::kRewardCount,
                                           double omega = kDefaultOmega) {
    if (a >= n || b >= n) throw ValidationError("pairwise_interpolation: reward index out of range");
    if (a == b) throw ValidationError("pairwise_interpolation: rewards A and B must differ");
    if (!(t >= 0.0 && t <= 1.0)) throw ValidationError("pairwise_interpolation: t must lie in [0, 1]");
    GuidanceSpec g{std::vector<double>(n, 1.0), std::vector<double>(n, 1.0), omega};
    g.s_minus[a] = t;
    g.s_minus[b] = 1.0 - t;
    return g;
}

}  // namespace miro::sample
