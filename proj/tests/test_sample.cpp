#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "miro/sample.hpp"

using namespace miro;
using namespace miro::sample;

namespace {

// v(x, t, c, s) = A s + b(c) + k x, with A a fixed [2,N] matrix.
struct LinearField {
    std::array<std::array<double, 4>, 2> A{{{0.3, -1.2, 0.7, 2.0}, {-0.4, 0.9, 1.5, -0.6}}};
    double k = 0.1;
    Array operator()(const Array& x, double, std::span<const std::size_t> c, std::span<const double> s) const {
        Array out = Array::zeros({x.rows(), 2});
        for (std::size_t r = 0; r < x.rows(); ++r) {
            for (std::size_t d = 0; d < 2; ++d) {
                double v = k * x[2 * r + d] + 0.01 * static_cast<double>(c[r]);
                for (std::size_t j = 0; j < s.size(); ++j) v += A[d][j] * s[j];
                out[2 * r + d] = v;
            }
        }
        return out;
    }
};

struct ZeroField {
    Array operator()(const Array& x, double, std::span<const std::size_t>, std::span<const double>) const {
        return Array::zeros(x.shape());
    }
};

// dx/dt = x, integrated backwards from t=1 to t=0: exact x0 = x1 / e.
struct IdentityField {
    Array operator()(const Array& x, double, std::span<const std::size_t>, std::span<const double>) const { return x; }
};

struct NanField {
    Array operator()(const Array& x, double, std::span<const std::size_t>, std::span<const double>) const {
        Array out = Array::zeros(x.shape());
        out[0] = std::nan("");
        return out;
    }
};

struct CountingField {
    mutable std::size_t calls = 0;
    Array operator()(const Array& x, double t, std::span<const std::size_t> c, std::span<const double> s) const {
        ++calls;
        return LinearField{}(x, t, c, s);
    }
};

std::vector<double> random_target(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    return {u(rng), u(rng), u(rng), u(rng)};
}

}  // namespace

TEST(Guidance, MatchesClosedFormOnLinearField) {
    // For the linear stub: v+ + w (v+ - v-) = v(s+) + w A (s+ - s-).
    const LinearField f;
    std::mt19937_64 rng(0);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    double worst = 0.0;
    for (int probe = 0; probe < 200; ++probe) {
        GuidanceSpec g{random_target(rng), random_target(rng), 4.0 * std::abs(u(rng))};
        const Array x = Array::matrix({{u(rng), u(rng)}});
        const std::size_t cs[1] = {static_cast<std::size_t>(probe % 8)};
        const Array v = guided_velocity(f, x, 0.5, cs, g);
        const Array plus = f(x, 0.5, cs, g.s_plus);
        for (std::size_t d = 0; d < 2; ++d) {
            double delta = 0.0;
            for (std::size_t j = 0; j < 4; ++j) delta += f.A[d][j] * (g.s_plus[j] - g.s_minus[j]);
            worst = std::max(worst, std::abs(v[d] - (plus[d] + g.omega * delta)));
        }
    }
    EXPECT_LT(worst, 1e-12);
}

TEST(Guidance, OmegaZeroAndEqualTargetsReduceToPositiveField) {
    const LinearField f;
    const Array x = Array::matrix({{0.4, -0.2}, {1.0, 1.0}});
    const std::size_t cs[2] = {1, 6};
    const std::vector<double> s{0.2, 0.9, 0.1, 0.5};
    const Array plus = f(x, 0.3, cs, s);
    EXPECT_EQ(guided_velocity(f, x, 0.3, cs, GuidanceSpec{s, {1, 1, 1, 1}, 0.0}), plus);
    EXPECT_EQ(guided_velocity(f, x, 0.3, cs, GuidanceSpec{s, s, 7.0}), plus);
}

TEST(Guidance, SpecValidation) {
    EXPECT_NO_THROW(GuidanceSpec::defaults().validate(4));
    EXPECT_THROW(GuidanceSpec::defaults(3).validate(4), ValidationError);
    EXPECT_THROW((GuidanceSpec{{1, 1, 1, 1.5}, {0, 0, 0, 0}, 1.0}.validate(4)), ValidationError);
    EXPECT_THROW((GuidanceSpec{{1, 1, 1, 1}, {0, 0, 0, 0}, -1.0}.validate(4)), ValidationError);
    EXPECT_THROW((GuidanceSpec{{1, 1, 1, 1}, {0, 0, 0, 0}, std::nan("")}.validate(4)), ValidationError);
    const auto d = GuidanceSpec::defaults();
    EXPECT_EQ(d.omega, 2.0);
    EXPECT_EQ(d.s_plus, std::vector<double>(4, 1.0));
    EXPECT_EQ(d.s_minus, std::vector<double>(4, 0.0));
}

TEST(Integrate, ZeroFieldReturnsInitialNoise) {
    const std::size_t cs[3] = {0, 1, 2};
    const auto pts = sample_points(ZeroField{}, 50, 17, cs, GuidanceSpec::defaults());
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(pts[i], initial_noise(17, i));
}

TEST(Integrate, EulerConvergesOnAnalyticField) {
    const std::size_t cs[1] = {0};
    const Point2 x1 = initial_noise(3, 0);
    double prev = 1e9;
    for (std::size_t steps : {10u, 100u, 1000u}) {
        const Point2 p = sample_points(IdentityField{}, steps, 3, cs, GuidanceSpec::defaults()).front();
        const double err = std::hypot(p.x - x1.x / std::exp(1.0), p.y - x1.y / std::exp(1.0));
        // Exact discrete solution is x1 (1 - 1/steps)^steps.
        const double disc = std::pow(1.0 - 1.0 / steps, static_cast<double>(steps));
        EXPECT_NEAR(p.x, x1.x * disc, 1e-12);
        EXPECT_LT(err, prev / 5.0);
        prev = err;
    }
    EXPECT_LT(prev, 1e-3);
}

TEST(Integrate, SingleEvaluationWhenGuidanceVanishes) {
    const std::size_t cs[1] = {0};
    CountingField a;
    sample_points(a, 10, 0, cs, GuidanceSpec::defaults(4, 0.0));
    EXPECT_EQ(a.calls, 10u);
    CountingField b;
    sample_points(b, 10, 0, cs, GuidanceSpec::defaults());
    EXPECT_EQ(b.calls, 20u);
}

TEST(Integrate, OmegaZeroEqualsUnguidedBitForBit) {
    const std::size_t cs[2] = {3, 4};
    const std::vector<double> s{0.5, 0.5, 0.5, 0.5};
    const auto a = sample_points(LinearField{}, 20, 5, cs, GuidanceSpec{s, {0, 0, 0, 0}, 0.0});
    const auto b = sample_points(LinearField{}, 20, 5, cs, GuidanceSpec{s, s, 2.0});
    EXPECT_EQ(a, b);
}

TEST(Integrate, Errors) {
    const std::size_t cs[1] = {0};
    EXPECT_THROW(sample_points(LinearField{}, 0, 0, cs, GuidanceSpec::defaults()), ValidationError);
    EXPECT_THROW(sample_points(NanField{}, 5, 0, cs, GuidanceSpec::defaults()), NonFiniteError);
    EXPECT_THROW(integrate(LinearField{}, 5, Array::zeros({2, 2}), cs, GuidanceSpec::defaults()), ShapeError);
}

TEST(Noise, SeededAndIndexed) {
    EXPECT_EQ(initial_noise(1, 0), initial_noise(1, 0));
    EXPECT_NE(initial_noise(1, 0), initial_noise(1, 1));
    EXPECT_NE(initial_noise(1, 0), initial_noise(2, 0));
}

TEST(SampleOde, MatchesBatchRow) {
    SamplerConfig cfg;
    cfg.seed = 8;
    cfg.condition = 5;
    const std::size_t cs[1] = {5};
    EXPECT_EQ(sample_ode(LinearField{}, cfg), sample_points(LinearField{}, cfg.steps, 8, cs, cfg.guidance).front());
}

TEST(BestOfN, PicksArgmaxOfSelector) {
    SamplerConfig cfg;
    cfg.seed = 2;
    for (std::size_t sel = 0; sel < 4; ++sel) {
        const auto r = best_of_n(ZeroField{}, cfg, 16, sel);
        ASSERT_EQ(r.candidates.size(), 16u);
        for (std::size_t k = 0; k < 16; ++k) {
            EXPECT_EQ(r.candidates[k], initial_noise(2, k));
            EXPECT_LE(r.scores[k][sel], r.scores[r.index][sel]);
        }
        EXPECT_EQ(r.best, r.candidates[r.index]);
    }
}

TEST(BestOfN, MonotoneInNAndPrefixConsistent) {
    SamplerConfig cfg;
    double prev = -1e9;
    for (std::size_t n : {1u, 2u, 4u, 8u, 16u, 32u}) {
        const auto r = best_of_n(ZeroField{}, cfg, n, 0);
        EXPECT_GE(r.scores[r.index][0], prev);
        prev = r.scores[r.index][0];
    }
}

TEST(BestOfN, TiesGoToLowestIndex) {
    // Every candidate collapses to the same point, so all scores tie.
    struct Collapse {
        Array operator()(const Array& x, double, std::span<const std::size_t>, std::span<const double>) const {
            Array out = Array::zeros(x.shape());
            for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i];
            return out;
        }
    };
    SamplerConfig cfg;
    cfg.steps = 1;  // x0 = x1 - x1 = 0
    const auto r = best_of_n(Collapse{}, cfg, 8, 1);
    EXPECT_EQ(r.index, 0u);
}

TEST(BestOfN, Errors) {
    EXPECT_THROW(best_of_n(ZeroField{}, SamplerConfig{}, 0, 0), ValidationError);
    EXPECT_THROW(best_of_n(ZeroField{}, SamplerConfig{}, 4, 4), ValidationError);
}

TEST(Presets, IsolateReward) {
    const auto g = isolate_reward(2);
    EXPECT_EQ(g.s_plus, std::vector<double>(4, 1.0));
    EXPECT_EQ(g.s_minus, (std::vector<double>{1, 1, 0, 1}));
    EXPECT_THROW(isolate_reward(4), ValidationError);
    // The guidance direction only moves along column 2 of A.
    const LinearField f;
    const Array x = Array::matrix({{0.0, 0.0}});
    const std::size_t cs[1] = {0};
    const Array v = guided_velocity(f, x, 0.5, cs, g);
    const Array plus = f(x, 0.5, cs, g.s_plus);
    EXPECT_NEAR(v[0] - plus[0], g.omega * f.A[0][2], 1e-12);
    EXPECT_NEAR(v[1] - plus[1], g.omega * f.A[1][2], 1e-12);
}

TEST(Presets, PairwiseInterpolation) {
    const auto g = pairwise_interpolation(0, 3, 0.25);
    EXPECT_EQ(g.s_minus, (std::vector<double>{0.25, 1, 1, 0.75}));
    EXPECT_EQ(pairwise_interpolation(0, 3, 0.0).s_minus, (std::vector<double>{0, 1, 1, 1}));
    EXPECT_THROW(pairwise_interpolation(1, 1, 0.5), ValidationError);
    EXPECT_THROW(pairwise_interpolation(0, 1, 1.5), ValidationError);
    EXPECT_THROW(pairwise_interpolation(0, 9, 0.5), ValidationError);
}
