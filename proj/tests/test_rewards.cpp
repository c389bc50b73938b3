#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "miro/rewards.hpp"

using namespace miro;
using namespace miro::rewards;

namespace {

// Brute-force bin populations: sort, then count scores landing in each
// [edge_{k-1}, edge_k) slot by linear scan.
std::vector<std::size_t> brute_populations(const std::vector<double>& scores, const std::vector<double>& edges) {
    std::vector<std::size_t> pop(edges.size() + 1, 0);
    for (double s : scores) {
        std::size_t b = 0;
        for (double e : edges) b += e < s ? 1 : 0;
        ++pop[b];
    }
    return pop;
}

struct WarningCapture {
    std::vector<std::string> seen;
    std::function<void(const std::string&)> saved = warning_sink();
    WarningCapture() {
        warning_sink() = [this](const std::string& m) { seen.push_back(m); };
    }
    ~WarningCapture() { warning_sink() = saved; }
};

}  // namespace

TEST(Suite, IdsContiguous) {
    const auto& s = suite();
    ASSERT_EQ(s.size(), 4u);
    for (std::size_t j = 0; j < s.size(); ++j) EXPECT_EQ(s[j].id, j);
}

TEST(Score, UnitCircleAtAngleZero) {
    const auto r = score_sample({1.0, 0.0}, 0);
    EXPECT_DOUBLE_EQ(r[0], 0.0);
    EXPECT_DOUBLE_EQ(r[1], 1.0);
    EXPECT_DOUBLE_EQ(r[2], 0.0);
    EXPECT_DOUBLE_EQ(r[3], -0.25);
}

TEST(Score, OuterRingOnConditionRay) {
    const auto r = score_sample({0.0, 1.5}, 2, 8);
    EXPECT_DOUBLE_EQ(r[0], -0.5);
    EXPECT_NEAR(r[1], 1.0, 1e-15);
    EXPECT_DOUBLE_EQ(r[2], -1.5);
    EXPECT_DOUBLE_EQ(r[3], 0.0);
}

TEST(Score, OriginConvention) {
    for (std::size_t c = 0; c < 8; ++c) {
        const auto r = score_sample({0.0, 0.0}, c);
        EXPECT_DOUBLE_EQ(r[0], -1.0);
        EXPECT_DOUBLE_EQ(r[2], 0.0);
        EXPECT_DOUBLE_EQ(r[3], -2.25);
        EXPECT_DOUBLE_EQ(r[1], std::cos(-2.0 * std::numbers::pi * static_cast<double>(c) / 8.0));
    }
}

TEST(Score, Errors) {
    EXPECT_THROW(score_sample({std::nan(""), 0.0}, 0), NonFiniteError);
    EXPECT_THROW(score_sample({0.0, 0.0}, 8, 8), ValidationError);
}

TEST(Score, PureFunction) {
    EXPECT_EQ(score_sample({0.3, -0.7}, 5), score_sample({0.3, -0.7}, 5));
}

TEST(Calibrate, OneToEightIntoFour) {
    const std::vector<double> s{8, 3, 5, 1, 7, 2, 6, 4};
    const auto cal = calibrate_bins({s}, 4);
    EXPECT_EQ(cal.edges[0], (std::vector<double>{2, 4, 6}));
    EXPECT_EQ(brute_populations(s, cal.edges[0]), (std::vector<std::size_t>{2, 2, 2, 2}));
    for (double v : s) {
        EXPECT_EQ(assign_bin(cal, 0, v), static_cast<std::size_t>(std::ceil(v / 2.0)) - 1);
    }
}

TEST(Calibrate, ConstantScoresCollapseToBinZeroWithWarning) {
    WarningCapture cap;
    const auto cal = calibrate_bins({std::vector<double>(10, 5.0)}, 4);
    EXPECT_EQ(cal.edges[0], (std::vector<double>{5, 5, 5}));
    EXPECT_EQ(assign_bin(cal, 0, 5.0), 0u);
    ASSERT_EQ(cap.seen.size(), 1u);
    EXPECT_NE(cap.seen[0].find("constant"), std::string::npos);
}

TEST(Calibrate, UniformTenThousandEightBins) {
    std::mt19937_64 rng(42);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> s(10000);
    for (double& v : s) v = u(rng);
    const auto cal = calibrate_bins({s}, 8);
    for (std::size_t p : brute_populations(s, cal.edges[0])) {
        EXPECT_GE(p, 1249u);
        EXPECT_LE(p, 1251u);
    }
}

TEST(Calibrate, EqualPopulationWhenBDividesM) {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> n01(0.0, 1.0);
    for (std::size_t bins : {2u, 3u, 5u, 8u, 10u}) {
        std::vector<double> s(bins * 37);
        for (double& v : s) v = n01(rng);
        const auto cal = calibrate_bins({s}, bins);
        std::vector<std::size_t> pop(bins, 0);
        for (double v : s) ++pop[assign_bin(cal, 0, v)];
        for (std::size_t p : pop) EXPECT_EQ(p, 37u) << "B=" << bins;
    }
}

TEST(Calibrate, PerRewardIndependent) {
    const std::vector<double> a{1, 2, 3, 4};
    const std::vector<double> b{40, 10, 30, 20};
    const auto joint = calibrate_bins({a, b}, 2);
    EXPECT_EQ(joint.edges[0], calibrate_bins({a}, 2).edges[0]);
    EXPECT_EQ(joint.edges[1], calibrate_bins({b}, 2).edges[0]);
}

TEST(Calibrate, Errors) {
    EXPECT_THROW(calibrate_bins({{1, 2, 3}}, 1), ValidationError);
    EXPECT_THROW(calibrate_bins({{1, 2, 3}}, 4), ValidationError);
}

TEST(AssignBin, Examples) {
    BinCalibration cal;
    cal.bins = 4;
    cal.edges = {{2, 4, 6}};
    cal.reward_names = {"r"};
    EXPECT_EQ(assign_bin(cal, 0, 3.0), 1u);
    EXPECT_EQ(assign_bin(cal, 0, 2.0), 0u);
    EXPECT_EQ(assign_bin(cal, 0, -100.0), 0u);
    EXPECT_EQ(assign_bin(cal, 0, 100.0), 3u);
    EXPECT_THROW(assign_bin(cal, 0, std::nan("")), NonFiniteError);
    EXPECT_THROW(assign_bin(cal, 1, 0.0), ValidationError);
}

TEST(AssignBin, Monotone) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n01(0.0, 1.0);
    std::vector<double> s(1000);
    for (double& v : s) v = n01(rng);
    const auto cal = calibrate_bins({s}, 8);
    std::vector<double> probe(500);
    for (double& v : probe) v = 2.0 * n01(rng);
    std::sort(probe.begin(), probe.end());
    for (std::size_t i = 1; i < probe.size(); ++i) {
        EXPECT_LE(assign_bin(cal, 0, probe[i - 1]), assign_bin(cal, 0, probe[i]));
    }
}

TEST(NormalizeTarget, Examples) {
    EXPECT_DOUBLE_EQ(normalize_target(7, 8), 1.0);
    EXPECT_DOUBLE_EQ(normalize_target(0, 8), 0.0);
    EXPECT_DOUBLE_EQ(normalize_target(5, 9), 0.625);
    EXPECT_THROW(normalize_target(8, 8), ValidationError);
    EXPECT_THROW(normalize_target(-0.5, 8), ValidationError);
    for (std::size_t b = 1; b < 8; ++b) EXPECT_LT(normalize_target(b - 1.0, 8), normalize_target(double(b), 8));
}

TEST(CalibrationJson, RoundTripAndVersion) {
    const auto cal = calibrate_bins({{1, 2, 3, 4, 5, 6, 7, 8}, {8, 7, 6, 5, 4, 3, 2, 1}}, 4);
    const auto j = cal.to_json();
    for (const char* key : {"version", "B", "calibration_size", "edges", "reward_names"}) EXPECT_TRUE(j.contains(key)) << key;
    EXPECT_EQ(BinCalibration::from_json(j), cal);
    auto bad = j;
    bad["version"] = 99;
    EXPECT_THROW(BinCalibration::from_json(bad), FormatError);
    auto unsorted = j;
    unsorted["edges"][0] = {3, 2, 1};
    EXPECT_THROW(BinCalibration::from_json(unsorted), FormatError);
}
