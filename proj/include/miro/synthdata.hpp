#pragma once

// Synthetic conditional 2D dataset, its reward-enriched form and the
// line-delimited JSON file format that stores both.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "miro/error.hpp"
#include "miro/rewards.hpp"
#include "miro/rng.hpp"

namespace miro::data {

using rewards::kRewardCount;

inline constexpr double kRadiusMin = 0.3;
inline constexpr double kRadiusMax = 2.0;
inline constexpr double kAngleNoise = 0.5;
inline constexpr std::size_t kCalibrationSubset = 10'000;
inline constexpr int kFormatVersion = 1;

struct RawRecord {
    Point2 x;
    std::size_t c = 0;
    friend bool operator==(const RawRecord&, const RawRecord&) = default;
};

struct ScoredRecord {
    Point2 x;
    std::size_t c = 0;
    rewards::RewardVector scores;
    std::array<std::size_t, kRewardCount> bins{};
    std::array<double, kRewardCount> normalized{};
    friend bool operator==(const ScoredRecord&, const ScoredRecord&) = default;
};

inline std::vector<RawRecord> generate_dataset(std::size_t n, std::size_t conditions, std::uint64_t seed) {
    if (n == 0) throw ValidationError("generate_dataset: n must be >= 1");
    if (conditions == 0) throw ValidationError("generate_dataset: C must be >= 1");
    std::vector<RawRecord> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng = make_rng(seed, Stream::dataset, i);
        std::uniform_int_distribution<std::size_t> pick(0, conditions - 1);
        std::uniform_real_distribution<double> radius_dist(kRadiusMin, kRadiusMax);
        std::normal_distribution<double> angle_noise(0.0, kAngleNoise);
        const std::size_t c = pick(rng);
        const double radius = radius_dist(rng);
        const double angle =
            2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(conditions) + angle_noise(rng);
        out.push_back({{radius * std::cos(angle), radius * std::sin(angle)}, c});
    }
    return out;
}

/// Per-reward score columns of the first `limit` records (the calibration subset).
inline std::vector<std::vector<double>> calibration_scores(std::span<const RawRecord> records, std::size_t conditions,
                                                           std::size_t limit = kCalibrationSubset) {
    const std::size_t m = std::min(limit, records.size());
    std::vector<std::vector<double>> cols(kRewardCount, std::vector<double>(m));
    for (std::size_t i = 0; i < m; ++i) {
        const auto s = rewards::score_sample(records[i].x, records[i].c, conditions);
        for (std::size_t j = 0; j < kRewardCount; ++j) cols[j][i] = s[j];
    }
    return cols;
}

inline ScoredRecord enrich_record(const RawRecord& r, const rewards::BinCalibration& cal, std::size_t conditions) {
    ScoredRecord out;
    out.x = r.x;
    out.c = r.c;
    out.scores = rewards::score_sample(r.x, r.c, conditions);
    for (std::size_t j = 0; j < kRewardCount; ++j) {
        out.bins[j] = rewards::assign_bin(cal, j, out.scores[j]);
        out.normalized[j] = rewards::normalize_target(static_cast<double>(out.bins[j]), cal.bins);
    }
    return out;
}

inline std::vector<ScoredRecord> enrich_dataset(std::span<const RawRecord> records, const rewards::BinCalibration& cal,
                                                std::size_t conditions) {
    if (cal.rewards() != kRewardCount) {
        throw ValidationError("enrich_dataset: calibration has " + std::to_string(cal.rewards()) +
                              " rewards but the suite has " + std::to_string(kRewardCount));
    }
    std::vector<ScoredRecord> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(enrich_record(r, cal, conditions));
    return out;
}

inline std::vector<ScoredRecord> enrich_dataset(std::span<const ScoredRecord> records, const rewards::BinCalibration& cal,
                                                std::size_t conditions) {
    std::vector<RawRecord> raw;
    raw.reserve(records.size());
    for (const auto& r : records) raw.push_back({r.x, r.c});
    return enrich_dataset(std::span<const RawRecord>(raw), cal, conditions);
}

/// Population of every (reward, bin) cell.
inline std::vector<std::vector<std::size_t>> bin_populations(std::span<const ScoredRecord> records, std::size_t bins) {
    std::vector<std::vector<std::size_t>> pop(kRewardCount, std::vector<std::size_t>(bins, 0));
    for (const auto& r : records) {
        for (std::size_t j = 0; j < kRewardCount; ++j) pop[j].at(r.bins[j]) += 1;
    }
    return pop;
}

/// Datasets of at least 10,000 records must populate every bin of every reward.
inline void check_bin_coverage(std::span<const ScoredRecord> records, std::size_t bins) {
    if (records.size() < kCalibrationSubset) return;
    const auto pop = bin_populations(records, bins);
    for (std::size_t j = 0; j < kRewardCount; ++j) {
        for (std::size_t b = 0; b < bins; ++b) {
            if (pop[j][b] == 0) {
                throw Error("dataset: reward " + std::to_string(j) + " bin " + std::to_string(b) +
                            " is empty; the score spectrum is not covered");
            }
        }
    }
}

/// First line of every dataset file. `bins == 0` and an empty digest mark an
/// unscored (raw) file.
struct DatasetHeader {
    int version = kFormatVersion;
    std::size_t rewards = kRewardCount;
    std::size_t bins = 0;
    std::size_t conditions = rewards::kDefaultConditions;
    std::size_t count = 0;
    std::string calibration_digest;

    bool scored() const noexcept { return bins != 0; }
};

struct Dataset {
    DatasetHeader header;
    std::vector<ScoredRecord> records;  // x and c only when !header.scored()
};

namespace detail {

inline nlohmann::json header_json(const DatasetHeader& h) {
    nlohmann::json j = {{"version", h.version}, {"N", h.rewards}, {"B", h.bins}, {"C", h.conditions}, {"count", h.count}};
    j["calibration_digest"] = h.scored() ? nlohmann::json(h.calibration_digest) : nlohmann::json(nullptr);
    return j;
}

inline std::ofstream open_for_write(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    return out;
}

}  // namespace detail

inline void save_dataset(std::span<const ScoredRecord> records, std::size_t bins, std::size_t conditions,
                         const std::string& calibration_digest, const std::filesystem::path& path) {
    auto out = detail::open_for_write(path);
    DatasetHeader h{kFormatVersion, kRewardCount, bins, conditions, records.size(), calibration_digest};
    out << detail::header_json(h).dump() << '\n';
    for (const auto& r : records) {
        nlohmann::json j = {{"x", {r.x.x, r.x.y}},
                            {"c", r.c},
                            {"scores", r.scores.values},
                            {"bins", r.bins},
                            {"normalized", r.normalized}};
        out << j.dump() << '\n';
    }
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline void save_raw_dataset(std::span<const RawRecord> records, std::size_t conditions,
                             const std::filesystem::path& path) {
    auto out = detail::open_for_write(path);
    DatasetHeader h{kFormatVersion, kRewardCount, 0, conditions, records.size(), {}};
    out << detail::header_json(h).dump() << '\n';
    for (const auto& r : records) {
        out << nlohmann::json{{"x", {r.x.x, r.x.y}}, {"c", r.c}}.dump() << '\n';
    }
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline Dataset load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open dataset '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line)) throw FormatError(path.string() + ": empty file, missing header");
    Dataset ds;
    try {
        const auto h = nlohmann::json::parse(line);
        ds.header.version = h.at("version").get<int>();
        if (ds.header.version != kFormatVersion) {
            throw FormatError(path.string() + ": unsupported dataset version " + std::to_string(ds.header.version) +
                              " (expected " + std::to_string(kFormatVersion) + ")");
        }
        ds.header.rewards = h.at("N").get<std::size_t>();
        ds.header.bins = h.at("B").get<std::size_t>();
        ds.header.conditions = h.at("C").get<std::size_t>();
        ds.header.count = h.at("count").get<std::size_t>();
        const auto& dig = h.at("calibration_digest");
        ds.header.calibration_digest = dig.is_null() ? std::string() : dig.get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ":1: malformed header: " + e.what());
    }
    if (ds.header.rewards != kRewardCount) {
        throw FormatError(path.string() + ": header N=" + std::to_string(ds.header.rewards) + " but the suite has " +
                          std::to_string(kRewardCount));
    }
    ds.records.reserve(ds.header.count);
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            ScoredRecord r;
            const auto x = j.at("x").get<std::array<double, 2>>();
            r.x = {x[0], x[1]};
            r.c = j.at("c").get<std::size_t>();
            if (r.c >= ds.header.conditions) throw FormatError("condition out of range");
            if (ds.header.scored()) {
                r.scores.values = j.at("scores").get<std::array<double, kRewardCount>>();
                r.bins = j.at("bins").get<std::array<std::size_t, kRewardCount>>();
                r.normalized = j.at("normalized").get<std::array<double, kRewardCount>>();
            }
            ds.records.push_back(r);
        } catch (const std::exception& e) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": malformed record: " + e.what());
        }
    }
    if (ds.records.size() != ds.header.count) {
        throw FormatError(path.string() + ": count mismatch, header declares " + std::to_string(ds.header.count) +
                          " records but found " + std::to_string(ds.records.size()));
    }
    return ds;
}

inline std::vector<RawRecord> raw_records(const Dataset& ds) {
    std::vector<RawRecord> out;
    out.reserve(ds.records.size());
    for (const auto& r : ds.records) out.push_back({r.x, r.c});
    return out;
}

}  // namespace miro::data
