#pragma once

// Flow-matching training: x_t = (1 - t) x + t eps, regress the field onto
// eps - x under the reward conditioning selected by the training mode.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "miro/diffcore.hpp"
#include "miro/digest.hpp"
#include "miro/error.hpp"
#include "miro/model.hpp"
#include "miro/rewards.hpp"
#include "miro/rng.hpp"
#include "miro/sample.hpp"
#include "miro/synthdata.hpp"

namespace miro::train {

using diff::Array;
using diff::Graph;
using diff::Var;
using model::Mode;

struct TrainConfig {
    std::uint64_t steps = 20'000;
    std::size_t batch = 256;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    Mode mode = Mode::multi();
    std::uint64_t eval_every = 500;
    std::size_t eval_samples = 512;
    std::size_t eval_ode_steps = sample::kDefaultSteps;
    model::Dims dims;

    void validate() const {
        if (steps < 1) throw ValidationError("train: steps must be >= 1");
        if (batch < 1) throw ValidationError("train: batch must be >= 1");
        if (!(lr > 0.0) || !std::isfinite(lr)) throw ValidationError("train: lr must be > 0");
        if (eval_every < 1) throw ValidationError("train: eval_every must be >= 1");
        if (eval_samples < 1 || eval_ode_steps < 1) throw ValidationError("train: eval sizes must be >= 1");
    }

    std::string digest() const {
        Sha256 h;
        h.update("train-config-v1").update(steps).update(static_cast<std::uint64_t>(batch)).update(lr).update(seed);
        h.update(mode.to_string()).update(eval_every).update(static_cast<std::uint64_t>(eval_samples));
        h.update(static_cast<std::uint64_t>(eval_ode_steps));
        h.update(static_cast<std::uint64_t>(dims.d_sin)).update(static_cast<std::uint64_t>(dims.d));
        h.update(static_cast<std::uint64_t>(dims.hidden)).update(static_cast<std::uint64_t>(dims.layers));
        return h.hex();
    }
};

/// Noise and time drawn for each row of a batch.
struct NoiseDraw {
    std::vector<Point2> eps;
    std::vector<double> t;
};

inline NoiseDraw draw_noise(Rng& rng, std::size_t m) {
    NoiseDraw d;
    d.eps.resize(m);
    d.t.resize(m);
    std::normal_distribution<double> n01(0.0, 1.0);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (std::size_t i = 0; i < m; ++i) {
        const double a = n01(rng);
        const double b = n01(rng);
        d.eps[i] = {a, b};
        d.t[i] = u01(rng);
    }
    return d;
}

inline Point2 interpolate(Point2 x, Point2 eps, double t) {
    return {(1.0 - t) * x.x + t * eps.x, (1.0 - t) * x.y + t * eps.y};
}

/// Batch mean of the squared L2 error between prediction and target rows.
inline Var flow_matching_objective(Graph& g, Var prediction, Var target) {
    const double cols = static_cast<double>(g.value(prediction).cols());
    return g.mul(g.input(Array::scalar(cols)), g.mse(prediction, target));
}

/// Reward targets the mode is allowed to see; inactive columns stay zero and
/// are never read from the records.
inline Array batch_targets(std::span<const data::ScoredRecord* const> rows, Mode mode, std::size_t n_rewards) {
    if (mode.kind == Mode::Kind::baseline) return Array();
    Array targets = Array::zeros({rows.size(), n_rewards});
    for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t j : mode.active_rewards(n_rewards)) targets[r * n_rewards + j] = rows[r]->normalized[j];
    }
    return targets;
}

struct LossResult {
    double loss = 0.0;
    std::vector<Array> grads;  // one per parameter tensor
};

inline LossResult fm_loss(const model::VectorFieldParams& params, std::span<const data::ScoredRecord* const> rows,
                          const NoiseDraw& noise, Mode mode) {
    const std::size_t m = rows.size();
    if (m == 0) throw ValidationError("fm_loss: empty batch");
    if (noise.eps.size() != m || noise.t.size() != m) throw ShapeError("fm_loss: noise draw does not match batch");
    model::FieldBatch batch;
    std::vector<double> xt(2 * m);
    std::vector<double> target(2 * m);
    batch.conditions.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
        const Point2 x = rows[i]->x;
        const Point2 e = noise.eps[i];
        const Point2 p = interpolate(x, e, noise.t[i]);
        xt[2 * i] = p.x;
        xt[2 * i + 1] = p.y;
        target[2 * i] = e.x - x.x;
        target[2 * i + 1] = e.y - x.y;
        if (!std::isfinite(target[2 * i]) || !std::isfinite(target[2 * i + 1])) {
            throw NonFiniteError("fm_loss: non-finite input at sample " + std::to_string(i));
        }
        batch.conditions[i] = rows[i]->c;
    }
    batch.x_t = Array({m, 2}, std::move(xt));
    batch.t = noise.t;
    batch.targets = batch_targets(rows, mode, params.rewards);

    Graph g;
    const auto pv = model::bind_params(g, params);
    Var pred;
    try {
        pred = model::build_field(g, pv, params, batch, mode);
    } catch (const NonFiniteError& e) {
        throw NonFiniteError(std::string("fm_loss: ") + e.what());
    }
    const Array& pv_out = g.value(pred);
    for (std::size_t i = 0; i < m; ++i) {
        if (!std::isfinite(pv_out[2 * i]) || !std::isfinite(pv_out[2 * i + 1])) {
            throw NonFiniteError("fm_loss: non-finite loss at sample " + std::to_string(i));
        }
    }
    Var loss = flow_matching_objective(g, pred, g.input(Array({m, 2}, std::move(target))));
    LossResult out;
    out.loss = g.value(loss).item();
    const auto grads = g.backward(loss);
    out.grads.reserve(pv.size());
    for (Var v : pv) out.grads.push_back(grads[v]);
    return out;
}

inline LossResult fm_loss(const model::VectorFieldParams& params, std::span<const data::ScoredRecord* const> rows, Rng& rng,
                          Mode mode) {
    return fm_loss(params, rows, draw_noise(rng, rows.size()), mode);
}

struct MetricRow {
    std::uint64_t step = 0;
    double loss = 0.0;
    std::array<double, rewards::kRewardCount> rewards{};
    friend bool operator==(const MetricRow&, const MetricRow&) = default;
};

struct MetricLog {
    std::vector<MetricRow> rows;

    static constexpr const char* kHeader = "step,loss,r0,r1,r2,r3";

    std::string to_csv() const {
        std::ostringstream os;
        os << kHeader << '\n';
        char buf[64];
        for (const auto& r : rows) {
            os << r.step;
            std::snprintf(buf, sizeof buf, ",%.17g", r.loss);
            os << buf;
            for (double v : r.rewards) {
                std::snprintf(buf, sizeof buf, ",%.17g", v);
                os << buf;
            }
            os << '\n';
        }
        return os.str();
    }

    static MetricLog from_csv(const std::string& text) {
        std::istringstream is(text);
        std::string line;
        if (!std::getline(is, line) || line != kHeader) throw FormatError("metric log: missing header '" + std::string(kHeader) + "'");
        MetricLog log;
        std::size_t lineno = 1;
        while (std::getline(is, line)) {
            ++lineno;
            if (line.empty()) continue;
            std::istringstream ls(line);
            std::string cell;
            std::vector<std::string> cells;
            while (std::getline(ls, cell, ',')) cells.push_back(cell);
            if (cells.size() != 2 + rewards::kRewardCount) {
                throw FormatError("metric log: line " + std::to_string(lineno) + " has " + std::to_string(cells.size()) + " columns");
            }
            try {
                MetricRow r;
                r.step = std::stoull(cells[0]);
                r.loss = std::stod(cells[1]);
                for (std::size_t j = 0; j < rewards::kRewardCount; ++j) r.rewards[j] = std::stod(cells[2 + j]);
                if (!log.rows.empty() && r.step <= log.rows.back().step) throw FormatError("steps not increasing");
                log.rows.push_back(r);
            } catch (const std::exception& e) {
                throw FormatError("metric log: line " + std::to_string(lineno) + ": " + e.what());
            }
        }
        return log;
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
        out << to_csv();
    }

    static MetricLog load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open metric log '" + path.string() + "'");
        std::stringstream ss;
        ss << in.rdbuf();
        return from_csv(ss.str());
    }

    friend bool operator==(const MetricLog&, const MetricLog&) = default;
};

/// Mean measured rewards of `count` samples at s+ = ones, omega = 0. Sample i
/// uses condition i mod C; the seed is fixed so every eval sees the same noise.
inline std::array<double, rewards::kRewardCount> evaluate_rewards(const model::ModelCheckpoint& ckpt, std::size_t count,
                                                                  std::size_t ode_steps, std::uint64_t seed) {
    std::vector<std::size_t> cs(count);
    for (std::size_t i = 0; i < count; ++i) cs[i] = i % ckpt.params.conditions;
    const auto g = sample::GuidanceSpec::defaults(ckpt.params.rewards, 0.0);
    const auto pts = sample::sample_points(sample::CheckpointField{ckpt}, ode_steps, derive_seed(seed, Stream::eval), cs, g);
    std::array<double, rewards::kRewardCount> mean{};
    for (std::size_t i = 0; i < count; ++i) {
        const auto s = rewards::score_sample(pts[i], cs[i], ckpt.params.conditions);
        for (std::size_t j = 0; j < rewards::kRewardCount; ++j) mean[j] += s[j];
    }
    for (double& v : mean) v /= static_cast<double>(count);
    return mean;
}

struct TrainResult {
    model::ModelCheckpoint checkpoint;
    MetricLog log;
};

using ProgressFn = std::function<void(const MetricRow&)>;

inline TrainResult train(const TrainConfig& cfg, const data::Dataset& dataset, const ProgressFn& progress = {}) {
    cfg.validate();
    if (dataset.records.empty()) throw ValidationError("train: dataset is empty");
    if (cfg.mode.kind != Mode::Kind::baseline && !dataset.header.scored()) {
        throw ValidationError("train: mode " + cfg.mode.to_string() + " needs a scored dataset (run `score` first)");
    }
    if (cfg.mode.kind == Mode::Kind::single && cfg.mode.reward >= rewards::kRewardCount) {
        throw ValidationError("train: single-reward index out of range");
    }
    const std::size_t bins = dataset.header.scored() ? dataset.header.bins : rewards::kDefaultBins;

    TrainResult result;
    auto& ck = result.checkpoint;
    ck.params = model::init_params(cfg.seed, cfg.dims, dataset.header.conditions, rewards::kRewardCount, bins);
    ck.mode = cfg.mode;
    ck.config_digest = cfg.digest();
    auto adam = diff::AdamState::for_params(ck.params.tensors);

    Rng batch_rng = make_rng(cfg.seed, Stream::batch);
    Rng noise_rng = make_rng(cfg.seed, Stream::noise);
    std::uniform_int_distribution<std::size_t> pick(0, dataset.records.size() - 1);
    std::vector<const data::ScoredRecord*> rows(cfg.batch);
    auto next_loss = [&] {
        for (auto& r : rows) r = &dataset.records[pick(batch_rng)];
        return fm_loss(ck.params, rows, noise_rng, cfg.mode);
    };
    auto log_row = [&](std::uint64_t step, double loss) {
        MetricRow row{step, loss, evaluate_rewards(ck, cfg.eval_samples, cfg.eval_ode_steps, cfg.seed)};
        result.log.rows.push_back(row);
        if (progress) progress(row);
    };

    for (std::uint64_t step = 0; step < cfg.steps; ++step) {
        LossResult lr = next_loss();
        if (!std::isfinite(lr.loss)) throw NonFiniteError("train: non-finite loss at step " + std::to_string(step));
        if (step % cfg.eval_every == 0) log_row(step, lr.loss);
        try {
            diff::adam_step(ck.params.tensors, lr.grads, adam, cfg.lr);
        } catch (const Error& e) {
            throw Error("train: step " + std::to_string(step) + ": " + e.what());
        }
        ck.step = step + 1;
    }
    log_row(cfg.steps, next_loss().loss);
    return result;
}

struct Speedup {
    bool reached = false;
    double ratio = 0.0;  // +inf when not reached
    std::uint64_t miro_step = 0;
    double target = 0.0;  // baseline's final value of the reward
};

/// (last baseline step) / (first post-initial MIRO eval step whose reward j
/// reaches the baseline's final value).
inline Speedup convergence_speedup(const MetricLog& baseline, const MetricLog& miro, std::size_t j) {
    if (baseline.rows.empty() || miro.rows.empty()) throw ValidationError("convergence_speedup: empty log");
    if (j >= rewards::kRewardCount) throw ValidationError("convergence_speedup: reward index out of range");
    Speedup s;
    s.target = baseline.rows.back().rewards[j];
    const double total = static_cast<double>(baseline.rows.back().step);
    for (const auto& r : miro.rows) {
        if (r.step == 0) continue;
        if (r.rewards[j] >= s.target) {
            s.reached = true;
            s.miro_step = r.step;
            s.ratio = total / static_cast<double>(r.step);
            return s;
        }
    }
    s.ratio = std::numeric_limits<double>::infinity();
    return s;
}

}  // namespace miro::train
