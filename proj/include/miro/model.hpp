#pragma once

// Reward-conditioned velocity field v(x_t, t, c, s).
//
// Conditioning: the condition c looks up a token in an embedding table; every
// active reward target s_j is sinusoidally embedded at position s_j * (B-1)
// and projected by its own matrix into token space. The token list is
// mean-pooled and concatenated with x_t and the projected time embedding
// before an MLP trunk.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "miro/diffcore.hpp"
#include "miro/digest.hpp"
#include "miro/error.hpp"
#include "miro/rewards.hpp"
#include "miro/rng.hpp"

namespace miro::model {

using diff::Array;
using diff::Graph;
using diff::Var;

inline constexpr double kTimeScale = 1000.0;
inline constexpr double kMaxPeriod = 10000.0;

struct Dims {
    std::size_t d_sin = 64;
    std::size_t d = 64;
    std::size_t hidden = 256;
    std::size_t layers = 4;
    friend bool operator==(const Dims&, const Dims&) = default;
};

/// Which conditioning inputs are live.
struct Mode {
    enum class Kind { baseline, single, multi };
    Kind kind = Kind::multi;
    std::size_t reward = 0;  // single only

    static Mode baseline() { return {Kind::baseline, 0}; }
    static Mode single(std::size_t j) { return {Kind::single, j}; }
    static Mode multi() { return {Kind::multi, 0}; }

    std::vector<std::size_t> active_rewards(std::size_t n) const {
        switch (kind) {
            case Kind::baseline: return {};
            case Kind::single: return {reward};
            case Kind::multi: break;
        }
        std::vector<std::size_t> all(n);
        for (std::size_t j = 0; j < n; ++j) all[j] = j;
        return all;
    }

    std::string to_string() const {
        switch (kind) {
            case Kind::baseline: return "baseline";
            case Kind::single: return "single:" + std::to_string(reward);
            case Kind::multi: return "multi";
        }
        return "?";
    }

    static Mode parse(const std::string& s, std::size_t rewards = rewards::kRewardCount) {
        if (s == "baseline") return baseline();
        if (s == "multi") return multi();
        if (s.rfind("single:", 0) == 0) {
            const std::string idx = s.substr(7);
            std::size_t pos = 0;
            unsigned long j = 0;
            try {
                j = std::stoul(idx, &pos);
            } catch (const std::exception&) {
                pos = 0;
            }
            if (idx.empty() || pos != idx.size() || j >= rewards) {
                throw ValidationError("mode: reward index in '" + s + "' must be in [0, " + std::to_string(rewards) + ")");
            }
            return single(j);
        }
        throw ValidationError("mode: expected baseline|single:<j>|multi, got '" + s + "'");
    }

    friend bool operator==(const Mode&, const Mode&) = default;
};

/// Sinusoidal embedding of u * scale; entry 2k is sin, entry 2k+1 is cos of
/// frequency kMaxPeriod^(-k / (d_sin/2)).
inline std::vector<double> embed_scalar(double u, std::size_t d_sin, double scale) {
    if (d_sin == 0 || d_sin % 2 != 0) throw ValidationError("embed_scalar: d_sin must be even and positive, got " + std::to_string(d_sin));
    if (!std::isfinite(u) || u < 0.0 || u > 1.0) throw ValidationError("embed_scalar: u must lie in [0, 1], got " + std::to_string(u));
    const std::size_t half = d_sin / 2;
    const double pos = u * scale;
    std::vector<double> out(d_sin);
    for (std::size_t k = 0; k < half; ++k) {
        const double freq = std::pow(kMaxPeriod, -static_cast<double>(k) / static_cast<double>(half));
        out[2 * k] = std::sin(pos * freq);
        out[2 * k + 1] = std::cos(pos * freq);
    }
    return out;
}

/// Row-stacked embeddings, one row per value. Repeated values (reward bins,
/// shared targets) are embedded once.
inline Array embed_rows(std::span<const double> values, std::size_t d_sin, double scale) {
    constexpr std::size_t kCacheSlots = 16;
    std::vector<double> data;
    data.reserve(values.size() * d_sin);
    std::vector<std::pair<double, std::size_t>> seen;
    for (std::size_t r = 0; r < values.size(); ++r) {
        const double v = values[r];
        auto hit = std::find_if(seen.begin(), seen.end(), [v](const auto& s) { return s.first == v; });
        if (hit != seen.end()) {
            const auto from = data.begin() + static_cast<std::ptrdiff_t>(hit->second * d_sin);
            data.insert(data.end(), from, from + static_cast<std::ptrdiff_t>(d_sin));
            continue;
        }
        const auto e = embed_scalar(v, d_sin, scale);
        data.insert(data.end(), e.begin(), e.end());
        if (seen.size() < kCacheSlots) seen.emplace_back(v, r);
    }
    return Array({values.size(), d_sin}, std::move(data));
}

/// All weights of the field. Tensor layout in `tensors`:
///   [0]                  condition table       [C, d]
///   [1 .. N]             reward projections    [d_sin, d]
///   [N+1]                time projection       [d_sin, d]
///   [N+2+2l], [N+3+2l]   trunk layer l weight [in, out] and bias [out]
struct VectorFieldParams {
    Dims dims;
    std::size_t conditions = rewards::kDefaultConditions;
    std::size_t rewards = rewards::kRewardCount;
    std::size_t bins = rewards::kDefaultBins;
    std::vector<Array> tensors;

    std::size_t trunk_input() const { return 2 + 2 * dims.d; }
    std::size_t reward_index(std::size_t j) const { return 1 + j; }
    std::size_t time_index() const { return 1 + rewards; }
    std::size_t weight_index(std::size_t layer) const { return 2 + rewards + 2 * layer; }
    std::size_t bias_index(std::size_t layer) const { return 3 + rewards + 2 * layer; }

    std::vector<std::string> tensor_names() const {
        std::vector<std::string> names{"condition_table"};
        for (std::size_t j = 0; j < rewards; ++j) names.push_back("reward_proj_" + std::to_string(j));
        names.emplace_back("time_proj");
        for (std::size_t l = 0; l < dims.layers; ++l) {
            names.push_back("trunk_w_" + std::to_string(l));
            names.push_back("trunk_b_" + std::to_string(l));
        }
        return names;
    }

    std::vector<diff::Shape> expected_shapes() const {
        std::vector<diff::Shape> s{{conditions, dims.d}};
        for (std::size_t j = 0; j < rewards; ++j) s.push_back({dims.d_sin, dims.d});
        s.push_back({dims.d_sin, dims.d});
        for (std::size_t l = 0; l < dims.layers; ++l) {
            const std::size_t in = l == 0 ? trunk_input() : dims.hidden;
            const std::size_t out = l + 1 == dims.layers ? 2 : dims.hidden;
            s.push_back({in, out});
            s.push_back({out});
        }
        return s;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& t : tensors) n += t.size();
        return n;
    }

    void validate() const {
        if (dims.d_sin == 0 || dims.d_sin % 2 || dims.d == 0 || dims.hidden == 0 || dims.layers < 1) {
            throw ValidationError("model: invalid dims");
        }
        if (bins < 2 || conditions < 1) throw ValidationError("model: invalid B or C");
        const auto shapes = expected_shapes();
        if (shapes.size() != tensors.size()) throw ShapeError("model: wrong tensor count");
        for (std::size_t i = 0; i < shapes.size(); ++i) {
            if (tensors[i].shape() != shapes[i]) {
                throw ShapeError("model: tensor " + tensor_names()[i] + " has shape " +
                                 diff::shape_string(tensors[i].shape()) + ", expected " +
                                 diff::shape_string(shapes[i]));
            }
        }
    }

    friend bool operator==(const VectorFieldParams&, const VectorFieldParams&) = default;
};

inline VectorFieldParams init_params(std::uint64_t seed, Dims dims = {}, std::size_t conditions = rewards::kDefaultConditions,
                                     std::size_t n_rewards = rewards::kRewardCount, std::size_t bins = rewards::kDefaultBins) {
    VectorFieldParams p;
    p.dims = dims;
    p.conditions = conditions;
    p.rewards = n_rewards;
    p.bins = bins;
    if (dims.d_sin == 0 || dims.d_sin % 2 || dims.d == 0 || dims.hidden == 0 || dims.layers < 1 || conditions == 0 || bins < 2) {
        throw ValidationError("init_params: dims must be positive and d_sin even");
    }
    Rng rng = make_rng(seed, Stream::init);
    auto normal = [&rng](const diff::Shape& shape, double stddev) {
        Array a = Array::zeros(shape);
        std::normal_distribution<double> dist(0.0, stddev);
        for (double& v : a.mutable_data()) v = dist(rng);
        return a;
    };
    const auto shapes = p.expected_shapes();
    p.tensors.push_back(normal(shapes[0], 0.02));
    for (std::size_t j = 0; j <= n_rewards; ++j) {
        p.tensors.push_back(normal(shapes[1 + j], 1.0 / std::sqrt(static_cast<double>(dims.d_sin))));
    }
    for (std::size_t l = 0; l < dims.layers; ++l) {
        const auto& ws = shapes[p.weight_index(l)];
        if (l + 1 == dims.layers) {
            p.tensors.push_back(Array::zeros(ws));
        } else {
            p.tensors.push_back(normal(ws, std::sqrt(2.0 / static_cast<double>(ws[0]))));
        }
        p.tensors.push_back(Array::zeros(shapes[p.bias_index(l)]));
    }
    return p;
}

/// Conditioning inputs of a batch of m rows. `targets` is [m, N]; only the
/// columns active under the mode are read.
struct FieldBatch {
    Array x_t;
    std::vector<double> t;
    std::vector<std::size_t> conditions;
    Array targets;

    std::size_t rows() const { return x_t.rows(); }
};

/// Graph leaves for every parameter tensor, in tensor order. The leaves
/// borrow from `p`, which must stay unchanged while the graph is live.
inline std::vector<Var> bind_params(Graph& g, const VectorFieldParams& p) {
    std::vector<Var> vars;
    vars.reserve(p.tensors.size());
    for (const auto& t : p.tensors) vars.push_back(g.borrow(t));
    return vars;
}

/// Condition token followed by one projected token per active reward.
inline std::vector<Var> condition_tokens(Graph& g, std::span<const Var> pv, const VectorFieldParams& p,
                                         std::span<const std::size_t> conditions, const Array& targets, Mode mode) {
    const std::size_t m = conditions.size();
    Array onehot = Array::zeros({m, p.conditions});
    for (std::size_t r = 0; r < m; ++r) {
        if (conditions[r] >= p.conditions) {
            throw ValidationError("condition_tokens: condition " + std::to_string(conditions[r]) + " outside [0, " +
                                  std::to_string(p.conditions) + ")");
        }
        onehot[r * p.conditions + conditions[r]] = 1.0;
    }
    std::vector<Var> tokens{g.matmul(g.input(std::move(onehot)), pv[0])};
    const auto active = mode.active_rewards(p.rewards);
    if (!active.empty() && (targets.rank() != 2 || targets.rows() != m || targets.cols() != p.rewards)) {
        throw ValidationError("condition_tokens: mode " + mode.to_string() + " needs targets of shape [" +
                              std::to_string(m) + "," + std::to_string(p.rewards) + "], got " +
                              diff::shape_string(targets.shape()));
    }
    const double scale = static_cast<double>(p.bins - 1);
    std::vector<double> column(m);
    for (std::size_t j : active) {
        for (std::size_t r = 0; r < m; ++r) column[r] = targets[r * p.rewards + j];
        Var emb = g.input(embed_rows(column, p.dims.d_sin, scale));
        tokens.push_back(g.matmul(emb, pv[p.reward_index(j)]));
    }
    return tokens;
}

/// Pools tokens, concatenates [x_t, time token, pooled] and runs the trunk.
inline Var trunk(Graph& g, std::span<const Var> pv, const VectorFieldParams& p, Var x_t, Var time_token,
                 std::span<const Var> tokens) {
    Var pooled = g.pool_mean(tokens);
    Var h = g.concat({x_t, time_token, pooled});
    for (std::size_t l = 0; l < p.dims.layers; ++l) {
        h = g.affine(h, pv[p.weight_index(l)], pv[p.bias_index(l)]);
        if (l + 1 < p.dims.layers) h = g.gelu(h);
    }
    return h;
}

inline Var time_token(Graph& g, std::span<const Var> pv, const VectorFieldParams& p, std::span<const double> t) {
    return g.matmul(g.input(embed_rows(t, p.dims.d_sin, kTimeScale)), pv[p.time_index()]);
}

/// Velocity prediction (of eps - x) for every row of the batch, shape [m, 2].
inline Var build_field(Graph& g, std::span<const Var> pv, const VectorFieldParams& p, const FieldBatch& batch, Mode mode) {
    const std::size_t m = batch.rows();
    if (batch.x_t.rank() != 2 || batch.x_t.cols() != 2 || batch.t.size() != m || batch.conditions.size() != m) {
        throw ShapeError("vector_field: batch components disagree on row count");
    }
    Var x = g.input(batch.x_t);
    if (!batch.x_t.all_finite()) throw NonFiniteError("vector_field: x_t is not finite");
    Var tt = time_token(g, pv, p, batch.t);
    const auto tokens = condition_tokens(g, pv, p, batch.conditions, batch.targets, mode);
    return trunk(g, pv, p, x, tt, tokens);
}

/// Batched forward pass with one shared target vector.
inline Array evaluate_field(const VectorFieldParams& p, Mode mode, const Array& x_t, double t,
                            std::span<const std::size_t> conditions, std::span<const double> target) {
    const std::size_t m = x_t.rows();
    FieldBatch batch{x_t, std::vector<double>(m, t), {conditions.begin(), conditions.end()}, Array()};
    if (!mode.active_rewards(p.rewards).empty()) {
        if (target.size() != p.rewards) {
            throw ValidationError("vector_field: target has " + std::to_string(target.size()) + " components, expected " +
                                  std::to_string(p.rewards));
        }
        std::vector<double> rows;
        rows.reserve(m * p.rewards);
        for (std::size_t r = 0; r < m; ++r) rows.insert(rows.end(), target.begin(), target.end());
        batch.targets = Array({m, p.rewards}, std::move(rows));
    }
    Graph g;
    const auto pv = bind_params(g, p);
    Var out = build_field(g, pv, p, batch, mode);
    return g.value(out);
}

inline Point2 vector_field(const VectorFieldParams& p, Point2 x_t, double t, std::size_t c, std::span<const double> target,
                           Mode mode) {
    if (!std::isfinite(t)) throw NonFiniteError("vector_field: t is not finite");
    const std::size_t cs[1] = {c};
    const Array out = evaluate_field(p, mode, Array({1, 2}, {x_t.x, x_t.y}), t, cs, target);
    return {out[0], out[1]};
}

/// Token values for one sample: condition token first, then active rewards.
inline std::vector<std::vector<double>> condition_tokens(const VectorFieldParams& p, std::size_t c,
                                                         std::span<const double> target, Mode mode) {
    Graph g;
    const auto pv = bind_params(g, p);
    const std::size_t cs[1] = {c};
    Array targets;
    if (!mode.active_rewards(p.rewards).empty()) {
        if (target.size() != p.rewards) throw ValidationError("condition_tokens: target length must equal N");
        targets = Array({1, p.rewards}, {target.begin(), target.end()});
    }
    std::vector<std::vector<double>> out;
    for (Var v : condition_tokens(g, pv, p, cs, targets, mode)) out.push_back(g.value(v).values());
    return out;
}

/// Trained (or initial) field plus the metadata needed to reuse it.
struct ModelCheckpoint {
    static constexpr int kVersion = 1;
    VectorFieldParams params;
    Mode mode = Mode::multi();
    std::uint64_t step = 0;
    std::string config_digest;

    std::string digest() const {
        Sha256 h;
        h.update("miro-checkpoint-v1");
        h.update(static_cast<std::uint64_t>(params.dims.d_sin)).update(static_cast<std::uint64_t>(params.dims.d));
        h.update(static_cast<std::uint64_t>(params.dims.hidden)).update(static_cast<std::uint64_t>(params.dims.layers));
        h.update(static_cast<std::uint64_t>(params.conditions)).update(static_cast<std::uint64_t>(params.rewards));
        h.update(static_cast<std::uint64_t>(params.bins));
        h.update(mode.to_string()).update(step).update(config_digest);
        for (const auto& t : params.tensors) {
            h.update(static_cast<std::uint64_t>(t.rank()));
            for (auto e : t.shape()) h.update(static_cast<std::uint64_t>(e));
            h.update(t.data());
        }
        return h.hex();
    }

    nlohmann::json to_json() const {
        nlohmann::json tensors = nlohmann::json::array();
        const auto names = params.tensor_names();
        for (std::size_t i = 0; i < params.tensors.size(); ++i) {
            tensors.push_back({{"name", names[i]}, {"shape", params.tensors[i].shape()}, {"data", params.tensors[i].values()}});
        }
        return {{"format", "miro-checkpoint"},
                {"version", kVersion},
                {"dims",
                 {{"d_sin", params.dims.d_sin}, {"d", params.dims.d}, {"h", params.dims.hidden}, {"L", params.dims.layers}}},
                {"N", params.rewards},
                {"B", params.bins},
                {"C", params.conditions},
                {"mode", mode.to_string()},
                {"step", step},
                {"config_digest", config_digest},
                {"parameter_count", params.parameter_count()},
                {"tensors", std::move(tensors)},
                {"digest", digest()}};
    }

    static ModelCheckpoint from_json(const nlohmann::json& j) {
        ModelCheckpoint ck;
        std::string stored;
        try {
            if (j.at("format").get<std::string>() != "miro-checkpoint") throw FormatError("checkpoint: wrong format tag");
            if (j.at("version").get<int>() != kVersion) {
                throw FormatError("checkpoint: unsupported version " + j.at("version").dump());
            }
            const auto& d = j.at("dims");
            ck.params.dims = {d.at("d_sin").get<std::size_t>(), d.at("d").get<std::size_t>(), d.at("h").get<std::size_t>(),
                              d.at("L").get<std::size_t>()};
            ck.params.rewards = j.at("N").get<std::size_t>();
            ck.params.bins = j.at("B").get<std::size_t>();
            ck.params.conditions = j.at("C").get<std::size_t>();
            ck.mode = Mode::parse(j.at("mode").get<std::string>(), ck.params.rewards);
            ck.step = j.at("step").get<std::uint64_t>();
            ck.config_digest = j.at("config_digest").get<std::string>();
            for (const auto& t : j.at("tensors")) {
                ck.params.tensors.emplace_back(t.at("shape").get<diff::Shape>(), t.at("data").get<std::vector<double>>());
            }
            stored = j.at("digest").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("checkpoint: ") + e.what());
        }
        ck.params.validate();
        const std::string actual = ck.digest();
        if (actual != stored) throw FormatError("checkpoint: digest mismatch (stored " + stored + ", computed " + actual + ")");
        return ck;
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
        out << to_json().dump() << '\n';
        if (!out) throw IoError("write failed for '" + path.string() + "'");
    }

    static ModelCheckpoint load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("checkpoint '" + path.string() + "': " + e.what());
        }
        return from_json(j);
    }
};

}  // namespace miro::model
