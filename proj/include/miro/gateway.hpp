#pragma once

// JSON service over one immutable checkpoint. Handlers are pure functions of
// (checkpoint, request body); serve() only adds HTTP transport.

#include <atomic>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "miro/error.hpp"
#include "miro/evalsuite.hpp"
#include "miro/model.hpp"
#include "miro/rewards.hpp"
#include "miro/sample.hpp"

// After Eigen: httplib pulls in <resolv.h>, which defines a _res macro.
#include <httplib.h>

namespace miro::gateway {

using nlohmann::json;

inline constexpr int kApiVersion = 1;
inline constexpr std::size_t kMaxCount = 1024;
inline constexpr std::size_t kMaxSteps = 500;
inline constexpr std::size_t kMaxGridPoints = 33;
inline constexpr std::size_t kMaxSweepSamples = 1024;

struct FieldError {
    std::string field;
    std::string message;
};

/// Thrown with every offending field at once; maps to HTTP 400.
class RequestError : public ValidationError {
public:
    explicit RequestError(std::vector<FieldError> errors)
        : ValidationError(summarize(errors)), errors_(std::move(errors)) {}

    const std::vector<FieldError>& errors() const { return errors_; }

    json to_json() const {
        json fields = json::array();
        for (const auto& e : errors_) fields.push_back({{"field", e.field}, {"message", e.message}});
        return {{"error", "invalid request"}, {"fields", fields}};
    }

private:
    static std::string summarize(const std::vector<FieldError>& errors) {
        std::string s = "invalid request:";
        for (const auto& e : errors) s += " " + e.field + ": " + e.message + ";";
        return s;
    }

    std::vector<FieldError> errors_;
};

struct BestOf {
    std::size_t n = 1;
    std::size_t selector = 0;
};

/// A fully resolved sampling request (the CLI `sample` command builds the
/// same struct from flags).
struct SampleRequest {
    std::size_t condition = 0;
    sample::GuidanceSpec guidance = sample::GuidanceSpec::defaults();
    std::size_t count = 512;
    std::uint64_t seed = 0;
    std::size_t steps = sample::kDefaultSteps;
    std::optional<BestOf> best_of;

    json to_json() const {
        json j = {{"condition", condition},     {"s_plus", guidance.s_plus}, {"s_minus", guidance.s_minus},
                  {"omega", guidance.omega},    {"count", count},            {"seed", seed},
                  {"steps", steps},             {"best_of", nullptr}};
        if (best_of) j["best_of"] = {{"n", best_of->n}, {"selector", best_of->selector}};
        return j;
    }
};

class FieldReader {
public:
    explicit FieldReader(const json& body) : body_(body) {
        if (!body_.is_object()) errors_.push_back({"<body>", "must be a JSON object"});
    }

    template <class T>
    void read(const char* name, T& out) {
        if (!body_.is_object() || !body_.contains(name) || body_.at(name).is_null()) return;
        read_value(name, body_.at(name), out);
    }

    void fail(std::string field, std::string message) { errors_.push_back({std::move(field), std::move(message)}); }
    bool has(const char* name) const { return body_.is_object() && body_.contains(name) && !body_.at(name).is_null(); }
    const json& at(const char* name) const { return body_.at(name); }
    bool ok() const { return errors_.empty(); }

    void finish() const {
        if (!errors_.empty()) throw RequestError(errors_);
    }

    void read_value(const std::string& name, const json& v, std::size_t& out) {
        if (v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
            out = v.get<std::size_t>();
        } else {
            fail(name, "must be a non-negative integer");
        }
    }

    void read_value(const std::string& name, const json& v, double& out) {
        if (v.is_number()) {
            out = v.get<double>();
        } else {
            fail(name, "must be a number");
        }
    }

    void read_value(const std::string& name, const json& v, std::vector<double>& out) {
        if (!v.is_array()) {
            fail(name, "must be an array of numbers");
            return;
        }
        std::vector<double> tmp;
        for (const auto& e : v) {
            if (!e.is_number()) {
                fail(name, "must be an array of numbers");
                return;
            }
            tmp.push_back(e.get<double>());
        }
        out = std::move(tmp);
    }

private:
    const json& body_;
    std::vector<FieldError> errors_;
};

inline void check_target(FieldReader& r, const char* name, const std::vector<double>& v, std::size_t n) {
    if (v.size() != n) {
        r.fail(name, "expected " + std::to_string(n) + " components, got " + std::to_string(v.size()));
        return;
    }
    for (double x : v) {
        if (!(x >= 0.0 && x <= 1.0)) {
            r.fail(name, "components must lie in [0, 1]");
            return;
        }
    }
}

/// Validates every field against the checkpoint before any model call.
inline void validate(const SampleRequest& q, const model::ModelCheckpoint& ckpt, FieldReader& r) {
    if (q.condition >= ckpt.params.conditions) {
        r.fail("condition", "must be < " + std::to_string(ckpt.params.conditions));
    }
    check_target(r, "s_plus", q.guidance.s_plus, ckpt.params.rewards);
    check_target(r, "s_minus", q.guidance.s_minus, ckpt.params.rewards);
    if (!std::isfinite(q.guidance.omega) || q.guidance.omega < 0.0) r.fail("omega", "must be finite and >= 0");
    if (q.count < 1 || q.count > kMaxCount) r.fail("count", "must lie in 1.." + std::to_string(kMaxCount));
    if (q.steps < 1 || q.steps > kMaxSteps) r.fail("steps", "must lie in 1.." + std::to_string(kMaxSteps));
    if (q.best_of) {
        if (q.best_of->n < 1 || q.best_of->n > kMaxCount) r.fail("best_of.n", "must lie in 1.." + std::to_string(kMaxCount));
        if (q.best_of->selector >= rewards::kRewardCount) {
            r.fail("best_of.selector", "must be < " + std::to_string(rewards::kRewardCount));
        }
    }
}

inline void validate(const SampleRequest& q, const model::ModelCheckpoint& ckpt) {
    const json empty = json::object();
    FieldReader r(empty);
    validate(q, ckpt, r);
    r.finish();
}

inline SampleRequest parse_sample_request(const json& body, const model::ModelCheckpoint& ckpt) {
    FieldReader r(body);
    SampleRequest q;
    q.guidance = sample::GuidanceSpec::defaults(ckpt.params.rewards);
    r.read("condition", q.condition);
    r.read("s_plus", q.guidance.s_plus);
    r.read("s_minus", q.guidance.s_minus);
    r.read("omega", q.guidance.omega);
    r.read("count", q.count);
    r.read("seed", q.seed);
    r.read("steps", q.steps);
    if (r.has("best_of")) {
        const json& b = r.at("best_of");
        if (!b.is_object()) {
            r.fail("best_of", "must be an object {n, selector}");
        } else {
            BestOf bo;
            if (b.contains("n")) r.read_value("best_of.n", b.at("n"), bo.n);
            if (b.contains("selector")) r.read_value("best_of.selector", b.at("selector"), bo.selector);
            q.best_of = bo;
        }
    }
    if (r.ok()) validate(q, ckpt, r);
    r.finish();
    return q;
}

struct SampleResult {
    std::vector<Point2> points;
    std::vector<rewards::RewardVector> scores;
    eval::RewardStats stats;
    std::optional<std::size_t> best_index;
};

/// Plain sampling draws sample i from initial_noise(seed, i); best-of-N
/// keeps the best of best_of.n such candidates.
inline SampleResult run_sample(const model::ModelCheckpoint& ckpt, const SampleRequest& q) {
    validate(q, ckpt);
    const sample::CheckpointField field{ckpt};
    SampleResult res;
    if (q.best_of) {
        const sample::SamplerConfig cfg{q.steps, q.seed, q.guidance, q.condition};
        auto bon = sample::best_of_n(field, cfg, q.best_of->n, q.best_of->selector, ckpt.params.conditions);
        res.points = {bon.best};
        res.scores = {bon.scores[bon.index]};
        res.best_index = bon.index;
    } else {
        const std::vector<std::size_t> cs(q.count, q.condition);
        res.points = sample::sample_points(field, q.steps, q.seed, cs, q.guidance);
        for (const auto& p : res.points) res.scores.push_back(rewards::score_sample(p, q.condition, ckpt.params.conditions));
    }
    res.stats = eval::stats_of(res.scores);
    return res;
}

struct SweepRequest {
    std::size_t reward = 0;
    std::vector<double> grid = eval::unit_grid(9);
    std::size_t samples_per_point = eval::kDefaultSamplesPerPoint;
    eval::SamplingOptions options;
};

inline SweepRequest parse_sweep_request(const json& body, const model::ModelCheckpoint& ckpt) {
    FieldReader r(body);
    SweepRequest q;
    r.read("reward", q.reward);
    if (r.has("grid")) {
        const json& g = r.at("grid");
        if (g.is_number_integer()) {
            std::size_t points = 0;
            r.read_value("grid", g, points);
            if (points < 2 || points > kMaxGridPoints) {
                r.fail("grid", "point count must lie in 2.." + std::to_string(kMaxGridPoints));
            } else {
                q.grid = eval::unit_grid(points);
            }
        } else {
            r.read_value("grid", g, q.grid);
        }
    }
    r.read("samples_per_point", q.samples_per_point);
    r.read("omega", q.options.omega);
    r.read("steps", q.options.ode_steps);
    r.read("seed", q.options.seed);
    if (q.reward >= ckpt.params.rewards) r.fail("reward", "must be < " + std::to_string(ckpt.params.rewards));
    if (q.grid.empty() || q.grid.size() > kMaxGridPoints) {
        r.fail("grid", "must hold 1.." + std::to_string(kMaxGridPoints) + " values");
    }
    for (std::size_t i = 0; i < q.grid.size(); ++i) {
        if (!(q.grid[i] >= 0.0 && q.grid[i] <= 1.0)) {
            r.fail("grid", "values must lie in [0, 1]");
            break;
        }
        if (i > 0 && !(q.grid[i] > q.grid[i - 1])) {
            r.fail("grid", "values must be strictly increasing");
            break;
        }
    }
    if (q.samples_per_point < eval::kMinSamplesPerPoint || q.samples_per_point > kMaxSweepSamples) {
        r.fail("samples_per_point",
               "must lie in " + std::to_string(eval::kMinSamplesPerPoint) + ".." + std::to_string(kMaxSweepSamples));
    }
    if (!std::isfinite(q.options.omega) || q.options.omega < 0.0) r.fail("omega", "must be finite and >= 0");
    if (q.options.ode_steps < 1 || q.options.ode_steps > kMaxSteps) {
        r.fail("steps", "must lie in 1.." + std::to_string(kMaxSteps));
    }
    r.finish();
    return q;
}

struct Response {
    int status = 200;
    json body;
};

class Service {
public:
    explicit Service(model::ModelCheckpoint ckpt)
        : ckpt_(std::make_shared<const model::ModelCheckpoint>(std::move(ckpt))), digest_(ckpt_->digest()) {}

    const model::ModelCheckpoint& checkpoint() const { return *ckpt_; }
    const std::string& digest() const { return digest_; }

    json meta() const {
        const auto& p = ckpt_->params;
        json names = json::array();
        json rewards_info = json::array();
        for (std::size_t j = 0; j < p.rewards; ++j) {
            const auto& spec = rewards::suite()[j];
            names.push_back(spec.name);
            rewards_info.push_back({{"index", j}, {"name", spec.name}, {"description", spec.description}});
        }
        json presets = json::array();
        const auto all = sample::GuidanceSpec::defaults(p.rewards);
        presets.push_back({{"name", "All"}, {"s_plus", all.s_plus}, {"s_minus", all.s_minus}});
        for (std::size_t j = 0; j < p.rewards; ++j) {
            const auto g = sample::isolate_reward(j, p.rewards);
            presets.push_back({{"name", "Isolate r" + std::to_string(j)}, {"s_plus", g.s_plus}, {"s_minus", g.s_minus}});
        }
        return {{"api_version", kApiVersion},
                {"n_rewards", p.rewards},
                {"bins", p.bins},
                {"conditions", p.conditions},
                {"mode", ckpt_->mode.to_string()},
                {"reward_names", names},
                {"rewards", rewards_info},
                {"checkpoint_digest", digest_},
                {"defaults",
                 {{"omega", sample::kDefaultOmega},
                  {"steps", sample::kDefaultSteps},
                  {"count", 512},
                  {"seed", 0},
                  {"s_plus", all.s_plus},
                  {"s_minus", all.s_minus}}},
                {"limits", {{"count", kMaxCount}, {"steps", kMaxSteps}, {"grid_points", kMaxGridPoints}}},
                {"presets", presets}};
    }

    Response handle_meta() const { return guarded([&] { return Response{200, meta()}; }); }

    Response handle_health() const {
        return guarded([&] { return Response{200, {{"status", "ok"}, {"checkpoint_digest", digest_}}}; });
    }

    Response handle_sample(const std::string& body) const {
        return guarded([&] {
            const SampleRequest q = parse_sample_request(parse_body(body), *ckpt_);
            const auto t0 = std::chrono::steady_clock::now();
            const SampleResult res = run_sample(*ckpt_, q);
            const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            json pts = json::array();
            json scores = json::array();
            for (std::size_t i = 0; i < res.points.size(); ++i) {
                pts.push_back({res.points[i].x, res.points[i].y});
                scores.push_back(res.scores[i].values);
            }
            json out = {{"points", pts},          {"rewards", scores},
                        {"stats", res.stats.to_json()}, {"request", q.to_json()},
                        {"checkpoint_digest", digest_}, {"elapsed_ms", ms}};
            if (res.best_index) out["best_index"] = *res.best_index;
            return Response{200, out};
        });
    }

    Response handle_sweep(const std::string& body) const {
        return guarded([&] {
            const SweepRequest q = parse_sweep_request(parse_body(body), *ckpt_);
            const auto curve = eval::sweep_reward_weight(*ckpt_, q.reward, q.grid, q.samples_per_point, q.options);
            return Response{200, curve.to_json()};
        });
    }

    /// Where 500-level details go; the client only sees the id.
    std::function<void(const std::string&)> log = [](const std::string& line) { std::cerr << line << std::endl; };

private:
    static json parse_body(const std::string& body) {
        try {
            return json::parse(body.empty() ? std::string("{}") : body);
        } catch (const json::exception&) {
            throw RequestError(std::vector<FieldError>{{"<body>", "not valid JSON"}});
        }
    }

    template <class Fn>
    Response guarded(Fn&& fn) const {
        try {
            return fn();
        } catch (const RequestError& e) {
            return {400, e.to_json()};
        } catch (const ValidationError& e) {
            return {400, RequestError(std::vector<FieldError>{{"<request>", e.what()}}).to_json()};
        } catch (const std::exception& e) {
            const std::string id = next_error_id();
            log("gateway error " + id + ": " + e.what());
            return {500, {{"error", "internal error"}, {"id", id}}};
        }
    }

    std::string next_error_id() const {
        static std::atomic<std::uint64_t> counter{0};
        char buf[32];
        std::snprintf(buf, sizeof buf, "err-%08llx-%04llx",
                      static_cast<unsigned long long>(std::chrono::system_clock::now().time_since_epoch().count() & 0xffffffffULL),
                      static_cast<unsigned long long>(counter.fetch_add(1) & 0xffffULL));
        return buf;
    }

    std::shared_ptr<const model::ModelCheckpoint> ckpt_;
    std::string digest_;
};

inline void install_routes(httplib::Server& srv, const Service& svc, const std::string& cors_origin = "*") {
    auto reply = [](httplib::Response& res, const Response& r) {
        res.status = r.status;
        res.set_content(r.body.dump(), "application/json; charset=utf-8");
    };
    srv.set_post_routing_handler([cors_origin](const httplib::Request&, httplib::Response& res) {
        res.set_header("Access-Control-Allow-Origin", cors_origin);
        res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
        res.set_header("Access-Control-Allow-Headers", "Content-Type");
    });
    srv.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    srv.Get("/api/meta", [&svc, reply](const httplib::Request&, httplib::Response& res) { reply(res, svc.handle_meta()); });
    srv.Get("/api/health", [&svc, reply](const httplib::Request&, httplib::Response& res) { reply(res, svc.handle_health()); });
    srv.Post("/api/sample",
             [&svc, reply](const httplib::Request& req, httplib::Response& res) { reply(res, svc.handle_sample(req.body)); });
    srv.Post("/api/sweep",
             [&svc, reply](const httplib::Request& req, httplib::Response& res) { reply(res, svc.handle_sweep(req.body)); });
}

/// Splits "host:port"; a bare port binds 127.0.0.1.
inline std::pair<std::string, int> parse_bind(const std::string& bind) {
    const auto colon = bind.rfind(':');
    std::string host = colon == std::string::npos ? "127.0.0.1" : bind.substr(0, colon);
    const std::string port = colon == std::string::npos ? bind : bind.substr(colon + 1);
    try {
        std::size_t used = 0;
        const int p = std::stoi(port, &used);
        if (used != port.size() || p < 0 || p > 65535) throw std::out_of_range("port");
        return {host.empty() ? "127.0.0.1" : host, p};
    } catch (const std::exception&) {
        throw ValidationError("--bind: expected HOST:PORT, got '" + bind + "'");
    }
}

/// The service plus a listening socket; port 0 picks an ephemeral port.
class Server {
public:
    Server(model::ModelCheckpoint ckpt, const std::string& host, int port) : svc_(std::move(ckpt)) {
        install_routes(http_, svc_);
        port_ = port == 0 ? http_.bind_to_any_port(host) : (http_.bind_to_port(host, port) ? port : -1);
        if (port_ < 0) throw IoError("gateway: cannot bind " + host + ":" + std::to_string(port));
    }

    ~Server() { stop(); }

    int port() const { return port_; }
    const Service& service() const { return svc_; }

    void listen() { http_.listen_after_bind(); }

    void start() {
        thread_ = std::thread([this] { http_.listen_after_bind(); });
        http_.wait_until_ready();
    }

    void stop() {
        http_.stop();
        if (thread_.joinable()) thread_.join();
    }

private:
    Service svc_;
    httplib::Server http_;
    std::thread thread_;
    int port_ = -1;
};

/// Loads (and digest-verifies) the checkpoint, then serves until stopped.
inline void serve(const std::filesystem::path& checkpoint, const std::string& bind) {
    const auto [host, port] = parse_bind(bind);
    Server srv(model::ModelCheckpoint::load(checkpoint), host, port);
    std::cerr << "miro gateway listening on " << host << ":" << srv.port() << " (checkpoint "
              << srv.service().digest().substr(0, 12) << ")" << std::endl;
    srv.listen();
}

}  // namespace miro::gateway
