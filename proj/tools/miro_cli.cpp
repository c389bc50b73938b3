// miro: dataset generation, calibration, training, guided sampling and the
// evaluation experiments as subcommands of one binary.
//
// Exit codes: 0 success, 2 validation error, 3 runtime error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "miro/miro.hpp"

namespace fs = std::filesystem;
using namespace miro;
using nlohmann::json;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

struct Options {
    std::string workdir = ".";

    // gen
    std::size_t n = 100000;
    std::size_t conditions = rewards::kDefaultConditions;

    // shared
    std::uint64_t seed = 0;
    std::string in;
    std::string out;
    std::string cal;
    std::string ckpt;

    // calibrate
    std::size_t bins = rewards::kDefaultBins;
    std::size_t cal_size = data::kCalibrationSubset;

    // train
    std::string mode = "multi";
    std::uint64_t steps = 20000;
    std::size_t batch = 256;
    double lr = 1e-3;
    std::uint64_t eval_every = 500;
    std::size_t eval_samples = 512;
    std::string log;

    // sample / sweep / scale
    std::size_t condition = 0;
    double omega = sample::kDefaultOmega;
    std::string splus;
    std::string sminus;
    std::size_t count = 512;
    std::size_t ode_steps = sample::kDefaultSteps;
    std::size_t best_of = 0;
    std::size_t selector = 0;
    std::size_t reward = 0;
    std::size_t grid = 9;
    std::size_t samples = eval::kDefaultSamplesPerPoint;
    std::size_t max_n = 128;
    std::size_t trials = 1000;

    // compare
    std::string baseline_log;
    std::string miro_log;

    // serve
    std::string bind = "127.0.0.1:8080";
};

fs::path resolve(const Options& o, const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() ? path : fs::path(o.workdir) / path;
}

void require(const std::string& value, const char* flag, const char* cmd) {
    if (value.empty()) throw ValidationError(std::string(cmd) + ": " + flag + " is required");
}

std::vector<double> parse_target(const std::string& text, const char* flag) {
    std::vector<double> v;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            const double x = std::stod(item, &used);
            if (used != item.size()) throw std::invalid_argument(item);
            v.push_back(x);
        } catch (const std::exception&) {
            throw ValidationError(std::string(flag) + ": '" + item + "' is not a number");
        }
    }
    if (v.size() != rewards::kRewardCount) {
        throw ValidationError(std::string(flag) + ": expected " + std::to_string(rewards::kRewardCount) +
                              " comma-separated reals, got " + std::to_string(v.size()));
    }
    for (double x : v) {
        if (!(x >= 0.0 && x <= 1.0)) throw ValidationError(std::string(flag) + ": components must lie in [0, 1]");
    }
    return v;
}

sample::GuidanceSpec guidance_from(const Options& o) {
    auto g = sample::GuidanceSpec::defaults(rewards::kRewardCount, o.omega);
    if (!o.splus.empty()) g.s_plus = parse_target(o.splus, "--splus");
    if (!o.sminus.empty()) g.s_minus = parse_target(o.sminus, "--sminus");
    g.validate(rewards::kRewardCount);
    return g;
}

std::string join(std::span<const std::size_t> v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + std::to_string(v[i]);
    return s;
}

void print_populations(const std::vector<std::vector<std::size_t>>& pops) {
    for (std::size_t j = 0; j < pops.size(); ++j) std::cout << "  r" << j << " bins: " << join(pops[j]) << "\n";
}

rewards::BinCalibration load_calibration(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open calibration '" + path.string() + "'");
    try {
        return rewards::BinCalibration::from_json(json::parse(in));
    } catch (const json::exception& e) {
        throw FormatError("calibration '" + path.string() + "': " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << text;
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::string file_digest(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return sha256_hex(ss.str());
}

int cmd_gen(const Options& o) {
    require(o.out, "--out", "gen");
    const auto raw = data::generate_dataset(o.n, o.conditions, o.seed);
    const auto path = resolve(o, o.out);
    data::save_raw_dataset(raw, o.conditions, path);
    std::vector<std::size_t> per_class(o.conditions, 0);
    for (const auto& r : raw) ++per_class[r.c];
    std::cout << "gen: " << raw.size() << " records, C=" << o.conditions << ", seed=" << o.seed
              << ", class counts: " << join(per_class) << ", sha256=" << file_digest(path) << "\n";
    return 0;
}

int cmd_calibrate(const Options& o) {
    require(o.in, "--in", "calibrate");
    require(o.out, "--out", "calibrate");
    const auto ds = data::load_dataset(resolve(o, o.in));
    const auto raw = data::raw_records(ds);
    const auto cal = rewards::calibrate_bins(data::calibration_scores(raw, ds.header.conditions, o.cal_size), o.bins);
    write_text(resolve(o, o.out), cal.to_json().dump(2) + "\n");
    const std::size_t m = cal.calibration_size;
    const std::vector<data::RawRecord> subset(raw.begin(), raw.begin() + static_cast<std::ptrdiff_t>(m));
    const auto enriched = data::enrich_dataset(std::span<const data::RawRecord>(subset), cal, ds.header.conditions);
    std::cout << "calibrate: B=" << cal.bins << ", calibration records=" << m << ", target population=" << m / cal.bins
              << ", digest=" << cal.digest() << "\n";
    print_populations(data::bin_populations(enriched, cal.bins));
    return 0;
}

int cmd_score(const Options& o) {
    require(o.in, "--in", "score");
    require(o.out, "--out", "score");
    if (o.cal.empty()) {
        throw ValidationError("score: --cal is required (a calibration file from `miro calibrate`) to bin the scores");
    }
    const auto ds = data::load_dataset(resolve(o, o.in));
    const auto cal = load_calibration(resolve(o, o.cal));
    if (cal.rewards() != ds.header.rewards) {
        throw ValidationError("score: calibration has N=" + std::to_string(cal.rewards()) + " but dataset has N=" +
                              std::to_string(ds.header.rewards));
    }
    const auto records = data::enrich_dataset(std::span<const data::ScoredRecord>(ds.records), cal, ds.header.conditions);
    data::check_bin_coverage(records, cal.bins);
    data::save_dataset(records, cal.bins, ds.header.conditions, cal.digest(), resolve(o, o.out));
    std::cout << "score: " << records.size() << " records, N=" << cal.rewards() << ", B=" << cal.bins << "\n";
    print_populations(data::bin_populations(records, cal.bins));
    return 0;
}

fs::path log_path_for(const Options& o) {
    if (!o.log.empty()) return resolve(o, o.log);
    fs::path p = resolve(o, o.out);
    p.replace_extension(".metrics.csv");
    return p;
}

int cmd_train(const Options& o) {
    require(o.in, "--in", "train");
    require(o.out, "--out", "train");
    train::TrainConfig cfg;
    cfg.steps = o.steps;
    cfg.batch = o.batch;
    cfg.lr = o.lr;
    cfg.seed = o.seed;
    cfg.mode = model::Mode::parse(o.mode);
    cfg.eval_every = o.eval_every;
    cfg.eval_samples = o.eval_samples;
    cfg.eval_ode_steps = o.ode_steps;
    cfg.validate();
    const auto ds = data::load_dataset(resolve(o, o.in));
    auto res = train::train(cfg, ds, [](const train::MetricRow& r) {
        std::fprintf(stderr, "step %llu loss %.5f r0 %.4f r1 %.4f r2 %.4f r3 %.4f\n",
                     static_cast<unsigned long long>(r.step), r.loss, r.rewards[0], r.rewards[1], r.rewards[2], r.rewards[3]);
    });
    res.checkpoint.save(resolve(o, o.out));
    res.log.save(log_path_for(o));
    const auto& last = res.log.rows.back();
    std::cout << "train: mode=" << cfg.mode.to_string() << " steps=" << cfg.steps << " final loss=" << last.loss
              << " r0=" << last.rewards[0] << " checkpoint digest=" << res.checkpoint.digest() << "\n";
    return 0;
}

eval::Report base_report(const std::string& title, const model::ModelCheckpoint* ckpt, const json& config) {
    eval::Report r;
    r.title = title;
    r.config = config;
    if (ckpt) r.config["checkpoint_digest"] = ckpt->digest();
    return r;
}

fs::path report_path(const Options& o, const char* fallback) { return resolve(o, o.out.empty() ? fallback : o.out); }

int cmd_sample(const Options& o) {
    require(o.ckpt, "--ckpt", "sample");
    const auto ckpt = model::ModelCheckpoint::load(resolve(o, o.ckpt));
    gateway::SampleRequest q;
    q.condition = o.condition;
    q.guidance = guidance_from(o);
    q.count = o.count;
    q.seed = o.seed;
    q.steps = o.ode_steps;
    if (o.best_of > 0) q.best_of = gateway::BestOf{o.best_of, o.selector};
    const auto res = gateway::run_sample(ckpt, q);
    json pts = json::array();
    for (std::size_t i = 0; i < res.points.size(); ++i) {
        pts.push_back({{"x", res.points[i].x}, {"y", res.points[i].y}, {"rewards", res.scores[i].values}});
    }
    auto report = base_report("sample", &ckpt, q.to_json());
    report.extra = {{"stats", res.stats.to_json()}, {"points", pts}};
    if (res.best_index) report.extra["best_index"] = *res.best_index;
    eval::emit_report(report, report_path(o, "sample.json"));
    std::cout << "sample: " << res.points.size() << " points";
    for (std::size_t j = 0; j < rewards::kRewardCount; ++j) std::cout << " mean_r" << j << "=" << res.stats.mean[j];
    std::cout << "\n";
    return 0;
}

int cmd_sweep(const Options& o) {
    require(o.ckpt, "--ckpt", "sweep");
    const auto ckpt = model::ModelCheckpoint::load(resolve(o, o.ckpt));
    const auto grid = eval::unit_grid(o.grid);
    const eval::SamplingOptions opt{o.omega, o.ode_steps, o.seed};
    auto curve = eval::sweep_reward_weight(ckpt, o.reward, grid, o.samples, opt);
    auto report = base_report("sweep", &ckpt, curve.provenance);
    eval::Criterion mono;
    mono.name = "target_tracks_measured_r" + std::to_string(o.reward);
    mono.kind = "spearman";
    mono.args = {{"curve", curve.name}, {"reward", o.reward}};
    mono.threshold = 0.9;
    report.curves.push_back(std::move(curve));
    report.criteria.push_back(eval::evaluate(mono, report.curves));
    const auto path = report_path(o, "sweep.json");
    eval::emit_report(report, path);
    std::cout << "sweep: r" << o.reward << " over " << grid.size() << " points, spearman=" << report.criteria[0].value
              << ", csv=" << eval::curve_csv_path(path, report.curves[0].name).string() << "\n";
    return 0;
}

int cmd_scale(const Options& o) {
    require(o.ckpt, "--ckpt", "scale");
    const auto ckpt = model::ModelCheckpoint::load(resolve(o, o.ckpt));
    const auto ns = eval::powers_of_two(o.max_n);
    auto g = guidance_from(o);
    auto curve = eval::scaling_curve(ckpt, ns, o.selector, o.trials, g, o.ode_steps, o.seed);
    auto report = base_report("scale", &ckpt, curve.provenance);
    eval::Criterion mono;
    mono.name = "best_of_n_nondecreasing_r" + std::to_string(o.selector);
    mono.kind = "max_drop";
    mono.args = {{"curve", curve.name}, {"reward", o.selector}};
    mono.comparator = "<=";
    mono.threshold = 0.01;
    report.curves.push_back(std::move(curve));
    report.criteria.push_back(eval::evaluate(mono, report.curves));
    eval::emit_report(report, report_path(o, "scale.json"));
    std::cout << "scale: selector r" << o.selector << ", N up to " << ns.back() << ", " << o.trials << " trials;";
    for (const auto& p : report.curves[0].points) std::cout << " N=" << p.axis << ":" << p.mean[o.selector];
    std::cout << "\n";
    return 0;
}

int cmd_compare(const Options& o) {
    require(o.baseline_log, "--baseline-log", "compare");
    require(o.miro_log, "--miro-log", "compare");
    const auto base = train::MetricLog::load(resolve(o, o.baseline_log));
    const auto miro = train::MetricLog::load(resolve(o, o.miro_log));
    const auto s = train::convergence_speedup(base, miro, o.reward);
    auto report = base_report("compare", nullptr, {{"baseline_log", o.baseline_log}, {"miro_log", o.miro_log}, {"reward", o.reward}});
    eval::Criterion c;
    c.name = "convergence_speedup_r" + std::to_string(o.reward);
    c.comparator = ">=";
    c.threshold = 2.0;
    c.value = s.ratio;
    c.passed = s.reached && s.ratio >= c.threshold;
    c.detail = s.reached ? "reached at step " + std::to_string(s.miro_step) : "baseline final value never reached";
    report.criteria.push_back(c);
    report.extra = {{"target", s.target}, {"reached", s.reached}, {"miro_step", s.miro_step}, {"ratio", eval::finite_or_null(s.ratio)}};
    eval::emit_report(report, report_path(o, "compare.json"));
    std::cout << "compare: r" << o.reward << " baseline final=" << s.target;
    if (s.reached) {
        std::cout << " reached by miro at step " << s.miro_step << ", speedup=" << s.ratio << "\n";
    } else {
        std::cout << " never reached by miro, speedup=inf (not reached)\n";
    }
    return 0;
}

int cmd_serve(const Options& o) {
    require(o.ckpt, "--ckpt", "serve");
    gateway::serve(resolve(o, o.ckpt), o.bind);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    diff::tune_allocator();
    Options o;
    CLI::App app{"miro: multi-reward conditioned flow matching on a 2D synthetic task"};
    app.require_subcommand(1);
    app.set_config("--config", "", "TOML config file; flags override its values");
    app.add_option("--workdir", o.workdir, "Base directory for relative paths")->capture_default_str();

    auto* gen = app.add_subcommand("gen", "Generate a raw synthetic dataset");
    gen->add_option("--n", o.n, "Number of records")->capture_default_str();
    gen->add_option("--c", o.conditions, "Number of conditions C")->capture_default_str();
    gen->add_option("--seed", o.seed, "RNG seed")->capture_default_str();
    gen->add_option("--out", o.out, "Output dataset file");

    auto* calibrate = app.add_subcommand("calibrate", "Compute equal-population reward bins");
    calibrate->add_option("--in", o.in, "Input dataset");
    calibrate->add_option("--bins,-B", o.bins, "Number of bins B")->capture_default_str();
    calibrate->add_option("--cal-size", o.cal_size, "Calibration records (first M of the file)")->capture_default_str();
    calibrate->add_option("--out", o.out, "Output calibration file");

    auto* score = app.add_subcommand("score", "Attach reward scores and bins to a dataset");
    score->add_option("--in", o.in, "Input dataset");
    score->add_option("--cal", o.cal, "Calibration file from `calibrate`");
    score->add_option("--out", o.out, "Output scored dataset");

    auto* trn = app.add_subcommand("train", "Train a vector field");
    trn->add_option("--in", o.in, "Scored dataset");
    trn->add_option("--out", o.out, "Output checkpoint");
    trn->add_option("--log", o.log, "MetricLog CSV (default: <out>.metrics.csv)");
    trn->add_option("--mode", o.mode, "baseline | single:<j> | multi")->capture_default_str();
    trn->add_option("--steps", o.steps, "Optimizer steps")->capture_default_str();
    trn->add_option("--batch", o.batch, "Batch size")->capture_default_str();
    trn->add_option("--lr", o.lr, "Adam learning rate")->capture_default_str();
    trn->add_option("--seed", o.seed, "RNG seed")->capture_default_str();
    trn->add_option("--eval-every", o.eval_every, "Steps between MetricLog rows")->capture_default_str();
    trn->add_option("--eval-samples", o.eval_samples, "Samples per MetricLog row")->capture_default_str();
    trn->add_option("--ode-steps", o.ode_steps, "Euler steps for eval sampling")->capture_default_str();

    auto add_guidance = [&](CLI::App* sub) {
        sub->add_option("--ckpt", o.ckpt, "Checkpoint file");
        sub->add_option("--omega", o.omega, "Guidance scale omega")->default_str("2.0");
        sub->add_option("--steps", o.ode_steps, "Euler steps")->capture_default_str();
        sub->add_option("--seed", o.seed, "RNG seed")->capture_default_str();
    };
    auto add_targets = [&](CLI::App* sub) {
        sub->add_option("--splus", o.splus, "Positive target, N comma-separated reals in [0,1]")->default_str("1,1,1,1");
        sub->add_option("--sminus", o.sminus, "Negative target, N comma-separated reals in [0,1]")->default_str("0,0,0,0");
    };

    auto* smp = app.add_subcommand("sample", "Draw guided samples and report their rewards");
    add_guidance(smp);
    add_targets(smp);
    smp->add_option("--c", o.condition, "Condition")->capture_default_str();
    smp->add_option("--n", o.count, "Number of samples")->capture_default_str();
    smp->add_option("--best-of", o.best_of, "Best-of-N candidates (0 = plain sampling)")->capture_default_str();
    smp->add_option("--selector", o.selector, "Reward used by --best-of")->capture_default_str();
    smp->add_option("--out", o.out, "Report file")->default_str("sample.json");

    auto* swp = app.add_subcommand("sweep", "Sweep one component of the positive target");
    add_guidance(swp);
    swp->add_option("--reward", o.reward, "Swept reward j")->capture_default_str();
    swp->add_option("--grid", o.grid, "Grid points over [0,1]")->capture_default_str();
    swp->add_option("--samples", o.samples, "Samples per grid point")->capture_default_str();
    swp->add_option("--out", o.out, "Report file")->default_str("sweep.json");

    auto* scl = app.add_subcommand("scale", "Best-of-N scaling curve over N = 1, 2, 4, ...");
    add_guidance(scl);
    add_targets(scl);
    scl->add_option("--selector", o.selector, "Selector reward j")->capture_default_str();
    scl->add_option("--max-n", o.max_n, "Largest N (power of two)")->capture_default_str();
    scl->add_option("--trials", o.trials, "Trials per N")->capture_default_str();
    scl->add_option("--out", o.out, "Report file")->default_str("scale.json");

    auto* cmp = app.add_subcommand("compare", "Convergence speedup between two MetricLogs");
    cmp->add_option("--baseline-log", o.baseline_log, "Baseline MetricLog CSV");
    cmp->add_option("--miro-log", o.miro_log, "Multi-reward MetricLog CSV");
    cmp->add_option("--reward", o.reward, "Reward j")->capture_default_str();
    cmp->add_option("--out", o.out, "Report file")->default_str("compare.json");

    auto* srv = app.add_subcommand("serve", "HTTP JSON gateway over a checkpoint");
    srv->add_option("--ckpt", o.ckpt, "Checkpoint file");
    srv->add_option("--bind", o.bind, "HOST:PORT")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitValidation;
    }

    CLI::App* active = app.get_subcommands().front();
    const std::string resolved = "workdir=\"" + o.workdir + "\"\n[" + active->get_name() + "]\n" + active->config_to_str(true, false);
    std::cerr << "# resolved config\n" << resolved << "# config sha256 " << sha256_hex(resolved) << "\n";

    try {
        if (*gen) return cmd_gen(o);
        if (*calibrate) return cmd_calibrate(o);
        if (*score) return cmd_score(o);
        if (*trn) return cmd_train(o);
        if (*smp) return cmd_sample(o);
        if (*swp) return cmd_sweep(o);
        if (*scl) return cmd_scale(o);
        if (*cmp) return cmd_compare(o);
        if (*srv) return cmd_serve(o);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitRuntime;
}
