// Acceptance run: one PASS/FAIL line per criterion, nonzero exit when any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "pfl/eval/experiments.hpp"
#include "pfl/feed/lobster.hpp"
#include "pfl/models/models.hpp"
#include "pfl/random.hpp"
#include "pfl/sim/market_sim.hpp"
#include "pfl/train/trainer.hpp"
#include "support/generators.hpp"
#include "support/grad_check.hpp"
#include "support/monte_carlo.hpp"
#include "support/reference_book.hpp"

using namespace pfl;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool passed = false;
    std::string detail;
    std::vector<std::string> notes;  // reported-only observations
};

struct Criterion {
    int id;
    std::string name;
    double budget_seconds;  // 0 = no runtime bound
    std::function<Outcome()> run;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

Json load_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Io, "cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_json(ss.str(), path.string());
}

// 1 ----------------------------------------------------------------------------

Outcome parser_and_book() {
    Rng rng(20240601);
    std::size_t round_trip_failures = 0;
    constexpr std::size_t kMessages = 1000000;
    for (std::size_t i = 0; i < kMessages; ++i) {
        const auto m = testkit::random_message(rng);
        const std::string line = feed::serialize_message_line(m);
        const auto back = feed::parse_message_line(line);
        if (!(back == m) || feed::serialize_message_line(back) != line) ++round_trip_failures;
    }
    sim::SimConfig cfg;
    cfg.seed = 31;
    cfg.sweep_rate = 1.0 / 6.0;
    cfg.sweep_threshold = 6;
    const auto msgs = sim::simulate_stock(cfg, 100000);
    const std::size_t mismatches = testkit::count_rescan_mismatches(msgs, 10, cfg.tick_size);
    Outcome o;
    o.passed = round_trip_failures == 0 && mismatches == 0;
    o.detail = fmt("%zu/%zu round-trip failures; %zu/%zu rebuild mismatches vs rescan", round_trip_failures,
                   kMessages, mismatches, msgs.size());
    return o;
}

// 2 ----------------------------------------------------------------------------

struct OracleStats {
    int outside = 0;  // Monte Carlo cells beyond 3 sigma
    double worst_z = 0.0;
    double worst_anti = 0.0;
    int non_monotone = 0;
    int n = 0;
};

OracleStats oracle_stats(const sim::SimConfig& cfg, std::uint64_t seed) {
    const sim::OracleSolver solver(cfg, 60);
    constexpr int kPaths = 1000000;
    const int grid[] = {1, 2, 4, 7, 10};
    OracleStats s;
    std::uint64_t salt = 0;
    for (int b : grid) {
        for (int a : grid) {
            const double p = solver.p_down(b, a);
            const double mc = testkit::monte_carlo_p_down(cfg, b, a, kPaths, mix_seed(seed, salt++));
            const double z = std::abs(mc - p) / std::sqrt(std::max(p * (1 - p), 1e-12) / kPaths);
            s.worst_z = std::max(s.worst_z, z);
            s.outside += z > 3.0;
        }
    }
    // shape properties over the whole solved table
    const sim::FirstPassageOracle table(cfg, 60);
    s.n = table.truncation();
    for (int b = 1; b <= s.n; ++b) {
        for (int a = 1; a <= s.n; ++a) {
            s.worst_anti = std::max(s.worst_anti, std::abs(table.p_down(b, a) + table.p_down(a, b) - 1.0));
            if (a > 1 && !(table.p_down(b, a) > table.p_down(b, a - 1))) ++s.non_monotone;
        }
    }
    return s;
}

Outcome oracle_validity() {
    // The plain two-queue chain carries all three properties. With block
    // takers a queue over the threshold can vanish in one jump, so larger
    // ask queues are not always safer; that variant is checked against
    // Monte Carlo and antisymmetry only.
    const sim::SimConfig plain;
    sim::SimConfig sweeps;
    sweeps.sweep_rate = 1.0 / 6.0;
    sweeps.sweep_threshold = 6;
    const auto a = oracle_stats(plain, 404);
    const auto b = oracle_stats(sweeps, 405);
    Outcome o;
    o.passed = a.outside == 0 && b.outside == 0 && a.worst_anti <= 1e-6 && b.worst_anti <= 1e-6 &&
               a.non_monotone == 0;
    o.detail = fmt("plain chain: %d/25 cells outside 3 sigma (worst |z| %.2f), max |p(a,b)+p(b,a)-1| %.2e, "
                   "%d monotonicity violations on %dx%d; with block takers: %d/25 outside (worst |z| %.2f), "
                   "antisymmetry %.2e",
                   a.outside, a.worst_z, a.worst_anti, a.non_monotone, a.n, a.n, b.outside, b.worst_z, b.worst_anti);
    o.notes.push_back(fmt("with block takers %d of %d adjacent ask steps are not increasing", b.non_monotone,
                          b.n * (b.n - 1)));
    return o;
}

// 3 ----------------------------------------------------------------------------

Outcome gradient_exactness() {
    Rng rng(8086);
    double worst = 0.0;
    std::string worst_at;
    for (const char* family : {"linear", "mlp", "lstm"}) {
        for (auto mode : {models::LossMode::Terminal, models::LossMode::PerStep}) {
            for (int rep = 0; rep < 3; ++rep) {
                const auto d = static_cast<std::size_t>(uniform_int(rng, 2, 5));
                const auto steps = static_cast<std::size_t>(uniform_int(rng, 1, 6));
                const auto b = static_cast<std::size_t>(uniform_int(rng, 3, 8));
                const auto w = uniform_int(rng, 2, 6);
                Json arch{{"family", family}, {"input_dim", d}};
                if (std::string(family) == "linear") arch["state_dim"] = w;
                if (std::string(family) == "mlp") arch["hidden"] = {w, uniform_int(rng, 2, 6)};
                if (std::string(family) == "lstm") {
                    arch["units"] = w;
                    arch["layers"] = uniform_int(rng, 1, 2);
                }
                const auto model = models::make_model(arch);
                Eigen::VectorXd theta = model->init(rng());
                for (Eigen::Index i = 0; i < theta.size(); ++i) theta[i] += 0.1 * normal(rng);
                const auto batch = testkit::random_batch(d, steps, b, rng);
                const auto r = testkit::finite_difference_check(*model, theta, batch, mode, 1e-3);
                if (r.max_rel_error >= worst) {
                    worst = r.max_rel_error;
                    worst_at = std::string(family) + (mode == models::LossMode::PerStep ? "/per-step" : "/terminal");
                }
            }
        }
    }
    Outcome o;
    o.passed = worst < 1e-4;
    o.detail = fmt("max relative error %.2e over 18 instances (worst %s)", worst, worst_at.c_str());
    return o;
}

// 4-8 --------------------------------------------------------------------------

Outcome experiment(const std::string& name, const fs::path& configs, const fs::path& out, std::size_t jobs) {
    Json cfg = load_json(configs / "experiments" / (name + ".json"));
    cfg["jobs"] = jobs;
    const auto r = eval::run_experiment(name, cfg, out / name);
    eval::write_result(r, out / name);
    Outcome o;
    o.passed = r.passed();
    for (const auto& c : r.checks) {
        const std::string line = c.name + " :: " + c.detail;
        if (c.acceptance) {
            o.detail += (o.detail.empty() ? "" : " | ") + std::string(c.passed ? "" : "[missed] ") + line;
        } else {
            o.notes.push_back(std::string(c.passed ? "holds" : "does not hold") + ": " + line);
        }
    }
    return o;
}

// 9 ----------------------------------------------------------------------------

Outcome async_fidelity(const fs::path& configs, std::size_t jobs) {
    const Json cfg = load_json(configs / "acceptance" / "async_fidelity.json");
    reject_unknown_keys(cfg, {"universe", "features", "normalization", "seed", "workers", "staleness_cap", "model"},
                        "async_fidelity");
    const auto universe = eval::universe_spec_from_json(cfg.at("universe"), "universe");
    const auto spec = features::feature_spec_from_json(cfg.at("features"));
    const auto slot = eval::model_slot_from_json(cfg.at("model"), "model", "model");
    const auto workers = cfg.at("workers").get<std::size_t>();
    const auto cap = cfg.at("staleness_cap").get<std::size_t>();
    auto stocks = eval::build_universe(universe, spec, jobs);
    std::vector<features::EventSeries> series;
    for (auto& s : stocks) series.push_back(std::move(s.series));
    const std::size_t n = series.size();
    const auto p = eval::prepare(std::move(series), slot.lag, slot.train_stride,
                                 std::vector<eval::Window>(n, {0.0, 0.8}), {{0.8, 1.0}},
                                 features::normalization_from_string(cfg.at("normalization").get<std::string>()));
    Json arch = slot.architecture;
    arch["input_dim"] = p.data.dimension();
    const auto model = models::make_model(arch);
    auto opt = slot.optimizer;
    opt.seed = cfg.at("seed").get<std::uint64_t>();
    const Eigen::VectorXd init = model->init(opt.seed);

    const auto sync = train::train_synchronous(*model, init, p.data, p.train, opt);
    const auto one = train::train_asynchronous(*model, init, p.data, p.train, 1, opt, cap);
    const auto many = train::train_asynchronous(*model, init, p.data, p.train, workers, opt, cap);
    const bool bit_exact = one.params.size() == sync.params.size() && one.params == sync.params &&
                           one.final_loss == sync.final_loss;
    const double rel = std::abs(many.final_loss - sync.final_loss) / sync.final_loss;
    const double speedup = sync.wall_seconds / many.wall_seconds;

    Outcome o;
    o.passed = bit_exact && rel <= 0.05;
    o.detail = fmt("1 worker %s sync; %zu workers final NLL %.5f vs sync %.5f (%.2f%% relative, %zu dropped)",
                   bit_exact ? "bit-identical to" : "DIFFERS from", workers, many.final_loss, sync.final_loss,
                   100 * rel, many.dropped);
    o.notes.push_back(fmt("speedup at %zu workers: %.2fx (target 1.5x; %u hardware threads)", workers, speedup,
                          std::thread::hardware_concurrency()));
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria, one PASS/FAIL line each"};
    fs::path configs = PFL_CONFIG_DIR;
    fs::path out = "acceptance_out";
    std::size_t jobs = std::max(1u, std::thread::hardware_concurrency());
    std::vector<int> only;
    app.add_option("--configs", configs, "directory holding experiments/ and acceptance/");
    app.add_option("--out", out, "report directory");
    app.add_option("-j,--jobs", jobs, "parallel jobs")->check(CLI::PositiveNumber);
    app.add_option("--only", only, "criterion ids to run")->delimiter(',');
    CLI11_PARSE(app, argc, argv);

    const std::vector<Criterion> criteria{
        {1, "parser and book correctness", 60, parser_and_book},
        {2, "first-passage oracle validity", 300, oracle_validity},
        {3, "gradient exactness", 60, gradient_exactness},
        {4, "nonlinearity", 1800, [&] { return experiment("nonlinearity", configs, out, jobs); }},
        {5, "universality", 3600, [&] { return experiment("universality", configs, out, jobs); }},
        {6, "sensitivity surface", 600, [&] { return experiment("sensitivity", configs, out, jobs); }},
        {7, "stationarity", 0, [&] { return experiment("stationarity", configs, out, jobs); }},
        {8, "path dependence", 0, [&] { return experiment("path_dependence", configs, out, jobs); }},
        {9, "async training fidelity", 0, [&] { return async_fidelity(configs, jobs); }},
    };
    const std::set<int> selected(only.begin(), only.end());
    // ctest hides the output of passing tests, so the lines also go to a file
    fs::create_directories(out);
    std::ofstream report(out / "acceptance.txt");
    auto emit = [&](const std::string& line) {
        std::cout << line << std::endl;
        report << line << std::endl;
    };
    int failures = 0;
    for (const auto& c : criteria) {
        if (!selected.empty() && !selected.contains(c.id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o.passed = false;
            o.detail = std::string("error: ") + e.what();
        }
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const bool in_time = c.budget_seconds == 0 || seconds < c.budget_seconds;
        const bool passed = o.passed && in_time;
        failures += !passed;
        std::string line = std::string(passed ? "PASS" : "FAIL") + " criterion " + std::to_string(c.id) + " (" +
                           c.name + "): " + o.detail + fmt(" [%.1f s", seconds);
        if (c.budget_seconds > 0) line += fmt(", budget %.0f s%s", c.budget_seconds, in_time ? "" : " EXCEEDED");
        emit(line + "]");
        for (const auto& n : o.notes) emit("    reported, " + n);
    }
    emit(failures == 0 ? "ALL CRITERIA PASS" : fmt("%d CRITERIA FAILED", failures));
    return failures == 0 ? 0 : 1;
}
