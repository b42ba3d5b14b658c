#include "pfl/eval/experiments.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>

#include "pfl/error.hpp"
#include "pfl/parallel.hpp"
#include "pfl/random.hpp"
#include "pfl/sim/config_io.hpp"

namespace pfl::eval {

namespace fs = std::filesystem;
using features::Dataset;
using features::EventSeries;
using features::Normalization;
using features::SequenceSample;

std::vector<PlannedStock> universe_plan(const UniverseSpec& spec) {
    if (spec.stocks == 0) throw Error(ErrorCode::InvalidConfig, "universe.stocks must be > 0");
    if (!(spec.messages.lo >= 1.0) || spec.messages.lo > spec.messages.hi) {
        throw Error(ErrorCode::InvalidConfig, "universe.messages must satisfy 1 <= lo <= hi");
    }
    const auto configs = sim::make_universe(spec.stocks, spec.ranges, spec.seed);
    Rng rng(mix_seed(spec.seed ^ 0x3e55a9e5ULL, 0));
    std::vector<PlannedStock> out;
    for (std::size_t i = 0; i < spec.stocks; ++i) {
        const double u = uniform_real(rng, std::log(spec.messages.lo), std::log(spec.messages.hi));
        const double n = spec.messages.lo == spec.messages.hi ? spec.messages.lo : std::exp(u);
        out.push_back({configs[i], static_cast<std::size_t>(std::llround(n))});
    }
    return out;
}

std::vector<StockData> build_universe(const UniverseSpec& spec, const features::FeatureSpec& features,
                                      std::size_t jobs) {
    const auto plan = universe_plan(spec);
    std::vector<StockData> out(plan.size());
    parallel_for(plan.size(), jobs, [&](std::size_t i) {
        const auto& [cfg, count] = plan[i];
        const auto messages = sim::simulate_stock(cfg, count);
        out[i].config = cfg;
        out[i].messages = count;
        out[i].series = features::featurize_messages(cfg.stock_id, messages, features, cfg.tick_size);
    });
    return out;
}

Prepared select_samples(features::Dataset data, std::size_t train_stride, const std::vector<Window>& train_windows,
                        const std::vector<Window>& test_windows) {
    if (train_windows.size() != data.series.size()) {
        throw Error(ErrorCode::InvalidArgument, "one training window per series expected");
    }
    Prepared p;
    p.data = std::move(data);
    p.tests.resize(test_windows.size());
    const std::size_t lag = p.data.lag;
    for (std::size_t i = 0; i < p.data.series.size(); ++i) {
        const EventSeries& s = p.data.series[i];
        if (s.size() < 2) continue;
        const auto m = static_cast<double>(s.size() - 1);
        auto cut = [m](double f) { return static_cast<std::size_t>(std::floor(f * m)); };
        auto inside = [&](const SequenceSample& x, const Window& w) { return x.end >= cut(w.lo) && x.end < cut(w.hi); };
        const auto idx = static_cast<std::uint32_t>(i);
        for (const auto& x : features::assemble_sequences(s, idx, lag, train_stride)) {
            if (inside(x, train_windows[i])) p.train.push_back(x);
        }
        const auto all = features::assemble_sequences(s, idx, lag, 1);
        for (std::size_t w = 0; w < test_windows.size(); ++w) {
            for (const auto& x : all) {
                if (inside(x, test_windows[w])) p.tests[w].push_back(x);
            }
        }
    }
    return p;
}

Prepared prepare(std::vector<EventSeries> series, std::size_t lag, std::size_t train_stride,
                 const std::vector<Window>& train_windows, const std::vector<Window>& test_windows,
                 Normalization scheme) {
    features::Dataset data;
    data.lag = lag;
    data.series = std::move(series);
    Prepared p = select_samples(std::move(data), train_stride, train_windows, test_windows);
    features::normalize_dataset(p.data, p.train, scheme);
    return p;
}

Fitted fit(const ModelSlot& slot, const Dataset& data, std::span<const SequenceSample> train, std::uint64_t seed) {
    Json arch = slot.architecture;
    arch["input_dim"] = data.dimension();
    Fitted f;
    f.model = models::make_model(arch);
    train::OptConfig opt = slot.optimizer;
    opt.seed = seed;
    f.report = train::train_synchronous(*f.model, f.model->init(seed), data, train, opt);
    return f;
}

bool ExperimentResult::passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return !c.acceptance || c.passed; });
}

namespace {

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::string fmt(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

void write_table(const Table& t, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    for (std::size_t i = 0; i < t.header.size(); ++i) out << (i ? "," : "") << csv_field(t.header[i]);
    out << '\n';
    for (const auto& row : t.rows) {
        for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << csv_field(row[i]);
        out << '\n';
    }
    if (!out) throw Error(ErrorCode::Io, "write failed: " + path.string());
}

Json summary_json(const CrossSection& cs) {
    return Json{{"label", cs.label},
                {"model_a", cs.model_a},
                {"model_b", cs.model_b},
                {"stocks", cs.rows.size()},
                {"mean_delta", cs.summary.mean_delta},
                {"se_mean", cs.summary.se_mean},
                {"z", std::isfinite(cs.summary.z) ? Json(cs.summary.z) : Json(cs.summary.z > 0 ? "inf" : "-inf")},
                {"fraction_positive", cs.summary.fraction_positive},
                {"fraction_non_negative", cs.summary.fraction_non_negative}};
}

}  // namespace

std::vector<fs::path> write_result(const ExperimentResult& r, const fs::path& dir) {
    fs::create_directories(dir);
    std::vector<fs::path> written;
    for (const auto& cs : r.comparisons) {
        written.push_back(dir / (cs.label + ".csv"));
        write_cross_section(cs, written.back());
    }
    for (const auto& t : r.tables) {
        written.push_back(dir / (t.name + ".csv"));
        write_table(t, written.back());
    }
    if (r.surface) {
        written.push_back(dir / "surface.csv");
        write_surface(*r.surface, written.back());
    }
    Table checks{"checks", {"check", "acceptance", "passed", "detail"}, {}};
    Json summary{{"experiment", r.name}, {"passed", r.passed()}, {"checks", Json::array()},
                 {"comparisons", Json::array()}, {"metadata", r.metadata}};
    for (const auto& c : r.checks) {
        checks.rows.push_back({c.name, c.acceptance ? "1" : "0", c.passed ? "PASS" : "FAIL", c.detail});
        summary["checks"].push_back(
            Json{{"name", c.name}, {"acceptance", c.acceptance}, {"passed", c.passed}, {"detail", c.detail}});
    }
    for (const auto& cs : r.comparisons) summary["comparisons"].push_back(summary_json(cs));
    written.push_back(dir / "checks.csv");
    write_table(checks, written.back());
    written.push_back(dir / "summary.json");
    std::ofstream out(written.back());
    out << summary.dump(2) << '\n';
    if (!out) throw Error(ErrorCode::Io, "write failed: " + written.back().string());
    return written;
}

namespace {

std::uint64_t job_seed(std::uint64_t seed, std::size_t stock, std::size_t slot) {
    return mix_seed(seed, stock * 64 + slot);
}

Check check(std::string name, bool passed, std::string detail, bool acceptance = true) {
    return Check{std::move(name), passed, acceptance, std::move(detail)};
}

std::string describe(const CrossSection& cs) {
    return "mean delta " + fmt(cs.summary.mean_delta, 3) + "% (se " + fmt(cs.summary.se_mean, 3) + ", z " +
           fmt(cs.summary.z, 2) + "), positive " + std::to_string(cs.summary.positive) + "/" +
           std::to_string(cs.rows.size());
}

struct TrainingLog {
    Table table{"training", {"stock_id", "model", "train_samples", "steps", "initial_loss", "final_loss"}, {}};
    void add(const std::string& stock, const std::string& model, std::size_t samples, const train::TrainReport& r) {
        table.rows.push_back({stock, model, std::to_string(samples), std::to_string(r.steps), fmt(r.initial_loss, 6),
                              fmt(r.final_loss, 6)});
    }
};

std::vector<AccuracyReport> subset(const std::vector<AccuracyReport>& reports, const std::vector<std::string>& ids) {
    std::vector<AccuracyReport> out;
    for (const auto& r : reports) {
        if (std::find(ids.begin(), ids.end(), r.stock_id) != ids.end()) out.push_back(r);
    }
    return out;
}

std::vector<double> ranks(const std::vector<double>& v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        for (std::size_t k = i; k <= j; ++k) r[order[k]] = 0.5 * static_cast<double>(i + j);
        i = j + 1;
    }
    return r;
}

// Pearson correlation of ranks, ties averaged.
double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    const auto rx = ranks(x), ry = ranks(y);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    return sxx > 0.0 && syy > 0.0 ? sxy / std::sqrt(sxx * syy) : 0.0;
}

double mean_accuracy(const std::vector<AccuracyReport>& reports) {
    double s = 0.0;
    for (const auto& r : reports) s += r.accuracy;
    return reports.empty() ? 0.0 : s / static_cast<double>(reports.size());
}

Table accuracy_table(const std::string& name, const std::vector<std::vector<AccuracyReport>*>& columns) {
    Table t{name, {"stock_id"}, {}};
    for (const auto* c : columns) t.header.push_back(c->empty() ? "?" : c->front().model_id);
    t.header.push_back("n");
    const std::size_t rows = columns.front()->size();
    for (std::size_t i = 0; i < rows; ++i) {
        std::vector<std::string> row{(*columns.front())[i].stock_id};
        for (const auto* c : columns) row.push_back(fmt((*c)[i].accuracy, 4));
        row.push_back(std::to_string((*columns.front())[i].n));
        t.rows.push_back(std::move(row));
    }
    return t;
}

Json universe_metadata(const std::vector<StockData>& stocks) {
    Json a = Json::array();
    for (const auto& s : stocks) {
        a.push_back(Json{{"stock_id", s.config.stock_id},
                         {"messages", s.messages},
                         {"events", s.series.size()},
                         {"config", sim::to_json(s.config)}});
    }
    return a;
}

}  // namespace

ExperimentResult run_nonlinearity(const NonlinearitySpec& spec, const fs::path& out_dir) {
    const auto& c = spec.common;
    const auto stocks = build_universe(c.universe, c.features, c.jobs);
    const std::size_t n = stocks.size();
    std::vector<AccuracyReport> lstm(n), linear(n), oracle(n);
    std::vector<std::array<std::size_t, 2>> train_sizes(n);
    std::vector<std::array<train::TrainReport, 2>> logs(n);
    const bool memoryless = std::all_of(stocks.begin(), stocks.end(),
                                        [](const StockData& s) { return s.config.regime == sim::Regime::Memoryless; });
    parallel_for(n, c.jobs, [&](std::size_t i) {
        const ModelSlot* slots[2] = {&spec.lstm, &spec.linear};
        for (std::size_t k = 0; k < 2; ++k) {
            auto p = prepare({stocks[i].series}, slots[k]->lag, slots[k]->train_stride, {{0.0, c.train_fraction}},
                             {{c.train_fraction, 1.0}}, c.normalization);
            auto f = fit(*slots[k], p.data, p.train, job_seed(c.seed, i, k));
            (k == 0 ? lstm : linear)[i] = accuracy_score(*f.model, f.report.params, p.data, p.tests[0], slots[k]->name);
            train_sizes[i][k] = p.train.size();
            logs[i][k] = std::move(f.report);
            if (k == 0 && memoryless) {
                const sim::OracleSolver solver(stocks[i].config);
                const auto dirs = oracle_directions(solver, p.data, p.tests[0]);
                oracle[i] = score_directions(p.data, p.tests[0], dirs, "oracle");
            }
        }
    });

    ExperimentResult r;
    r.name = "nonlinearity";
    r.comparisons.push_back(compare_cross_section(lstm, linear, "lstm_vs_linear"));
    const auto& cs = r.comparisons.back();
    r.checks.push_back(check("LSTM beats linear: mean delta > 0 at 3 sigma",
                             cs.summary.mean_delta > 0.0 && cs.summary.z >= 3.0, describe(cs)));
    std::size_t in_band = 0;
    for (const auto& row : cs.rows) in_band += row.delta >= 5.0 && row.delta <= 10.0 ? 1 : 0;
    r.metadata["stocks_with_delta_5_to_10_percent"] = in_band;
    std::vector<std::vector<AccuracyReport>*> columns{&lstm, &linear};
    if (memoryless) {
        columns.push_back(&oracle);
        for (const auto* model : {&lstm, &linear}) {
            r.comparisons.push_back(compare_cross_section(oracle, *model, "oracle_vs_" + model->front().model_id));
            const auto& o = r.comparisons.back();
            bool bounded = true;
            for (const auto& row : o.rows) bounded = bounded && row.delta >= -2.0 * row.se;
            r.checks.push_back(check("oracle upper-bounds " + model->front().model_id + " within 2 sigma on every stock",
                                     bounded, describe(o), false));
        }
    }
    r.tables.push_back(accuracy_table("accuracy", columns));
    TrainingLog log;
    for (std::size_t i = 0; i < n; ++i) {
        log.add(stocks[i].config.stock_id, spec.lstm.name, train_sizes[i][0], logs[i][0]);
        log.add(stocks[i].config.stock_id, spec.linear.name, train_sizes[i][1], logs[i][1]);
    }
    r.tables.push_back(std::move(log.table));
    r.metadata["universe"] = universe_metadata(stocks);
    (void)out_dir;
    return r;
}

ExperimentResult run_universality(const UniversalitySpec& spec, const fs::path& out_dir) {
    const auto& c = spec.common;
    const auto stocks = build_universe(c.universe, c.features, c.jobs);
    const std::size_t n = stocks.size();
    if (spec.held_out == 0 || spec.held_out >= n) {
        throw Error(ErrorCode::InvalidConfig, "held_out must lie in [1, stocks)");
    }
    const std::size_t n_train = n - spec.held_out;
    std::vector<std::string> trained_ids, held_ids;
    for (std::size_t i = 0; i < n; ++i) (i < n_train ? trained_ids : held_ids).push_back(stocks[i].config.stock_id);

    std::vector<AccuracyReport> specific(n);
    std::vector<std::size_t> train_sizes(n);
    std::vector<train::TrainReport> specific_logs(n);
    parallel_for(n, c.jobs, [&](std::size_t i) {
        auto p = prepare({stocks[i].series}, spec.specific.lag, spec.specific.train_stride, {{0.0, c.train_fraction}},
                         {{c.train_fraction, 1.0}}, c.normalization);
        auto f = fit(spec.specific, p.data, p.train, job_seed(c.seed, i, 0));
        specific[i] = accuracy_score(*f.model, f.report.params, p.data, p.tests[0], spec.specific.name);
        train_sizes[i] = p.train.size();
        specific_logs[i] = std::move(f.report);
    });

    std::vector<EventSeries> all;
    for (const auto& s : stocks) all.push_back(s.series);
    TrainingLog log;
    auto pooled_run = [&](bool include_held, const std::string& id, std::size_t slot) {
        std::vector<Window> windows(n, Window{0.0, c.train_fraction});
        if (!include_held) {
            for (std::size_t i = n_train; i < n; ++i) windows[i] = Window{0.0, 0.0};
        }
        auto p = prepare(all, spec.pooled.lag, spec.pooled.train_stride, windows, {{c.train_fraction, 1.0}},
                         spec.pooled_normalization);
        auto f = fit(spec.pooled, p.data, p.train, job_seed(c.seed, n, slot));
        log.add("pooled", id, p.train.size(), f.report);
        // score through the checkpoint so the saved artifact is what gets evaluated
        const fs::path path = out_dir / (id + ".ckpt");
        Json meta{{"architecture", f.model->architecture()},
                  {"model_id", id},
                  {"seed", job_seed(c.seed, n, slot)},
                  {"lag", spec.pooled.lag},
                  {"features", features::to_json(c.features)},
                  {"normalization", features::to_string(spec.pooled_normalization)},
                  {"trained_on", trained_ids},
                  {"optimizer", train::to_json(spec.pooled.optimizer)}};
        if (include_held) {
            for (const auto& h : held_ids) meta["trained_on"].push_back(h);
        }
        train::save_checkpoint(path, f.report.params, meta);
        const auto ck = train::load_checkpoint(path);
        const auto model = models::make_model(ck.meta.at("architecture"));
        return score_by_stock(*model, ck.params, p.data, p.tests[0], id);
    };
    fs::create_directories(out_dir);
    const auto excl = pooled_run(false, "universal_excluding", 1);
    const auto incl = pooled_run(true, "universal_including", 2);

    ExperimentResult r;
    r.name = "universality";
    r.comparisons.push_back(compare_cross_section(excl, specific, "universal_vs_specific_all"));
    const auto all_cs = r.comparisons.back();
    r.checks.push_back(check("universal >= stock-specific on >= 70% of stocks",
                             all_cs.summary.fraction_non_negative >= 0.7,
                             std::to_string(all_cs.summary.non_negative) + "/" + std::to_string(n) + " stocks; " +
                                 describe(all_cs)));
    r.comparisons.push_back(
        compare_cross_section(subset(excl, trained_ids), subset(specific, trained_ids), "universal_vs_specific_trained"));
    r.comparisons.push_back(
        compare_cross_section(subset(excl, held_ids), subset(specific, held_ids), "universal_vs_specific_held_out"));
    const auto held_vs_specific = r.comparisons.back();
    r.comparisons.push_back(
        compare_cross_section(subset(excl, held_ids), subset(incl, held_ids), "excluding_vs_including_held_out"));
    const auto excl_vs_incl = r.comparisons.back();

    const auto held_pool = pool_reports(subset(excl, held_ids), "held_out");
    const auto trained_pool = pool_reports(subset(excl, trained_ids), "trained");
    const double gap = held_pool.accuracy - trained_pool.accuracy;
    r.checks.push_back(check("universal accuracy on held-out stocks within 1% of trained stocks",
                             std::abs(gap) <= 1.0,
                             "held-out " + fmt(held_pool.accuracy) + "% (n " + std::to_string(held_pool.n) +
                                 ") vs trained " + fmt(trained_pool.accuracy) + "% (n " +
                                 std::to_string(trained_pool.n) + "), gap " + fmt(gap, 3) + "%"));
    r.checks.push_back(check("excluding vs including on held-out stocks: mean delta within 0.5%",
                             std::abs(excl_vs_incl.summary.mean_delta) <= 0.5, describe(excl_vs_incl), false));

    // the stock with the least training data should gain the most from pooling
    std::size_t least = 0;
    for (std::size_t i = 1; i < n; ++i) least = train_sizes[i] < train_sizes[least] ? i : least;
    std::size_t best = 0;
    for (std::size_t i = 1; i < n; ++i) best = all_cs.rows[i].delta > all_cs.rows[best].delta ? i : best;
    std::vector<double> sizes_d(train_sizes.begin(), train_sizes.end()), advantage;
    for (const auto& row : all_cs.rows) advantage.push_back(row.delta);
    r.checks.push_back(check("least-data stock shows the largest universal advantage", least == best,
                             "least data " + stocks[least].config.stock_id + " (" + std::to_string(train_sizes[least]) +
                                 " samples), largest advantage " + all_cs.rows[best].stock_id + " (" +
                                 fmt(all_cs.rows[best].delta, 3) + "%), rank correlation of data size and advantage " +
                                 fmt(spearman(sizes_d, advantage), 3),
                             false));

    Table table1{"table1", {"model", "comparison", "fraction_outperforming", "average_increase"}, {}};
    table1.rows.push_back({"universal (excluding held-out)", "stock-specific, held-out stocks",
                           fmt(held_vs_specific.summary.fraction_positive), fmt(held_vs_specific.summary.mean_delta)});
    table1.rows.push_back({"universal (excluding held-out)", "universal (all stocks), held-out stocks",
                           fmt(excl_vs_incl.summary.fraction_positive), fmt(excl_vs_incl.summary.mean_delta)});
    r.tables.push_back(std::move(table1));

    Table size{"data_size", {"stock_id", "held_out", "train_samples", "universal_advantage"}, {}};
    for (std::size_t i = 0; i < n; ++i) {
        size.rows.push_back({stocks[i].config.stock_id, i < n_train ? "0" : "1", std::to_string(train_sizes[i]),
                             fmt(all_cs.rows[i].delta)});
    }
    r.tables.push_back(std::move(size));
    auto excl_col = excl, incl_col = incl;
    r.tables.push_back(accuracy_table("accuracy", {&excl_col, &incl_col, &specific}));
    for (std::size_t i = 0; i < n; ++i) log.add(stocks[i].config.stock_id, spec.specific.name, train_sizes[i], specific_logs[i]);
    r.tables.push_back(std::move(log.table));
    r.metadata["held_out"] = held_ids;
    r.metadata["universe"] = universe_metadata(stocks);
    return r;
}

ExperimentResult run_stationarity(const StationaritySpec& spec, const fs::path& out_dir) {
    const auto& c = spec.common;
    if (!(spec.train_end > 0.0 && spec.test_length > 0.0 && spec.train_end + spec.test_length <= 1.0 - spec.test_length)) {
        throw Error(ErrorCode::InvalidConfig, "stationarity needs 0 < train_end and train_end + 2 test_length <= 1");
    }
    std::vector<double> windows = spec.windows;
    std::sort(windows.begin(), windows.end());
    if (windows.size() < 2 || windows.front() <= 0.0 || windows.back() > 1.0) {
        throw Error(ErrorCode::InvalidConfig, "stationarity.windows needs >= 2 fractions in (0, 1]");
    }
    const auto stocks = build_universe(c.universe, c.features, c.jobs);
    const std::size_t n = stocks.size();
    const std::size_t nw = windows.size();
    std::vector<std::vector<AccuracyReport>> near(nw, std::vector<AccuracyReport>(n));
    std::vector<std::vector<AccuracyReport>> far(nw, std::vector<AccuracyReport>(n));
    std::vector<std::vector<std::size_t>> sizes(nw, std::vector<std::size_t>(n));
    std::vector<std::vector<train::TrainReport>> logs(nw, std::vector<train::TrainReport>(n));
    const Window near_w{spec.train_end, spec.train_end + spec.test_length};
    const Window far_w{1.0 - spec.test_length, 1.0};
    parallel_for(n * nw, c.jobs, [&](std::size_t job) {
        const std::size_t i = job / nw, j = job % nw;
        const Window train_w{spec.train_end * (1.0 - windows[j]), spec.train_end};
        auto p = prepare({stocks[i].series}, spec.model.lag, spec.model.train_stride, {train_w}, {near_w, far_w},
                         c.normalization);
        auto f = fit(spec.model, p.data, p.train, job_seed(c.seed, i, j));
        const std::string id = "window_" + fmt(windows[j], 3);
        near[j][i] = accuracy_score(*f.model, f.report.params, p.data, p.tests[0], id);
        far[j][i] = accuracy_score(*f.model, f.report.params, p.data, p.tests[1], id);
        sizes[j][i] = p.train.size();
        logs[j][i] = std::move(f.report);
    });

    ExperimentResult r;
    r.name = "stationarity";
    Table table2{"table2", {"training_window", "fraction_full_window_better", "average_increase"}, {}};
    for (std::size_t j = 0; j + 1 < nw; ++j) {
        r.comparisons.push_back(compare_cross_section(near[nw - 1], near[j], "full_vs_window_" + fmt(windows[j], 3)));
        const auto& cs = r.comparisons.back();
        table2.rows.push_back({fmt(windows[j], 3), fmt(cs.summary.fraction_positive), fmt(cs.summary.mean_delta)});
    }
    const auto& vs_shortest = r.comparisons.front();
    r.checks.push_back(check("longest window beats shortest on 100% of stocks",
                             vs_shortest.summary.positive == n, describe(vs_shortest)));
    Table by_window{"window_accuracy", {"training_window", "mean_train_samples", "mean_accuracy"}, {}};
    bool monotone = true;
    for (std::size_t j = 0; j < nw; ++j) {
        const double m = mean_accuracy(near[j]);
        if (j > 0) monotone = monotone && m >= mean_accuracy(near[j - 1]);
        double samples = 0.0;
        for (auto s : sizes[j]) samples += static_cast<double>(s) / static_cast<double>(n);
        by_window.rows.push_back({fmt(windows[j], 3), fmt(samples, 1), fmt(m)});
    }
    std::string trend;
    for (const auto& row : by_window.rows) trend += (trend.empty() ? "" : " -> ") + row[2];
    r.checks.push_back(check("mean accuracy nondecreasing in training-window length", monotone, trend, false));

    const double near_mean = mean_accuracy(near[nw - 1]);
    const double far_mean = mean_accuracy(far[nw - 1]);
    r.checks.push_back(check("far-offset accuracy within 1% of near-offset accuracy",
                             std::abs(far_mean - near_mean) <= 1.0,
                             "near " + fmt(near_mean) + "%, far " + fmt(far_mean) + "%, difference " +
                                 fmt(far_mean - near_mean, 3) + "%"));
    Table gap{"test_offset", {"stock_id", "near_accuracy", "far_accuracy", "near_n", "far_n"}, {}};
    for (std::size_t i = 0; i < n; ++i) {
        gap.rows.push_back({stocks[i].config.stock_id, fmt(near[nw - 1][i].accuracy), fmt(far[nw - 1][i].accuracy),
                            std::to_string(near[nw - 1][i].n), std::to_string(far[nw - 1][i].n)});
    }
    r.tables.push_back(std::move(table2));
    r.tables.push_back(std::move(by_window));
    r.tables.push_back(std::move(gap));
    TrainingLog log;
    for (std::size_t j = 0; j < nw; ++j) {
        for (std::size_t i = 0; i < n; ++i) {
            log.add(stocks[i].config.stock_id, "window_" + fmt(windows[j], 3), sizes[j][i], logs[j][i]);
        }
    }
    r.tables.push_back(std::move(log.table));
    r.metadata["universe"] = universe_metadata(stocks);
    (void)out_dir;
    return r;
}

ExperimentResult run_path_dependence(const PathDependenceSpec& spec, const fs::path& out_dir) {
    const auto& c = spec.common;
    std::vector<const ModelSlot*> slots{&spec.feedforward, &spec.lstm};
    if (spec.long_lstm) slots.push_back(&*spec.long_lstm);
    const std::size_t ns = slots.size();

    struct Arm {
        std::vector<StockData> stocks;
        std::vector<std::vector<AccuracyReport>> reports;  // [slot][stock]
        std::vector<std::vector<train::TrainReport>> logs;
        std::vector<std::vector<std::size_t>> sizes;
    };
    auto run_arm = [&](const UniverseSpec& u, std::uint64_t salt) {
        Arm arm;
        arm.stocks = build_universe(u, c.features, c.jobs);
        const std::size_t n = arm.stocks.size();
        arm.reports.assign(ns, std::vector<AccuracyReport>(n));
        arm.logs.assign(ns, std::vector<train::TrainReport>(n));
        arm.sizes.assign(ns, std::vector<std::size_t>(n));
        parallel_for(n * ns, c.jobs, [&](std::size_t job) {
            const std::size_t i = job / ns, k = job % ns;
            auto p = prepare({arm.stocks[i].series}, slots[k]->lag, slots[k]->train_stride, {{0.0, c.train_fraction}},
                             {{c.train_fraction, 1.0}}, c.normalization);
            auto f = fit(*slots[k], p.data, p.train, job_seed(c.seed ^ salt, i, k));
            arm.reports[k][i] = accuracy_score(*f.model, f.report.params, p.data, p.tests[0], slots[k]->name);
            arm.sizes[k][i] = p.train.size();
            arm.logs[k][i] = std::move(f.report);
        });
        return arm;
    };
    const Arm persistent = run_arm(c.universe, 0);
    const Arm control = run_arm(spec.control, 0xc0117201ULL);

    ExperimentResult r;
    r.name = "path_dependence";
    r.comparisons.push_back(compare_cross_section(persistent.reports[1], persistent.reports[0], "persistent_lstm_vs_feedforward"));
    const auto main_cs = r.comparisons.back();
    r.checks.push_back(check("persistent: LSTM beats feedforward by >= 2% at 3 sigma",
                             main_cs.summary.mean_delta >= 2.0 && main_cs.summary.z >= 3.0, describe(main_cs)));
    r.comparisons.push_back(compare_cross_section(control.reports[1], control.reports[0], "control_lstm_vs_feedforward"));
    const auto control_cs = r.comparisons.back();
    r.checks.push_back(check("memoryless control: |LSTM - feedforward| < 0.5%",
                             std::abs(control_cs.summary.mean_delta) < 0.5, describe(control_cs)));
    if (spec.long_lstm) {
        r.comparisons.push_back(compare_cross_section(persistent.reports[2], persistent.reports[1], "persistent_long_vs_lstm"));
        const auto long_cs = r.comparisons.back();
        r.checks.push_back(check("persistent: long-lag LSTM >= LSTM", long_cs.summary.mean_delta >= 0.0,
                                 describe(long_cs), false));
        r.comparisons.push_back(compare_cross_section(control.reports[2], control.reports[0], "control_long_vs_feedforward"));
        const auto control_long = r.comparisons.back();
        const double spread = std::max({std::abs(control_cs.summary.mean_delta), std::abs(control_long.summary.mean_delta),
                                        std::abs(control_long.summary.mean_delta - control_cs.summary.mean_delta)});
        r.checks.push_back(check("memoryless control: all three models within 0.5% of each other", spread <= 0.5,
                                 "largest pairwise mean difference " + fmt(spread, 3) + "%", false));
    }
    auto columns = [&](const Arm& arm) {
        std::vector<std::vector<AccuracyReport>*> cols;
        for (auto& col : const_cast<Arm&>(arm).reports) cols.push_back(&col);
        return cols;
    };
    auto t1 = accuracy_table("persistent_accuracy", columns(persistent));
    auto t2 = accuracy_table("control_accuracy", columns(control));
    r.tables.push_back(std::move(t1));
    r.tables.push_back(std::move(t2));
    TrainingLog log;
    for (const Arm* arm : {&persistent, &control}) {
        for (std::size_t k = 0; k < ns; ++k) {
            for (std::size_t i = 0; i < arm->stocks.size(); ++i) {
                log.add(arm->stocks[i].config.stock_id, slots[k]->name, arm->sizes[k][i], arm->logs[k][i]);
            }
        }
    }
    r.tables.push_back(std::move(log.table));
    r.metadata["universe"] = universe_metadata(persistent.stocks);
    r.metadata["control_universe"] = universe_metadata(control.stocks);
    (void)out_dir;
    return r;
}

ExperimentResult run_sensitivity(const SensitivitySpec& spec, const fs::path& out_dir) {
    const auto& c = spec.common;
    const auto stocks = build_universe(c.universe, c.features, c.jobs);
    const std::size_t n = stocks.size();
    std::vector<EventSeries> all;
    for (const auto& s : stocks) all.push_back(s.series);
    auto p = prepare(std::move(all), spec.model.lag, spec.model.train_stride,
                     std::vector<Window>(n, Window{0.0, c.train_fraction}), {{c.train_fraction, 1.0}},
                     spec.pooled_normalization);
    auto f = fit(spec.model, p.data, p.train, job_seed(c.seed, n, 0));
    fs::create_directories(out_dir);
    const fs::path path = out_dir / "sensitivity_model.ckpt";
    train::save_checkpoint(path, f.report.params,
                           Json{{"architecture", f.model->architecture()},
                                {"model_id", spec.model.name},
                                {"lag", spec.model.lag},
                                {"features", features::to_json(c.features)},
                                {"normalization", features::to_string(spec.pooled_normalization)},
                                {"optimizer", train::to_json(spec.model.optimizer)}});
    const auto ck = train::load_checkpoint(path);
    const auto model = models::make_model(ck.meta.at("architecture"));

    std::vector<std::unique_ptr<sim::OracleSolver>> solvers;
    for (const auto& s : stocks) solvers.push_back(std::make_unique<sim::OracleSolver>(s.config, spec.truncation));
    const auto& test = p.tests[0];
    std::vector<double> oracle_p(test.size());
    for (std::size_t k = 0; k < test.size(); ++k) {
        const auto t = touch_depth(p.data, test[k]);
        oracle_p[k] = solvers[test[k].series]->p_down(std::llround(t.bid), std::llround(t.ask));
    }
    const Surface surface =
        sensitivity_surface(*model, ck.params, p.data, test, oracle_p, spec.quantiles, spec.min_count);

    ExperimentResult r;
    r.name = "sensitivity";
    double worst = 0.0, worst_diag = 0.0;
    std::size_t dense = 0, diag = 0;
    bool monotone = true;
    for (const auto& cell : surface.cells) {
        if (cell.sparse) continue;
        ++dense;
        worst = std::max(worst, std::abs(cell.model_p_down - cell.oracle_p_down));
        if (cell.bid_bin == cell.ask_bin) {
            ++diag;
            worst_diag = std::max(worst_diag, std::abs(cell.model_p_down - 0.5));
        }
        if (cell.ask_bin > 0) {
            const auto& prev = surface.at(cell.bid_bin, cell.ask_bin - 1);
            if (!prev.sparse && cell.model_p_down < prev.model_p_down) monotone = false;
        }
    }
    r.checks.push_back(check("model p_down within 0.05 of the oracle in every populated cell",
                             dense > 0 && worst <= 0.05,
                             "max abs error " + fmt(worst) + " over " + std::to_string(dense) + " cells"));
    r.checks.push_back(check("diagonal cells at 0.5 +- 0.03", diag > 0 && worst_diag <= 0.03,
                             "max |p_down - 0.5| " + fmt(worst_diag) + " over " + std::to_string(diag) + " cells"));
    r.checks.push_back(check("p_down increases with ask depth along every bid row", monotone,
                             monotone ? "monotone" : "a populated row decreases", false));
    r.surface = surface;
    r.metadata["quantiles"] = "pooled over bid and ask touch depth of all test samples";
    r.metadata["edges"] = surface.edges;
    r.metadata["test_samples"] = test.size();
    TrainingLog log;
    log.add("pooled", spec.model.name, p.train.size(), f.report);
    r.tables.push_back(std::move(log.table));
    r.metadata["universe"] = universe_metadata(stocks);
    return r;
}

// ---------------------------------------------------------------- config

namespace {

template <class T>
T get_or(const Json& doc, const char* key, T fallback, const std::string& where) {
    read_optional(doc, key, fallback, where);
    return fallback;
}

Normalization normalization_of(const Json& doc, const char* key, Normalization fallback, const std::string& where) {
    std::string name;
    read_optional(doc, key, name, where);
    if (name.empty()) return fallback;
    try {
        return features::normalization_from_string(name);
    } catch (const Error& e) {
        throw Error(ErrorCode::InvalidConfig, where + "." + key + ": " + e.what());
    }
}

const std::initializer_list<std::string_view> kCommonKeys = {"experiment", "universe", "features", "normalization",
                                                             "train_fraction", "seed", "jobs", "models"};

CommonSpec common_from_json(const Json& doc) {
    CommonSpec c;
    if (!doc.contains("universe")) throw Error(ErrorCode::InvalidConfig, "config: missing 'universe'");
    c.universe = universe_spec_from_json(doc.at("universe"), "universe");
    if (doc.contains("features")) c.features = features::feature_spec_from_json(doc.at("features"), "features");
    c.normalization = normalization_of(doc, "normalization", c.normalization, "config");
    read_optional(doc, "train_fraction", c.train_fraction, "config");
    read_optional(doc, "seed", c.seed, "config");
    read_optional(doc, "jobs", c.jobs, "config");
    if (!(c.train_fraction > 0.0 && c.train_fraction < 1.0)) {
        throw Error(ErrorCode::InvalidConfig, "config.train_fraction must lie in (0, 1)");
    }
    if (c.jobs == 0) throw Error(ErrorCode::InvalidConfig, "config.jobs must be >= 1");
    return c;
}

ModelSlot slot_of(const Json& doc, const char* name, bool required = true) {
    const auto models = doc.find("models");
    if (models == doc.end() || !models->is_object()) throw Error(ErrorCode::InvalidConfig, "config: missing 'models'");
    const auto it = models->find(name);
    if (it == models->end()) {
        if (required) throw Error(ErrorCode::InvalidConfig, std::string("models: missing '") + name + "'");
        return ModelSlot{};
    }
    return model_slot_from_json(*it, name, std::string("models.") + name);
}

void check_models(const Json& doc, std::initializer_list<std::string_view> names) {
    if (doc.contains("models")) reject_unknown_keys(doc.at("models"), names, "models");
}

std::vector<std::string_view> with_common(std::initializer_list<std::string_view> extra) {
    std::vector<std::string_view> keys(kCommonKeys);
    keys.insert(keys.end(), extra.begin(), extra.end());
    return keys;
}

void reject_unknown(const Json& doc, const std::vector<std::string_view>& keys, const std::string& where) {
    if (!doc.is_object()) throw Error(ErrorCode::InvalidConfig, where + ": expected an object");
    for (const auto& [key, value] : doc.items()) {
        if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
            throw Error(ErrorCode::InvalidConfig, where + ": unknown key '" + key + "'");
        }
    }
}

}  // namespace

UniverseSpec universe_spec_from_json(const Json& doc, const std::string& where) {
    reject_unknown_keys(doc, {"stocks", "messages", "seed", "base", "ranges"}, where);
    UniverseSpec u;
    Json ranges = Json::object();
    if (doc.contains("base")) ranges["base"] = doc.at("base");
    if (doc.contains("ranges")) ranges["ranges"] = doc.at("ranges");
    u.ranges = sim::universe_ranges_from_json(ranges, where);
    read_optional(doc, "stocks", u.stocks, where);
    read_optional(doc, "seed", u.seed, where);
    if (auto it = doc.find("messages"); it != doc.end()) {
        if (it->is_number()) {
            u.messages = sim::Range{it->get<double>(), it->get<double>()};
        } else if (it->is_array() && it->size() == 2 && (*it)[0].is_number() && (*it)[1].is_number()) {
            u.messages = sim::Range{(*it)[0].get<double>(), (*it)[1].get<double>()};
        } else {
            throw Error(ErrorCode::InvalidConfig, where + ".messages: expected a count or [lo, hi]");
        }
    }
    if (u.stocks == 0) throw Error(ErrorCode::InvalidConfig, where + ".stocks must be > 0");
    if (!(u.messages.lo >= 1.0) || u.messages.lo > u.messages.hi) {
        throw Error(ErrorCode::InvalidConfig, where + ".messages must satisfy 1 <= lo <= hi");
    }
    return u;
}

ModelSlot model_slot_from_json(const Json& doc, const std::string& name, const std::string& where) {
    reject_unknown_keys(doc, {"architecture", "lag", "train_stride", "optimizer"}, where);
    ModelSlot s;
    s.name = name;
    if (!doc.contains("architecture") || !doc.at("architecture").is_object()) {
        throw Error(ErrorCode::InvalidConfig, where + ": missing 'architecture' object");
    }
    s.architecture = doc.at("architecture");
    read_optional(doc, "lag", s.lag, where);
    read_optional(doc, "train_stride", s.train_stride, where);
    if (doc.contains("optimizer")) s.optimizer = train::opt_config_from_json(doc.at("optimizer"), where + ".optimizer");
    if (s.lag == 0) throw Error(ErrorCode::InvalidConfig, where + ".lag must be >= 1");
    if (s.train_stride == 0) throw Error(ErrorCode::InvalidConfig, where + ".train_stride must be >= 1");
    // validate the architecture now rather than after the simulation
    Json probe = s.architecture;
    probe["input_dim"] = 1;
    try {
        (void)models::make_model(probe);
    } catch (const Error& e) {
        throw Error(ErrorCode::InvalidConfig, where + ".architecture: " + e.what());
    }
    return s;
}

NonlinearitySpec nonlinearity_spec_from_json(const Json& doc) {
    reject_unknown(doc, with_common({}), "config");
    check_models(doc, {"lstm", "linear"});
    NonlinearitySpec s;
    s.common = common_from_json(doc);
    s.lstm = slot_of(doc, "lstm");
    s.linear = slot_of(doc, "linear");
    return s;
}

UniversalitySpec universality_spec_from_json(const Json& doc) {
    reject_unknown(doc, with_common({"held_out", "pooled_normalization"}), "config");
    check_models(doc, {"specific", "pooled"});
    UniversalitySpec s;
    s.common = common_from_json(doc);
    read_optional(doc, "held_out", s.held_out, "config");
    s.pooled_normalization = normalization_of(doc, "pooled_normalization", s.pooled_normalization, "config");
    s.specific = slot_of(doc, "specific");
    s.pooled = slot_of(doc, "pooled");
    return s;
}

StationaritySpec stationarity_spec_from_json(const Json& doc) {
    reject_unknown(doc, with_common({"train_end", "test_length", "windows"}), "config");
    check_models(doc, {"model"});
    StationaritySpec s;
    s.common = common_from_json(doc);
    read_optional(doc, "train_end", s.train_end, "config");
    read_optional(doc, "test_length", s.test_length, "config");
    read_optional(doc, "windows", s.windows, "config");
    s.model = slot_of(doc, "model");
    return s;
}

PathDependenceSpec path_dependence_spec_from_json(const Json& doc) {
    reject_unknown(doc, with_common({"control"}), "config");
    check_models(doc, {"feedforward", "lstm", "long"});
    PathDependenceSpec s;
    s.common = common_from_json(doc);
    if (!doc.contains("control")) throw Error(ErrorCode::InvalidConfig, "config: missing 'control' universe");
    s.control = universe_spec_from_json(doc.at("control"), "control");
    s.feedforward = slot_of(doc, "feedforward");
    s.lstm = slot_of(doc, "lstm");
    if (doc.at("models").contains("long")) s.long_lstm = slot_of(doc, "long");
    return s;
}

SensitivitySpec sensitivity_spec_from_json(const Json& doc) {
    reject_unknown(doc, with_common({"pooled_normalization", "quantiles", "min_count", "truncation"}), "config");
    check_models(doc, {"model"});
    SensitivitySpec s;
    s.common = common_from_json(doc);
    s.pooled_normalization = normalization_of(doc, "pooled_normalization", s.pooled_normalization, "config");
    read_optional(doc, "quantiles", s.quantiles, "config");
    read_optional(doc, "min_count", s.min_count, "config");
    read_optional(doc, "truncation", s.truncation, "config");
    s.model = slot_of(doc, "model");
    return s;
}

ExperimentResult run_experiment(const std::string& name, const Json& config, const fs::path& out_dir) {
    if (config.contains("experiment") && config.at("experiment") != name) {
        throw Error(ErrorCode::InvalidConfig, "config is for experiment '" + config.at("experiment").dump() +
                                                  "', not '" + name + "'");
    }
    if (name == "nonlinearity") return run_nonlinearity(nonlinearity_spec_from_json(config), out_dir);
    if (name == "universality") return run_universality(universality_spec_from_json(config), out_dir);
    if (name == "stationarity") return run_stationarity(stationarity_spec_from_json(config), out_dir);
    if (name == "path_dependence") return run_path_dependence(path_dependence_spec_from_json(config), out_dir);
    if (name == "sensitivity") return run_sensitivity(sensitivity_spec_from_json(config), out_dir);
    std::string valid;
    for (const char* n : kExperimentNames) valid += (valid.empty() ? "" : ", ") + std::string(n);
    throw Error(ErrorCode::InvalidConfig, "unknown experiment '" + name + "' (valid: " + valid + ")");
}

}  // namespace pfl::eval
