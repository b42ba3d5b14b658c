#include "cli.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "pfl/eval/experiments.hpp"
#include "pfl/eval/metrics.hpp"
#include "pfl/features/featurizer.hpp"
#include "pfl/feed/lobster.hpp"
#include "pfl/hash.hpp"
#include "pfl/models/models.hpp"
#include "pfl/parallel.hpp"
#include "pfl/random.hpp"
#include "pfl/sim/config_io.hpp"
#include "pfl/sim/market_sim.hpp"
#include "pfl/train/trainer.hpp"

namespace pfl::cli {

namespace fs = std::filesystem;

namespace {

constexpr const char* kManifest = "manifest.json";

struct Globals {
    fs::path out;
    std::optional<std::uint64_t> seed;
    std::size_t jobs = 1;
    std::string log_level = "info";
};

std::shared_ptr<spdlog::logger> logger() {
    static auto log = [] {
        auto l = spdlog::get("pflab");
        return l ? l : spdlog::stderr_color_mt("pflab");
    }();
    return log;
}

[[noreturn]] void usage(const std::string& msg) { throw Error(ErrorCode::InvalidConfig, msg); }

Json load_config(const fs::path& path) {
    if (!fs::is_regular_file(path)) usage("config: no such file " + path.string());
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_json(ss.str(), path.string());
}

void write_json(const Json& doc, const fs::path& path) {
    std::ofstream out(path);
    out << doc.dump(2) << '\n';
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
}

Json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Io, "cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_json(ss.str(), path.string());
}

Json file_entry(const fs::path& path, const fs::path& root) {
    return Json{{"path", fs::relative(path, root).generic_string()},
                {"bytes", fs::file_size(path)},
                {"fnv1a", hex64(file_checksum(path))}};
}

void write_manifest(const Globals& g, const std::string& command, Json body, std::vector<fs::path> files) {
    std::sort(files.begin(), files.end());
    body["command"] = command;
    body["files"] = Json::array();
    for (const auto& f : files) body["files"].push_back(file_entry(f, g.out));
    write_json(body, g.out / kManifest);
}

/// Refuses to write outputs into a directory that holds inputs.
void check_distinct(const fs::path& input_dir, const fs::path& out) {
    if (fs::exists(out) && fs::equivalent(input_dir, out)) {
        usage("output dir " + out.string() + " holds the inputs; choose another --out");
    }
}

/// Verifies every file listed in an input manifest.
Json read_verified_manifest(const fs::path& dir, const std::string& expected_command) {
    const fs::path path = dir / kManifest;
    if (!fs::is_regular_file(path)) usage("no " + std::string(kManifest) + " in " + dir.string());
    Json m = read_json(path);
    if (m.value("command", "") != expected_command) {
        usage(path.string() + ": expected output of '" + expected_command + "'");
    }
    for (const auto& f : m.at("files")) {
        const fs::path p = dir / f.at("path").get<std::string>();
        if (!fs::is_regular_file(p)) throw Error(ErrorCode::Io, "missing input " + p.string());
        if (hex64(file_checksum(p)) != f.at("fnv1a").get<std::string>()) {
            throw Error(ErrorCode::ChecksumMismatch, p.string() + " does not match its manifest");
        }
    }
    return m;
}

// simulate ------------------------------------------------------------------

int cmd_simulate(const Globals& g, const fs::path& config_path) {
    const Json cfg = load_config(config_path);
    reject_unknown_keys(cfg, {"universe", "stocks", "messages"}, "config");
    std::vector<eval::PlannedStock> plan;
    if (cfg.contains("universe")) {
        if (cfg.contains("stocks") || cfg.contains("messages")) {
            usage("config: give either 'universe' or 'stocks' with 'messages'");
        }
        auto u = eval::universe_spec_from_json(cfg.at("universe"), "config.universe");
        if (g.seed) u.seed = *g.seed;
        plan = eval::universe_plan(u);
    } else {
        if (!cfg.contains("stocks") || !cfg.at("stocks").is_array() || cfg.at("stocks").empty()) {
            usage("config: missing 'universe' or a non-empty 'stocks' array");
        }
        double messages = 0;
        read_required(cfg, "messages", messages, "config");
        if (!(messages >= 1.0)) usage("config.messages must be >= 1");
        const auto& stocks = cfg.at("stocks");
        for (std::size_t i = 0; i < stocks.size(); ++i) {
            auto c = sim::sim_config_from_json(stocks[i], "config.stocks[" + std::to_string(i) + "]");
            if (g.seed) c.seed = mix_seed(*g.seed, i);
            plan.push_back({c, static_cast<std::size_t>(messages)});
        }
    }
    std::set<std::string> ids;
    for (const auto& p : plan) {
        if (!ids.insert(p.config.stock_id).second) usage("config: duplicate stock_id " + p.config.stock_id);
    }

    std::vector<fs::path> files(2 * plan.size());
    parallel_for(plan.size(), g.jobs, [&](std::size_t i) {
        const auto& [c, count] = plan[i];
        const auto msgs = sim::simulate_stock(c, count);
        files[2 * i] = g.out / (c.stock_id + ".messages.csv");
        files[2 * i + 1] = g.out / (c.stock_id + ".sim.json");
        feed::write_messages(msgs, files[2 * i]);
        write_json(Json{{"config", sim::to_json(c)}, {"messages", count}}, files[2 * i + 1]);
        logger()->info("{}: {} messages", c.stock_id, count);
    });

    Json body{{"config", cfg}, {"stocks", Json::array()}};
    if (g.seed) body["seed"] = *g.seed;
    for (const auto& p : plan) {
        body["stocks"].push_back(Json{{"stock_id", p.config.stock_id},
                                      {"messages", p.messages},
                                      {"message_file", p.config.stock_id + ".messages.csv"},
                                      {"config_file", p.config.stock_id + ".sim.json"}});
    }
    write_manifest(g, "simulate", std::move(body), files);
    return kExitOk;
}

// build-dataset ---------------------------------------------------------------

Json partition_json(const features::Dataset& d, std::span<const features::SequenceSample> s) {
    return Json{{"samples", s.size()}, {"hash", hex64(features::partition_hash(d, s))}};
}

int cmd_build_dataset(const Globals& g, const fs::path& config_path) {
    const Json cfg = load_config(config_path);
    reject_unknown_keys(cfg,
                        {"messages", "features", "lag", "train_fraction", "normalization", "pooled",
                         "pooled_normalization", "stocks"},
                        "config");
    std::string msg_dir;
    std::size_t lag = 1;
    double train_fraction = 0.8;
    std::string norm_name = "per-stock-zscore";
    std::string pooled_norm_name = "pooled-zscore";
    bool pooled = false;
    std::vector<std::string> subset;
    read_required(cfg, "messages", msg_dir, "config");
    read_required(cfg, "lag", lag, "config");
    read_optional(cfg, "train_fraction", train_fraction, "config");
    read_optional(cfg, "normalization", norm_name, "config");
    read_optional(cfg, "pooled_normalization", pooled_norm_name, "config");
    read_optional(cfg, "pooled", pooled, "config");
    read_optional(cfg, "stocks", subset, "config");
    if (lag == 0) usage("config.lag must be >= 1");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) usage("config.train_fraction must be in (0, 1)");
    const features::FeatureSpec spec =
        cfg.contains("features") ? features::feature_spec_from_json(cfg.at("features"), "config.features")
                                 : features::FeatureSpec{};
    features::Normalization norm;
    features::Normalization pooled_norm;
    try {
        norm = features::normalization_from_string(norm_name);
        pooled_norm = features::normalization_from_string(pooled_norm_name);
    } catch (const Error& e) {
        usage(std::string("config: ") + e.what());
    }

    if (!fs::is_directory(msg_dir)) usage("config.messages: no such directory " + msg_dir);
    check_distinct(msg_dir, g.out);
    if (const fs::path existing = g.out / kManifest; fs::exists(existing)) {
        const Json m = read_json(existing);
        if (m.value("command", "") == "build-dataset" && m.value("lag", lag) != lag) {
            usage("lag " + std::to_string(lag) + " does not match the existing dataset in " + g.out.string() +
                  " (lag " + std::to_string(m.at("lag").get<std::size_t>()) + ")");
        }
    }
    const Json source = read_verified_manifest(msg_dir, "simulate");

    struct Input {
        std::string id;
        fs::path messages;
        std::int64_t tick = 1;
    };
    std::vector<Input> inputs;
    for (const auto& s : source.at("stocks")) {
        const auto id = s.at("stock_id").get<std::string>();
        if (!subset.empty() && std::find(subset.begin(), subset.end(), id) == subset.end()) continue;
        const Json echo = read_json(fs::path(msg_dir) / s.at("config_file").get<std::string>());
        const auto c = sim::sim_config_from_json(echo.at("config"), id);
        inputs.push_back({id, fs::path(msg_dir) / s.at("message_file").get<std::string>(), c.tick_size});
    }
    for (const auto& id : subset) {
        if (std::none_of(inputs.begin(), inputs.end(), [&](const Input& in) { return in.id == id; })) {
            usage("config.stocks: " + id + " is not in " + msg_dir);
        }
    }
    if (inputs.empty()) usage("config: no stocks selected");

    std::vector<features::EventSeries> series(inputs.size());
    parallel_for(inputs.size(), g.jobs, [&](std::size_t i) {
        const auto msgs = feed::read_messages(inputs[i].messages);
        series[i] = features::featurize_messages(inputs[i].id, msgs, spec, inputs[i].tick);
        logger()->info("{}: {} price changes", inputs[i].id, series[i].size());
    });

    const std::vector<eval::Window> test{{train_fraction, 1.0}};
    std::vector<fs::path> files;
    Json datasets = Json::array();
    auto emit = [&](std::vector<features::EventSeries> group, features::Normalization scheme, const fs::path& path) {
        std::vector<std::string> ids;
        for (const auto& s : group) ids.push_back(s.stock_id);
        const std::size_t n = group.size();
        auto p = eval::prepare(std::move(group), lag, 1, std::vector<eval::Window>(n, {0.0, train_fraction}), test,
                               scheme);
        const Json parts{{"train", partition_json(p.data, p.train)}, {"test", partition_json(p.data, p.tests[0])}};
        const Json extra{{"train_fraction", train_fraction},
                         {"normalization", features::to_string(scheme)},
                         {"partitions", parts}};
        features::write_dataset(p.data, extra, path);
        files.push_back(path);
        datasets.push_back(Json{{"file", path.filename().string()},
                                {"stocks", ids},
                                {"samples", p.train.size() + p.tests[0].size()},
                                {"normalization", features::to_string(scheme)},
                                {"partitions", parts}});
    };
    for (const auto& s : series) emit({s}, norm, g.out / (s.stock_id + ".dataset.csv"));
    if (pooled) emit(series, pooled_norm, g.out / "pooled.dataset.csv");

    Json sources = Json::array();
    for (const auto& in : inputs) sources.push_back(file_entry(in.messages, msg_dir));
    write_manifest(g, "build-dataset",
                   Json{{"config", cfg},
                        {"lag", lag},
                        {"train_fraction", train_fraction},
                        {"feature_spec", features::to_json(spec)},
                        {"normalization", {{"per_stock", norm_name}, {"pooled", pooled ? pooled_norm_name : "none"}}},
                        {"sources", sources},
                        {"datasets", datasets}},
                   files);
    return kExitOk;
}

// train -----------------------------------------------------------------------

void write_report_csv(const train::TrainReport& r, const fs::path& path) {
    std::ofstream out(path);
    out << "metric,value\n";
    out << "initial_loss," << r.initial_loss << '\n';
    out << "final_loss," << r.final_loss << '\n';
    out << "steps," << r.steps << '\n';
    out << "planned," << r.planned << '\n';
    out << "workers," << r.workers << '\n';
    out << "dropped," << r.dropped << '\n';
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
}

void write_staleness_csv(const train::TrainReport& r, const fs::path& path) {
    std::ofstream out(path);
    out << "staleness,count\n";
    for (std::size_t i = 0; i < r.staleness.size(); ++i) out << i << ',' << r.staleness[i] << '\n';
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
}

int cmd_train(const Globals& g, const fs::path& config_path) {
    const Json cfg = load_config(config_path);
    reject_unknown_keys(cfg, {"dataset", "model", "train_fraction", "n_workers", "staleness_cap"}, "config");
    std::string dataset_path;
    std::size_t n_workers = 1;
    std::size_t staleness_cap = 16;
    read_required(cfg, "dataset", dataset_path, "config");
    read_optional(cfg, "n_workers", n_workers, "config");
    read_optional(cfg, "staleness_cap", staleness_cap, "config");
    if (n_workers == 0) usage("config.n_workers must be >= 1");
    if (!cfg.contains("model")) usage("config: missing 'model'");
    auto slot = eval::model_slot_from_json(cfg.at("model"), "model", "config.model");
    if (!fs::is_regular_file(dataset_path)) usage("config.dataset: no such file " + dataset_path);
    check_distinct(fs::path(dataset_path).parent_path().empty() ? "." : fs::path(dataset_path).parent_path(), g.out);

    Json header;
    features::Dataset data = features::read_dataset(dataset_path, &header);
    if (cfg.at("model").contains("lag") && slot.lag != data.lag) {
        usage("config.model.lag " + std::to_string(slot.lag) + " does not match the dataset lag " +
              std::to_string(data.lag));
    }
    double train_fraction = header.value("extra", Json::object()).value("train_fraction", 0.8);
    read_optional(cfg, "train_fraction", train_fraction, "config");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) usage("config.train_fraction must be in (0, 1)");

    const std::size_t n = data.series.size();
    auto p = eval::select_samples(std::move(data), slot.train_stride,
                                  std::vector<eval::Window>(n, {0.0, train_fraction}), {{train_fraction, 1.0}});
    if (p.train.empty()) throw Error(ErrorCode::EmptyPartition, "no training samples in " + dataset_path);

    Json arch = slot.architecture;
    arch["input_dim"] = p.data.dimension();
    const auto model = models::make_model(arch);
    train::OptConfig opt = slot.optimizer;
    if (g.seed) opt.seed = *g.seed;
    opt.failure_dump = g.out / "nonfinite_state.ckpt";
    const Eigen::VectorXd init = model->init(opt.seed);
    logger()->info("training {} on {} samples, {} worker(s)", to_string(model->family()), p.train.size(), n_workers);
    const auto report = n_workers > 1
                            ? train::train_asynchronous(*model, init, p.data, p.train, n_workers, opt, staleness_cap)
                            : train::train_synchronous(*model, init, p.data, p.train, opt);

    const Json parts{{"train", partition_json(p.data, p.train)}, {"test", partition_json(p.data, p.tests[0])}};
    const fs::path ckpt = g.out / "model.ckpt";
    train::save_checkpoint(ckpt, report.params,
                           Json{{"architecture", arch},
                                {"lag", p.data.lag},
                                {"optimizer", train::to_json(opt)},
                                {"dataset", file_entry(dataset_path, fs::path(dataset_path).parent_path())},
                                {"partitions", parts}});
    std::vector<fs::path> files{ckpt, g.out / "loss_curve.csv", g.out / "train_report.csv", g.out / "test_accuracy.csv"};
    train::write_loss_curve(report, files[1]);
    write_report_csv(report, files[2]);
    if (n_workers > 1) {
        files.push_back(g.out / "staleness.csv");
        write_staleness_csv(report, files.back());
    }

    const auto scores = eval::score_by_stock(*model, report.params, p.data, p.tests[0], "model");
    {
        std::ofstream out(files[3]);
        out << "stock_id,n,accuracy,se,partition\n";
        for (const auto& s : scores) {
            out << s.stock_id << ',' << s.n << ',' << s.accuracy << ',' << s.se << ',' << hex64(s.partition) << '\n';
        }
    }
    for (const auto& s : scores) logger()->info("{}: test accuracy {:.3f}% (n {})", s.stock_id, s.accuracy, s.n);

    Json rep{{"initial_loss", report.initial_loss},
             {"final_loss", report.final_loss},
             {"steps", report.steps},
             {"planned", report.planned},
             {"workers", report.workers},
             {"wall_seconds", report.wall_seconds}};
    if (n_workers > 1) {
        rep["staleness"] = report.staleness;
        rep["dropped"] = report.dropped;
    }
    write_manifest(g, "train", Json{{"config", cfg}, {"seed", opt.seed}, {"partitions", parts}, {"report", rep}},
                   files);
    return kExitOk;
}

// experiment ------------------------------------------------------------------

std::string experiment_names() {
    std::string s;
    for (const char* n : eval::kExperimentNames) s += (s.empty() ? "" : ", ") + std::string(n);
    return s;
}

int cmd_experiment(const Globals& g, const std::string& name, const fs::path& config_path) {
    const auto* names = std::begin(eval::kExperimentNames);
    if (std::find(names, std::end(eval::kExperimentNames), name) == std::end(eval::kExperimentNames)) {
        usage("unknown experiment '" + name + "'; valid names: " + experiment_names());
    }
    Json cfg = load_config(config_path);
    if (g.seed) cfg["seed"] = *g.seed;
    if (g.jobs > 1) cfg["jobs"] = g.jobs;
    if (!cfg.contains("experiment")) cfg["experiment"] = name;
    const auto result = eval::run_experiment(name, cfg, g.out);
    const auto written = eval::write_result(result, g.out);
    std::vector<fs::path> files(written.begin(), written.end());
    for (const auto& entry : fs::directory_iterator(g.out)) {
        if (entry.path().extension() == ".ckpt") files.push_back(entry.path());
    }
    for (const auto& c : result.checks) {
        std::cout << (c.passed ? "PASS" : "FAIL") << (c.acceptance ? " [acceptance] " : " [reported] ") << c.name
                  << " :: " << c.detail << '\n';
    }
    const bool passed = result.passed();
    std::cout << name << ": " << (passed ? "PASS" : "FAIL") << '\n';
    write_manifest(g, "experiment", Json{{"experiment", name}, {"config", cfg}, {"passed", passed}}, files);
    return passed ? kExitOk : kExitAcceptance;
}

int exit_code_for(const Error& e) {
    switch (e.code()) {
        case ErrorCode::InvalidConfig:
        case ErrorCode::InvalidArgument: return kExitUsage;
        default: return kExitRuntime;
    }
}

}  // namespace

std::uint64_t file_checksum(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Io, "cannot read " + path.string());
    Fnv1a h;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        h.update(buf, static_cast<std::size_t>(in.gcount()));
    }
    return h.digest();
}

OutputLock::OutputLock(const fs::path& dir) : path_(dir / kFileName) {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
        throw Error(ErrorCode::InvalidConfig, "output dir " + dir.string() + " is locked by another command (" +
                                                  path_.string() + "); remove it if no pflab is running");
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
}

OutputLock::~OutputLock() {
    std::error_code ec;
    fs::remove(path_, ec);
}

int run(const std::vector<std::string>& args) {
    CLI::App app{"pflab: simulate order books, build datasets, train and evaluate direction models"};
    app.fallthrough();
    app.require_subcommand(1);
    Globals g;
    std::string out;
    std::uint64_t seed = 0;
    app.add_option("-o,--out", out, "output directory");
    app.add_option("--seed", seed, "overrides the config seed");
    app.add_option("-j,--jobs", g.jobs, "parallel jobs")->check(CLI::PositiveNumber);
    app.add_option("--log-level", g.log_level, "trace, debug, info, warn, error, off")
        ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

    std::string config;
    std::string experiment;
    auto* sim_cmd = app.add_subcommand("simulate", "simulate message streams per stock");
    sim_cmd->add_option("config", config, "simulation config JSON")->required();
    auto* ds_cmd = app.add_subcommand("build-dataset", "featurize message files into datasets");
    ds_cmd->add_option("config", config, "dataset config JSON")->required();
    auto* train_cmd = app.add_subcommand("train", "train a model on a dataset");
    train_cmd->add_option("config", config, "training config JSON")->required();
    auto* exp_cmd = app.add_subcommand("experiment", "run an experiment end to end");
    exp_cmd->add_option("name", experiment, "experiment name")->required();
    exp_cmd->add_option("config", config, "experiment config JSON")->required();

    std::vector<std::string> argv_store = args;
    if (argv_store.empty()) argv_store.emplace_back("pflab");
    std::vector<char*> argv;
    for (auto& a : argv_store) argv.push_back(a.data());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }
    if (app.count("--seed") > 0) g.seed = seed;
    logger()->set_level(spdlog::level::from_str(g.log_level));

    try {
        if (out.empty()) usage("--out is required");
        g.out = out;
        fs::create_directories(g.out);
        const OutputLock lock(g.out);
        if (*sim_cmd) return cmd_simulate(g, config);
        if (*ds_cmd) return cmd_build_dataset(g, config);
        if (*train_cmd) return cmd_train(g, config);
        return cmd_experiment(g, experiment, config);
    } catch (const Error& e) {
        logger()->error("{}", e.what());
        return exit_code_for(e);
    } catch (const std::exception& e) {
        logger()->error("{}", e.what());
        return kExitRuntime;
    }
}

}  // namespace pfl::cli
