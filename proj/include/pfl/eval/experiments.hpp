#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pfl/eval/metrics.hpp"
#include "pfl/features/featurizer.hpp"
#include "pfl/json_util.hpp"
#include "pfl/sim/market_sim.hpp"
#include "pfl/train/trainer.hpp"

namespace pfl::eval {

/// A simulated universe: stock parameters from ranges, message counts drawn
/// log-uniformly per stock.
struct UniverseSpec {
    sim::UniverseRanges ranges;
    std::size_t stocks = 10;
    sim::Range messages{1e6, 1e6};
    std::uint64_t seed = 1;
};

struct StockData {
    sim::SimConfig config;
    std::size_t messages = 0;
    features::EventSeries series;  // raw, unnormalized
};

struct PlannedStock {
    sim::SimConfig config;
    std::size_t messages = 0;
};

/// Per-stock configs and message counts, without simulating.
std::vector<PlannedStock> universe_plan(const UniverseSpec& spec);

/// Simulates and featurizes every stock; results ordered by stock id.
std::vector<StockData> build_universe(const UniverseSpec& spec, const features::FeatureSpec& features,
                                      std::size_t jobs = 1);

/// One model configuration inside an experiment.
struct ModelSlot {
    std::string name;
    Json architecture;  // family and widths; input_dim is filled in
    std::size_t lag = 1;
    std::size_t train_stride = 1;  // events between training windows
    train::OptConfig optimizer;
};

/// Fraction window [lo, hi) of one series' time-ordered samples.
struct Window {
    double lo = 0.0;
    double hi = 1.0;
};

/// A dataset with train samples (per-series windows) and test samples (one
/// list per test window, applied to every series), normalized on train.
struct Prepared {
    features::Dataset data;
    std::vector<features::SequenceSample> train;
    std::vector<std::vector<features::SequenceSample>> tests;
};

/// Splits the dataset's samples by window without touching the states.
Prepared select_samples(features::Dataset data, std::size_t train_stride, const std::vector<Window>& train_windows,
                        const std::vector<Window>& test_windows);

/// select_samples, then normalization fitted on the training samples.
Prepared prepare(std::vector<features::EventSeries> series, std::size_t lag, std::size_t train_stride,
                 const std::vector<Window>& train_windows, const std::vector<Window>& test_windows,
                 features::Normalization scheme);

struct Fitted {
    std::unique_ptr<models::Model> model;
    train::TrainReport report;
};

/// Builds the slot's model for the dataset dimension and trains it
/// synchronously with init and batch order seeded by `seed`.
Fitted fit(const ModelSlot& slot, const features::Dataset& data,
           std::span<const features::SequenceSample> train, std::uint64_t seed);

struct Check {
    std::string name;
    bool passed = false;
    bool acceptance = true;  // false: reported only, does not fail the run
    std::string detail;
};

struct Table {
    std::string name;
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

struct ExperimentResult {
    std::string name;
    std::vector<CrossSection> comparisons;
    std::vector<Table> tables;
    std::optional<Surface> surface;
    std::vector<Check> checks;
    Json metadata = Json::object();

    /// True when every acceptance check passed.
    [[nodiscard]] bool passed() const;
};

/// One CSV per comparison and table, surface.csv, checks.csv, summary.json.
/// Returns the written paths.
std::vector<std::filesystem::path> write_result(const ExperimentResult& r, const std::filesystem::path& dir);

struct CommonSpec {
    UniverseSpec universe;
    features::FeatureSpec features;
    features::Normalization normalization = features::Normalization::PerStockZScore;
    double train_fraction = 0.8;
    std::uint64_t seed = 1;
    std::size_t jobs = 1;
};

struct NonlinearitySpec {
    CommonSpec common;
    ModelSlot lstm;
    ModelSlot linear;
};

struct UniversalitySpec {
    CommonSpec common;
    std::size_t held_out = 5;  // the last stock ids in the universe
    features::Normalization pooled_normalization = features::Normalization::PooledZScore;
    ModelSlot specific;
    ModelSlot pooled;
};

struct StationaritySpec {
    CommonSpec common;
    double train_end = 0.5;       // training region is [0, train_end)
    double test_length = 0.125;   // near test follows train_end, far test ends the series
    std::vector<double> windows{0.05, 0.25, 1.0};  // fractions of the training region
    ModelSlot model;
};

struct PathDependenceSpec {
    CommonSpec common;  // persistent-regime universe
    UniverseSpec control;  // memoryless universe
    ModelSlot feedforward;
    ModelSlot lstm;
    std::optional<ModelSlot> long_lstm;
};

struct SensitivitySpec {
    CommonSpec common;
    features::Normalization pooled_normalization = features::Normalization::PooledZScore;
    ModelSlot model;
    std::size_t quantiles = 10;
    std::size_t min_count = 100;
    int truncation = 50;
};

ExperimentResult run_nonlinearity(const NonlinearitySpec& spec, const std::filesystem::path& out_dir);
ExperimentResult run_universality(const UniversalitySpec& spec, const std::filesystem::path& out_dir);
ExperimentResult run_stationarity(const StationaritySpec& spec, const std::filesystem::path& out_dir);
ExperimentResult run_path_dependence(const PathDependenceSpec& spec, const std::filesystem::path& out_dir);
ExperimentResult run_sensitivity(const SensitivitySpec& spec, const std::filesystem::path& out_dir);

inline constexpr const char* kExperimentNames[] = {"nonlinearity", "universality", "stationarity",
                                                   "path_dependence", "sensitivity"};

/// Parses the config for `name` (strict keys) and runs it. Unknown names
/// throw InvalidConfig listing the valid ones.
ExperimentResult run_experiment(const std::string& name, const Json& config, const std::filesystem::path& out_dir);

UniverseSpec universe_spec_from_json(const Json& doc, const std::string& where);
ModelSlot model_slot_from_json(const Json& doc, const std::string& name, const std::string& where);
NonlinearitySpec nonlinearity_spec_from_json(const Json& doc);
UniversalitySpec universality_spec_from_json(const Json& doc);
StationaritySpec stationarity_spec_from_json(const Json& doc);
PathDependenceSpec path_dependence_spec_from_json(const Json& doc);
SensitivitySpec sensitivity_spec_from_json(const Json& doc);

}  // namespace pfl::eval
