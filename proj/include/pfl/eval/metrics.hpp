#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pfl/features/featurizer.hpp"
#include "pfl/models/models.hpp"
#include "pfl/sim/market_sim.hpp"
#include "pfl/train/trainer.hpp"

namespace pfl::eval {

/// Direction accuracy of one model on one stock's test samples.
struct AccuracyReport {
    std::string stock_id;
    std::string model_id;
    double accuracy = 0.0;  // percent
    std::size_t n = 0;
    double se = 0.0;  // binomial standard error, percent
    std::uint64_t partition = 0;
    std::vector<std::uint8_t> hits;  // per test sample, for paired comparisons
};

/// Report from per-sample hit flags. Throws EmptyTestSet when empty.
AccuracyReport make_report(std::string stock_id, std::string model_id, std::vector<std::uint8_t> hits,
                           std::uint64_t partition);

/// p_up after the last window step of every sample, evaluated in chunks.
Eigen::VectorXd predict_samples(const models::Model& model, const Eigen::VectorXd& theta,
                                const features::Dataset& data, std::span<const features::SequenceSample> samples);

/// One report per stock present in `samples`, ordered by stock id.
std::vector<AccuracyReport> score_by_stock(const models::Model& model, const Eigen::VectorXd& theta,
                                           const features::Dataset& data,
                                           std::span<const features::SequenceSample> samples,
                                           const std::string& model_id);

/// Single-stock score; throws EmptyTestSet for no samples and InvalidArgument
/// when the samples span several stocks.
AccuracyReport accuracy_score(const models::Model& model, const Eigen::VectorXd& theta,
                              const features::Dataset& data, std::span<const features::SequenceSample> samples,
                              const std::string& model_id);

/// Rebuilds the model from the checkpoint's architecture, then scores.
AccuracyReport accuracy_score(const train::Checkpoint& checkpoint, const features::Dataset& data,
                              std::span<const features::SequenceSample> samples, const std::string& model_id);

/// Scores externally produced directions (+1/-1) against the sample labels.
AccuracyReport score_directions(const features::Dataset& data, std::span<const features::SequenceSample> samples,
                                std::span<const int> directions, const std::string& model_id);

/// Fair coin per sample.
std::vector<int> coin_flip_directions(std::size_t n, std::uint64_t seed);

/// Depth at the best bid and ask feeding a sample's last window step, in
/// shares (normalization undone).
struct TouchDepth {
    double bid = 0.0;
    double ask = 0.0;
};
TouchDepth touch_depth(const features::Dataset& data, const features::SequenceSample& s);

/// Oracle p_down for every sample of one memoryless stock.
std::vector<double> oracle_p_down(const sim::OracleSolver& oracle, const features::Dataset& data,
                                  std::span<const features::SequenceSample> samples);

/// Bayes rule: +1 iff the oracle p_down is at most 0.5.
std::vector<int> oracle_directions(const sim::OracleSolver& oracle, const features::Dataset& data,
                                   std::span<const features::SequenceSample> samples);

struct CrossRow {
    std::string stock_id;
    double a = 0.0;  // accuracy of the first model set
    double b = 0.0;
    double delta = 0.0;     // a - b, percent
    double se = 0.0;        // paired standard error of delta, percent
    bool significant = false;  // |delta| >= 3 se
    std::size_t n = 0;
};

struct CrossSummary {
    double mean_delta = 0.0;
    double se_mean = 0.0;  // standard error of the mean delta
    double z = 0.0;
    std::size_t positive = 0;
    std::size_t non_negative = 0;
    double fraction_positive = 0.0;
    double fraction_non_negative = 0.0;
};

struct CrossSection {
    std::string label;
    std::string model_a;
    std::string model_b;
    std::vector<CrossRow> rows;
    CrossSummary summary;
};

/// Pairs reports by stock id. Throws PartitionMismatch when the stock sets
/// or any pair's partition hashes differ.
CrossSection compare_cross_section(std::span<const AccuracyReport> a, std::span<const AccuracyReport> b,
                                   const std::string& label);

/// stock_id,model_a,model_b,accuracy_a,accuracy_b,delta,se,significant,n
void write_cross_section(const CrossSection& cs, const std::filesystem::path& path);

/// Accuracy over the union of several reports' samples.
AccuracyReport pool_reports(std::span<const AccuracyReport> reports, const std::string& stock_id);

struct SurfaceCell {
    std::size_t bid_bin = 0;
    std::size_t ask_bin = 0;
    double bid_lo = 0.0;  // bin bounds in shares, [lo, hi)
    double bid_hi = 0.0;
    double ask_lo = 0.0;
    double ask_hi = 0.0;
    std::size_t count = 0;
    double model_p_down = 0.0;
    double oracle_p_down = 0.0;
    double empirical_p_down = 0.0;  // observed down frequency
    bool sparse = false;
};

struct Surface {
    std::vector<double> edges;  // shared bin edges for both axes
    std::size_t bins = 0;
    std::vector<SurfaceCell> cells;  // row-major, bid bin major
    std::size_t min_count = 100;
    [[nodiscard]] const SurfaceCell& at(std::size_t bid_bin, std::size_t ask_bin) const {
        return cells[bid_bin * bins + ask_bin];
    }
};

/// Bin edges at the interior q-quantiles of the pooled values, duplicates
/// removed. Bin of v = number of edges <= v.
std::vector<double> quantile_edges(std::vector<double> values, std::size_t quantiles);

/// Mean model and oracle p_down per (bid depth, ask depth) quantile cell.
/// `oracle_p` is aligned with `samples`. Cells below `min_count`
/// observations are flagged sparse.
Surface sensitivity_surface(const models::Model& model, const Eigen::VectorXd& theta,
                            const features::Dataset& data, std::span<const features::SequenceSample> samples,
                            std::span<const double> oracle_p, std::size_t quantiles = 10,
                            std::size_t min_count = 100);

void write_surface(const Surface& s, const std::filesystem::path& path);

}  // namespace pfl::eval
