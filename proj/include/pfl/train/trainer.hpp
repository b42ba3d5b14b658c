#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pfl/features/featurizer.hpp"
#include "pfl/json_util.hpp"
#include "pfl/models/models.hpp"

namespace pfl::train {

enum class Algorithm : std::uint8_t { Adam, RmsProp, Sgd };

std::string to_string(Algorithm a);
Algorithm algorithm_from_string(const std::string& name);

struct OptConfig {
    Algorithm algorithm = Algorithm::Adam;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double rms_decay = 0.9;
    std::size_t batch_size = 32;
    std::size_t epochs = 1;
    std::size_t max_steps = 0;  // 0 = run all epochs
    double l2 = 1e-5;
    std::uint64_t seed = 1;
    // Global gradient-norm clip; negative = 5 for LSTM, off otherwise; 0 = off.
    double clip_norm = -1.0;
    models::LossMode loss_mode = models::LossMode::Terminal;
    std::size_t eval_every = 50;  // steps per loss-curve point
    std::size_t eval_limit = 0;   // samples used for initial/final loss, 0 = all
    std::filesystem::path failure_dump;  // parameters written here on NonFiniteLoss

    bool operator==(const OptConfig&) const = default;
};

/// Throws InvalidConfig naming the offending field.
void validate(const OptConfig& cfg);

/// Clip norm in effect for a model family.
double effective_clip(const OptConfig& cfg, models::Family family);

struct LossPoint {
    std::size_t step = 0;
    double loss = 0.0;  // mean batch loss over the interval ending at `step`
};

struct TrainReport {
    std::vector<LossPoint> curve;
    double initial_loss = 0.0;  // full objective at the initial parameters
    double final_loss = 0.0;    // full objective at the returned parameters
    Eigen::VectorXd params;
    double wall_seconds = 0.0;
    std::size_t steps = 0;    // applied updates
    std::size_t planned = 0;  // batches scheduled
    std::size_t workers = 1;
    std::vector<std::size_t> staleness;  // histogram, async only
    std::size_t dropped = 0;             // gradients over the staleness cap
};

/// Index batches for one epoch: a seeded permutation cut into batches, the
/// last one possibly short.
std::vector<std::vector<std::size_t>> tbptt_batches(std::size_t n_samples, std::size_t batch_size,
                                                    std::uint64_t seed, std::size_t epoch);

/// The whole schedule across epochs, truncated at max_steps when set.
std::vector<std::vector<std::size_t>> training_schedule(std::size_t n_samples, const OptConfig& cfg);

/// Regularized objective over a sample set (forward only).
double dataset_loss(const models::Model& model, const Eigen::VectorXd& theta, const features::Dataset& data,
                    std::span<const features::SequenceSample> samples, models::LossMode mode, double l2,
                    std::size_t limit = 0);

/// First-order optimizer state.
class Optimizer {
public:
    Optimizer(const OptConfig& cfg, Eigen::Index n);
    void step(Eigen::VectorXd& theta, const Eigen::VectorXd& grad);
    [[nodiscard]] std::size_t steps() const noexcept { return t_; }

private:
    OptConfig cfg_;
    Eigen::VectorXd m_;
    Eigen::VectorXd v_;
    std::size_t t_ = 0;
};

TrainReport train_synchronous(const models::Model& model, const Eigen::VectorXd& init,
                              const features::Dataset& data, std::span<const features::SequenceSample> samples,
                              const OptConfig& cfg);

/// Workers pull batches from the synchronous schedule, compute gradients
/// against the snapshot they read, and apply them under a short lock.
/// Gradients more than `staleness_cap` versions old are dropped.
TrainReport train_asynchronous(const models::Model& model, const Eigen::VectorXd& init,
                               const features::Dataset& data, std::span<const features::SequenceSample> samples,
                               std::size_t n_workers, const OptConfig& cfg, std::size_t staleness_cap = 16);

void write_loss_curve(const TrainReport& report, const std::filesystem::path& path);

struct Checkpoint {
    Eigen::VectorXd params;
    Json meta;  // must hold "architecture"
};

/// "PFLCKPT1", u64 header length, JSON header, f64 parameters, u64 FNV-1a of
/// everything before it. Integers and floats in native byte order, recorded
/// in the header.
void save_checkpoint(const std::filesystem::path& path, const Eigen::VectorXd& params, const Json& meta);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Json to_json(const OptConfig& cfg);
OptConfig opt_config_from_json(const Json& doc, const std::string& where = "optimizer");

}  // namespace pfl::train
