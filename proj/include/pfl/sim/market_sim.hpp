#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pfl/feed/message.hpp"

namespace pfl::sim {

enum class Regime : std::uint8_t { Memoryless, Persistent };

/// Zero-intelligence order flow for one synthetic stock. Rates are per second.
struct SimConfig {
    std::string stock_id = "SIM000";
    double limit_rate = 1.0;       // unit limit orders per level per side
    double market_rate = 1.0;      // unit market orders per side
    double cancel_rate = 0.1;      // per resting share
    int levels = 5;                // price levels receiving limit orders
    std::int64_t tick_size = 100;  // message price units per tick
    std::int64_t initial_depth = 5;
    // > 0: i.i.d. exponential gaps with this mean between events.
    // 0: physical time implied by the rates.
    double mean_event_gap = 0.0;
    Regime regime = Regime::Memoryless;
    double flip_rate = 0.0;  // persistent regime: hidden state flip rate
    double bias = 0.0;       // persistent regime: market orders on the favored side scale by 1 + bias, others by 1 - bias
    // Block takers: a touch queue holding >= sweep_threshold shares is
    // cleared in one event at rate sweep_rate. Off when sweep_rate == 0.
    double sweep_rate = 0.0;
    std::int64_t sweep_threshold = 0;
    std::uint64_t seed = 1;
    std::int64_t start_price_ticks = 10000;

    bool operator==(const SimConfig&) const = default;
};

/// Throws Error(InvalidConfig) naming the offending field.
void validate(const SimConfig& cfg);

/// Touch queues after a price move are drawn uniformly from 1..refill_max.
std::int64_t refill_max(const SimConfig& cfg) noexcept;

struct SimulationRun {
    std::vector<feed::Message> messages;
    std::size_t events = 0;       // distinct timestamps
    std::size_t price_moves = 0;  // mid-price changes
    double elapsed_seconds = 0.0;
};

/// Simulates until `n_messages` messages have been emitted. Deterministic in
/// cfg (including its seed).
SimulationRun run_simulation(const SimConfig& cfg, std::size_t n_messages);

/// Message stream only.
std::vector<feed::Message> simulate_stock(const SimConfig& cfg, std::size_t n_messages);

/// Returns the mean_event_gap that puts the mean time between mid-price
/// changes at `target_seconds`, measured on a pilot run.
double calibrate_event_gap(SimConfig cfg, double target_seconds = 1.7,
                           std::size_t pilot_messages = 200000);

struct Range {
    double lo = 0.0;
    double hi = 0.0;
};

/// Intervals for the parameters that vary across a universe. Unset ranges
/// keep the value from `base`.
struct UniverseRanges {
    SimConfig base;
    std::optional<Range> limit_rate;
    std::optional<Range> market_rate;
    std::optional<Range> cancel_rate;
    std::optional<Range> initial_depth;
    std::optional<Range> mean_event_gap;
    std::optional<Range> sweep_rate;
    std::optional<Range> sweep_threshold;
    std::optional<Range> flip_rate;
    std::optional<Range> bias;
};

/// Draws each ranged parameter log-uniformly and independently per stock.
/// Stock ids are "S000", "S001", ...; child seeds derive from `seed`.
std::vector<SimConfig> make_universe(std::size_t n_stocks, const UniverseRanges& ranges,
                                     std::uint64_t seed);

struct OracleQuery {
    std::int64_t q_b = 1;
    std::int64_t q_a = 1;
    int truncation = 50;
};

/// Probability that the best-bid queue empties before the best-ask queue in
/// the two-queue chain: birth limit_rate (blocked at N), death
/// market_rate + cancel_rate * q, plus a jump to zero at sweep_rate when
/// q >= sweep_threshold. Solves the whole N x N table once.
class FirstPassageOracle {
public:
    FirstPassageOracle(const SimConfig& cfg, int truncation);

    [[nodiscard]] double p_down(std::int64_t q_b, std::int64_t q_a) const;
    [[nodiscard]] int truncation() const noexcept { return n_; }
    /// table()(i-1, j-1) = p_down(i, j)
    [[nodiscard]] const Eigen::MatrixXd& table() const noexcept { return table_; }

private:
    int n_;
    Eigen::MatrixXd table_;
};

/// Pair of solves at N and 2N; every lookup is checked against the larger
/// truncation. Throws TruncationTooSmall when they differ by more than 1e-4.
class OracleSolver {
public:
    explicit OracleSolver(const SimConfig& cfg, int truncation = 50);

    [[nodiscard]] double p_down(std::int64_t q_b, std::int64_t q_a) const;
    [[nodiscard]] int truncation() const noexcept { return base_.truncation(); }

private:
    FirstPassageOracle base_;
    FirstPassageOracle doubled_;
};

double oracle_p_down(const SimConfig& cfg, const OracleQuery& q);

}  // namespace pfl::sim
