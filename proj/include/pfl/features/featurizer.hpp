#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pfl/feed/message.hpp"
#include "pfl/json_util.hpp"
#include "pfl/lob/order_book.hpp"

namespace pfl::features {

struct PriceChangeEvent {
    std::size_t k = 0;
    double tau = 0.0;  // seconds after midnight
    int direction = 0;
    std::size_t snapshot_index = 0;

    bool operator==(const PriceChangeEvent&) const = default;
};

struct DetectOptions {
    // Measure the mid once per timestamp, after the last snapshot carrying it.
    bool coalesce_same_time = true;
};

struct Detection {
    std::vector<PriceChangeEvent> events;
    std::size_t one_sided_skipped = 0;
};

Detection detect_price_changes(std::span<const lob::DepthSnapshot> snaps, DetectOptions opts = {});

/// Layout: bid_sizes[0..L), ask_sizes[0..L), then spread, then last move.
struct FeatureSpec {
    std::size_t levels = 10;
    bool include_spread = false;
    bool include_last_direction = false;
    lob::DepthMode depth_mode = lob::DepthMode::TickOffset;

    [[nodiscard]] std::size_t dimension() const noexcept {
        return 2 * levels + (include_spread ? 1 : 0) + (include_last_direction ? 1 : 0);
    }
    bool operator==(const FeatureSpec&) const = default;
};

/// Throws DimensionMismatch when the snapshot depth differs from spec.levels.
Eigen::VectorXd build_state_vector(const lob::DepthSnapshot& snap, const FeatureSpec& spec,
                                   int last_direction = 0);

/// Affine per-coordinate map x -> (x - shift) / scale.
struct Transform {
    Eigen::VectorXd shift;
    Eigen::VectorXd scale;
    std::vector<std::size_t> zero_variance;  // coordinates left unscaled

    [[nodiscard]] Eigen::VectorXd apply(const Eigen::VectorXd& x) const;
    [[nodiscard]] Eigen::VectorXd invert(const Eigen::VectorXd& y) const;
    static Transform identity(std::size_t d);
};

/// States and directions at every price-change event of one stock.
struct EventSeries {
    std::string stock_id;
    FeatureSpec spec;
    std::vector<PriceChangeEvent> events;
    Eigen::MatrixXd states;  // d x n, column k = state at event k
    std::size_t one_sided_skipped = 0;
    bool normalized = false;
    Transform transform;

    [[nodiscard]] std::size_t size() const noexcept { return events.size(); }
    [[nodiscard]] std::size_t dimension() const noexcept {
        return static_cast<std::size_t>(states.rows());
    }
};

EventSeries build_event_series(const std::string& stock_id,
                               std::span<const lob::DepthSnapshot> snaps, const FeatureSpec& spec,
                               DetectOptions opts = {});

/// Streams the messages through a book without keeping every snapshot.
EventSeries featurize_messages(const std::string& stock_id, std::span<const feed::Message> msgs,
                               const FeatureSpec& spec, std::int64_t price_units_per_tick,
                               DetectOptions opts = {});

/// A window over one series, materialized on demand. `end` is the event
/// index of the last state; the label is the direction at event end + 1.
struct SequenceSample {
    std::uint32_t series = 0;
    std::uint32_t end = 0;
    std::uint32_t lag = 1;
    std::int8_t label = 0;
    bool padded = false;

    /// Event index feeding window step t (clamped at the first event).
    [[nodiscard]] std::size_t state_index(std::size_t t) const noexcept {
        const auto first = static_cast<std::int64_t>(end) - static_cast<std::int64_t>(lag) + 1 +
                           static_cast<std::int64_t>(t);
        return first < 0 ? 0 : static_cast<std::size_t>(first);
    }
};

/// Samples for every event k with k + 1 in range, windows of length `lag`,
/// advancing `stride` events between samples (stride 1 = every event).
std::vector<SequenceSample> assemble_sequences(const EventSeries& series, std::uint32_t series_index,
                                               std::size_t lag, std::size_t stride = 1);

/// Several stocks' series plus samples that view them.
struct Dataset {
    std::vector<EventSeries> series;
    std::size_t lag = 1;

    [[nodiscard]] std::size_t dimension() const;
    /// Column of series s feeding step t of the sample's window.
    [[nodiscard]] auto state(const SequenceSample& s, std::size_t t) const {
        return series[s.series].states.col(static_cast<Eigen::Index>(s.state_index(t)));
    }
    [[nodiscard]] const EventSeries& of(const SequenceSample& s) const { return series[s.series]; }
};

/// Mini-batch in time-major layout.
struct Batch {
    std::vector<Eigen::MatrixXd> x;  // lag entries, each d x B
    Eigen::VectorXi labels;          // +1 / -1 per sample
    Eigen::MatrixXi step_labels;     // lag x B, 0 where the step is padding
    [[nodiscard]] std::size_t size() const noexcept { return static_cast<std::size_t>(labels.size()); }
};

Batch gather(const Dataset& data, std::span<const SequenceSample> samples);

enum class Normalization : std::uint8_t {
    None,
    PerStockZScore,
    PooledZScore,
    SpreadUnits,
    VolatilityUnits,
};

std::string to_string(Normalization n);
Normalization normalization_from_string(const std::string& name);

/// Fits transforms on `train` (the states those samples can see), then
/// applies them to every state of the involved series. Throws
/// AlreadyNormalized when a series was transformed before.
void normalize_dataset(Dataset& data, std::span<const SequenceSample> train, Normalization scheme);

/// Partitions in time order; boundaries strictly increasing in (0, 1).
/// Each stock is cut separately so every partition spans all stocks.
std::vector<std::vector<SequenceSample>> temporal_split(const Dataset& data,
                                                        std::span<const SequenceSample> samples,
                                                        std::span<const double> boundaries);

/// FNV-1a over the partition's (stock, end, label) triples.
std::uint64_t partition_hash(const Dataset& data, std::span<const SequenceSample> samples);

/// CSV with a JSON header line. Rows hold the (possibly normalized) state at
/// every event; windows are rebuilt from `lag` on load.
void write_dataset(const Dataset& data, const Json& extra_header, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path, Json* header_out = nullptr);

Json to_json(const FeatureSpec& spec);
FeatureSpec feature_spec_from_json(const Json& doc, const std::string& where = "features");

}  // namespace pfl::features
