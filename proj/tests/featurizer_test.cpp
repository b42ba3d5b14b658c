#include <gtest/gtest.h>

#include <filesystem>

#include "pfl/error.hpp"
#include "pfl/features/featurizer.hpp"
#include "pfl/sim/market_sim.hpp"

using namespace pfl;
using namespace pfl::features;

namespace {

lob::DepthSnapshot snap(std::int64_t bid, std::int64_t ask, std::int64_t t,
                        std::vector<std::int64_t> bids = {1}, std::vector<std::int64_t> asks = {1}) {
    lob::DepthSnapshot s;
    s.best_bid = bid;
    s.best_ask = ask;
    s.event_time_ns = t;
    s.bid_sizes = std::move(bids);
    s.ask_sizes = std::move(asks);
    return s;
}

// Series with n events and states equal to the event index.
EventSeries toy_series(std::size_t n, const std::string& id = "T") {
    EventSeries s;
    s.stock_id = id;
    s.spec.levels = 1;
    s.states.resize(2, static_cast<Eigen::Index>(n));
    for (std::size_t k = 0; k < n; ++k) {
        s.events.push_back({k, 1.0 + k, k % 3 == 0 ? 1 : -1, k});
        s.states(0, k) = static_cast<double>(k);
        s.states(1, k) = static_cast<double>(k * k % 7);
    }
    s.transform = Transform::identity(2);
    return s;
}

ErrorCode code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no error thrown";
    return ErrorCode::Io;
}

}  // namespace

TEST(DetectPriceChanges, SignReadout) {
    // mids 10.000, 10.000, 10.005, 10.000 in cents: (999+1001), ..., (1000+1001), (999+1001)
    std::vector<lob::DepthSnapshot> s{snap(999, 1001, 1), snap(999, 1001, 2), snap(1000, 1001, 3),
                                      snap(999, 1001, 4)};
    const auto d = detect_price_changes(s);
    ASSERT_EQ(d.events.size(), 2u);
    EXPECT_EQ(d.events[0].snapshot_index, 2u);
    EXPECT_EQ(d.events[0].direction, 1);
    EXPECT_EQ(d.events[1].snapshot_index, 3u);
    EXPECT_EQ(d.events[1].direction, -1);
    EXPECT_DOUBLE_EQ(d.events[1].tau, 4e-9);
}

TEST(DetectPriceChanges, ConstantMidAndOneSided) {
    std::vector<lob::DepthSnapshot> s{snap(999, 1001, 1), snap(998, 1002, 2),
                                      snap(lob::kAbsentPrice, 1002, 3), snap(999, 1001, 4)};
    const auto d = detect_price_changes(s);
    EXPECT_TRUE(d.events.empty());
    EXPECT_EQ(d.one_sided_skipped, 1u);
}

TEST(DetectPriceChanges, CoalescesSameTimestamp) {
    std::vector<lob::DepthSnapshot> s{snap(999, 1001, 1), snap(998, 1001, 2), snap(998, 999, 2),
                                      snap(998, 1000, 3)};
    EXPECT_EQ(detect_price_changes(s).events.size(), 2u);
    EXPECT_EQ(detect_price_changes(s, DetectOptions{false}).events.size(), 3u);
}

TEST(DetectPriceChanges, SymmetricSimIsFair) {
    sim::SimConfig cfg;
    cfg.seed = 8;
    const auto msgs = sim::simulate_stock(cfg, 1000000);
    FeatureSpec spec;
    const auto series = featurize_messages("S", msgs, spec, cfg.tick_size);
    ASSERT_GT(series.size(), 5000u);
    double up = 0;
    for (std::size_t k = 1; k < series.size(); ++k) {
        ASSERT_GT(series.events[k].tau, series.events[k - 1].tau);
        up += series.events[k].direction > 0;
    }
    const double n = static_cast<double>(series.size() - 1);
    EXPECT_NEAR(up / n, 0.5, 3 * std::sqrt(0.25 / n));
}

TEST(FeaturizeMessages, AgreesWithSnapshotRoute) {
    sim::SimConfig cfg;
    cfg.seed = 2;
    const auto msgs = sim::simulate_stock(cfg, 100000);
    FeatureSpec spec;
    spec.levels = 4;
    spec.include_spread = true;
    spec.include_last_direction = true;
    const auto streamed = featurize_messages("S", msgs, spec, cfg.tick_size);
    const auto snaps = lob::rebuild_stream(msgs, spec.levels, lob::BookConfig{cfg.tick_size});
    const auto batch = build_event_series("S", snaps, spec);
    EXPECT_EQ(streamed.events, batch.events);
    EXPECT_EQ(streamed.states, batch.states);
}

TEST(StateVector, Layouts) {
    const auto s = snap(9999, 10000, 0, {100, 0}, {50, 25});
    FeatureSpec spec;
    spec.levels = 2;
    EXPECT_EQ(build_state_vector(s, spec), (Eigen::Vector4d(100, 0, 50, 25)));
    spec.include_spread = true;
    Eigen::VectorXd with_spread(5);
    with_spread << 100, 0, 50, 25, 1;
    EXPECT_EQ(build_state_vector(s, spec), with_spread);
    EXPECT_EQ(FeatureSpec{}.dimension(), 20u);
    spec.levels = 3;
    EXPECT_EQ(code_of([&] { (void)build_state_vector(s, spec); }), ErrorCode::DimensionMismatch);
}

TEST(AssembleSequences, CardinalityAndLabels) {
    const auto s = toy_series(3);
    const auto samples = assemble_sequences(s, 0, 1);
    ASSERT_EQ(samples.size(), 2u);
    EXPECT_EQ(samples[0].label, s.events[1].direction);
    EXPECT_EQ(samples[1].label, s.events[2].direction);
}

TEST(AssembleSequences, LeftPadding) {
    Dataset data;
    data.series.push_back(toy_series(10));
    data.lag = 5;
    const auto samples = assemble_sequences(data.series[0], 0, 5);
    // second event (1-based k = 2) has two states: three copies of the first pad the window
    const SequenceSample& s = samples[1];
    EXPECT_TRUE(s.padded);
    EXPECT_EQ(s.state_index(0), 0u);
    EXPECT_EQ(s.state_index(2), 0u);
    EXPECT_EQ(s.state_index(3), 0u);
    EXPECT_EQ(s.state_index(4), 1u);
    EXPECT_FALSE(samples[4].padded);
    const Batch b = gather(data, std::span(samples).subspan(1, 1));
    EXPECT_EQ(b.step_labels(0, 0), 0);
    EXPECT_EQ(b.step_labels(3, 0), data.series[0].events[1].direction);
    EXPECT_EQ(b.step_labels(4, 0), data.series[0].events[2].direction);
    EXPECT_EQ(b.labels[0], data.series[0].events[2].direction);
}

TEST(AssembleSequences, StrideEndsAtLastLabel) {
    const auto s = toy_series(23);
    const auto samples = assemble_sequences(s, 0, 5, 5);
    ASSERT_FALSE(samples.empty());
    EXPECT_EQ(samples.back().end, 21u);
    EXPECT_EQ(samples[1].end - samples[0].end, 5u);
}

TEST(AssembleSequences, LongLagsStayLazy) {
    const auto s = toy_series(100000);
    for (std::size_t lag : {100u, 5000u}) {
        const auto samples = assemble_sequences(s, 0, lag);
        EXPECT_EQ(samples.size(), 99999u);
        // a sample is a handful of integers no matter the lag
        EXPECT_LE(samples.capacity() * sizeof(SequenceSample), 2u * 1024 * 1024);
    }
}

TEST(NoLookAhead, WindowsPrecedeLabels) {
    sim::SimConfig cfg;
    const auto series = featurize_messages("S", sim::simulate_stock(cfg, 50000), FeatureSpec{}, cfg.tick_size);
    for (const auto& s : assemble_sequences(series, 0, 7)) {
        for (std::size_t t = 0; t < 7; ++t) {
            ASSERT_LE(s.state_index(t), s.end);
            ASSERT_LE(series.events[s.state_index(t)].tau, series.events[s.end].tau);
        }
        ASSERT_LT(series.events[s.end].tau, series.events[s.end + 1].tau);
        ASSERT_EQ(s.label, series.events[s.end + 1].direction);
        ASSERT_TRUE(s.label == 1 || s.label == -1);
    }
}

TEST(TemporalSplit, Ordering) {
    Dataset data;
    data.series.push_back(toy_series(101));
    const auto samples = assemble_sequences(data.series[0], 0, 1);
    const double b[] = {0.8};
    const auto parts = temporal_split(data, samples, b);
    ASSERT_EQ(parts.size(), 2u);
    EXPECT_EQ(parts[0].size(), 80u);
    EXPECT_EQ(parts[1].size(), 20u);
    for (const auto& tr : parts[0]) {
        for (const auto& te : parts[1]) ASSERT_LT(tr.end, te.end);
    }
    const double three[] = {0.5, 0.75};
    EXPECT_EQ(temporal_split(data, samples, three).size(), 3u);
    const double bad[] = {0.6, 0.5};
    EXPECT_EQ(code_of([&] { (void)temporal_split(data, samples, bad); }), ErrorCode::InvalidArgument);
    const double tiny[] = {0.001};
    EXPECT_EQ(code_of([&] { (void)temporal_split(data, samples, tiny); }), ErrorCode::EmptyPartition);
}

TEST(Normalize, NoneIsIdentity) {
    Dataset data;
    data.series.push_back(toy_series(50));
    const Eigen::MatrixXd before = data.series[0].states;
    const auto samples = assemble_sequences(data.series[0], 0, 1);
    normalize_dataset(data, samples, Normalization::None);
    EXPECT_EQ(data.series[0].states, before);
}

TEST(Normalize, ZScoreOnTrainingOnly) {
    Dataset data;
    data.series.push_back(toy_series(200));
    data.series.push_back(toy_series(200, "U"));
    data.series[1].states.row(1).setConstant(3.0);  // zero variance coordinate
    std::vector<SequenceSample> all;
    for (std::uint32_t i = 0; i < 2; ++i) {
        auto s = assemble_sequences(data.series[i], i, 1);
        all.insert(all.end(), s.begin(), s.end());
    }
    const double b[] = {0.5};
    const auto parts = temporal_split(data, all, b);

    Dataset perturbed = data;
    perturbed.series[0].states.rightCols(50).setConstant(1e6);  // test-period states

    const Eigen::MatrixXd raw = data.series[0].states;
    normalize_dataset(data, parts[0], Normalization::PerStockZScore);
    normalize_dataset(perturbed, parts[0], Normalization::PerStockZScore);
    EXPECT_EQ(data.series[0].transform.shift, perturbed.series[0].transform.shift);
    EXPECT_EQ(data.series[0].transform.scale, perturbed.series[0].transform.scale);

    // 199 samples, cut at 99: training windows see events 0..98
    const Eigen::MatrixXd train = data.series[0].states.leftCols(99);
    EXPECT_NEAR(train.row(0).mean(), 0.0, 1e-12);
    EXPECT_NEAR((train.row(0).array().square()).mean(), 1.0, 1e-12);
    EXPECT_EQ(data.series[1].transform.zero_variance, std::vector<std::size_t>{1});
    EXPECT_TRUE(data.series[0].transform.invert(data.series[0].states.col(150)).isApprox(raw.col(150)));
    EXPECT_EQ(code_of([&] { normalize_dataset(data, parts[0], Normalization::PerStockZScore); }),
              ErrorCode::AlreadyNormalized);
}

TEST(Normalize, PooledCoversUnseenStocks) {
    Dataset data;
    data.series.push_back(toy_series(100));
    data.series.push_back(toy_series(100, "HELD"));
    const auto train = assemble_sequences(data.series[0], 0, 1);
    normalize_dataset(data, train, Normalization::PooledZScore);
    EXPECT_EQ(data.series[0].transform.shift, data.series[1].transform.shift);
    EXPECT_TRUE(data.series[1].normalized);
    Dataset per;
    per.series.push_back(toy_series(100));
    per.series.push_back(toy_series(100, "HELD"));
    EXPECT_EQ(code_of([&] { normalize_dataset(per, train, Normalization::PerStockZScore); }),
              ErrorCode::EmptyPartition);
}

TEST(Normalize, ScaleOnlySchemes) {
    Dataset data;
    data.series.push_back(toy_series(100));
    const auto train = assemble_sequences(data.series[0], 0, 1);
    Dataset vol = data;
    normalize_dataset(vol, train, Normalization::VolatilityUnits);
    EXPECT_EQ(vol.series[0].transform.shift, Eigen::Vector2d::Zero());
    normalize_dataset(data, train, Normalization::SpreadUnits);
    EXPECT_EQ(data.series[0].transform.scale[0], data.series[0].transform.scale[1]);
}

TEST(DatasetFile, RoundTrip) {
    sim::SimConfig cfg;
    Dataset data;
    data.lag = 4;
    FeatureSpec spec;
    spec.levels = 3;
    spec.include_last_direction = true;
    data.series.push_back(featurize_messages("A", sim::simulate_stock(cfg, 30000), spec, cfg.tick_size));
    cfg.seed = 2;
    data.series.push_back(featurize_messages("B", sim::simulate_stock(cfg, 30000), spec, cfg.tick_size));
    const auto train = assemble_sequences(data.series[0], 0, 4);
    normalize_dataset(data, train, Normalization::PooledZScore);
    const auto path = std::filesystem::temp_directory_path() / "pfl_dataset_test.csv";
    write_dataset(data, Json{{"note", "x"}}, path);
    Json header;
    const Dataset back = read_dataset(path, &header);
    ASSERT_EQ(back.series.size(), 2u);
    EXPECT_EQ(back.lag, 4u);
    EXPECT_EQ(header["extra"]["note"], "x");
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(back.series[i].states, data.series[i].states);
        EXPECT_EQ(back.series[i].spec, data.series[i].spec);
        EXPECT_EQ(back.series[i].transform.scale, data.series[i].transform.scale);
        EXPECT_TRUE(back.series[i].normalized);
        ASSERT_EQ(back.series[i].events.size(), data.series[i].events.size());
        EXPECT_EQ(back.series[i].events.back().direction, data.series[i].events.back().direction);
    }
    EXPECT_EQ(partition_hash(back, assemble_sequences(back.series[0], 0, 4)), partition_hash(data, train));
    std::filesystem::remove(path);
}
