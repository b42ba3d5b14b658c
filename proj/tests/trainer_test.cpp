#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <cstring>
#include <fstream>
#include <functional>
#include <set>

#include "pfl/error.hpp"
#include "pfl/models/models.hpp"
#include "pfl/train/trainer.hpp"
#include "support/synthetic.hpp"

using namespace pfl;
using namespace pfl::train;
using features::Dataset;
using features::SequenceSample;
using Eigen::VectorXd;

namespace {

struct Task {
    Dataset data;
    std::vector<SequenceSample> samples;
};

Task cluster_task(std::size_t stocks, std::size_t n, std::size_t lag, double noise, std::uint64_t seed) {
    Task t;
    t.data.lag = lag;
    Rng rng(seed);
    for (std::size_t s = 0; s < stocks; ++s) {
        t.data.series.push_back(testkit::cluster_series("T" + std::to_string(s), n, 4, noise, rng));
        auto part = features::assemble_sequences(t.data.series.back(), static_cast<std::uint32_t>(s), lag);
        t.samples.insert(t.samples.end(), part.begin(), part.end());
    }
    return t;
}

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("pfl_trainer_" + name);
}

void expect_code(ErrorCode code, const std::function<void()>& f) {
    try {
        f();
        ADD_FAILURE() << "no error thrown";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), code) << e.what();
    }
}

}  // namespace

TEST(Batches, SizesAndCoverage) {
    const auto b = tbptt_batches(100, 32, 7, 0);
    ASSERT_EQ(b.size(), 4u);
    EXPECT_EQ(b[0].size(), 32u);
    EXPECT_EQ(b[1].size(), 32u);
    EXPECT_EQ(b[2].size(), 32u);
    EXPECT_EQ(b[3].size(), 4u);
    std::set<std::size_t> seen;
    for (const auto& batch : b) seen.insert(batch.begin(), batch.end());
    EXPECT_EQ(seen.size(), 100u);
    EXPECT_EQ(*seen.rbegin(), 99u);
}

TEST(Batches, EpochPermutationsDifferAndRepeat) {
    const auto e0 = tbptt_batches(500, 500, 3, 0);
    const auto e1 = tbptt_batches(500, 500, 3, 1);
    EXPECT_NE(e0, e1);
    EXPECT_EQ(e0, tbptt_batches(500, 500, 3, 0));
    EXPECT_EQ(e1, tbptt_batches(500, 500, 3, 1));
    EXPECT_NE(e0, tbptt_batches(500, 500, 4, 0));
}

TEST(Batches, PooledBatchesMixStocks) {
    const auto task = cluster_task(2, 300, 1, 0.0, 5);
    const auto b = tbptt_batches(task.samples.size(), 64, 11, 0);
    for (std::size_t i = 0; i + 1 < b.size(); ++i) {
        std::set<std::uint32_t> ids;
        for (std::size_t j : b[i]) ids.insert(task.samples[j].series);
        EXPECT_EQ(ids.size(), 2u);
    }
}

TEST(Batches, ScheduleRespectsBudget) {
    OptConfig cfg;
    cfg.batch_size = 10;
    cfg.epochs = 3;
    EXPECT_EQ(training_schedule(95, cfg).size(), 30u);
    cfg.max_steps = 25;
    const auto s = training_schedule(95, cfg);
    ASSERT_EQ(s.size(), 25u);
    EXPECT_EQ(s[10], tbptt_batches(95, 10, cfg.seed, 1)[0]);
}

TEST(Optimizer, AdamFirstStep) {
    OptConfig cfg;
    cfg.learning_rate = 0.01;
    Optimizer opt(cfg, 3);
    VectorXd theta = VectorXd::Zero(3);
    const VectorXd g = (VectorXd(3) << 2.0, -0.5, 0.0).finished();
    opt.step(theta, g);
    for (int i = 0; i < 3; ++i) {
        // bias-corrected moments equal g and g^2 after one step
        EXPECT_NEAR(theta[i], -0.01 * g[i] / (std::abs(g[i]) + 1e-8), 1e-15);
    }
}

TEST(Optimizer, RmsPropAndSgdSteps) {
    OptConfig cfg;
    cfg.learning_rate = 0.1;
    cfg.algorithm = Algorithm::Sgd;
    Optimizer sgd(cfg, 2);
    VectorXd theta = VectorXd::Ones(2);
    sgd.step(theta, VectorXd::Constant(2, 2.0));
    EXPECT_DOUBLE_EQ(theta[0], 0.8);
    cfg.algorithm = Algorithm::RmsProp;
    Optimizer rms(cfg, 2);
    theta.setOnes();
    rms.step(theta, VectorXd::Constant(2, 2.0));
    EXPECT_NEAR(theta[0], 1.0 - 0.1 * 2.0 / (std::sqrt(0.1 * 4.0) + 1e-8), 1e-15);
}

TEST(Sync, DeterministicGivenSeed) {
    const auto task = cluster_task(1, 400, 3, 0.1, 1);
    models::LstmModel m(4, 5, 2);
    OptConfig cfg;
    cfg.learning_rate = 0.01;
    cfg.max_steps = 30;
    const auto a = train_synchronous(m, m.init(3), task.data, task.samples, cfg);
    const auto b = train_synchronous(m, m.init(3), task.data, task.samples, cfg);
    EXPECT_EQ((a.params - b.params).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(a.steps, 30u);
    cfg.seed = 2;
    const auto c = train_synchronous(m, m.init(3), task.data, task.samples, cfg);
    EXPECT_GT((a.params - c.params).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Sync, SeparableClustersLearned) {
    const auto task = cluster_task(1, 2000, 1, 0.0, 2);
    models::LinearModel linear(4, 2);
    models::MlpModel mlp(4, {8});
    OptConfig cfg;
    cfg.learning_rate = 0.05;
    cfg.max_steps = 200;
    for (const models::Model* m : {static_cast<const models::Model*>(&linear), static_cast<const models::Model*>(&mlp)}) {
        const auto r = train_synchronous(*m, m->init(1), task.data, task.samples, cfg);
        EXPECT_LE(r.steps, 200u);
        EXPECT_GE(testkit::accuracy_of(*m, r.params, task.data, task.samples), 0.99) << to_string(m->family());
        EXPECT_LT(r.final_loss, r.initial_loss);
    }
}

TEST(Sync, ZeroLearningRateIsIdentity) {
    const auto task = cluster_task(1, 257, 1, 0.2, 3);
    models::MlpModel m(4, {6});
    OptConfig cfg;
    cfg.learning_rate = 0.0;
    cfg.batch_size = 32;
    cfg.epochs = 3;
    cfg.eval_every = 8;  // one full epoch of equal batches per point
    const VectorXd init = m.init(5);
    const auto r = train_synchronous(m, init, task.data, task.samples, cfg);
    EXPECT_EQ((r.params - init).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(r.final_loss, r.initial_loss);
    ASSERT_EQ(r.curve.size(), 3u);
    for (const auto& p : r.curve) EXPECT_NEAR(p.loss, r.curve.front().loss, 1e-12);
}

TEST(Sync, LossBelowLn2WhenPredictable) {
    const auto task = cluster_task(2, 1000, 1, 0.3, 4);  // Bayes accuracy 70%
    models::LinearModel m(4, 2);
    OptConfig cfg;
    cfg.learning_rate = 0.02;
    cfg.max_steps = 300;
    for (auto alg : {Algorithm::Adam, Algorithm::RmsProp, Algorithm::Sgd}) {
        cfg.algorithm = alg;
        const auto r = train_synchronous(m, m.init(2), task.data, task.samples, cfg);
        EXPECT_LT(r.final_loss, std::log(2.0)) << to_string(alg);
        EXPECT_LT(r.final_loss, r.initial_loss) << to_string(alg);
        for (const auto& p : r.curve) EXPECT_TRUE(std::isfinite(p.loss));
    }
}

TEST(Sync, NonFiniteLossAbortsWithDump) {
    const auto task = cluster_task(1, 100, 2, 0.0, 6);
    const auto dump = temp_path("dump.ckpt");
    std::filesystem::remove(dump);
    models::LstmModel lstm(4, 3, 1);
    models::LinearModel linear(4, 2);
    OptConfig cfg;
    cfg.max_steps = 5;
    cfg.failure_dump = dump;
    for (const models::Model* m : {static_cast<const models::Model*>(&lstm), static_cast<const models::Model*>(&linear)}) {
        // a huge unclipped step drives the parameters to infinity
        const VectorXd finite = m->init(1);
        OptConfig wild = cfg;
        wild.algorithm = Algorithm::Sgd;
        wild.learning_rate = 1e300;
        wild.clip_norm = 0.0;
        expect_code(ErrorCode::NonFiniteLoss, [&] { (void)train_synchronous(*m, finite, task.data, task.samples, wild); });
        ASSERT_TRUE(std::filesystem::exists(dump));
        const auto ck = load_checkpoint(dump);
        EXPECT_EQ(ck.meta["architecture"], m->architecture());
        EXPECT_TRUE(ck.meta.contains("failure"));
        std::filesystem::remove(dump);
    }
}

TEST(Async, OneWorkerMatchesSyncExactly) {
    const auto task = cluster_task(2, 300, 4, 0.1, 7);
    models::LstmModel m(4, 4, 2);
    OptConfig cfg;
    cfg.learning_rate = 0.01;
    cfg.epochs = 2;
    cfg.eval_every = 5;
    const auto sync = train_synchronous(m, m.init(9), task.data, task.samples, cfg);
    const auto async = train_asynchronous(m, m.init(9), task.data, task.samples, 1, cfg);
    EXPECT_EQ((sync.params - async.params).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(sync.steps, async.steps);
    ASSERT_EQ(sync.curve.size(), async.curve.size());
    for (std::size_t i = 0; i < sync.curve.size(); ++i) EXPECT_EQ(sync.curve[i].loss, async.curve[i].loss);
    EXPECT_EQ(async.staleness[0], async.steps);
    EXPECT_EQ(async.dropped, 0u);
}

TEST(Async, ManyWorkersMatchSyncLoss) {
    const auto task = cluster_task(2, 2000, 1, 0.1, 8);  // reference task: 10% label noise
    models::MlpModel m(4, {8});
    OptConfig cfg;
    cfg.learning_rate = 0.01;
    cfg.epochs = 3;
    const auto sync = train_synchronous(m, m.init(1), task.data, task.samples, cfg);
    for (std::size_t workers : {2u, 4u, 8u}) {
        const auto r = train_asynchronous(m, m.init(1), task.data, task.samples, workers, cfg, 16);
        EXPECT_LT(std::abs(r.final_loss - sync.final_loss), 0.05 * sync.final_loss) << workers << " workers";
        std::size_t applied = 0;
        for (std::size_t c : r.staleness) applied += c;
        EXPECT_EQ(applied, r.steps);
        EXPECT_EQ(r.steps + r.dropped, r.planned);
        EXPECT_EQ(r.staleness.size(), 17u);
    }
}

TEST(Async, StalenessCapDropsOldGradients) {
    const auto task = cluster_task(1, 600, 1, 0.1, 9);
    models::LstmModel m(4, 8, 1);
    OptConfig cfg;
    cfg.batch_size = 8;
    cfg.epochs = 2;
    const auto r = train_asynchronous(m, m.init(1), task.data, task.samples, 4, cfg, 0);
    ASSERT_EQ(r.staleness.size(), 1u);
    EXPECT_EQ(r.staleness[0], r.steps);
    EXPECT_EQ(r.steps + r.dropped, r.planned);
    EXPECT_GT(r.steps, 0u);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    const auto task = cluster_task(1, 300, 5, 0.1, 10);
    models::LstmModel m(4, 6, 2);
    OptConfig cfg;
    cfg.max_steps = 20;
    const auto r = train_synchronous(m, m.init(2), task.data, task.samples, cfg);
    const auto path = temp_path("roundtrip.ckpt");
    const Json meta{{"architecture", m.architecture()}, {"seed", 2}, {"optimizer", to_json(cfg)}};
    save_checkpoint(path, r.params, meta);
    const auto ck = load_checkpoint(path);
    EXPECT_EQ(ck.meta, meta);
    EXPECT_EQ(std::memcmp(ck.params.data(), r.params.data(), sizeof(double) * static_cast<std::size_t>(r.params.size())), 0);
    auto rebuilt = models::make_model(ck.meta["architecture"]);
    const std::vector<SequenceSample> probe(task.samples.begin(), task.samples.begin() + 16);
    const auto batch = features::gather(task.data, probe);
    EXPECT_EQ((rebuilt->forward(ck.params, batch.x) - m.forward(r.params, batch.x)).cwiseAbs().maxCoeff(), 0.0);
    std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptionDetected) {
    models::LinearModel m(4, 2);
    const auto path = temp_path("corrupt.ckpt");
    save_checkpoint(path, m.init(1), Json{{"architecture", m.architecture()}});
    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 5);
    expect_code(ErrorCode::ChecksumMismatch, [&] { (void)load_checkpoint(path); });
    save_checkpoint(path, m.init(1), Json{{"architecture", m.architecture()}});
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(static_cast<std::streamoff>(size / 2));
        f.put('\x7f');
    }
    expect_code(ErrorCode::ChecksumMismatch, [&] { (void)load_checkpoint(path); });
    std::filesystem::remove(path);
    expect_code(ErrorCode::Io, [&] { (void)load_checkpoint(path); });
    expect_code(ErrorCode::InvalidArgument, [&] { save_checkpoint(path, m.init(1), Json::object()); });
}

TEST(Config, JsonRoundTripAndValidation) {
    OptConfig cfg;
    cfg.algorithm = Algorithm::RmsProp;
    cfg.learning_rate = 0.003;
    cfg.max_steps = 77;
    cfg.loss_mode = models::LossMode::PerStep;
    EXPECT_EQ(opt_config_from_json(to_json(cfg)), cfg);
    expect_code(ErrorCode::InvalidConfig, [] { (void)opt_config_from_json(Json{{"lr", 0.1}}); });
    expect_code(ErrorCode::InvalidConfig, [] { (void)opt_config_from_json(Json{{"beta1", 1.0}}); });
    expect_code(ErrorCode::InvalidConfig, [] { (void)opt_config_from_json(Json{{"algorithm", "lbfgs"}}); });
    expect_code(ErrorCode::InvalidConfig, [] { (void)opt_config_from_json(Json{{"batch_size", 0}}); });
    EXPECT_EQ(effective_clip(OptConfig{}, models::Family::Lstm), 5.0);
    EXPECT_EQ(effective_clip(OptConfig{}, models::Family::Mlp), 0.0);
}

TEST(Capacity, WiderLstmFitsAtLeastAsWell) {
    // Random labels on a small fixed set: only capacity helps.
    Task task;
    task.data.lag = 3;
    Rng rng(12);
    task.data.series.push_back(testkit::cluster_series("M", 49, 4, 0.5, rng, 0.0, 1.0));
    task.samples = features::assemble_sequences(task.data.series[0], 0, 3);
    OptConfig cfg;
    cfg.learning_rate = 3e-3;
    cfg.batch_size = task.samples.size();
    cfg.max_steps = 150;
    cfg.l2 = 0.0;
    models::LstmModel small(4, 50), wide(4, 150);
    const auto a = train_synchronous(small, small.init(1), task.data, task.samples, cfg);
    const auto b = train_synchronous(wide, wide.init(1), task.data, task.samples, cfg);
    RecordProperty("loss_n50", std::to_string(a.final_loss));
    RecordProperty("loss_n150", std::to_string(b.final_loss));
    EXPECT_LE(b.final_loss, a.final_loss + 1e-3) << "n=50 " << a.final_loss << " n=150 " << b.final_loss;
    EXPECT_LT(a.final_loss, a.initial_loss);
}
