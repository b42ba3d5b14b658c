#include <gtest/gtest.h>

#include <cmath>

#include <Eigen/Eigenvalues>

#include "pfl/error.hpp"
#include "pfl/models/models.hpp"
#include "support/grad_check.hpp"

using namespace pfl;
using namespace pfl::models;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::vector<MatrixXd> columns(const MatrixXd& window) {
    std::vector<MatrixXd> x;
    for (Eigen::Index t = 0; t < window.cols(); ++t) x.emplace_back(window.col(t));
    return x;
}

}  // namespace

TEST(Prediction, TieRule) {
    EXPECT_EQ(predict_direction({0.7, 0.3}), 1);
    EXPECT_EQ(predict_direction({0.2, 0.8}), -1);
    EXPECT_EQ(predict_direction({0.5, 0.5}), 1);
    const auto p = from_logit_gap(-40.0);
    EXPECT_NEAR(p.p_up + p.p_down, 1.0, 1e-15);
    EXPECT_GT(p.p_up, 0.0);
}

TEST(Linear, ZeroParamsGiveHalf) {
    LinearModel m(3, 2);
    const VectorXd theta = VectorXd::Zero(m.num_params());
    EXPECT_DOUBLE_EQ(m.predict(theta, MatrixXd::Random(3, 5)).p_up, 0.5);
}

TEST(Linear, HandRecursion) {
    LinearModel m(1, 1);
    VectorXd theta(m.num_params());
    m.layout().view(theta, LinearModel::kA)(0, 0) = 0.5;
    m.layout().view(theta, LinearModel::kB)(0, 0) = 1.0;
    m.layout().view(theta, LinearModel::kC).setZero();
    m.layout().view(theta, LinearModel::kD) << 1.0, -1.0;
    const auto p = m.predict(theta, MatrixXd::Ones(1, 2));
    EXPECT_NEAR(p.p_up, 1.0 / (1.0 + std::exp(-3.0)), 1e-15);
}

TEST(Linear, NoHistoryWhenDIsZero) {
    LinearModel m(3, 4);
    VectorXd theta = m.init(1);
    m.layout().view(theta, LinearModel::kD).setZero();
    MatrixXd w = MatrixXd::Random(3, 6);
    const double p = m.predict(theta, w).p_up;
    MatrixXd permuted = w;
    permuted.col(0).swap(permuted.col(3));
    permuted.col(1).swap(permuted.col(4));
    EXPECT_DOUBLE_EQ(m.predict(theta, permuted).p_up, p);
}

TEST(Linear, LogisticRegressionWhenAAndDZero) {
    LinearModel m(3, 2);
    VectorXd theta = m.init(4);
    m.layout().view(theta, LinearModel::kA).setZero();
    m.layout().view(theta, LinearModel::kD).setZero();
    const MatrixXd w = MatrixXd::Random(3, 4);
    const auto c = m.layout().view(theta, LinearModel::kC);
    const double z = (c.row(0) - c.row(1)).dot(w.col(3));
    EXPECT_NEAR(m.predict(theta, w).p_up, sig(z), 1e-15);
}

TEST(Linear, InitIsStable) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        LinearModel m(5, 8);
        const VectorXd theta = m.init(seed);
        const MatrixXd a = m.layout().view(theta, LinearModel::kA);
        EXPECT_LT(Eigen::EigenSolver<MatrixXd>(a, false).eigenvalues().cwiseAbs().maxCoeff(), 1.0);
    }
}

TEST(Mlp, ZeroFinalLayer) {
    MlpModel m(3, {4});
    VectorXd theta = m.init(2);
    m.layout().view(theta, MlpModel::weight_block(1)).setZero();
    EXPECT_DOUBLE_EQ(m.predict(theta, MatrixXd::Random(3, 1)).p_up, 0.5);
}

TEST(Mlp, ReluKillsNegative) {
    MlpModel m(1, {1});
    VectorXd theta = VectorXd::Zero(m.num_params());
    m.layout().view(theta, 0)(0, 0) = -1.0;
    m.layout().view(theta, 2) << 5.0, 0.0;  // head reads the hidden unit
    EXPECT_DOUBLE_EQ(m.predict(theta, MatrixXd::Constant(1, 1, 3.0)).p_up, 0.5);
}

TEST(Mlp, TwoLayerToy) {
    MlpModel m(2, {2});
    VectorXd theta(m.num_params());
    m.layout().view(theta, 0) << 1.0, -1.0, 0.5, 2.0;
    m.layout().view(theta, 1) << 0.0, -1.0;
    m.layout().view(theta, 2) << 1.0, 0.5, -1.0, 0.0;
    m.layout().view(theta, 3) << 0.2, 0.0;
    // hidden = relu(-1, 3.5) = (0, 3.5); logits (0.5*3.5 + 0.2, 0)
    EXPECT_NEAR(m.predict(theta, (MatrixXd(2, 1) << 1.0, 2.0).finished()).p_up, sig(1.95), 1e-15);
}

TEST(Lstm, ZeroParamsGiveHalfEverywhere) {
    LstmModel m(4, 5);
    const VectorXd theta = VectorXd::Zero(m.num_params());
    const MatrixXd p = m.forward(theta, columns(MatrixXd::Random(4, 6)));
    EXPECT_TRUE((p.array() == 0.5).all());
}

TEST(Lstm, ScalarUnroll) {
    LstmModel m(1, 1, 1, 1);
    VectorXd theta = VectorXd::Zero(m.num_params());
    m.layout().view(theta, LstmModel::w_block(0)) << 0.5, -0.3, 0.8, 0.2;
    m.layout().view(theta, LstmModel::u_block(0)) << 0.9, 0.9, 0.9, 0.9;
    m.layout().view(theta, LstmModel::b_block(0)) << 0.1, 1.0, -0.2, 0.0;
    m.layout().view(theta, m.dense_w_block()) << 1.5;
    m.layout().view(theta, m.dense_w_block() + 1) << 0.1;
    m.layout().view(theta, m.head_w_block()) << 2.0, -1.0;
    m.layout().view(theta, m.head_w_block() + 1) << 0.3, 0.0;
    const double i = sig(0.6), f = sig(0.7), g = std::tanh(0.6), o = sig(0.2);
    const double c = f * 0.0 + i * g;
    const double h = o * std::tanh(c);
    const double r = std::max(0.0, 1.5 * h + 0.1);
    EXPECT_NEAR(m.predict(theta, MatrixXd::Ones(1, 1)).p_up, sig(2.0 * r + 0.3 - (-1.0 * r)), 1e-15);
}

TEST(Lstm, StreamingConsistency) {
    LstmModel m(3, 4);
    const VectorXd theta = m.init(5);
    const MatrixXd w = MatrixXd::Random(3, 9);
    const MatrixXd whole = m.forward(theta, columns(w));
    LstmState state;
    const MatrixXd a = m.forward_stream(theta, columns(w.leftCols(4)), state);
    const MatrixXd b = m.forward_stream(theta, columns(w.rightCols(5)), state);
    EXPECT_EQ((a - whole.topRows(4)).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ((b - whole.bottomRows(5)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Lstm, FutureInputsDoNotLeak) {
    LstmModel m(3, 4);
    const VectorXd theta = m.init(6);
    const MatrixXd w = MatrixXd::Random(3, 8);
    const MatrixXd full = m.forward(theta, columns(w));
    for (int t = 1; t <= 8; ++t) {
        const MatrixXd cut = m.forward(theta, columns(w.leftCols(t)));
        EXPECT_EQ((cut - full.topRows(t)).cwiseAbs().maxCoeff(), 0.0);
    }
}

TEST(Models, DimensionMismatch) {
    LstmModel m(3, 4);
    const VectorXd theta = m.init(1);
    try {
        (void)m.predict(theta, MatrixXd::Random(4, 2));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::DimensionMismatch);
    }
}

TEST(Models, ProbabilitiesNormalized) {
    Rng rng(3);
    std::vector<std::unique_ptr<Model>> all;
    all.push_back(std::make_unique<LinearModel>(4, 3));
    all.push_back(std::make_unique<MlpModel>(4, std::vector<std::size_t>{6, 5}));
    all.push_back(std::make_unique<LstmModel>(4, 5));
    for (const auto& m : all) {
        for (int rep = 0; rep < 20; ++rep) {
            const VectorXd theta = m->init(static_cast<std::uint64_t>(rep)) * 3.0;
            const auto batch = testkit::random_batch(4, 5, 3, rng);
            const MatrixXd p = m->forward(theta, batch.x);
            for (Eigen::Index i = 0; i < p.size(); ++i) {
                const auto pr = Prediction{p.data()[i], 1.0 - p.data()[i]};
                ASSERT_NEAR(pr.p_up + pr.p_down, 1.0, 1e-9);
                ASSERT_GE(pr.p_up, 0.0);
                ASSERT_LE(pr.p_up, 1.0);
            }
        }
    }
}

TEST(Loss, PerfectAndHalf) {
    LinearModel m(1, 1);
    VectorXd theta = VectorXd::Zero(m.num_params());
    features::Batch batch;
    batch.x = {MatrixXd::Ones(1, 2)};
    batch.labels = Eigen::Vector2i(1, 1);
    batch.step_labels = Eigen::MatrixXi::Ones(1, 2);
    EXPECT_NEAR(m.loss_and_gradient(theta, batch, LossMode::Terminal, 0.0, nullptr), std::log(2.0), 1e-15);
    m.layout().view(theta, LinearModel::kC) << 800.0, 0.0;
    const double l2 = 1e-5;
    EXPECT_NEAR(m.loss_and_gradient(theta, batch, LossMode::Terminal, l2, nullptr), l2 * 800.0 * 800.0, 1e-12);
    batch.labels = Eigen::Vector2i(-1, -1);
    const double clamped = m.loss_and_gradient(theta, batch, LossMode::Terminal, 0.0, nullptr);
    EXPECT_TRUE(std::isfinite(clamped));
    EXPECT_NEAR(clamped, -std::log(kProbabilityFloor), 1e-9);
}

TEST(Gradient, PenaltyAlone) {
    LstmModel m(4, 5);
    const VectorXd theta = m.init(9);
    Rng rng(1);
    const auto batch = testkit::random_batch(4, 3, 4, rng);
    VectorXd g0, g1;
    (void)m.loss_and_gradient(theta, batch, LossMode::Terminal, 0.0, &g0);
    (void)m.loss_and_gradient(theta, batch, LossMode::Terminal, 0.25, &g1);
    const VectorXd expect = 2.0 * 0.25 * m.layout().penalty_mask().cwiseProduct(theta);
    EXPECT_LT((g1 - g0 - expect).cwiseAbs().maxCoeff(), 1e-14);
    // biases carry no penalty
    const auto& b = m.layout()[LstmModel::b_block(0)];
    EXPECT_EQ((g1 - g0).segment(b.offset, b.rows).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Gradient, BatchIsMeanOfSamples) {
    MlpModel m(4, {5});
    const VectorXd theta = m.init(2);
    Rng rng(2);
    const auto batch = testkit::random_batch(4, 3, 6, rng);
    VectorXd whole;
    (void)m.loss_and_gradient(theta, batch, LossMode::Terminal, 0.0, &whole);
    VectorXd mean = VectorXd::Zero(theta.size());
    for (Eigen::Index j = 0; j < 6; ++j) {
        features::Batch one;
        for (const auto& x : batch.x) one.x.emplace_back(x.col(j));
        one.labels = batch.labels.segment(j, 1);
        one.step_labels = batch.step_labels.col(j);
        VectorXd g;
        (void)m.loss_and_gradient(theta, one, LossMode::Terminal, 0.0, &g);
        mean += g / 6.0;
    }
    EXPECT_LT((mean - whole).cwiseAbs().maxCoeff(), 1e-14);
}

class GradientCheck : public ::testing::TestWithParam<std::tuple<Family, LossMode>> {};

TEST_P(GradientCheck, FiniteDifferences) {
    const auto [family, mode] = GetParam();
    std::unique_ptr<Model> m;
    if (family == Family::Linear) m = std::make_unique<LinearModel>(4, 5);
    if (family == Family::Mlp) m = std::make_unique<MlpModel>(4, std::vector<std::size_t>{5, 5});
    if (family == Family::Lstm) m = std::make_unique<LstmModel>(4, 5);
    Rng rng(77);
    for (std::uint64_t rep = 0; rep < 3; ++rep) {
        const auto batch = testkit::random_batch(4, 7, 8, rng);
        VectorXd theta = m->init(rep);
        for (Eigen::Index i = 0; i < theta.size(); ++i) theta[i] += 0.1 * normal(rng);  // biases off zero
        const auto r = testkit::finite_difference_check(*m, theta, batch, mode, 1e-3);
        EXPECT_LT(r.max_rel_error, 1e-4) << to_string(family) << " coordinate " << r.worst;
        EXPECT_EQ(r.checked, m->num_params());
    }
}

INSTANTIATE_TEST_SUITE_P(AllFamilies, GradientCheck,
                         ::testing::Combine(::testing::Values(Family::Linear, Family::Mlp, Family::Lstm),
                                            ::testing::Values(LossMode::Terminal, LossMode::PerStep)));

TEST(Factory, BuildsFromJson) {
    auto m = make_model(Json{{"family", "lstm"}, {"input_dim", 4}, {"units", 6}, {"layers", 2}});
    EXPECT_EQ(m->family(), Family::Lstm);
    EXPECT_EQ(make_model(m->architecture())->num_params(), m->num_params());
    EXPECT_THROW((void)make_model(Json{{"family", "rnn"}, {"input_dim", 4}}), Error);
    EXPECT_THROW((void)make_model(Json{{"family", "mlp"}, {"input_dim", 4}, {"units", 3}}), Error);
}
