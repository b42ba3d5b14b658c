#include "pfl/models/models.hpp"

#include <cmath>

#include <Eigen/Eigenvalues>

#include "pfl/error.hpp"
#include "pfl/random.hpp"

namespace pfl::models {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::RowVectorXd;
using Eigen::VectorXd;

std::string to_string(Family f) {
    switch (f) {
        case Family::Linear: return "linear";
        case Family::Mlp: return "mlp";
        case Family::Lstm: return "lstm";
    }
    return "linear";
}

Family family_from_string(const std::string& name) {
    if (name == "linear") return Family::Linear;
    if (name == "mlp") return Family::Mlp;
    if (name == "lstm") return Family::Lstm;
    throw Error(ErrorCode::InvalidConfig, "unknown model family '" + name + "'");
}

int predict_direction(const Prediction& p) noexcept { return p.p_up >= 0.5 ? 1 : -1; }

Prediction from_logit_gap(double gap) noexcept {
    // p_down computed directly so both stay accurate in the tails
    const double e = std::exp(-std::abs(gap));
    const double big = 1.0 / (1.0 + e);
    const double small = e / (1.0 + e);
    return gap >= 0 ? Prediction{big, small} : Prediction{small, big};
}

std::size_t ParamLayout::add(std::string name, Index rows, Index cols, bool penalized) {
    blocks_.push_back(Block{std::move(name), rows, cols, size_, penalized});
    size_ += rows * cols;
    return blocks_.size() - 1;
}

Eigen::Map<MatrixXd> ParamLayout::view(VectorXd& theta, std::size_t i) const {
    const Block& b = blocks_[i];
    return {theta.data() + b.offset, b.rows, b.cols};
}

Eigen::Map<const MatrixXd> ParamLayout::view(const VectorXd& theta, std::size_t i) const {
    const Block& b = blocks_[i];
    return {theta.data() + b.offset, b.rows, b.cols};
}

VectorXd ParamLayout::penalty_mask() const {
    VectorXd mask = VectorXd::Zero(size_);
    for (const Block& b : blocks_) {
        if (b.penalized) mask.segment(b.offset, b.rows * b.cols).setOnes();
    }
    return mask;
}

namespace {

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// Likelihood weights per step: weight(t, b) > 0 where the step is scored.
struct Targets {
    MatrixXd weight;  // T x B
    MatrixXd y_up;    // T x B, 1 for an up label
    std::size_t first = 0;
};

Targets targets_of(const features::Batch& batch, LossMode mode) {
    const auto steps = static_cast<Index>(batch.x.size());
    const auto b = static_cast<Index>(batch.size());
    Targets t{MatrixXd::Zero(steps, b), MatrixXd::Zero(steps, b), 0};
    if (b == 0 || steps == 0) throw Error(ErrorCode::InvalidArgument, "empty batch");
    if (mode == LossMode::Terminal) {
        for (Index j = 0; j < b; ++j) {
            t.weight(steps - 1, j) = 1.0 / static_cast<double>(b);
            t.y_up(steps - 1, j) = batch.labels[j] > 0 ? 1.0 : 0.0;
        }
        t.first = static_cast<std::size_t>(steps - 1);
        return t;
    }
    const auto scored = static_cast<double>((batch.step_labels.array() != 0).count());
    t.first = static_cast<std::size_t>(steps);
    for (Index s = 0; s < steps; ++s) {
        for (Index j = 0; j < b; ++j) {
            const int y = batch.step_labels(s, j);
            if (y == 0) continue;
            t.weight(s, j) = 1.0 / scored;
            t.y_up(s, j) = y > 0 ? 1.0 : 0.0;
            t.first = std::min(t.first, static_cast<std::size_t>(s));
        }
    }
    return t;
}

// Adds the scored likelihood at one step and returns d loss / d gap.
RowVectorXd score_step(const RowVectorXd& gap, const Targets& tg, Index step, double& loss) {
    RowVectorXd dgap = RowVectorXd::Zero(gap.size());
    for (Index j = 0; j < gap.size(); ++j) {
        const double w = tg.weight(step, j);
        if (w == 0.0) continue;
        const double p_up = sigmoid(gap[j]);
        const double up = tg.y_up(step, j);
        const double p = up > 0.5 ? p_up : 1.0 - p_up;
        if (p < kProbabilityFloor) {
            loss -= w * std::log(kProbabilityFloor);  // flat region, zero slope
            continue;
        }
        loss -= w * std::log(p);
        dgap[j] = w * (p_up - up);
    }
    return dgap;
}

double add_penalty(const ParamLayout& layout, const VectorXd& theta, double l2, VectorXd* grad) {
    if (l2 == 0.0) return 0.0;
    double total = 0.0;
    for (const auto& b : layout.blocks()) {
        if (!b.penalized) continue;
        auto seg = theta.segment(b.offset, b.rows * b.cols);
        total += seg.squaredNorm();
        if (grad != nullptr) grad->segment(b.offset, b.rows * b.cols) += 2.0 * l2 * seg;
    }
    return l2 * total;
}

void fill_uniform(Eigen::Map<MatrixXd> m, Rng& rng, double fan_in) {
    const double a = 1.0 / std::sqrt(fan_in);
    for (Index j = 0; j < m.cols(); ++j) {
        for (Index i = 0; i < m.rows(); ++i) m(i, j) = uniform_real(rng, -a, a);
    }
}

void check_finite(const MatrixXd& m, const char* what) {
    if (!m.allFinite()) throw Error(ErrorCode::NonFiniteActivation, std::string(what) + " is not finite");
}

// gap = row0 - row1 of a 2-row head applied to `in`, plus optional bias.
RowVectorXd head_gap(const Eigen::Map<const MatrixXd>& w, const MatrixXd& in) {
    return (w.row(0) - w.row(1)) * in;
}

}  // namespace

Prediction Model::predict(const VectorXd& theta, const MatrixXd& window) const {
    std::vector<MatrixXd> x;
    x.reserve(static_cast<std::size_t>(window.cols()));
    for (Index t = 0; t < window.cols(); ++t) x.emplace_back(window.col(t));
    const MatrixXd p = forward(theta, x);
    const double p_up = p(p.rows() - 1, 0);
    return Prediction{p_up, 1.0 - p_up};
}

void Model::check_input(const std::vector<MatrixXd>& x) const {
    if (x.empty()) throw Error(ErrorCode::DimensionMismatch, "empty window");
    for (const auto& m : x) {
        if (static_cast<std::size_t>(m.rows()) != input_dim() || m.cols() != x.front().cols()) {
            throw Error(ErrorCode::DimensionMismatch,
                        "input has " + std::to_string(m.rows()) + " rows, model expects " +
                            std::to_string(input_dim()));
        }
    }
}

// ---------------------------------------------------------------- linear

LinearModel::LinearModel(std::size_t input_dim, std::size_t state_dim) : d_(input_dim), m_(state_dim) {
    if (d_ == 0 || m_ == 0) throw Error(ErrorCode::InvalidArgument, "linear model needs d, m >= 1");
    const auto d = static_cast<Index>(d_);
    const auto m = static_cast<Index>(m_);
    layout_.add("A", m, m, true);
    layout_.add("B", m, d, true);
    layout_.add("C", 2, d, true);
    layout_.add("D", 2, m, true);
}

VectorXd LinearModel::init(std::uint64_t seed) const {
    Rng rng(seed);
    VectorXd theta(num_params());
    fill_uniform(layout_.view(theta, kA), rng, static_cast<double>(m_));
    fill_uniform(layout_.view(theta, kB), rng, static_cast<double>(d_));
    fill_uniform(layout_.view(theta, kC), rng, static_cast<double>(d_));
    fill_uniform(layout_.view(theta, kD), rng, static_cast<double>(m_));
    auto a = layout_.view(theta, kA);
    const double radius = Eigen::EigenSolver<MatrixXd>(MatrixXd(a), false).eigenvalues().cwiseAbs().maxCoeff();
    if (radius >= 0.9) a *= 0.9 / radius;
    return theta;
}

MatrixXd LinearModel::forward(const VectorXd& theta, const std::vector<MatrixXd>& x) const {
    check_input(x);
    const auto a = layout_.view(theta, kA);
    const auto b = layout_.view(theta, kB);
    const auto c = layout_.view(theta, kC);
    const auto dm = layout_.view(theta, kD);
    const Index batch = x.front().cols();
    MatrixXd out(static_cast<Index>(x.size()), batch);
    MatrixXd h = MatrixXd::Zero(static_cast<Index>(m_), batch);
    for (std::size_t t = 0; t < x.size(); ++t) {
        h = a * h + b * x[t];
        const RowVectorXd gap = head_gap(c, x[t]) + head_gap(dm, h);
        for (Index j = 0; j < batch; ++j) out(static_cast<Index>(t), j) = sigmoid(gap[j]);
    }
    check_finite(out, "linear output");
    return out;
}

double LinearModel::loss_and_gradient(const VectorXd& theta, const features::Batch& batch, LossMode mode,
                                      double l2, VectorXd* grad) const {
    check_input(batch.x);
    const Targets tg = targets_of(batch, mode);
    const auto a = layout_.view(theta, kA);
    const auto b = layout_.view(theta, kB);
    const auto c = layout_.view(theta, kC);
    const auto dm = layout_.view(theta, kD);
    const std::size_t steps = batch.x.size();
    const Index nb = batch.x.front().cols();

    std::vector<MatrixXd> h(steps + 1, MatrixXd::Zero(static_cast<Index>(m_), nb));
    std::vector<RowVectorXd> dgap(steps);
    double loss = 0.0;
    for (std::size_t t = 0; t < steps; ++t) {
        h[t + 1] = a * h[t] + b * batch.x[t];
        if (t < tg.first) continue;
        const RowVectorXd gap = head_gap(c, batch.x[t]) + head_gap(dm, h[t + 1]);
        check_finite(gap, "linear logits");
        dgap[t] = score_step(gap, tg, static_cast<Index>(t), loss);
    }
    if (grad != nullptr) {
        grad->setZero(num_params());
        auto ga = layout_.view(*grad, kA);
        auto gb = layout_.view(*grad, kB);
        auto gc = layout_.view(*grad, kC);
        auto gd = layout_.view(*grad, kD);
        MatrixXd delta = MatrixXd::Zero(static_cast<Index>(m_), nb);
        for (std::size_t t = steps; t-- > 0;) {
            if (t >= tg.first) {
                MatrixXd dz(2, nb);
                dz.row(0) = dgap[t];
                dz.row(1) = -dgap[t];
                gc.noalias() += dz * batch.x[t].transpose();
                gd.noalias() += dz * h[t + 1].transpose();
                delta.noalias() += dm.transpose() * dz;
            }
            ga.noalias() += delta * h[t].transpose();
            gb.noalias() += delta * batch.x[t].transpose();
            delta = a.transpose() * delta;
        }
    }
    return loss + add_penalty(layout_, theta, l2, grad);
}

Json LinearModel::architecture() const {
    return Json{{"family", "linear"}, {"input_dim", d_}, {"state_dim", m_}};
}

// ---------------------------------------------------------------- mlp

MlpModel::MlpModel(std::size_t input_dim, std::vector<std::size_t> hidden)
    : d_(input_dim), hidden_(std::move(hidden)) {
    if (d_ == 0) throw Error(ErrorCode::InvalidArgument, "mlp needs d >= 1");
    std::size_t in = d_;
    for (std::size_t l = 0; l < hidden_.size(); ++l) {
        if (hidden_[l] == 0) throw Error(ErrorCode::InvalidArgument, "empty hidden layer");
        layout_.add("W" + std::to_string(l), static_cast<Index>(hidden_[l]), static_cast<Index>(in), true);
        layout_.add("b" + std::to_string(l), static_cast<Index>(hidden_[l]), 1, false);
        in = hidden_[l];
    }
    layout_.add("W_out", 2, static_cast<Index>(in), true);
    layout_.add("b_out", 2, 1, false);
}

VectorXd MlpModel::init(std::uint64_t seed) const {
    Rng rng(seed);
    VectorXd theta = VectorXd::Zero(num_params());
    for (std::size_t l = 0; l <= hidden_.size(); ++l) {
        auto w = layout_.view(theta, weight_block(l));
        fill_uniform(w, rng, static_cast<double>(w.cols()));
    }
    return theta;
}

MatrixXd MlpModel::forward(const VectorXd& theta, const std::vector<MatrixXd>& x) const {
    check_input(x);
    const std::size_t depth = hidden_.size();
    MatrixXd out(static_cast<Index>(x.size()), x.front().cols());
    for (std::size_t t = 0; t < x.size(); ++t) {
        MatrixXd a = x[t];
        for (std::size_t l = 0; l < depth; ++l) {
            a = ((layout_.view(theta, weight_block(l)) * a).colwise() +
                 layout_.view(theta, weight_block(l) + 1).col(0))
                    .cwiseMax(0.0);
        }
        const auto w = layout_.view(theta, weight_block(depth));
        const auto bias = layout_.view(theta, weight_block(depth) + 1);
        const RowVectorXd gap = head_gap(w, a).array() + (bias(0, 0) - bias(1, 0));
        for (Index j = 0; j < gap.size(); ++j) out(static_cast<Index>(t), j) = sigmoid(gap[j]);
    }
    check_finite(out, "mlp output");
    return out;
}

double MlpModel::loss_and_gradient(const VectorXd& theta, const features::Batch& batch, LossMode mode,
                                   double l2, VectorXd* grad) const {
    check_input(batch.x);
    const Targets tg = targets_of(batch, mode);
    const std::size_t depth = hidden_.size();
    if (grad != nullptr) grad->setZero(num_params());
    double loss = 0.0;
    std::vector<MatrixXd> acts(depth + 1);
    for (std::size_t t = tg.first; t < batch.x.size(); ++t) {
        const auto step = static_cast<Index>(t);
        if (tg.weight.row(step).isZero()) continue;
        acts[0] = batch.x[t];
        for (std::size_t l = 0; l < depth; ++l) {
            acts[l + 1] = ((layout_.view(theta, weight_block(l)) * acts[l]).colwise() +
                           layout_.view(theta, weight_block(l) + 1).col(0))
                              .cwiseMax(0.0);
        }
        const auto w = layout_.view(theta, weight_block(depth));
        const auto bias = layout_.view(theta, weight_block(depth) + 1);
        const RowVectorXd gap = head_gap(w, acts[depth]).array() + (bias(0, 0) - bias(1, 0));
        check_finite(gap, "mlp logits");
        const RowVectorXd dgap = score_step(gap, tg, step, loss);
        if (grad == nullptr) continue;

        MatrixXd dz(2, dgap.size());
        dz.row(0) = dgap;
        dz.row(1) = -dgap;
        layout_.view(*grad, weight_block(depth)).noalias() += dz * acts[depth].transpose();
        layout_.view(*grad, weight_block(depth) + 1) += dz.rowwise().sum();
        MatrixXd da = w.transpose() * dz;
        for (std::size_t l = depth; l-- > 0;) {
            // acts[l + 1] > 0 exactly where the pre-activation was positive
            da = (acts[l + 1].array() > 0.0).select(da, 0.0);
            layout_.view(*grad, weight_block(l)).noalias() += da * acts[l].transpose();
            layout_.view(*grad, weight_block(l) + 1) += da.rowwise().sum();
            if (l > 0) da = layout_.view(theta, weight_block(l)).transpose() * da;
        }
    }
    return loss + add_penalty(layout_, theta, l2, grad);
}

Json MlpModel::architecture() const {
    return Json{{"family", "mlp"}, {"input_dim", d_}, {"hidden", hidden_}};
}

// ---------------------------------------------------------------- lstm

struct LstmModel::Tape {
    // [t][l]
    std::vector<std::vector<MatrixXd>> input, gates, c_prev, c, tanh_c, h_prev;
    std::vector<MatrixXd> dense;  // post-ReLU dense activations per step
    std::vector<MatrixXd> top;    // top-layer h per step
};

LstmModel::LstmModel(std::size_t input_dim, std::size_t units, std::size_t layers, std::size_t dense_units)
    : d_(input_dim), n_(units), layers_(layers), dense_(dense_units == 0 ? units : dense_units) {
    if (d_ == 0 || n_ == 0 || layers_ == 0) {
        throw Error(ErrorCode::InvalidArgument, "lstm needs d, units, layers >= 1");
    }
    const auto n = static_cast<Index>(n_);
    for (std::size_t l = 0; l < layers_; ++l) {
        const Index in = l == 0 ? static_cast<Index>(d_) : n;
        layout_.add("W" + std::to_string(l), 4 * n, in, true);
        layout_.add("U" + std::to_string(l), 4 * n, n, true);
        layout_.add("b" + std::to_string(l), 4 * n, 1, false);
    }
    layout_.add("W_dense", static_cast<Index>(dense_), n, true);
    layout_.add("b_dense", static_cast<Index>(dense_), 1, false);
    layout_.add("W_out", 2, static_cast<Index>(dense_), true);
    layout_.add("b_out", 2, 1, false);
}

VectorXd LstmModel::init(std::uint64_t seed) const {
    Rng rng(seed);
    VectorXd theta = VectorXd::Zero(num_params());
    const auto n = static_cast<Index>(n_);
    for (std::size_t l = 0; l < layers_; ++l) {
        auto w = layout_.view(theta, w_block(l));
        fill_uniform(w, rng, static_cast<double>(w.cols()));
        fill_uniform(layout_.view(theta, u_block(l)), rng, static_cast<double>(n_));
        layout_.view(theta, b_block(l)).middleRows(n, n).setOnes();  // forget gate
    }
    fill_uniform(layout_.view(theta, dense_w_block()), rng, static_cast<double>(n_));
    fill_uniform(layout_.view(theta, head_w_block()), rng, static_cast<double>(dense_));
    return theta;
}

MatrixXd LstmModel::run(const VectorXd& theta, const std::vector<MatrixXd>& x, LstmState* state, Tape* tape,
                        std::size_t first_output_step) const {
    check_input(x);
    const auto n = static_cast<Index>(n_);
    const Index batch = x.front().cols();
    const std::size_t steps = x.size();
    std::vector<MatrixXd> h(layers_, MatrixXd::Zero(n, batch));
    std::vector<MatrixXd> c(layers_, MatrixXd::Zero(n, batch));
    if (state != nullptr && !state->h.empty()) {
        if (state->h.size() != layers_ || state->h.front().cols() != batch) {
            throw Error(ErrorCode::DimensionMismatch, "carried state does not match the batch");
        }
        h = state->h;
        c = state->c;
    }
    if (tape != nullptr) {
        for (auto* v : {&tape->input, &tape->gates, &tape->c_prev, &tape->c, &tape->tanh_c, &tape->h_prev}) {
            v->assign(steps, std::vector<MatrixXd>(layers_));
        }
        tape->dense.assign(steps, MatrixXd());
        tape->top.assign(steps, MatrixXd());
    }
    const auto wd = layout_.view(theta, dense_w_block());
    const auto bd = layout_.view(theta, dense_w_block() + 1);
    const auto wo = layout_.view(theta, head_w_block());
    const auto bo = layout_.view(theta, head_w_block() + 1);

    MatrixXd out = MatrixXd::Zero(static_cast<Index>(steps), batch);  // logit gaps
    MatrixXd gates(4 * n, batch);
    for (std::size_t t = 0; t < steps; ++t) {
        const MatrixXd* in = &x[t];
        for (std::size_t l = 0; l < layers_; ++l) {
            gates.noalias() = layout_.view(theta, w_block(l)) * *in;
            gates.noalias() += layout_.view(theta, u_block(l)) * h[l];
            gates.colwise() += layout_.view(theta, b_block(l)).col(0);
            auto i = gates.middleRows(0, n).array();
            auto f = gates.middleRows(n, n).array();
            auto g = gates.middleRows(2 * n, n).array();
            auto o = gates.middleRows(3 * n, n).array();
            i = 1.0 / (1.0 + (-i).exp());
            f = 1.0 / (1.0 + (-f).exp());
            g = g.tanh();
            o = 1.0 / (1.0 + (-o).exp());
            if (tape != nullptr) {
                tape->input[t][l] = *in;
                tape->h_prev[t][l] = h[l];
                tape->c_prev[t][l] = c[l];
            }
            c[l] = (f * c[l].array() + i * g).matrix();
            const MatrixXd tc = c[l].array().tanh().matrix();
            h[l] = (o * tc.array()).matrix();
            if (tape != nullptr) {
                tape->gates[t][l] = gates;
                tape->c[t][l] = c[l];
                tape->tanh_c[t][l] = tc;
            }
            in = &h[l];
        }
        if (t < first_output_step) continue;
        const MatrixXd r = ((wd * h.back()).colwise() + bd.col(0)).cwiseMax(0.0);
        const RowVectorXd gap = head_gap(wo, r).array() + (bo(0, 0) - bo(1, 0));
        if (!gap.allFinite()) throw Error(ErrorCode::NonFiniteActivation, "lstm logits are not finite");
        out.row(static_cast<Index>(t)) = gap;
        if (tape != nullptr) {
            tape->dense[t] = r;
            tape->top[t] = h.back();
        }
    }
    if (state != nullptr) {
        state->h = std::move(h);
        state->c = std::move(c);
    }
    return out;
}

MatrixXd LstmModel::forward(const VectorXd& theta, const std::vector<MatrixXd>& x) const {
    return run(theta, x, nullptr, nullptr, 0).unaryExpr([](double g) { return sigmoid(g); });
}

MatrixXd LstmModel::forward_stream(const VectorXd& theta, const std::vector<MatrixXd>& x,
                                   LstmState& state) const {
    return run(theta, x, &state, nullptr, 0).unaryExpr([](double g) { return sigmoid(g); });
}

double LstmModel::loss_and_gradient(const VectorXd& theta, const features::Batch& batch, LossMode mode,
                                    double l2, VectorXd* grad) const {
    const Targets tg = targets_of(batch, mode);
    Tape tape;
    const MatrixXd gaps = run(theta, batch.x, nullptr, grad != nullptr ? &tape : nullptr, tg.first);
    const std::size_t steps = batch.x.size();
    const auto n = static_cast<Index>(n_);
    const Index nb = batch.x.front().cols();

    double loss = 0.0;
    std::vector<RowVectorXd> dgap(steps);
    for (std::size_t t = tg.first; t < steps; ++t) {
        dgap[t] = score_step(gaps.row(static_cast<Index>(t)), tg, static_cast<Index>(t), loss);
    }
    if (grad == nullptr) return loss + add_penalty(layout_, theta, l2, nullptr);

    grad->setZero(num_params());
    const auto wd = layout_.view(theta, dense_w_block());
    const auto wo = layout_.view(theta, head_w_block());
    std::vector<MatrixXd> dh_next(layers_, MatrixXd::Zero(n, nb));
    std::vector<MatrixXd> dc_next(layers_, MatrixXd::Zero(n, nb));
    MatrixXd da(4 * n, nb);
    for (std::size_t t = steps; t-- > 0;) {
        MatrixXd dh_above = MatrixXd::Zero(n, nb);
        if (t >= tg.first && !dgap[t].isZero()) {
            MatrixXd dz(2, nb);
            dz.row(0) = dgap[t];
            dz.row(1) = -dgap[t];
            layout_.view(*grad, head_w_block()).noalias() += dz * tape.dense[t].transpose();
            layout_.view(*grad, head_w_block() + 1) += dz.rowwise().sum();
            MatrixXd dr = wo.transpose() * dz;
            dr = (tape.dense[t].array() > 0.0).select(dr, 0.0);
            layout_.view(*grad, dense_w_block()).noalias() += dr * tape.top[t].transpose();
            layout_.view(*grad, dense_w_block() + 1) += dr.rowwise().sum();
            dh_above.noalias() = wd.transpose() * dr;
        }
        for (std::size_t l = layers_; l-- > 0;) {
            const MatrixXd& gates = tape.gates[t][l];
            const auto i = gates.middleRows(0, n).array();
            const auto f = gates.middleRows(n, n).array();
            const auto g = gates.middleRows(2 * n, n).array();
            const auto o = gates.middleRows(3 * n, n).array();
            const auto tc = tape.tanh_c[t][l].array();
            const MatrixXd dh = dh_above + dh_next[l];
            const MatrixXd dc = dc_next[l].array() + dh.array() * o * (1.0 - tc.square());
            da.middleRows(0, n) = (dc.array() * g * i * (1.0 - i)).matrix();
            da.middleRows(n, n) = (dc.array() * tape.c_prev[t][l].array() * f * (1.0 - f)).matrix();
            da.middleRows(2 * n, n) = (dc.array() * i * (1.0 - g.square())).matrix();
            da.middleRows(3 * n, n) = (dh.array() * tc * o * (1.0 - o)).matrix();
            layout_.view(*grad, w_block(l)).noalias() += da * tape.input[t][l].transpose();
            layout_.view(*grad, u_block(l)).noalias() += da * tape.h_prev[t][l].transpose();
            layout_.view(*grad, b_block(l)) += da.rowwise().sum();
            dh_next[l].noalias() = layout_.view(theta, u_block(l)).transpose() * da;
            dc_next[l] = (dc.array() * f).matrix();
            if (l > 0) dh_above.noalias() = layout_.view(theta, w_block(l)).transpose() * da;
        }
    }
    return loss + add_penalty(layout_, theta, l2, grad);
}

Json LstmModel::architecture() const {
    return Json{{"family", "lstm"}, {"input_dim", d_}, {"units", n_}, {"layers", layers_}, {"dense_units", dense_}};
}

std::unique_ptr<Model> make_model(const Json& arch) {
    const std::string where = "model";
    std::string family;
    read_required(arch, "family", family, where);
    std::size_t d = 0;
    read_required(arch, "input_dim", d, where);
    switch (family_from_string(family)) {
        case Family::Linear: {
            reject_unknown_keys(arch, {"family", "input_dim", "state_dim"}, where);
            std::size_t m = 4;
            read_optional(arch, "state_dim", m, where);
            return std::make_unique<LinearModel>(d, m);
        }
        case Family::Mlp: {
            reject_unknown_keys(arch, {"family", "input_dim", "hidden"}, where);
            std::vector<std::size_t> hidden{32, 32};
            read_optional(arch, "hidden", hidden, where);
            return std::make_unique<MlpModel>(d, hidden);
        }
        case Family::Lstm: {
            reject_unknown_keys(arch, {"family", "input_dim", "units", "layers", "dense_units"}, where);
            std::size_t units = 50, layers = 3, dense = 0;
            read_optional(arch, "units", units, where);
            read_optional(arch, "layers", layers, where);
            read_optional(arch, "dense_units", dense, where);
            return std::make_unique<LstmModel>(d, units, layers, dense);
        }
    }
    throw Error(ErrorCode::InvalidConfig, "unknown model family");
}

double mean_nll(const VectorXd& p_up, const Eigen::VectorXi& labels) {
    double total = 0.0;
    for (Index j = 0; j < p_up.size(); ++j) {
        const double p = labels[j] > 0 ? p_up[j] : 1.0 - p_up[j];
        total -= std::log(std::max(p, kProbabilityFloor));
    }
    return p_up.size() == 0 ? 0.0 : total / static_cast<double>(p_up.size());
}

}  // namespace pfl::models
