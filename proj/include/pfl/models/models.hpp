#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pfl/features/featurizer.hpp"
#include "pfl/json_util.hpp"

namespace pfl::models {

enum class Family : std::uint8_t { Linear, Mlp, Lstm };

std::string to_string(Family f);
Family family_from_string(const std::string& name);

/// Where the likelihood is evaluated inside a window.
enum class LossMode : std::uint8_t {
    Terminal,  // last step only, labeled by the move after the window
    PerStep,   // every non-padded step, each labeled by the move that follows it
};

struct Prediction {
    double p_up = 0.5;
    double p_down = 0.5;
};

/// +1 iff p_up >= 0.5: an exact tie resolves to +1.
int predict_direction(const Prediction& p) noexcept;

/// Builds a Prediction from the logit difference z_up - z_down.
Prediction from_logit_gap(double gap) noexcept;

inline constexpr double kProbabilityFloor = 1e-12;

/// Named blocks inside one flat parameter vector.
class ParamLayout {
public:
    struct Block {
        std::string name;
        Eigen::Index rows = 0;
        Eigen::Index cols = 0;
        Eigen::Index offset = 0;
        bool penalized = true;  // weights yes, biases no
    };

    std::size_t add(std::string name, Eigen::Index rows, Eigen::Index cols, bool penalized);
    [[nodiscard]] Eigen::Index size() const noexcept { return size_; }
    [[nodiscard]] const std::vector<Block>& blocks() const noexcept { return blocks_; }
    [[nodiscard]] const Block& operator[](std::size_t i) const { return blocks_[i]; }

    [[nodiscard]] Eigen::Map<Eigen::MatrixXd> view(Eigen::VectorXd& theta, std::size_t i) const;
    [[nodiscard]] Eigen::Map<const Eigen::MatrixXd> view(const Eigen::VectorXd& theta, std::size_t i) const;

    /// 1 for penalized coordinates, 0 otherwise.
    [[nodiscard]] Eigen::VectorXd penalty_mask() const;

private:
    std::vector<Block> blocks_;
    Eigen::Index size_ = 0;
};

/// Architecture only; parameters live in a separate flat vector so one model
/// object can be shared read-only by many workers.
class Model {
public:
    virtual ~Model() = default;

    [[nodiscard]] virtual Family family() const noexcept = 0;
    [[nodiscard]] virtual std::size_t input_dim() const noexcept = 0;
    [[nodiscard]] const ParamLayout& layout() const noexcept { return layout_; }
    [[nodiscard]] Eigen::Index num_params() const noexcept { return layout_.size(); }

    /// Seeded initialization (weights uniform in +-1/sqrt(fan-in)).
    [[nodiscard]] virtual Eigen::VectorXd init(std::uint64_t seed) const = 0;

    /// p_up at every step: result(t, b) for window step t of sample b.
    /// x holds one d x B matrix per step.
    [[nodiscard]] virtual Eigen::MatrixXd forward(const Eigen::VectorXd& theta,
                                                  const std::vector<Eigen::MatrixXd>& x) const = 0;

    /// Regularized mean negative log-likelihood; fills `grad` (resized) when
    /// non-null with the exact gradient.
    virtual double loss_and_gradient(const Eigen::VectorXd& theta, const features::Batch& batch,
                                     LossMode mode, double l2, Eigen::VectorXd* grad) const = 0;

    [[nodiscard]] virtual Json architecture() const = 0;

    /// Prediction after the last step of one window (d x T).
    [[nodiscard]] Prediction predict(const Eigen::VectorXd& theta, const Eigen::MatrixXd& window) const;

protected:
    void check_input(const std::vector<Eigen::MatrixXd>& x) const;
    ParamLayout layout_;
};

/// h_t = A h_{t-1} + B x_t, logits = C x_t + D h_t, logits ordered (up, down).
class LinearModel final : public Model {
public:
    LinearModel(std::size_t input_dim, std::size_t state_dim);

    [[nodiscard]] Family family() const noexcept override { return Family::Linear; }
    [[nodiscard]] std::size_t input_dim() const noexcept override { return d_; }
    [[nodiscard]] std::size_t state_dim() const noexcept { return m_; }
    [[nodiscard]] Eigen::VectorXd init(std::uint64_t seed) const override;
    [[nodiscard]] Eigen::MatrixXd forward(const Eigen::VectorXd& theta,
                                          const std::vector<Eigen::MatrixXd>& x) const override;
    double loss_and_gradient(const Eigen::VectorXd& theta, const features::Batch& batch, LossMode mode,
                             double l2, Eigen::VectorXd* grad) const override;
    [[nodiscard]] Json architecture() const override;

    static constexpr std::size_t kA = 0, kB = 1, kC = 2, kD = 3;

private:
    std::size_t d_;
    std::size_t m_;
};

/// ReLU hidden layers applied to each step's state, 2-way softmax head.
class MlpModel final : public Model {
public:
    MlpModel(std::size_t input_dim, std::vector<std::size_t> hidden);

    [[nodiscard]] Family family() const noexcept override { return Family::Mlp; }
    [[nodiscard]] std::size_t input_dim() const noexcept override { return d_; }
    [[nodiscard]] const std::vector<std::size_t>& hidden() const noexcept { return hidden_; }
    [[nodiscard]] Eigen::VectorXd init(std::uint64_t seed) const override;
    [[nodiscard]] Eigen::MatrixXd forward(const Eigen::VectorXd& theta,
                                          const std::vector<Eigen::MatrixXd>& x) const override;
    double loss_and_gradient(const Eigen::VectorXd& theta, const features::Batch& batch, LossMode mode,
                             double l2, Eigen::VectorXd* grad) const override;
    [[nodiscard]] Json architecture() const override;

    /// Block index of layer l's weight; its bias follows.
    [[nodiscard]] static std::size_t weight_block(std::size_t l) noexcept { return 2 * l; }

private:
    std::size_t d_;
    std::vector<std::size_t> hidden_;
};

/// Carried recurrent state: one (h, c) pair per layer, each n x B.
struct LstmState {
    std::vector<Eigen::MatrixXd> h;
    std::vector<Eigen::MatrixXd> c;
};

/// Stacked LSTM (gates ordered i, f, g, o), then a ReLU layer and a 2-way
/// softmax head evaluated at every step.
class LstmModel final : public Model {
public:
    LstmModel(std::size_t input_dim, std::size_t units, std::size_t layers = 3,
              std::size_t dense_units = 0);

    [[nodiscard]] Family family() const noexcept override { return Family::Lstm; }
    [[nodiscard]] std::size_t input_dim() const noexcept override { return d_; }
    [[nodiscard]] std::size_t units() const noexcept { return n_; }
    [[nodiscard]] std::size_t layers() const noexcept { return layers_; }
    [[nodiscard]] std::size_t dense_units() const noexcept { return dense_; }
    [[nodiscard]] Eigen::VectorXd init(std::uint64_t seed) const override;
    [[nodiscard]] Eigen::MatrixXd forward(const Eigen::VectorXd& theta,
                                          const std::vector<Eigen::MatrixXd>& x) const override;
    double loss_and_gradient(const Eigen::VectorXd& theta, const features::Batch& batch, LossMode mode,
                             double l2, Eigen::VectorXd* grad) const override;
    [[nodiscard]] Json architecture() const override;

    /// Forward from `state` (zero state when empty); on return `state`
    /// holds the state after the last step.
    Eigen::MatrixXd forward_stream(const Eigen::VectorXd& theta, const std::vector<Eigen::MatrixXd>& x,
                                   LstmState& state) const;

    /// Block indices: layer l has W (4n x in), U (4n x n), b (4n).
    [[nodiscard]] static std::size_t w_block(std::size_t l) noexcept { return 3 * l; }
    [[nodiscard]] static std::size_t u_block(std::size_t l) noexcept { return 3 * l + 1; }
    [[nodiscard]] static std::size_t b_block(std::size_t l) noexcept { return 3 * l + 2; }
    [[nodiscard]] std::size_t dense_w_block() const noexcept { return 3 * layers_; }
    [[nodiscard]] std::size_t head_w_block() const noexcept { return 3 * layers_ + 2; }

private:
    struct Tape;
    Eigen::MatrixXd run(const Eigen::VectorXd& theta, const std::vector<Eigen::MatrixXd>& x,
                        LstmState* state, Tape* tape, std::size_t first_output_step) const;

    std::size_t d_;
    std::size_t n_;
    std::size_t layers_;
    std::size_t dense_;
};

/// {"family": "lstm", "input_dim": d, "units": n, ...}
std::unique_ptr<Model> make_model(const Json& architecture);

/// Mean negative log-likelihood of labels (+1/-1) under p_up, with the
/// probability floor applied before the log.
double mean_nll(const Eigen::VectorXd& p_up, const Eigen::VectorXi& labels);

}  // namespace pfl::models
