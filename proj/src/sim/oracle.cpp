#include <cmath>
#include <string>
#include <vector>

#include <Eigen/SparseCore>
#include <Eigen/SparseLU>

#include "pfl/error.hpp"
#include "pfl/sim/market_sim.hpp"

namespace pfl::sim {

FirstPassageOracle::FirstPassageOracle(const SimConfig& cfg, int truncation) : n_(truncation) {
    validate(cfg);
    if (cfg.regime != Regime::Memoryless) {
        throw Error(ErrorCode::NotMemoryless, cfg.stock_id + ": oracle needs the memoryless regime");
    }
    if (truncation < 1) throw Error(ErrorCode::InvalidArgument, "truncation must be >= 1");

    const int n = truncation;
    const double lambda = cfg.limit_rate;
    auto death = [&](int q) { return cfg.market_rate + cfg.cancel_rate * q; };
    auto sweep = [&](int q) {
        return cfg.sweep_rate > 0.0 && q >= cfg.sweep_threshold ? cfg.sweep_rate : 0.0;
    };
    auto index = [n](int i, int j) { return (i - 1) * n + (j - 1); };

    const int unknowns = n * n;
    std::vector<Eigen::Triplet<double>> entries;
    entries.reserve(static_cast<std::size_t>(unknowns) * 5);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(unknowns);

    // i: bid queue, j: ask queue. Bid reaching zero first scores 1.
    for (int i = 1; i <= n; ++i) {
        for (int j = 1; j <= n; ++j) {
            const int row = index(i, j);
            const double birth_i = i < n ? lambda : 0.0;
            const double birth_j = j < n ? lambda : 0.0;
            const double out = birth_i + birth_j + death(i) + death(j) + sweep(i) + sweep(j);
            entries.emplace_back(row, row, out);
            if (birth_i > 0.0) entries.emplace_back(row, index(i + 1, j), -birth_i);
            if (birth_j > 0.0) entries.emplace_back(row, index(i, j + 1), -birth_j);
            if (i > 1) {
                entries.emplace_back(row, index(i - 1, j), -death(i));
            } else {
                rhs[row] += death(i);
            }
            if (j > 1) entries.emplace_back(row, index(i, j - 1), -death(j));
            rhs[row] += sweep(i);
        }
    }

    Eigen::SparseMatrix<double> a(unknowns, unknowns);
    a.setFromTriplets(entries.begin(), entries.end());
    a.makeCompressed();
    Eigen::SparseLU<Eigen::SparseMatrix<double>, Eigen::COLAMDOrdering<int>> lu;
    lu.compute(a);
    if (lu.info() != Eigen::Success) {
        throw Error(ErrorCode::InvalidArgument, "first-passage system is singular");
    }
    const Eigen::VectorXd p = lu.solve(rhs);

    table_.resize(n, n);
    for (int i = 1; i <= n; ++i) {
        for (int j = 1; j <= n; ++j) table_(i - 1, j - 1) = p[index(i, j)];
    }
}

double FirstPassageOracle::p_down(std::int64_t q_b, std::int64_t q_a) const {
    if (q_b < 1 || q_a < 1) {
        throw Error(ErrorCode::InvalidArgument, "queue sizes must be >= 1");
    }
    if (q_b > n_ || q_a > n_) {
        throw Error(ErrorCode::TruncationTooSmall,
                    "query (" + std::to_string(q_b) + ", " + std::to_string(q_a) +
                        ") exceeds truncation " + std::to_string(n_));
    }
    return table_(q_b - 1, q_a - 1);
}

OracleSolver::OracleSolver(const SimConfig& cfg, int truncation)
    : base_(cfg, truncation), doubled_(cfg, 2 * truncation) {}

double OracleSolver::p_down(std::int64_t q_b, std::int64_t q_a) const {
    const double p = base_.p_down(q_b, q_a);
    const double check = doubled_.p_down(q_b, q_a);
    if (std::abs(p - check) > 1e-4) {
        throw Error(ErrorCode::TruncationTooSmall,
                    "p_down moves by " + std::to_string(std::abs(p - check)) +
                        " when the truncation doubles");
    }
    return p;
}

double oracle_p_down(const SimConfig& cfg, const OracleQuery& q) {
    return OracleSolver(cfg, q.truncation).p_down(q.q_b, q.q_a);
}

}  // namespace pfl::sim
