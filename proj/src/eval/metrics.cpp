#include "pfl/eval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <tuple>

#include "pfl/error.hpp"
#include "pfl/hash.hpp"
#include "pfl/random.hpp"

namespace pfl::eval {

using Eigen::Index;
using Eigen::VectorXd;
using features::Dataset;
using features::SequenceSample;

AccuracyReport make_report(std::string stock_id, std::string model_id, std::vector<std::uint8_t> hits,
                           std::uint64_t partition) {
    if (hits.empty()) throw Error(ErrorCode::EmptyTestSet, "no test samples for " + stock_id);
    AccuracyReport r;
    r.stock_id = std::move(stock_id);
    r.model_id = std::move(model_id);
    r.n = hits.size();
    std::size_t correct = 0;
    for (auto h : hits) correct += h;
    const double p = static_cast<double>(correct) / static_cast<double>(r.n);
    r.accuracy = 100.0 * p;
    r.se = 100.0 * std::sqrt(p * (1.0 - p) / static_cast<double>(r.n));
    r.partition = partition;
    r.hits = std::move(hits);
    return r;
}

VectorXd predict_samples(const models::Model& model, const VectorXd& theta, const Dataset& data,
                         std::span<const SequenceSample> samples) {
    constexpr std::size_t kChunk = 512;
    VectorXd out(static_cast<Index>(samples.size()));
    for (std::size_t start = 0; start < samples.size(); start += kChunk) {
        const auto part = samples.subspan(start, std::min(kChunk, samples.size() - start));
        const auto batch = features::gather(data, part);
        const Eigen::MatrixXd p = model.forward(theta, batch.x);
        out.segment(static_cast<Index>(start), static_cast<Index>(part.size())) = p.row(p.rows() - 1).transpose();
    }
    return out;
}

namespace {

// Sample indices grouped by stock id, ids in order.
std::map<std::string, std::vector<std::size_t>> by_stock(const Dataset& data,
                                                         std::span<const SequenceSample> samples) {
    std::map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < samples.size(); ++i) groups[data.of(samples[i]).stock_id].push_back(i);
    return groups;
}

std::vector<SequenceSample> pick(std::span<const SequenceSample> samples, const std::vector<std::size_t>& idx) {
    std::vector<SequenceSample> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(samples[i]);
    return out;
}

std::uint8_t hit(int guess, int label) { return guess == label ? 1 : 0; }

}  // namespace

std::vector<AccuracyReport> score_by_stock(const models::Model& model, const VectorXd& theta, const Dataset& data,
                                           std::span<const SequenceSample> samples, const std::string& model_id) {
    if (samples.empty()) throw Error(ErrorCode::EmptyTestSet, "no test samples");
    if (data.dimension() != model.input_dim()) {
        throw Error(ErrorCode::DimensionMismatch, "model input " + std::to_string(model.input_dim()) +
                                                      " vs dataset dimension " + std::to_string(data.dimension()));
    }
    const VectorXd p_up = predict_samples(model, theta, data, samples);
    std::vector<AccuracyReport> out;
    for (const auto& [id, idx] : by_stock(data, samples)) {
        std::vector<std::uint8_t> hits;
        hits.reserve(idx.size());
        for (std::size_t i : idx) {
            const int guess = models::predict_direction({p_up[static_cast<Index>(i)], 1.0 - p_up[static_cast<Index>(i)]});
            hits.push_back(hit(guess, samples[i].label));
        }
        const auto chosen = pick(samples, idx);
        out.push_back(make_report(id, model_id, std::move(hits), features::partition_hash(data, chosen)));
    }
    return out;
}

AccuracyReport accuracy_score(const models::Model& model, const VectorXd& theta, const Dataset& data,
                              std::span<const SequenceSample> samples, const std::string& model_id) {
    auto reports = score_by_stock(model, theta, data, samples, model_id);
    if (reports.size() != 1) {
        throw Error(ErrorCode::InvalidArgument, "test samples span " + std::to_string(reports.size()) + " stocks");
    }
    return std::move(reports.front());
}

AccuracyReport accuracy_score(const train::Checkpoint& checkpoint, const Dataset& data,
                              std::span<const SequenceSample> samples, const std::string& model_id) {
    const auto model = models::make_model(checkpoint.meta.at("architecture"));
    if (checkpoint.params.size() != model->num_params()) {
        throw Error(ErrorCode::DimensionMismatch, "checkpoint holds " + std::to_string(checkpoint.params.size()) +
                                                      " parameters, architecture needs " +
                                                      std::to_string(model->num_params()));
    }
    return accuracy_score(*model, checkpoint.params, data, samples, model_id);
}

AccuracyReport score_directions(const Dataset& data, std::span<const SequenceSample> samples,
                                std::span<const int> directions, const std::string& model_id) {
    if (samples.empty()) throw Error(ErrorCode::EmptyTestSet, "no test samples");
    if (directions.size() != samples.size()) {
        throw Error(ErrorCode::DimensionMismatch, "one direction per sample expected");
    }
    const std::string& id = data.of(samples.front()).stock_id;
    std::vector<std::uint8_t> hits;
    hits.reserve(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (data.of(samples[i]).stock_id != id) {
            throw Error(ErrorCode::InvalidArgument, "directions must belong to one stock");
        }
        hits.push_back(hit(directions[i], samples[i].label));
    }
    return make_report(id, model_id, std::move(hits), features::partition_hash(data, samples));
}

std::vector<int> coin_flip_directions(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<int> out(n);
    for (auto& d : out) d = uniform01(rng) < 0.5 ? 1 : -1;
    return out;
}

TouchDepth touch_depth(const Dataset& data, const SequenceSample& s) {
    const auto& series = data.of(s);
    const auto levels = static_cast<Index>(series.spec.levels);
    const auto k = static_cast<Index>(s.state_index(s.lag - 1));
    const VectorXd raw = series.transform.invert(series.states.col(k));
    // depths are whole shares; rounding removes the normalization round trip error
    return {std::round(raw[0]), std::round(raw[levels])};
}

std::vector<double> oracle_p_down(const sim::OracleSolver& oracle, const Dataset& data,
                                  std::span<const SequenceSample> samples) {
    std::vector<double> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        const auto t = touch_depth(data, s);
        out.push_back(oracle.p_down(std::llround(t.bid), std::llround(t.ask)));
    }
    return out;
}

std::vector<int> oracle_directions(const sim::OracleSolver& oracle, const Dataset& data,
                                   std::span<const SequenceSample> samples) {
    std::vector<int> out;
    out.reserve(samples.size());
    for (double p : oracle_p_down(oracle, data, samples)) out.push_back(p <= 0.5 ? 1 : -1);
    return out;
}

CrossSection compare_cross_section(std::span<const AccuracyReport> a, std::span<const AccuracyReport> b,
                                   const std::string& label) {
    std::map<std::string, const AccuracyReport*> rb;
    for (const auto& r : b) rb[r.stock_id] = &r;
    std::map<std::string, const AccuracyReport*> ra;
    for (const auto& r : a) ra[r.stock_id] = &r;
    if (ra.size() != a.size() || rb.size() != b.size()) {
        throw Error(ErrorCode::PartitionMismatch, label + ": duplicate stock ids");
    }
    if (ra.size() != rb.size()) throw Error(ErrorCode::PartitionMismatch, label + ": different stock sets");

    CrossSection cs;
    cs.label = label;
    if (!a.empty()) cs.model_a = a.front().model_id;
    if (!b.empty()) cs.model_b = b.front().model_id;
    double var_sum = 0.0;
    for (const auto& [id, x] : ra) {
        auto it = rb.find(id);
        if (it == rb.end()) throw Error(ErrorCode::PartitionMismatch, label + ": " + id + " missing on one side");
        const AccuracyReport& y = *it->second;
        if (x->partition != y.partition || x->n != y.n) {
            throw Error(ErrorCode::PartitionMismatch, label + ": " + id + " was scored on different test samples");
        }
        CrossRow row;
        row.stock_id = id;
        row.a = x->accuracy;
        row.b = y.accuracy;
        row.delta = x->accuracy - y.accuracy;
        row.n = x->n;
        if (x->hits.size() == x->n && y.hits.size() == y.n) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t i = 0; i < x->n; ++i) {
                const double d = static_cast<double>(x->hits[i]) - static_cast<double>(y.hits[i]);
                s1 += d;
                s2 += d * d;
            }
            const double n = static_cast<double>(x->n);
            const double mean = s1 / n;
            row.se = 100.0 * std::sqrt(std::max(0.0, s2 / n - mean * mean) / n);
        } else {
            row.se = std::sqrt(x->se * x->se + y.se * y.se);
        }
        row.significant = row.se > 0.0 ? std::abs(row.delta) >= 3.0 * row.se : row.delta != 0.0;
        var_sum += row.se * row.se;
        cs.rows.push_back(row);
    }
    auto& s = cs.summary;
    if (!cs.rows.empty()) {
        const double k = static_cast<double>(cs.rows.size());
        for (const auto& r : cs.rows) {
            s.mean_delta += r.delta / k;
            s.positive += r.delta > 0.0 ? 1 : 0;
            s.non_negative += r.delta >= 0.0 ? 1 : 0;
        }
        s.se_mean = std::sqrt(var_sum) / k;
        s.z = s.se_mean > 0.0 ? s.mean_delta / s.se_mean
                              : (s.mean_delta == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), s.mean_delta));
        s.fraction_positive = static_cast<double>(s.positive) / k;
        s.fraction_non_negative = static_cast<double>(s.non_negative) / k;
    }
    return cs;
}

namespace {

std::ofstream open_csv(const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    out.precision(10);
    return out;
}

}  // namespace

void write_cross_section(const CrossSection& cs, const std::filesystem::path& path) {
    auto out = open_csv(path);
    out << "stock_id,model_a,model_b,accuracy_a,accuracy_b,delta,se,significant,n\n";
    for (const auto& r : cs.rows) {
        out << r.stock_id << ',' << cs.model_a << ',' << cs.model_b << ',' << r.a << ',' << r.b << ',' << r.delta
            << ',' << r.se << ',' << (r.significant ? 1 : 0) << ',' << r.n << '\n';
    }
    if (!out) throw Error(ErrorCode::Io, "write failed: " + path.string());
}

AccuracyReport pool_reports(std::span<const AccuracyReport> reports, const std::string& stock_id) {
    std::vector<std::uint8_t> hits;
    Fnv1a h;
    std::string model_id;
    for (const auto& r : reports) {
        hits.insert(hits.end(), r.hits.begin(), r.hits.end());
        h.update(&r.partition, sizeof r.partition);
        model_id = r.model_id;
    }
    return make_report(stock_id, model_id, std::move(hits), h.digest());
}

std::vector<double> quantile_edges(std::vector<double> values, std::size_t quantiles) {
    if (values.empty() || quantiles < 2) return {};
    std::sort(values.begin(), values.end());
    std::vector<double> edges;
    const auto n = values.size();
    for (std::size_t q = 1; q < quantiles; ++q) {
        const std::size_t idx = std::min(n - 1, q * n / quantiles);
        const double e = values[idx];
        // an edge at the minimum would leave the first bin empty
        if (e > values.front() && (edges.empty() || e > edges.back())) edges.push_back(e);
    }
    return edges;
}

namespace {

std::size_t bin_of(const std::vector<double>& edges, double v) {
    return static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), v) - edges.begin());
}

}  // namespace

Surface sensitivity_surface(const models::Model& model, const VectorXd& theta, const Dataset& data,
                            std::span<const SequenceSample> samples, std::span<const double> oracle_p,
                            std::size_t quantiles, std::size_t min_count) {
    if (samples.empty()) throw Error(ErrorCode::EmptyTestSet, "no samples for the surface");
    if (oracle_p.size() != samples.size()) throw Error(ErrorCode::DimensionMismatch, "one oracle value per sample");
    std::vector<TouchDepth> depth;
    depth.reserve(samples.size());
    std::vector<double> pooled;
    pooled.reserve(2 * samples.size());
    for (const auto& s : samples) {
        depth.push_back(touch_depth(data, s));
        pooled.push_back(depth.back().bid);
        pooled.push_back(depth.back().ask);
    }
    Surface out;
    out.min_count = min_count;
    out.edges = quantile_edges(pooled, quantiles);
    out.bins = out.edges.size() + 1;
    const double lo = *std::min_element(pooled.begin(), pooled.end());
    const double hi = *std::max_element(pooled.begin(), pooled.end());
    auto bounds = [&](std::size_t b) {
        return std::pair{b == 0 ? lo : out.edges[b - 1], b + 1 == out.bins ? hi + 1.0 : out.edges[b]};
    };
    out.cells.resize(out.bins * out.bins);
    for (std::size_t i = 0; i < out.bins; ++i) {
        for (std::size_t j = 0; j < out.bins; ++j) {
            auto& c = out.cells[i * out.bins + j];
            c.bid_bin = i;
            c.ask_bin = j;
            std::tie(c.bid_lo, c.bid_hi) = bounds(i);
            std::tie(c.ask_lo, c.ask_hi) = bounds(j);
        }
    }
    const VectorXd p_up = predict_samples(model, theta, data, samples);
    for (std::size_t k = 0; k < samples.size(); ++k) {
        auto& c = out.cells[bin_of(out.edges, depth[k].bid) * out.bins + bin_of(out.edges, depth[k].ask)];
        ++c.count;
        c.model_p_down += 1.0 - p_up[static_cast<Index>(k)];
        c.oracle_p_down += oracle_p[k];
        c.empirical_p_down += samples[k].label < 0 ? 1.0 : 0.0;
    }
    for (auto& c : out.cells) {
        if (c.count > 0) {
            c.model_p_down /= static_cast<double>(c.count);
            c.oracle_p_down /= static_cast<double>(c.count);
            c.empirical_p_down /= static_cast<double>(c.count);
        }
        c.sparse = c.count < min_count;
    }
    return out;
}

void write_surface(const Surface& s, const std::filesystem::path& path) {
    auto out = open_csv(path);
    out << "bid_bin,ask_bin,bid_lo,bid_hi,ask_lo,ask_hi,count,model_p_down,oracle_p_down,empirical_p_down,abs_error,sparse\n";
    for (const auto& c : s.cells) {
        out << c.bid_bin << ',' << c.ask_bin << ',' << c.bid_lo << ',' << c.bid_hi << ',' << c.ask_lo << ','
            << c.ask_hi << ',' << c.count << ',' << c.model_p_down << ',' << c.oracle_p_down << ','
            << c.empirical_p_down << ',' << std::abs(c.model_p_down - c.oracle_p_down) << ',' << (c.sparse ? 1 : 0) << '\n';
    }
    if (!out) throw Error(ErrorCode::Io, "write failed: " + path.string());
}

}  // namespace pfl::eval
