#include "pfl/train/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <iterator>
#include <memory>
#include <mutex>
#include <thread>

#include "pfl/error.hpp"
#include "pfl/hash.hpp"
#include "pfl/random.hpp"

namespace pfl::train {

using Eigen::Index;
using Eigen::VectorXd;
using features::Dataset;
using features::SequenceSample;
using models::Model;

std::string to_string(Algorithm a) {
    switch (a) {
        case Algorithm::Adam: return "adam";
        case Algorithm::RmsProp: return "rmsprop";
        case Algorithm::Sgd: return "sgd";
    }
    return "?";
}

Algorithm algorithm_from_string(const std::string& name) {
    if (name == "adam") return Algorithm::Adam;
    if (name == "rmsprop") return Algorithm::RmsProp;
    if (name == "sgd") return Algorithm::Sgd;
    throw Error(ErrorCode::InvalidConfig, "unknown optimizer '" + name + "' (adam, rmsprop, sgd)");
}

void validate(const OptConfig& cfg) {
    auto bad = [](const std::string& field, const std::string& why) {
        throw Error(ErrorCode::InvalidConfig, "optimizer." + field + " " + why);
    };
    if (!(cfg.learning_rate >= 0.0) || !std::isfinite(cfg.learning_rate)) bad("learning_rate", "must be >= 0");
    if (!(cfg.beta1 > 0.0 && cfg.beta1 < 1.0)) bad("beta1", "must lie in (0, 1)");
    if (!(cfg.beta2 > 0.0 && cfg.beta2 < 1.0)) bad("beta2", "must lie in (0, 1)");
    if (!(cfg.rms_decay > 0.0 && cfg.rms_decay < 1.0)) bad("rms_decay", "must lie in (0, 1)");
    if (!(cfg.epsilon > 0.0)) bad("epsilon", "must be > 0");
    if (cfg.batch_size == 0) bad("batch_size", "must be > 0");
    if (cfg.epochs == 0 && cfg.max_steps == 0) bad("epochs", "and max_steps are both 0");
    if (!(cfg.l2 >= 0.0)) bad("l2", "must be >= 0");
    if (std::isnan(cfg.clip_norm)) bad("clip_norm", "is NaN");
    if (cfg.eval_every == 0) bad("eval_every", "must be > 0");
}

double effective_clip(const OptConfig& cfg, models::Family family) {
    if (cfg.clip_norm >= 0.0) return cfg.clip_norm;
    return family == models::Family::Lstm ? 5.0 : 0.0;
}

std::vector<std::vector<std::size_t>> tbptt_batches(std::size_t n_samples, std::size_t batch_size,
                                                    std::uint64_t seed, std::size_t epoch) {
    if (batch_size == 0) throw Error(ErrorCode::InvalidArgument, "batch size 0");
    std::vector<std::size_t> order(n_samples);
    for (std::size_t i = 0; i < n_samples; ++i) order[i] = i;
    // Fisher-Yates with our own generator so the permutation is portable.
    Rng rng(mix_seed(seed ^ 0xba7c4e5ULL, epoch));
    for (std::size_t i = n_samples; i > 1; --i) {
        const auto j = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(i - 1)));
        std::swap(order[i - 1], order[j]);
    }
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < n_samples; start += batch_size) {
        const std::size_t stop = std::min(n_samples, start + batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(stop));
    }
    return batches;
}

std::vector<std::vector<std::size_t>> training_schedule(std::size_t n_samples, const OptConfig& cfg) {
    std::vector<std::vector<std::size_t>> all;
    if (n_samples == 0) return all;
    const std::size_t budget = cfg.max_steps;
    for (std::size_t epoch = 0;; ++epoch) {
        if (budget == 0 && epoch >= cfg.epochs) break;
        for (auto& b : tbptt_batches(n_samples, cfg.batch_size, cfg.seed, epoch)) {
            if (budget != 0 && all.size() >= budget) return all;
            all.push_back(std::move(b));
        }
    }
    return all;
}

namespace {

features::Batch batch_of(const Dataset& data, std::span<const SequenceSample> samples,
                         const std::vector<std::size_t>& picks) {
    std::vector<SequenceSample> chosen;
    chosen.reserve(picks.size());
    for (std::size_t i : picks) chosen.push_back(samples[i]);
    return features::gather(data, chosen);
}

double penalty(const Model& model, const VectorXd& theta, double l2) {
    if (l2 == 0.0) return 0.0;
    return l2 * model.layout().penalty_mask().cwiseProduct(theta).squaredNorm();
}

void clip(VectorXd& g, double norm) {
    if (norm <= 0.0) return;
    const double n = g.norm();
    if (n > norm) g *= norm / n;
}

[[noreturn]] void fail_non_finite(const Model& model, const OptConfig& cfg, const VectorXd& theta,
                                  std::size_t step, const std::vector<std::size_t>& picks, const std::string& why) {
    std::string msg = "at step " + std::to_string(step) + " (" + why + "), batch of " +
                      std::to_string(picks.size()) + " samples starting at index " +
                      (picks.empty() ? std::string("-") : std::to_string(picks.front())) +
                      ", |theta| = " + std::to_string(theta.norm());
    if (!cfg.failure_dump.empty()) {
        Json meta{{"architecture", model.architecture()},
                  {"failure", {{"step", step}, {"samples", picks}, {"reason", why}}},
                  {"optimizer", to_json(cfg)}};
        save_checkpoint(cfg.failure_dump, theta, meta);
        msg += "; state written to " + cfg.failure_dump.string();
    }
    throw Error(ErrorCode::NonFiniteLoss, msg);
}

// One batch loss and clipped gradient; shared by both training modes so a
// single async worker reproduces the synchronous arithmetic exactly.
double batch_step(const Model& model, const VectorXd& theta, const Dataset& data,
                  std::span<const SequenceSample> samples, const std::vector<std::size_t>& picks,
                  const OptConfig& cfg, double clip_norm, std::size_t step, VectorXd& grad) {
    const auto batch = batch_of(data, samples, picks);
    double loss = 0.0;
    try {
        loss = model.loss_and_gradient(theta, batch, cfg.loss_mode, cfg.l2, &grad);
    } catch (const Error& e) {
        if (e.code() != ErrorCode::NonFiniteActivation) throw;
        fail_non_finite(model, cfg, theta, step, picks, e.what());
    }
    if (!std::isfinite(loss) || !grad.allFinite()) {
        fail_non_finite(model, cfg, theta, step, picks, "loss " + std::to_string(loss));
    }
    clip(grad, clip_norm);
    return loss;
}

class CurveBuilder {
public:
    explicit CurveBuilder(std::size_t every) : every_(every) {}
    void add(std::size_t step, double loss) {
        sum_ += loss;
        ++count_;
        if (count_ == every_) flush(step);
    }
    void finish(std::size_t step) {
        if (count_ > 0) flush(step);
    }
    std::vector<LossPoint> points;

private:
    void flush(std::size_t step) {
        points.push_back({step, sum_ / static_cast<double>(count_)});
        sum_ = 0.0;
        count_ = 0;
    }
    std::size_t every_;
    double sum_ = 0.0;
    std::size_t count_ = 0;
};

void check_inputs(const Model& model, const VectorXd& init, const Dataset& data,
                  std::span<const SequenceSample> samples) {
    if (samples.empty()) throw Error(ErrorCode::EmptyPartition, "no training samples");
    if (data.dimension() != model.input_dim()) {
        throw Error(ErrorCode::DimensionMismatch, "dataset dimension " + std::to_string(data.dimension()) +
                                                      " vs model input " + std::to_string(model.input_dim()));
    }
    if (init.size() != model.num_params()) {
        throw Error(ErrorCode::DimensionMismatch, "initial parameters have the wrong length");
    }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

double dataset_loss(const Model& model, const VectorXd& theta, const Dataset& data,
                    std::span<const SequenceSample> samples, models::LossMode mode, double l2,
                    std::size_t limit) {
    std::vector<std::size_t> picks;
    const std::size_t n = samples.size();
    if (limit == 0 || limit >= n) {
        picks.resize(n);
        for (std::size_t i = 0; i < n; ++i) picks[i] = i;
    } else {
        for (std::size_t i = 0; i < limit; ++i) picks.push_back(i * n / limit);
    }
    constexpr std::size_t kChunk = 256;
    double total = 0.0;
    double scored = 0.0;
    for (std::size_t start = 0; start < picks.size(); start += kChunk) {
        const std::vector<std::size_t> part(picks.begin() + static_cast<std::ptrdiff_t>(start),
                                            picks.begin() + static_cast<std::ptrdiff_t>(std::min(picks.size(), start + kChunk)));
        const auto batch = batch_of(data, samples, part);
        const Eigen::MatrixXd p = model.forward(theta, batch.x);
        const Index last = p.rows() - 1;
        auto term = [](double p_up, int label) {
            const double p = label > 0 ? p_up : 1.0 - p_up;
            return -std::log(std::max(p, models::kProbabilityFloor));
        };
        for (Index j = 0; j < p.cols(); ++j) {
            if (mode == models::LossMode::Terminal) {
                total += term(p(last, j), batch.labels[j]);
                scored += 1.0;
                continue;
            }
            for (Index t = 0; t <= last; ++t) {
                const int y = batch.step_labels(t, j);
                if (y == 0) continue;
                total += term(p(t, j), y);
                scored += 1.0;
            }
        }
    }
    if (scored == 0.0) throw Error(ErrorCode::EmptyPartition, "no scored steps");
    return total / scored + penalty(model, theta, l2);
}

Optimizer::Optimizer(const OptConfig& cfg, Index n) : cfg_(cfg) {
    if (cfg.algorithm != Algorithm::Sgd) v_ = VectorXd::Zero(n);
    if (cfg.algorithm == Algorithm::Adam) m_ = VectorXd::Zero(n);
}

void Optimizer::step(VectorXd& theta, const VectorXd& grad) {
    ++t_;
    const double lr = cfg_.learning_rate;
    switch (cfg_.algorithm) {
        case Algorithm::Sgd:
            theta.noalias() -= lr * grad;
            return;
        case Algorithm::RmsProp:
            v_ = cfg_.rms_decay * v_ + (1.0 - cfg_.rms_decay) * grad.cwiseAbs2();
            theta.array() -= lr * grad.array() / (v_.array().sqrt() + cfg_.epsilon);
            return;
        case Algorithm::Adam: {
            m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad;
            v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * grad.cwiseAbs2();
            const double t = static_cast<double>(t_);
            const double c1 = 1.0 - std::pow(cfg_.beta1, t);
            const double c2 = 1.0 - std::pow(cfg_.beta2, t);
            theta.array() -= lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + cfg_.epsilon);
            return;
        }
    }
}

TrainReport train_synchronous(const Model& model, const VectorXd& init, const Dataset& data,
                              std::span<const SequenceSample> samples, const OptConfig& cfg) {
    validate(cfg);
    check_inputs(model, init, data, samples);
    const auto t0 = std::chrono::steady_clock::now();
    const auto schedule = training_schedule(samples.size(), cfg);
    const double clip_norm = effective_clip(cfg, model.family());

    TrainReport report;
    report.planned = schedule.size();
    report.initial_loss = dataset_loss(model, init, data, samples, cfg.loss_mode, cfg.l2, cfg.eval_limit);
    VectorXd theta = init;
    Optimizer opt(cfg, theta.size());
    CurveBuilder curve(cfg.eval_every);
    VectorXd grad;
    for (std::size_t step = 0; step < schedule.size(); ++step) {
        const double loss = batch_step(model, theta, data, samples, schedule[step], cfg, clip_norm, step, grad);
        opt.step(theta, grad);
        curve.add(step + 1, loss);
    }
    curve.finish(schedule.size());
    report.steps = schedule.size();
    report.curve = std::move(curve.points);
    report.final_loss = dataset_loss(model, theta, data, samples, cfg.loss_mode, cfg.l2, cfg.eval_limit);
    report.params = std::move(theta);
    report.wall_seconds = seconds_since(t0);
    return report;
}

TrainReport train_asynchronous(const Model& model, const VectorXd& init, const Dataset& data,
                               std::span<const SequenceSample> samples, std::size_t n_workers,
                               const OptConfig& cfg, std::size_t staleness_cap) {
    validate(cfg);
    check_inputs(model, init, data, samples);
    if (n_workers == 0) throw Error(ErrorCode::InvalidConfig, "n_workers must be >= 1");
    const auto t0 = std::chrono::steady_clock::now();
    const auto schedule = training_schedule(samples.size(), cfg);
    const double clip_norm = effective_clip(cfg, model.family());

    TrainReport report;
    report.planned = schedule.size();
    report.workers = n_workers;
    report.staleness.assign(staleness_cap + 1, 0);
    report.initial_loss = dataset_loss(model, init, data, samples, cfg.loss_mode, cfg.l2, cfg.eval_limit);

    struct Snapshot {
        VectorXd theta;
        std::size_t version = 0;
    };
    std::mutex mu;
    std::shared_ptr<const Snapshot> current = std::make_shared<const Snapshot>(Snapshot{init, 0});
    Optimizer opt(cfg, init.size());
    CurveBuilder curve(cfg.eval_every);
    std::atomic<std::size_t> next{0};
    std::atomic<bool> abort{false};
    std::exception_ptr failure;

    auto worker = [&] {
        VectorXd grad;
        while (!abort.load()) {
            const std::size_t i = next.fetch_add(1);
            if (i >= schedule.size()) return;
            std::shared_ptr<const Snapshot> snap;
            {
                const std::lock_guard lock(mu);
                snap = current;
            }
            double loss = 0.0;
            try {
                loss = batch_step(model, snap->theta, data, samples, schedule[i], cfg, clip_norm, i, grad);
            } catch (...) {
                const std::lock_guard lock(mu);
                if (!failure) failure = std::current_exception();
                abort.store(true);
                return;
            }
            const std::lock_guard lock(mu);
            const std::size_t stale = current->version - snap->version;
            if (stale > staleness_cap) {
                ++report.dropped;
                continue;
            }
            ++report.staleness[stale];
            auto updated = std::make_shared<Snapshot>(Snapshot{current->theta, current->version + 1});
            opt.step(updated->theta, grad);
            current = std::move(updated);
            curve.add(current->version, loss);
        }
    };

    std::vector<std::thread> threads;
    threads.reserve(n_workers);
    for (std::size_t w = 0; w < n_workers; ++w) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    if (failure) std::rethrow_exception(failure);

    report.steps = current->version;
    curve.finish(report.steps);
    report.curve = std::move(curve.points);
    report.params = current->theta;
    report.final_loss = dataset_loss(model, report.params, data, samples, cfg.loss_mode, cfg.l2, cfg.eval_limit);
    report.wall_seconds = seconds_since(t0);
    return report;
}

void write_loss_curve(const TrainReport& report, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    out.precision(17);
    out << "step,loss\n";
    for (const auto& p : report.curve) out << p.step << ',' << p.loss << '\n';
    if (!out) throw Error(ErrorCode::Io, "write failed: " + path.string());
}

namespace {

constexpr char kMagic[8] = {'P', 'F', 'L', 'C', 'K', 'P', 'T', '1'};

template <class T>
void put(std::string& buf, const T& v) {
    buf.append(reinterpret_cast<const char*>(&v), sizeof v);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const VectorXd& params, const Json& meta) {
    if (!meta.is_object() || !meta.contains("architecture")) {
        throw Error(ErrorCode::InvalidArgument, "checkpoint metadata needs an architecture");
    }
    Json header = meta;
    header["endianness"] = std::endian::native == std::endian::little ? "little" : "big";
    header["count"] = params.size();
    const std::string text = header.dump();

    std::string buf(kMagic, sizeof kMagic);
    put(buf, static_cast<std::uint64_t>(text.size()));
    buf += text;
    put(buf, static_cast<std::uint64_t>(params.size()));
    buf.append(reinterpret_cast<const char*>(params.data()),
               static_cast<std::size_t>(params.size()) * sizeof(double));
    Fnv1a h;
    h.update(buf.data(), buf.size());
    put(buf, h.digest());

    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw Error(ErrorCode::Io, "cannot write " + tmp.string());
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!out) throw Error(ErrorCode::Io, "write failed: " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw Error(ErrorCode::Io, "cannot move checkpoint into place: " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
    const std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    auto corrupt = [&](const std::string& why) {
        return Error(ErrorCode::ChecksumMismatch, path.string() + ": " + why);
    };
    constexpr std::size_t kTrailer = sizeof(std::uint64_t);
    if (buf.size() < sizeof kMagic + 2 * sizeof(std::uint64_t) + kTrailer) throw corrupt("file too short");
    if (std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0) throw corrupt("bad magic");
    std::uint64_t stored = 0;
    std::memcpy(&stored, buf.data() + buf.size() - kTrailer, kTrailer);
    Fnv1a h;
    h.update(buf.data(), buf.size() - kTrailer);
    if (h.digest() != stored) throw corrupt("checksum mismatch");

    std::size_t pos = sizeof kMagic;
    std::uint64_t header_len = 0;
    std::memcpy(&header_len, buf.data() + pos, sizeof header_len);
    pos += sizeof header_len;
    if (header_len > buf.size() - pos) throw corrupt("header length out of range");
    Json header = parse_json(buf.substr(pos, header_len), path.string());
    pos += header_len;
    std::uint64_t count = 0;
    std::memcpy(&count, buf.data() + pos, sizeof count);
    pos += sizeof count;
    if (count * sizeof(double) != buf.size() - pos - kTrailer) throw corrupt("parameter count mismatch");

    const std::string native = std::endian::native == std::endian::little ? "little" : "big";
    if (header.value("endianness", std::string()) != native) {
        throw Error(ErrorCode::Io, path.string() + ": written on a " + header.value("endianness", std::string("?")) +
                                       "-endian machine");
    }
    Checkpoint ck;
    ck.params.resize(static_cast<Index>(count));
    std::memcpy(ck.params.data(), buf.data() + pos, count * sizeof(double));
    header.erase("endianness");
    header.erase("count");
    ck.meta = std::move(header);
    return ck;
}

Json to_json(const OptConfig& cfg) {
    return Json{{"algorithm", to_string(cfg.algorithm)},
                {"learning_rate", cfg.learning_rate},
                {"beta1", cfg.beta1},
                {"beta2", cfg.beta2},
                {"epsilon", cfg.epsilon},
                {"rms_decay", cfg.rms_decay},
                {"batch_size", cfg.batch_size},
                {"epochs", cfg.epochs},
                {"max_steps", cfg.max_steps},
                {"l2", cfg.l2},
                {"seed", cfg.seed},
                {"clip_norm", cfg.clip_norm},
                {"loss_mode", cfg.loss_mode == models::LossMode::Terminal ? "terminal" : "per-step"},
                {"eval_every", cfg.eval_every},
                {"eval_limit", cfg.eval_limit}};
}

OptConfig opt_config_from_json(const Json& doc, const std::string& where) {
    if (!doc.is_object()) throw Error(ErrorCode::InvalidConfig, where + " must be an object");
    reject_unknown_keys(doc,
                        {"algorithm", "learning_rate", "beta1", "beta2", "epsilon", "rms_decay", "batch_size",
                         "epochs", "max_steps", "l2", "seed", "clip_norm", "loss_mode", "eval_every", "eval_limit"},
                        where);
    OptConfig cfg;
    std::string text;
    read_optional(doc, "algorithm", text, where);
    if (!text.empty()) cfg.algorithm = algorithm_from_string(text);
    read_optional(doc, "learning_rate", cfg.learning_rate, where);
    read_optional(doc, "beta1", cfg.beta1, where);
    read_optional(doc, "beta2", cfg.beta2, where);
    read_optional(doc, "epsilon", cfg.epsilon, where);
    read_optional(doc, "rms_decay", cfg.rms_decay, where);
    read_optional(doc, "batch_size", cfg.batch_size, where);
    read_optional(doc, "epochs", cfg.epochs, where);
    read_optional(doc, "max_steps", cfg.max_steps, where);
    read_optional(doc, "l2", cfg.l2, where);
    read_optional(doc, "seed", cfg.seed, where);
    read_optional(doc, "clip_norm", cfg.clip_norm, where);
    text.clear();
    read_optional(doc, "loss_mode", text, where);
    if (!text.empty()) {
        if (text == "terminal") {
            cfg.loss_mode = models::LossMode::Terminal;
        } else if (text == "per-step") {
            cfg.loss_mode = models::LossMode::PerStep;
        } else {
            throw Error(ErrorCode::InvalidConfig, where + ".loss_mode must be terminal or per-step");
        }
    }
    read_optional(doc, "eval_every", cfg.eval_every, where);
    read_optional(doc, "eval_limit", cfg.eval_limit, where);
    validate(cfg);
    return cfg;
}

}  // namespace pfl::train
