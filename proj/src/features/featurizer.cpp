#include "pfl/features/featurizer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>

#include "pfl/error.hpp"
#include "pfl/hash.hpp"

namespace pfl::features {

namespace {

// Emits an event whenever the two-sided mid differs from the last one seen.
class ChangeDetector {
public:
    void observe(const lob::DepthSnapshot& snap, std::size_t index, std::vector<PriceChangeEvent>& out) {
        if (!snap.has_bid() || !snap.has_ask()) {
            ++one_sided_;
            return;
        }
        const std::int64_t mid = lob::mid_and_spread(snap).mid_half_ticks;
        if (have_mid_ && mid != mid_) {
            out.push_back(PriceChangeEvent{out.size(), static_cast<double>(snap.event_time_ns) * 1e-9,
                                           mid > mid_ ? 1 : -1, index});
        }
        mid_ = mid;
        have_mid_ = true;
    }
    [[nodiscard]] std::size_t one_sided() const noexcept { return one_sided_; }

private:
    bool have_mid_ = false;
    std::int64_t mid_ = 0;
    std::size_t one_sided_ = 0;
};

void write_state(const lob::DepthSnapshot& snap, const FeatureSpec& spec, int last_direction,
                 double* out) {
    if (snap.levels() != spec.levels || snap.ask_sizes.size() != spec.levels) {
        throw Error(ErrorCode::DimensionMismatch,
                    "snapshot has " + std::to_string(snap.levels()) + " levels, spec expects " +
                        std::to_string(spec.levels));
    }
    std::size_t i = 0;
    for (auto v : snap.bid_sizes) out[i++] = static_cast<double>(v);
    for (auto v : snap.ask_sizes) out[i++] = static_cast<double>(v);
    if (spec.include_spread) {
        out[i++] = snap.has_bid() && snap.has_ask()
                       ? static_cast<double>(snap.best_ask - snap.best_bid)
                       : 0.0;
    }
    if (spec.include_last_direction) out[i++] = last_direction;
}

void fill_states(EventSeries& series, const std::vector<lob::DepthSnapshot>& at_events) {
    const auto d = static_cast<Eigen::Index>(series.spec.dimension());
    series.states.resize(d, static_cast<Eigen::Index>(series.events.size()));
    for (std::size_t k = 0; k < series.events.size(); ++k) {
        write_state(at_events[k], series.spec, series.events[k].direction,
                    series.states.col(static_cast<Eigen::Index>(k)).data());
    }
    series.transform = Transform::identity(static_cast<std::size_t>(d));
}

std::string format_double(double x) {
    char buf[40];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, ptr);
}

}  // namespace

Detection detect_price_changes(std::span<const lob::DepthSnapshot> snaps, DetectOptions opts) {
    Detection out;
    ChangeDetector detector;
    for (std::size_t i = 0; i < snaps.size(); ++i) {
        if (i > 0 && snaps[i].event_time_ns < snaps[i - 1].event_time_ns) {
            throw Error(ErrorCode::TimeOrdering, "snapshot " + std::to_string(i) + " goes back in time");
        }
        if (opts.coalesce_same_time && i + 1 < snaps.size() &&
            snaps[i + 1].event_time_ns == snaps[i].event_time_ns) {
            continue;
        }
        detector.observe(snaps[i], i, out.events);
    }
    out.one_sided_skipped = detector.one_sided();
    return out;
}

Eigen::VectorXd build_state_vector(const lob::DepthSnapshot& snap, const FeatureSpec& spec,
                                   int last_direction) {
    Eigen::VectorXd x(static_cast<Eigen::Index>(spec.dimension()));
    write_state(snap, spec, last_direction, x.data());
    return x;
}

Eigen::VectorXd Transform::apply(const Eigen::VectorXd& x) const {
    return (x - shift).cwiseQuotient(scale);
}

Eigen::VectorXd Transform::invert(const Eigen::VectorXd& y) const {
    return y.cwiseProduct(scale) + shift;
}

Transform Transform::identity(std::size_t d) {
    const auto n = static_cast<Eigen::Index>(d);
    return Transform{Eigen::VectorXd::Zero(n), Eigen::VectorXd::Ones(n), {}};
}

EventSeries build_event_series(const std::string& stock_id,
                               std::span<const lob::DepthSnapshot> snaps, const FeatureSpec& spec,
                               DetectOptions opts) {
    EventSeries series;
    series.stock_id = stock_id;
    series.spec = spec;
    Detection det = detect_price_changes(snaps, opts);
    series.events = std::move(det.events);
    series.one_sided_skipped = det.one_sided_skipped;
    std::vector<lob::DepthSnapshot> at_events;
    at_events.reserve(series.events.size());
    for (const auto& e : series.events) at_events.push_back(snaps[e.snapshot_index]);
    fill_states(series, at_events);
    return series;
}

EventSeries featurize_messages(const std::string& stock_id, std::span<const feed::Message> msgs,
                               const FeatureSpec& spec, std::int64_t price_units_per_tick,
                               DetectOptions opts) {
    EventSeries series;
    series.stock_id = stock_id;
    series.spec = spec;
    lob::OrderBook book(lob::BookConfig{price_units_per_tick, lob::CrossingPolicy::Reject});
    ChangeDetector detector;
    std::vector<lob::DepthSnapshot> at_events;
    std::size_t applied = 0;
    lob::replay(msgs, book, [&](std::size_t i, const lob::OrderBook& b) {
        const std::size_t snapshot_index = applied++;
        if (opts.coalesce_same_time) {
            std::size_t j = i + 1;
            while (j < msgs.size() && msgs[j].kind == feed::MessageKind::Halt) ++j;
            if (j < msgs.size() && msgs[j].time_ns == msgs[i].time_ns) return;
        }
        const std::size_t before = series.events.size();
        auto snap = b.snapshot(spec.levels, msgs[i].time_ns, spec.depth_mode);
        detector.observe(snap, snapshot_index, series.events);
        if (series.events.size() != before) at_events.push_back(std::move(snap));
    });
    series.one_sided_skipped = detector.one_sided();
    fill_states(series, at_events);
    return series;
}

std::vector<SequenceSample> assemble_sequences(const EventSeries& series, std::uint32_t series_index,
                                               std::size_t lag, std::size_t stride) {
    if (lag < 1) throw Error(ErrorCode::InvalidArgument, "lag must be >= 1");
    if (stride < 1) throw Error(ErrorCode::InvalidArgument, "stride must be >= 1");
    std::vector<SequenceSample> out;
    const std::size_t n = series.size();
    if (n < 2) return out;
    // with stride > 1 the last window ends at n - 2 and steps back
    const std::size_t first = stride == 1 ? 0 : (n - 2) % stride;
    out.reserve((n - 1 - first + stride - 1) / stride);
    for (std::size_t k = first; k + 1 < n; k += stride) {
        SequenceSample s;
        s.series = series_index;
        s.end = static_cast<std::uint32_t>(k);
        s.lag = static_cast<std::uint32_t>(lag);
        s.label = static_cast<std::int8_t>(series.events[k + 1].direction);
        s.padded = k + 1 < lag;
        out.push_back(s);
    }
    return out;
}

std::size_t Dataset::dimension() const {
    if (series.empty()) return 0;
    return series.front().dimension();
}

Batch gather(const Dataset& data, std::span<const SequenceSample> samples) {
    Batch batch;
    const auto b = static_cast<Eigen::Index>(samples.size());
    const std::size_t lag = samples.empty() ? data.lag : samples.front().lag;
    const auto d = static_cast<Eigen::Index>(data.dimension());
    batch.x.assign(lag, Eigen::MatrixXd(d, b));
    batch.labels.resize(b);
    batch.step_labels.setZero(static_cast<Eigen::Index>(lag), b);
    for (Eigen::Index j = 0; j < b; ++j) {
        const SequenceSample& s = samples[static_cast<std::size_t>(j)];
        if (s.lag != lag) throw Error(ErrorCode::DimensionMismatch, "mixed lags in one batch");
        const EventSeries& series = data.of(s);
        if (series.dimension() != static_cast<std::size_t>(d)) {
            throw Error(ErrorCode::DimensionMismatch, series.stock_id + ": state dimension differs");
        }
        batch.labels[j] = s.label;
        for (std::size_t t = 0; t < lag; ++t) {
            batch.x[t].col(j) = data.state(s, t);
            const auto step = static_cast<std::int64_t>(s.end) - static_cast<std::int64_t>(lag) + 1 +
                              static_cast<std::int64_t>(t);
            if (step >= 0) {
                batch.step_labels(static_cast<Eigen::Index>(t), j) =
                    series.events[static_cast<std::size_t>(step) + 1].direction;
            }
        }
    }
    return batch;
}

std::string to_string(Normalization n) {
    switch (n) {
        case Normalization::None: return "none";
        case Normalization::PerStockZScore: return "per-stock-zscore";
        case Normalization::PooledZScore: return "pooled-zscore";
        case Normalization::SpreadUnits: return "spread-units";
        case Normalization::VolatilityUnits: return "volatility-units";
    }
    return "none";
}

Normalization normalization_from_string(const std::string& name) {
    for (auto n : {Normalization::None, Normalization::PerStockZScore, Normalization::PooledZScore,
                   Normalization::SpreadUnits, Normalization::VolatilityUnits}) {
        if (to_string(n) == name) return n;
    }
    throw Error(ErrorCode::InvalidConfig, "unknown normalization '" + name + "'");
}

void normalize_dataset(Dataset& data, std::span<const SequenceSample> train, Normalization scheme) {
    for (const auto& s : data.series) {
        if (s.normalized) throw Error(ErrorCode::AlreadyNormalized, s.stock_id + " was normalized before");
    }
    const std::size_t d = data.dimension();
    const auto dn = static_cast<Eigen::Index>(d);

    // range of state indices visible to the training partition, per series
    std::vector<std::int64_t> horizon(data.series.size(), -1);
    std::vector<std::int64_t> first(data.series.size(), std::numeric_limits<std::int64_t>::max());
    for (const auto& s : train) {
        horizon[s.series] = std::max<std::int64_t>(horizon[s.series], s.end);
        first[s.series] = std::min<std::int64_t>(first[s.series], static_cast<std::int64_t>(s.state_index(0)));
    }

    struct Moments {
        Eigen::VectorXd sum, sumsq;
        double count = 0.0;
        double touch = 0.0;   // sum of mean touch depth
        double spread = 0.0;  // sum of spreads
    };
    auto moments_of = [&](std::size_t i, Moments& m) {
        const EventSeries& s = data.series[i];
        const std::size_t levels = s.spec.levels;
        for (std::int64_t k = first[i]; k <= horizon[i]; ++k) {
            const auto x = s.states.col(static_cast<Eigen::Index>(k));
            m.sum += x;
            m.sumsq += x.cwiseAbs2();
            m.count += 1.0;
            m.touch += 0.5 * (x[0] + x[static_cast<Eigen::Index>(levels)]);
            if (s.spec.include_spread) m.spread += x[static_cast<Eigen::Index>(2 * levels)];
        }
    };
    auto fresh = [&] { return Moments{Eigen::VectorXd::Zero(dn), Eigen::VectorXd::Zero(dn), 0, 0, 0}; };

    auto fit = [&](const Moments& m, const FeatureSpec& spec) {
        Transform t = Transform::identity(d);
        if (scheme == Normalization::None) return t;
        if (m.count < 1.0) {
            throw Error(ErrorCode::EmptyPartition, "no training states to fit the normalization on");
        }
        const Eigen::VectorXd mean = m.sum / m.count;
        const Eigen::VectorXd var = (m.sumsq / m.count - mean.cwiseAbs2()).cwiseMax(0.0);
        if (scheme == Normalization::SpreadUnits) {
            const double touch = m.touch / m.count;
            const double spread = m.spread / m.count;
            for (std::size_t i = 0; i < 2 * spec.levels; ++i) {
                t.scale[static_cast<Eigen::Index>(i)] = touch > 0.0 ? touch : 1.0;
            }
            if (spec.include_spread) t.scale[static_cast<Eigen::Index>(2 * spec.levels)] = spread > 0.0 ? spread : 1.0;
            if (touch <= 0.0) t.zero_variance.push_back(0);
            return t;
        }
        for (Eigen::Index i = 0; i < dn; ++i) {
            const double sd = std::sqrt(var[i]);
            if (scheme != Normalization::VolatilityUnits) t.shift[i] = mean[i];
            if (sd > 1e-12) {
                t.scale[i] = sd;
            } else {
                t.zero_variance.push_back(static_cast<std::size_t>(i));
            }
        }
        return t;
    };

    std::vector<Transform> transforms(data.series.size());
    if (scheme == Normalization::PooledZScore) {
        Moments pooled = fresh();
        for (std::size_t i = 0; i < data.series.size(); ++i) moments_of(i, pooled);
        const Transform t = fit(pooled, data.series.front().spec);
        std::fill(transforms.begin(), transforms.end(), t);
    } else {
        for (std::size_t i = 0; i < data.series.size(); ++i) {
            Moments m = fresh();
            moments_of(i, m);
            if (scheme != Normalization::None && m.count < 1.0) {
                throw Error(ErrorCode::EmptyPartition,
                            data.series[i].stock_id + " has no training samples for a per-stock transform");
            }
            transforms[i] = fit(m, data.series[i].spec);
        }
    }
    for (std::size_t i = 0; i < data.series.size(); ++i) {
        EventSeries& s = data.series[i];
        const Transform& t = transforms[i];
        s.states = (s.states.colwise() - t.shift).array().colwise() / t.scale.array();
        s.transform = t;
        s.normalized = true;
    }
}

std::vector<std::vector<SequenceSample>> temporal_split(const Dataset& data,
                                                        std::span<const SequenceSample> samples,
                                                        std::span<const double> boundaries) {
    for (std::size_t i = 0; i < boundaries.size(); ++i) {
        const double b = boundaries[i];
        if (!(b > 0.0 && b < 1.0) || (i > 0 && b <= boundaries[i - 1])) {
            throw Error(ErrorCode::InvalidArgument, "split boundaries must increase strictly inside (0, 1)");
        }
    }
    std::vector<std::vector<SequenceSample>> by_series(data.series.size());
    for (const auto& s : samples) by_series.at(s.series).push_back(s);

    std::vector<std::vector<SequenceSample>> parts(boundaries.size() + 1);
    for (auto& list : by_series) {
        std::stable_sort(list.begin(), list.end(),
                         [](const SequenceSample& a, const SequenceSample& b) { return a.end < b.end; });
        const std::size_t n = list.size();
        std::size_t from = 0;
        for (std::size_t p = 0; p <= boundaries.size(); ++p) {
            const std::size_t to =
                p < boundaries.size() ? static_cast<std::size_t>(std::floor(boundaries[p] * static_cast<double>(n))) : n;
            for (std::size_t i = from; i < to; ++i) parts[p].push_back(list[i]);
            from = std::max(from, to);
        }
    }
    for (std::size_t p = 0; p < parts.size(); ++p) {
        if (parts[p].empty()) {
            throw Error(ErrorCode::EmptyPartition, "partition " + std::to_string(p) + " is empty");
        }
    }
    return parts;
}

std::uint64_t partition_hash(const Dataset& data, std::span<const SequenceSample> samples) {
    Fnv1a h;
    for (const auto& s : samples) {
        const std::string& id = data.of(s).stock_id;
        h.update(id.data(), id.size());
        h.update(&s.end, sizeof s.end);
        h.update(&s.label, sizeof s.label);
    }
    return h.digest();
}

Json to_json(const FeatureSpec& spec) {
    return Json{{"levels", spec.levels},
                {"include_spread", spec.include_spread},
                {"include_last_direction", spec.include_last_direction},
                {"depth_mode", spec.depth_mode == lob::DepthMode::TickOffset ? "tick-offset" : "occupied-level"}};
}

FeatureSpec feature_spec_from_json(const Json& doc, const std::string& where) {
    reject_unknown_keys(doc, {"levels", "include_spread", "include_last_direction", "depth_mode"}, where);
    FeatureSpec spec;
    read_optional(doc, "levels", spec.levels, where);
    read_optional(doc, "include_spread", spec.include_spread, where);
    read_optional(doc, "include_last_direction", spec.include_last_direction, where);
    std::string mode = "tick-offset";
    read_optional(doc, "depth_mode", mode, where);
    if (mode == "tick-offset") {
        spec.depth_mode = lob::DepthMode::TickOffset;
    } else if (mode == "occupied-level") {
        spec.depth_mode = lob::DepthMode::OccupiedLevel;
    } else {
        throw Error(ErrorCode::InvalidConfig, where + ".depth_mode: '" + mode + "'");
    }
    if (spec.levels < 1) throw Error(ErrorCode::InvalidConfig, where + ".levels: must be >= 1");
    return spec;
}

namespace {

Json vec_json(const Eigen::VectorXd& v) { return Json(std::vector<double>(v.data(), v.data() + v.size())); }

Eigen::VectorXd json_vec(const Json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

void write_dataset(const Dataset& data, const Json& extra_header, const std::filesystem::path& path) {
    Json header;
    header["format"] = "pfl-dataset-1";
    header["lag"] = data.lag;
    header["dimension"] = data.dimension();
    header["extra"] = extra_header;
    header["series"] = Json::array();
    for (const auto& s : data.series) {
        header["series"].push_back(Json{{"stock_id", s.stock_id},
                                        {"events", s.size()},
                                        {"feature_spec", to_json(s.spec)},
                                        {"one_sided_skipped", s.one_sided_skipped},
                                        {"normalized", s.normalized},
                                        {"transform",
                                         {{"shift", vec_json(s.transform.shift)},
                                          {"scale", vec_json(s.transform.scale)},
                                          {"zero_variance", s.transform.zero_variance}}}});
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    out << "# " << header.dump() << '\n';
    out << "stock_id,k,tau,direction,snapshot_index";
    for (std::size_t i = 1; i <= data.dimension(); ++i) out << ",x" << i;
    out << '\n';
    char tau[48];
    for (const auto& s : data.series) {
        for (std::size_t k = 0; k < s.size(); ++k) {
            const auto& e = s.events[k];
            std::snprintf(tau, sizeof tau, "%.9f", e.tau);
            out << s.stock_id << ',' << e.k << ',' << tau << ',' << e.direction << ',' << e.snapshot_index;
            for (Eigen::Index r = 0; r < s.states.rows(); ++r) {
                out << ',' << format_double(s.states(r, static_cast<Eigen::Index>(k)));
            }
            out << '\n';
        }
    }
    if (!out) throw Error(ErrorCode::Io, "write failure on " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path, Json* header_out) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line.rfind("# ", 0) != 0) {
        throw Error(ErrorCode::MalformedLine, path.string() + ": missing JSON header line");
    }
    const Json header = parse_json(std::string_view(line).substr(2), path.string());
    if (header.value("format", "") != "pfl-dataset-1") {
        throw Error(ErrorCode::MalformedLine, path.string() + ": unknown dataset format");
    }
    Dataset data;
    data.lag = header.at("lag").get<std::size_t>();
    const auto d = header.at("dimension").get<std::size_t>();
    std::map<std::string, std::size_t> index;
    for (const auto& js : header.at("series")) {
        EventSeries s;
        s.stock_id = js.at("stock_id").get<std::string>();
        s.spec = feature_spec_from_json(js.at("feature_spec"), "feature_spec");
        s.one_sided_skipped = js.at("one_sided_skipped").get<std::size_t>();
        s.normalized = js.at("normalized").get<bool>();
        s.transform.shift = json_vec(js.at("transform").at("shift"));
        s.transform.scale = json_vec(js.at("transform").at("scale"));
        s.transform.zero_variance = js.at("transform").at("zero_variance").get<std::vector<std::size_t>>();
        const auto n = js.at("events").get<std::size_t>();
        s.events.reserve(n);
        s.states.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(n));
        index[s.stock_id] = data.series.size();
        data.series.push_back(std::move(s));
    }
    std::getline(in, line);  // column names
    std::size_t line_no = 2;
    std::vector<std::string_view> fields;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        fields.clear();
        std::size_t start = 0;
        while (true) {
            const auto comma = line.find(',', start);
            fields.emplace_back(line.data() + start, (comma == std::string::npos ? line.size() : comma) - start);
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        auto bad = [&](const std::string& why) {
            return Error(ErrorCode::MalformedLine, path.string() + " line " + std::to_string(line_no) + ": " + why);
        };
        if (fields.size() != 5 + d) throw bad("expected " + std::to_string(5 + d) + " columns");
        auto it = index.find(std::string(fields[0]));
        if (it == index.end()) throw bad("unknown stock");
        EventSeries& s = data.series[it->second];
        auto num = [&](std::string_view f, auto& v) {
            auto [p, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
            if (ec != std::errc{} || p != f.data() + f.size()) throw bad("bad number '" + std::string(f) + "'");
        };
        PriceChangeEvent e;
        num(fields[1], e.k);
        num(fields[2], e.tau);
        num(fields[3], e.direction);
        num(fields[4], e.snapshot_index);
        if (e.k != s.events.size() || e.k >= static_cast<std::size_t>(s.states.cols())) throw bad("event out of order");
        for (std::size_t r = 0; r < d; ++r) {
            num(fields[5 + r], s.states(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(e.k)));
        }
        s.events.push_back(e);
    }
    for (const auto& s : data.series) {
        if (s.events.size() != static_cast<std::size_t>(s.states.cols())) {
            throw Error(ErrorCode::MalformedLine, path.string() + ": " + s.stock_id + " is truncated");
        }
    }
    if (header_out != nullptr) *header_out = header;
    return data;
}

}  // namespace pfl::features
