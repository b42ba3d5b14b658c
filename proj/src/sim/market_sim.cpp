#include "pfl/sim/market_sim.hpp"

#include <cmath>
#include <cstdio>
#include <deque>
#include <map>
#include <string>

#include "pfl/error.hpp"
#include "pfl/random.hpp"

namespace pfl::sim {

using feed::Message;
using feed::MessageKind;

namespace {

void require(bool ok, const std::string& field, const std::string& why) {
    if (!ok) throw Error(ErrorCode::InvalidConfig, field + ": " + why);
}

bool positive(double x) { return std::isfinite(x) && x > 0.0; }

// Fenwick tree over order slot sizes, used to pick a resting share uniformly.
class ShareIndex {
public:
    void resize(std::size_t n) {
        std::vector<std::int64_t> sizes(n, 0);
        for (std::size_t i = 0; i < values_.size(); ++i) sizes[i] = values_[i];
        values_ = std::move(sizes);
        tree_.assign(n + 1, 0);
        for (std::size_t i = 0; i < n; ++i) {
            if (values_[i] != 0) bump(i, values_[i]);
        }
    }
    [[nodiscard]] std::size_t capacity() const noexcept { return values_.size(); }

    void set(std::size_t i, std::int64_t size) {
        const std::int64_t delta = size - values_[i];
        values_[i] = size;
        total_ += delta;
        bump(i, delta);
    }
    [[nodiscard]] std::int64_t total() const noexcept { return total_; }

    // Slot holding share number `k` (0-based) in slot order.
    [[nodiscard]] std::size_t locate(std::int64_t k) const {
        std::size_t pos = 0;
        std::size_t step = 1;
        while (step * 2 <= values_.size()) step *= 2;
        for (; step > 0; step /= 2) {
            if (pos + step <= values_.size() && tree_[pos + step] <= k) {
                pos += step;
                k -= tree_[pos];
            }
        }
        return pos;
    }

private:
    void bump(std::size_t i, std::int64_t delta) {
        for (std::size_t j = i + 1; j < tree_.size(); j += j & (~j + 1)) tree_[j] += delta;
    }

    std::vector<std::int64_t> values_;
    std::vector<std::int64_t> tree_;
    std::int64_t total_ = 0;
};

enum class Side : std::uint8_t { Bid, Ask };

struct SimOrder {
    std::int64_t id = 0;
    std::int64_t price = 0;
    std::int64_t size = 0;
    Side side = Side::Bid;
};

struct SimLevel {
    std::deque<std::size_t> queue;  // slots, oldest first
    std::int64_t total = 0;
};

class Simulator {
public:
    explicit Simulator(const SimConfig& cfg) : cfg_(cfg), rng_(cfg.seed) {
        validate(cfg_);
        time_ns_ = 34200 * feed::kNanosPerSecond;
        if (cfg_.regime == Regime::Persistent) regime_ = uniform01(rng_) < 0.5 ? 1 : -1;
    }

    SimulationRun run(std::size_t n_messages) {
        out_.messages.reserve(n_messages + 64);
        seed_book();
        while (out_.messages.size() < n_messages) step();
        out_.messages.resize(n_messages);
        out_.elapsed_seconds = static_cast<double>(time_ns_) / 1e9 - 34200.0;
        return std::move(out_);
    }

private:
    std::int64_t best_bid() const { return bids_.rbegin()->first; }
    std::int64_t best_ask() const { return asks_.begin()->first; }
    std::map<std::int64_t, SimLevel>& book(Side s) { return s == Side::Bid ? bids_ : asks_; }

    void emit(MessageKind kind, const SimOrder& o, std::int64_t size) {
        out_.messages.push_back(Message{time_ns_, kind, o.id, size, o.price * cfg_.tick_size,
                                        static_cast<std::int8_t>(o.side == Side::Bid ? 1 : -1)});
    }

    std::size_t alloc_slot() {
        if (free_.empty()) {
            const std::size_t old = orders_.size();
            const std::size_t grown = std::max<std::size_t>(64, old * 2);
            orders_.resize(grown);
            shares_.resize(grown);
            for (std::size_t i = grown; i-- > old;) free_.push_back(i);
        }
        const std::size_t slot = free_.back();
        free_.pop_back();
        return slot;
    }

    void submit(Side side, std::int64_t price, std::int64_t size) {
        const std::size_t slot = alloc_slot();
        orders_[slot] = SimOrder{next_id_++, price, size, side};
        SimLevel& level = book(side)[price];
        level.queue.push_back(slot);
        level.total += size;
        shares_.set(slot, size);
        emit(MessageKind::Submit, orders_[slot], size);
    }

    // Removes `size` shares from the order in `slot`. Returns true when the
    // price level emptied.
    bool take(std::size_t slot, std::int64_t size, MessageKind kind) {
        SimOrder& o = orders_[slot];
        auto& side_book = book(o.side);
        auto level_it = side_book.find(o.price);
        SimLevel& level = level_it->second;
        const bool whole = size == o.size;
        emit(whole && kind == MessageKind::PartialCancel ? MessageKind::Delete : kind, o, size);
        o.size -= size;
        level.total -= size;
        shares_.set(slot, o.size);
        if (whole) {
            for (auto it = level.queue.begin(); it != level.queue.end(); ++it) {
                if (*it == slot) {
                    level.queue.erase(it);
                    break;
                }
            }
            free_.push_back(slot);
        }
        if (level.queue.empty()) {
            side_book.erase(level_it);
            return true;
        }
        return false;
    }

    std::int64_t draw_refill() { return uniform_int(rng_, 1, refill_max(cfg_)); }

    void seed_book() {
        const std::int64_t b = cfg_.start_price_ticks;
        for (int i = 0; i < cfg_.levels; ++i) {
            const std::int64_t size = i == 0 ? draw_refill() : cfg_.initial_depth;
            submit(Side::Bid, b - i, size);
            submit(Side::Ask, b + 1 + i, i == 0 ? draw_refill() : cfg_.initial_depth);
        }
        out_.events = 1;
    }

    // Sets the level at `price` to exactly `target` shares.
    void reshape(Side side, std::int64_t price, std::int64_t target) {
        auto& side_book = book(side);
        auto it = side_book.find(price);
        const std::int64_t have = it == side_book.end() ? 0 : it->second.total;
        if (have < target) {
            submit(side, price, target - have);
            return;
        }
        std::int64_t excess = have - target;
        while (excess > 0) {
            // newest orders leave first
            const std::size_t slot = side_book.find(price)->second.queue.back();
            const std::int64_t cut = std::min(excess, orders_[slot].size);
            take(slot, cut, MessageKind::PartialCancel);
            excess -= cut;
        }
    }

    // The touch on `side` just emptied at `price`.
    void on_depleted(Side side, std::int64_t price) {
        ++out_.price_moves;
        if (side == Side::Bid) {
            submit(Side::Ask, price, draw_refill());
            reshape(Side::Bid, price - 1, draw_refill());
        } else {
            submit(Side::Bid, price, draw_refill());
            reshape(Side::Ask, price + 1, draw_refill());
        }
        if (bids_.empty() && asks_.empty()) {
            throw Error(ErrorCode::BookDepleted, cfg_.stock_id + ": both sides empty");
        }
    }

    void market_order(Side hit) {
        const std::int64_t price = hit == Side::Bid ? best_bid() : best_ask();
        const std::size_t slot = book(hit).find(price)->second.queue.front();
        if (take(slot, 1, MessageKind::ExecuteVisible)) on_depleted(hit, price);
    }

    void sweep(Side hit) {
        const std::int64_t price = hit == Side::Bid ? best_bid() : best_ask();
        bool emptied = false;
        while (!emptied) {
            const std::size_t slot = book(hit).find(price)->second.queue.front();
            emptied = take(slot, orders_[slot].size, MessageKind::ExecuteVisible);
        }
        on_depleted(hit, price);
    }

    void cancel_share() {
        const std::size_t slot = shares_.locate(uniform_int(rng_, 0, shares_.total() - 1));
        const SimOrder o = orders_[slot];
        const bool at_touch = o.price == (o.side == Side::Bid ? best_bid() : best_ask());
        if (take(slot, 1, MessageKind::PartialCancel) && at_touch) on_depleted(o.side, o.price);
    }

    void advance_clock(double seconds) {
        clock_ += seconds;
        auto next = static_cast<std::int64_t>(std::llround(clock_ * 1e9)) +
                    34200 * feed::kNanosPerSecond;
        if (next <= time_ns_) next = time_ns_ + 1;
        time_ns_ = next;
    }

    void step() {
        const double up = cfg_.regime == Regime::Persistent ? 1.0 + cfg_.bias * regime_ : 1.0;
        const double down = cfg_.regime == Regime::Persistent ? 1.0 - cfg_.bias * regime_ : 1.0;
        const double levels = cfg_.levels;
        const bool sweeps = cfg_.sweep_rate > 0.0;
        // the regime tilts aggressive flow only, so resting depth carries no trace of it
        const double r_bid_limit = levels * cfg_.limit_rate;
        const double r_ask_limit = levels * cfg_.limit_rate;
        const double r_buy = cfg_.market_rate * up;  // hits the ask
        const double r_sell = cfg_.market_rate * down;
        const double r_cancel = cfg_.cancel_rate * static_cast<double>(shares_.total());
        const double r_sweep_bid =
            sweeps && bids_.rbegin()->second.total >= cfg_.sweep_threshold ? cfg_.sweep_rate : 0.0;
        const double r_sweep_ask =
            sweeps && asks_.begin()->second.total >= cfg_.sweep_threshold ? cfg_.sweep_rate : 0.0;
        const double r_flip = cfg_.regime == Regime::Persistent ? cfg_.flip_rate : 0.0;
        const double total = r_bid_limit + r_ask_limit + r_buy + r_sell + r_cancel + r_sweep_bid +
                             r_sweep_ask + r_flip;

        if (cfg_.mean_event_gap <= 0.0) {
            pending_ += exponential(rng_, 1.0 / total);
        }
        double u = uniform01(rng_) * total;
        if (u < r_flip) {
            regime_ = -regime_;  // hidden, no message
            return;
        }
        u -= r_flip;

        if (cfg_.mean_event_gap > 0.0) {
            advance_clock(exponential(rng_, cfg_.mean_event_gap));
        } else {
            advance_clock(pending_);
            pending_ = 0.0;
        }
        ++out_.events;

        if (u < r_bid_limit) {
            const auto i = static_cast<std::int64_t>(u / cfg_.limit_rate);
            submit(Side::Bid, best_bid() - std::min<std::int64_t>(i, cfg_.levels - 1), 1);
            return;
        }
        u -= r_bid_limit;
        if (u < r_ask_limit) {
            const auto i = static_cast<std::int64_t>(u / cfg_.limit_rate);
            submit(Side::Ask, best_ask() + std::min<std::int64_t>(i, cfg_.levels - 1), 1);
            return;
        }
        u -= r_ask_limit;
        if (u < r_buy) return market_order(Side::Ask);
        u -= r_buy;
        if (u < r_sell) return market_order(Side::Bid);
        u -= r_sell;
        if (u < r_sweep_bid) return sweep(Side::Bid);
        u -= r_sweep_bid;
        if (u < r_sweep_ask) return sweep(Side::Ask);
        cancel_share();
    }

    SimConfig cfg_;
    Rng rng_;
    int regime_ = 0;
    std::int64_t time_ns_ = 0;
    double clock_ = 0.0;
    double pending_ = 0.0;
    std::int64_t next_id_ = 1;
    std::map<std::int64_t, SimLevel> bids_;
    std::map<std::int64_t, SimLevel> asks_;
    std::vector<SimOrder> orders_;
    std::vector<std::size_t> free_;
    ShareIndex shares_;
    SimulationRun out_;
};

}  // namespace

void validate(const SimConfig& cfg) {
    require(!cfg.stock_id.empty(), "stock_id", "must not be empty");
    require(positive(cfg.limit_rate), "limit_rate", "must be > 0");
    require(positive(cfg.market_rate), "market_rate", "must be > 0");
    require(positive(cfg.cancel_rate), "cancel_rate", "must be > 0");
    require(cfg.levels >= 1, "levels", "must be >= 1");
    require(cfg.tick_size >= 1, "tick_size", "must be >= 1");
    require(cfg.initial_depth >= 1, "initial_depth", "must be >= 1");
    require(std::isfinite(cfg.mean_event_gap) && cfg.mean_event_gap >= 0.0, "mean_event_gap",
            "must be >= 0");
    require(std::isfinite(cfg.sweep_rate) && cfg.sweep_rate >= 0.0, "sweep_rate", "must be >= 0");
    require(cfg.sweep_rate == 0.0 || cfg.sweep_threshold >= 1, "sweep_threshold",
            "must be >= 1 when sweeps are on");
    require(cfg.start_price_ticks > cfg.levels + 1, "start_price_ticks", "too close to zero");
    if (cfg.regime == Regime::Persistent) {
        require(positive(cfg.flip_rate), "flip_rate", "must be > 0 in the persistent regime");
        require(cfg.bias >= 0.0 && cfg.bias < 1.0, "bias", "must lie in [0, 1)");
    } else {
        require(cfg.bias == 0.0, "bias", "only meaningful in the persistent regime");
    }
}

std::int64_t refill_max(const SimConfig& cfg) noexcept { return 2 * cfg.initial_depth - 1; }

SimulationRun run_simulation(const SimConfig& cfg, std::size_t n_messages) {
    return Simulator(cfg).run(n_messages);
}

std::vector<Message> simulate_stock(const SimConfig& cfg, std::size_t n_messages) {
    return run_simulation(cfg, n_messages).messages;
}

double calibrate_event_gap(SimConfig cfg, double target_seconds, std::size_t pilot_messages) {
    if (!positive(target_seconds)) {
        throw Error(ErrorCode::InvalidArgument, "target inter-change time must be > 0");
    }
    cfg.mean_event_gap = 1.0;
    const SimulationRun pilot = run_simulation(cfg, pilot_messages);
    if (pilot.price_moves == 0) {
        throw Error(ErrorCode::InvalidArgument, "pilot run produced no price changes");
    }
    const double events_per_move =
        static_cast<double>(pilot.events) / static_cast<double>(pilot.price_moves);
    return target_seconds / events_per_move;
}

std::vector<SimConfig> make_universe(std::size_t n_stocks, const UniverseRanges& ranges,
                                     std::uint64_t seed) {
    if (n_stocks == 0) throw Error(ErrorCode::InvalidArgument, "universe needs at least one stock");
    auto check = [](const std::optional<Range>& r, const char* name) {
        if (!r) return;
        if (!(std::isfinite(r->lo) && std::isfinite(r->hi)) || r->lo <= 0.0 || r->lo > r->hi) {
            throw Error(ErrorCode::EmptyRange, std::string(name) + ": [" + std::to_string(r->lo) +
                                                   ", " + std::to_string(r->hi) + "]");
        }
    };
    check(ranges.limit_rate, "limit_rate");
    check(ranges.market_rate, "market_rate");
    check(ranges.cancel_rate, "cancel_rate");
    check(ranges.initial_depth, "initial_depth");
    check(ranges.mean_event_gap, "mean_event_gap");
    check(ranges.sweep_rate, "sweep_rate");
    check(ranges.sweep_threshold, "sweep_threshold");
    check(ranges.flip_rate, "flip_rate");
    check(ranges.bias, "bias");

    std::vector<SimConfig> out;
    out.reserve(n_stocks);
    for (std::size_t i = 0; i < n_stocks; ++i) {
        Rng rng(mix_seed(seed, i));
        auto draw = [&rng](const std::optional<Range>& r, double fallback) {
            // one draw per range slot keeps streams aligned across configs
            const double u = uniform01(rng);
            if (!r) return fallback;
            if (r->lo == r->hi) return r->lo;
            return std::exp(std::log(r->lo) + u * (std::log(r->hi) - std::log(r->lo)));
        };
        SimConfig c = ranges.base;
        c.limit_rate = draw(ranges.limit_rate, c.limit_rate);
        c.market_rate = draw(ranges.market_rate, c.market_rate);
        c.cancel_rate = draw(ranges.cancel_rate, c.cancel_rate);
        c.initial_depth = std::llround(draw(ranges.initial_depth, static_cast<double>(c.initial_depth)));
        c.mean_event_gap = draw(ranges.mean_event_gap, c.mean_event_gap);
        c.sweep_rate = draw(ranges.sweep_rate, c.sweep_rate);
        c.sweep_threshold =
            std::llround(draw(ranges.sweep_threshold, static_cast<double>(c.sweep_threshold)));
        c.flip_rate = draw(ranges.flip_rate, c.flip_rate);
        c.bias = draw(ranges.bias, c.bias);
        char id[24];
        std::snprintf(id, sizeof id, "S%03zu", i);
        c.stock_id = id;
        c.seed = mix_seed(seed ^ 0x5eedULL, i);
        validate(c);
        out.push_back(std::move(c));
    }
    return out;
}

}  // namespace pfl::sim
