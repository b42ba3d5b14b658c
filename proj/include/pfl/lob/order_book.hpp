#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <list>
#include <map>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "pfl/error.hpp"
#include "pfl/feed/message.hpp"

namespace pfl::lob {

enum class Side : std::uint8_t { Bid, Ask };

struct Order {
    std::int64_t id = 0;
    Side side = Side::Bid;
    std::int64_t price = 0;  // ticks
    std::int64_t size = 0;   // shares, > 0 while live
    std::uint64_t seq = 0;   // arrival order

    bool operator==(const Order&) const = default;
};

/// What to do with a submitted limit order that would cross the opposite touch.
enum class CrossingPolicy : std::uint8_t {
    Reject,   // replay of recorded data: marketable flow is already decomposed
    Execute,  // simulation: match against the opposite side, rest the remainder
};

/// How depth levels are indexed in a snapshot.
enum class DepthMode : std::uint8_t {
    TickOffset,     // level i = i ticks away from the touch, empty levels report 0
    OccupiedLevel,  // level i = i-th non-empty price level
};

struct BookConfig {
    std::int64_t price_units_per_tick = 1;  // message price units per tick
    CrossingPolicy crossing = CrossingPolicy::Reject;
};

inline constexpr std::int64_t kAbsentPrice = std::numeric_limits<std::int64_t>::min();

/// Top-L projection of the book. Prices in ticks.
struct DepthSnapshot {
    std::int64_t best_bid = kAbsentPrice;
    std::int64_t best_ask = kAbsentPrice;
    std::vector<std::int64_t> bid_sizes;
    std::vector<std::int64_t> ask_sizes;
    std::int64_t event_time_ns = 0;

    [[nodiscard]] bool has_bid() const noexcept { return best_bid != kAbsentPrice; }
    [[nodiscard]] bool has_ask() const noexcept { return best_ask != kAbsentPrice; }
    [[nodiscard]] std::size_t levels() const noexcept { return bid_sizes.size(); }

    bool operator==(const DepthSnapshot&) const = default;
};

struct MidSpread {
    std::int64_t mid_half_ticks = 0;  // best_bid + best_ask
    std::int64_t spread_ticks = 0;
};

/// Mid-price and spread; throws OneSidedBook when a side is absent.
MidSpread mid_and_spread(const DepthSnapshot& snap);

/// Price-time priority limit order book driven by LOBSTER-style messages.
/// One book is owned by one thread at a time.
class OrderBook {
public:
    explicit OrderBook(BookConfig config = {});

    /// Applies one message. Throws pfl::Error on precondition violations; the
    /// book is left unchanged when an exception is thrown.
    void apply(const feed::Message& msg);

    [[nodiscard]] DepthSnapshot snapshot(std::size_t levels, std::int64_t event_time_ns,
                                         DepthMode mode = DepthMode::TickOffset) const;

    [[nodiscard]] std::optional<std::int64_t> best_bid() const;
    [[nodiscard]] std::optional<std::int64_t> best_ask() const;

    [[nodiscard]] std::int64_t level_size(Side side, std::int64_t price_ticks) const;
    [[nodiscard]] std::int64_t total_size(Side side) const noexcept;
    [[nodiscard]] std::size_t order_count() const noexcept { return index_.size(); }
    [[nodiscard]] bool contains(std::int64_t order_id) const { return index_.contains(order_id); }
    [[nodiscard]] const Order* find(std::int64_t order_id) const;

    /// Orders at one price level in priority order.
    [[nodiscard]] std::vector<Order> level_orders(Side side, std::int64_t price_ticks) const;
    /// Every live order, bids then asks, each side best price first.
    [[nodiscard]] std::vector<Order> live_orders() const;

    [[nodiscard]] std::uint64_t halts_skipped() const noexcept { return halts_skipped_; }
    [[nodiscard]] std::uint64_t hidden_executions() const noexcept { return hidden_executions_; }
    [[nodiscard]] const BookConfig& config() const noexcept { return config_; }

    [[nodiscard]] std::int64_t to_ticks(std::int64_t message_price) const;

private:
    struct Level {
        std::list<Order> queue;
        std::int64_t total = 0;
    };
    struct Locator {
        Side side;
        std::int64_t price;
        std::list<Order>::iterator it;
    };
    using BidMap = std::map<std::int64_t, Level, std::greater<>>;
    using AskMap = std::map<std::int64_t, Level, std::less<>>;

    void submit(const feed::Message& msg);
    void reduce(const feed::Message& msg);
    void remove(std::int64_t order_id);
    void match_incoming(Side side, std::int64_t limit_ticks, std::int64_t& remaining);
    void rest(std::int64_t id, Side side, std::int64_t price, std::int64_t size);

    template <class Map>
    void fill_levels(const Map& side, std::int64_t best, bool descending, std::size_t levels,
                     DepthMode mode, std::vector<std::int64_t>& out) const;

    BookConfig config_;
    BidMap bids_;
    AskMap asks_;
    std::unordered_map<std::int64_t, Locator> index_;
    std::int64_t bid_total_ = 0;
    std::int64_t ask_total_ = 0;
    std::uint64_t next_seq_ = 0;
    std::uint64_t halts_skipped_ = 0;
    std::uint64_t hidden_executions_ = 0;
};

/// Functional form: returns the book after applying `msg`.
OrderBook apply_message(OrderBook book, const feed::Message& msg);

/// Error raised while replaying a stream; carries the offending message index.
class StreamError : public Error {
public:
    StreamError(ErrorCode code, std::size_t index, const std::string& what)
        : Error(code, "message " + std::to_string(index) + ": " + what), index_(index) {}
    [[nodiscard]] std::size_t index() const noexcept { return index_; }

private:
    std::size_t index_;
};

/// Replays a time-ordered stream, invoking `on_applied` after every applied
/// message. Halt messages are counted and skipped (no callback).
void replay(std::span<const feed::Message> messages, OrderBook& book,
            const std::function<void(std::size_t index, const OrderBook&)>& on_applied);

/// One snapshot per applied message.
std::vector<DepthSnapshot> rebuild_stream(std::span<const feed::Message> messages,
                                          std::size_t levels, BookConfig config = {},
                                          DepthMode mode = DepthMode::TickOffset);

}  // namespace pfl::lob
