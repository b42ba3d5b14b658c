#include "pfl/lob/order_book.hpp"

#include <string>

namespace pfl::lob {

using feed::Message;
using feed::MessageKind;

MidSpread mid_and_spread(const DepthSnapshot& snap) {
    if (!snap.has_bid() || !snap.has_ask()) {
        throw Error(ErrorCode::OneSidedBook, "mid-price needs both sides of the book");
    }
    return {snap.best_bid + snap.best_ask, snap.best_ask - snap.best_bid};
}

OrderBook::OrderBook(BookConfig config) : config_(config) {
    if (config_.price_units_per_tick <= 0) {
        throw Error(ErrorCode::InvalidConfig, "price_units_per_tick must be positive");
    }
}

std::int64_t OrderBook::to_ticks(std::int64_t message_price) const {
    if (message_price % config_.price_units_per_tick != 0) {
        throw Error(ErrorCode::InvalidArgument,
                    "price " + std::to_string(message_price) + " is not a multiple of the tick");
    }
    return message_price / config_.price_units_per_tick;
}

void OrderBook::apply(const Message& msg) {
    switch (msg.kind) {
        case MessageKind::Submit:
            submit(msg);
            return;
        case MessageKind::PartialCancel:
            reduce(msg);
            return;
        case MessageKind::ExecuteVisible:
            reduce(msg);
            return;
        case MessageKind::Delete: {
            if (!index_.contains(msg.order_id)) {
                throw Error(ErrorCode::UnknownOrderId,
                            "delete of order " + std::to_string(msg.order_id));
            }
            remove(msg.order_id);
            return;
        }
        case MessageKind::ExecuteHidden:
            // hidden liquidity never shows in the visible book
            ++hidden_executions_;
            return;
        case MessageKind::Halt:
            ++halts_skipped_;
            return;
    }
    throw Error(ErrorCode::InvalidArgument, "unknown message kind");
}

void OrderBook::submit(const Message& msg) {
    if (msg.size <= 0) {
        throw Error(ErrorCode::NonPositiveSize, "submit of size " + std::to_string(msg.size));
    }
    if (index_.contains(msg.order_id)) {
        throw Error(ErrorCode::DuplicateOrderId, "order " + std::to_string(msg.order_id));
    }
    const Side side = msg.direction > 0 ? Side::Bid : Side::Ask;
    const std::int64_t price = to_ticks(msg.price);

    const bool crosses = side == Side::Bid ? (!asks_.empty() && price >= asks_.begin()->first)
                                           : (!bids_.empty() && price <= bids_.begin()->first);
    std::int64_t remaining = msg.size;
    if (crosses) {
        if (config_.crossing == CrossingPolicy::Reject) {
            throw Error(ErrorCode::CrossingLimitOrder,
                        "order " + std::to_string(msg.order_id) + " at " + std::to_string(price) +
                            " crosses the opposite touch");
        }
        match_incoming(side, price, remaining);
    }
    if (remaining > 0) rest(msg.order_id, side, price, remaining);
}

void OrderBook::match_incoming(Side side, std::int64_t limit, std::int64_t& remaining) {
    auto consume = [&](auto& book_side, auto price_ok, std::int64_t& side_total) {
        while (remaining > 0 && !book_side.empty() && price_ok(book_side.begin()->first)) {
            auto level_it = book_side.begin();
            Level& level = level_it->second;
            Order& head = level.queue.front();
            const std::int64_t fill = std::min(remaining, head.size);
            head.size -= fill;
            level.total -= fill;
            side_total -= fill;
            remaining -= fill;
            if (head.size == 0) {
                index_.erase(head.id);
                level.queue.pop_front();
            }
            if (level.queue.empty()) book_side.erase(level_it);
        }
    };
    if (side == Side::Bid) {
        consume(asks_, [limit](std::int64_t p) { return p <= limit; }, ask_total_);
    } else {
        consume(bids_, [limit](std::int64_t p) { return p >= limit; }, bid_total_);
    }
}

void OrderBook::rest(std::int64_t id, Side side, std::int64_t price, std::int64_t size) {
    Level& level = side == Side::Bid ? bids_[price] : asks_[price];
    level.queue.push_back(Order{id, side, price, size, next_seq_++});
    level.total += size;
    (side == Side::Bid ? bid_total_ : ask_total_) += size;
    index_.emplace(id, Locator{side, price, std::prev(level.queue.end())});
}

void OrderBook::reduce(const Message& msg) {
    auto found = index_.find(msg.order_id);
    if (found == index_.end()) {
        throw Error(ErrorCode::UnknownOrderId, "order " + std::to_string(msg.order_id));
    }
    if (msg.size <= 0) {
        throw Error(ErrorCode::NonPositiveSize, "reduction of size " + std::to_string(msg.size));
    }
    Order& order = *found->second.it;
    if (msg.size > order.size) {
        throw Error(ErrorCode::SizeExceedsOrder,
                    "order " + std::to_string(order.id) + " has " + std::to_string(order.size) +
                        " shares, message removes " + std::to_string(msg.size));
    }
    if (msg.size == order.size) {
        remove(order.id);
        return;
    }
    order.size -= msg.size;
    if (found->second.side == Side::Bid) {
        bids_.find(found->second.price)->second.total -= msg.size;
        bid_total_ -= msg.size;
    } else {
        asks_.find(found->second.price)->second.total -= msg.size;
        ask_total_ -= msg.size;
    }
}

void OrderBook::remove(std::int64_t order_id) {
    auto found = index_.find(order_id);
    const Locator loc = found->second;
    const std::int64_t size = loc.it->size;
    auto erase_from = [&](auto& book_side, std::int64_t& side_total) {
        auto level_it = book_side.find(loc.price);
        level_it->second.total -= size;
        level_it->second.queue.erase(loc.it);
        if (level_it->second.queue.empty()) book_side.erase(level_it);
        side_total -= size;
    };
    if (loc.side == Side::Bid) {
        erase_from(bids_, bid_total_);
    } else {
        erase_from(asks_, ask_total_);
    }
    index_.erase(found);
}

std::optional<std::int64_t> OrderBook::best_bid() const {
    if (bids_.empty()) return std::nullopt;
    return bids_.begin()->first;
}

std::optional<std::int64_t> OrderBook::best_ask() const {
    if (asks_.empty()) return std::nullopt;
    return asks_.begin()->first;
}

std::int64_t OrderBook::level_size(Side side, std::int64_t price) const {
    if (side == Side::Bid) {
        auto it = bids_.find(price);
        return it == bids_.end() ? 0 : it->second.total;
    }
    auto it = asks_.find(price);
    return it == asks_.end() ? 0 : it->second.total;
}

std::int64_t OrderBook::total_size(Side side) const noexcept {
    return side == Side::Bid ? bid_total_ : ask_total_;
}

const Order* OrderBook::find(std::int64_t order_id) const {
    auto it = index_.find(order_id);
    return it == index_.end() ? nullptr : &*it->second.it;
}

std::vector<Order> OrderBook::level_orders(Side side, std::int64_t price) const {
    std::vector<Order> out;
    auto copy = [&](const auto& book_side) {
        auto it = book_side.find(price);
        if (it != book_side.end()) out.assign(it->second.queue.begin(), it->second.queue.end());
    };
    if (side == Side::Bid) {
        copy(bids_);
    } else {
        copy(asks_);
    }
    return out;
}

std::vector<Order> OrderBook::live_orders() const {
    std::vector<Order> out;
    out.reserve(index_.size());
    for (const auto& [price, level] : bids_) out.insert(out.end(), level.queue.begin(), level.queue.end());
    for (const auto& [price, level] : asks_) out.insert(out.end(), level.queue.begin(), level.queue.end());
    return out;
}

template <class Map>
void OrderBook::fill_levels(const Map& side, std::int64_t best, bool descending,
                            std::size_t levels, DepthMode mode,
                            std::vector<std::int64_t>& out) const {
    out.assign(levels, 0);
    if (side.empty()) return;
    if (mode == DepthMode::OccupiedLevel) {
        std::size_t i = 0;
        for (auto it = side.begin(); it != side.end() && i < levels; ++it, ++i) {
            out[i] = it->second.total;
        }
        return;
    }
    for (auto it = side.begin(); it != side.end(); ++it) {
        const std::int64_t offset = descending ? best - it->first : it->first - best;
        if (offset >= static_cast<std::int64_t>(levels)) break;
        out[static_cast<std::size_t>(offset)] = it->second.total;
    }
}

DepthSnapshot OrderBook::snapshot(std::size_t levels, std::int64_t event_time_ns,
                                  DepthMode mode) const {
    DepthSnapshot snap;
    snap.event_time_ns = event_time_ns;
    if (!bids_.empty()) snap.best_bid = bids_.begin()->first;
    if (!asks_.empty()) snap.best_ask = asks_.begin()->first;
    fill_levels(bids_, snap.best_bid, true, levels, mode, snap.bid_sizes);
    fill_levels(asks_, snap.best_ask, false, levels, mode, snap.ask_sizes);
    return snap;
}

OrderBook apply_message(OrderBook book, const Message& msg) {
    book.apply(msg);
    return book;
}

void replay(std::span<const Message> messages, OrderBook& book,
            const std::function<void(std::size_t, const OrderBook&)>& on_applied) {
    std::int64_t last_time = std::numeric_limits<std::int64_t>::min();
    for (std::size_t i = 0; i < messages.size(); ++i) {
        const Message& msg = messages[i];
        if (msg.time_ns < last_time) {
            throw StreamError(ErrorCode::TimeOrdering, i,
                              "timestamp " + std::to_string(msg.time_ns) + " precedes " +
                                  std::to_string(last_time));
        }
        last_time = msg.time_ns;
        if (msg.kind == MessageKind::Halt) {
            book.apply(msg);
            continue;
        }
        try {
            book.apply(msg);
        } catch (const Error& e) {
            throw StreamError(e.code(), i, e.what());
        }
        if (on_applied) on_applied(i, book);
    }
}

std::vector<DepthSnapshot> rebuild_stream(std::span<const Message> messages, std::size_t levels,
                                          BookConfig config, DepthMode mode) {
    OrderBook book(config);
    std::vector<DepthSnapshot> out;
    out.reserve(messages.size());
    replay(messages, book, [&](std::size_t i, const OrderBook& b) {
        out.push_back(b.snapshot(levels, messages[i].time_ns, mode));
    });
    return out;
}

}  // namespace pfl::lob
