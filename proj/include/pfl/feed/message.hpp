#pragma once

#include <cstdint>

namespace pfl::feed {

/// LOBSTER event type codes. Type 6 (cross trade) is not part of this feed.
enum class MessageKind : std::uint8_t {
    Submit = 1,
    PartialCancel = 2,
    Delete = 3,
    ExecuteVisible = 4,
    ExecuteHidden = 5,
    Halt = 7,
};

inline constexpr std::int64_t kNanosPerSecond = 1'000'000'000;

/// One order-flow event. Prices are in 1e-4 currency units, times in
/// nanoseconds after midnight.
struct Message {
    std::int64_t time_ns = 0;
    MessageKind kind = MessageKind::Submit;
    std::int64_t order_id = 0;
    std::int64_t size = 0;
    std::int64_t price = 0;
    std::int8_t direction = 1;  // +1 buy, -1 sell

    [[nodiscard]] double time_seconds() const noexcept {
        return static_cast<double>(time_ns) / static_cast<double>(kNanosPerSecond);
    }

    bool operator==(const Message&) const = default;
};

[[nodiscard]] constexpr bool is_valid_kind(int code) noexcept {
    return (code >= 1 && code <= 5) || code == 7;
}

}  // namespace pfl::feed
