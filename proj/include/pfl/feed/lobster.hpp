#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pfl/error.hpp"
#include "pfl/feed/message.hpp"
#include "pfl/lob/order_book.hpp"

namespace pfl::feed {

/// LOBSTER writes this price for an empty level in orderbook files.
inline constexpr std::int64_t kLobsterAbsentPrice = -9999999999;

/// Parse failure. `field()` is the 0-based column (-1 for arity problems),
/// `line()` the 1-based line number when read from a file (0 otherwise).
class MalformedLineError : public Error {
public:
    MalformedLineError(int field, std::size_t line, const std::string& reason);

    [[nodiscard]] int field() const noexcept { return field_; }
    [[nodiscard]] std::size_t line() const noexcept { return line_; }
    [[nodiscard]] const std::string& reason() const noexcept { return reason_; }

private:
    int field_;
    std::size_t line_;
    std::string reason_;
};

/// Parses "time,type,order_id,size,price,direction".
Message parse_message_line(std::string_view line);

/// Canonical form: 9 fractional digits on the time, plain integers elsewhere.
std::string serialize_message_line(const Message& msg);

/// Streaming reader over a LOBSTER message file. Memory use does not depend
/// on the file length.
class MessageReader {
public:
    explicit MessageReader(const std::filesystem::path& path);

    /// Next message, or nullopt at end of file.
    std::optional<Message> next();

    [[nodiscard]] std::size_t line_number() const noexcept { return line_no_; }

private:
    std::filesystem::path path_;
    std::ifstream in_;
    std::string buffer_;
    std::size_t line_no_ = 0;
};

std::vector<Message> read_messages(const std::filesystem::path& path);
void write_messages(std::span<const Message> messages, const std::filesystem::path& path);

/// One row per snapshot: ask1 price, ask1 size, bid1 price, bid1 size, ... for
/// L levels. Prices are written as ticks * price_units_per_tick.
std::string format_snapshot_row(const lob::DepthSnapshot& snap, std::int64_t price_units_per_tick = 1);

void write_snapshot_rows(std::span<const lob::DepthSnapshot> snaps,
                         const std::filesystem::path& path,
                         std::int64_t price_units_per_tick = 1);

/// Inverse of write_snapshot_rows for tick-offset snapshots. Event times are
/// not stored in the row format and come back as zero.
std::vector<lob::DepthSnapshot> read_snapshot_rows(const std::filesystem::path& path,
                                                   std::int64_t price_units_per_tick = 1);

}  // namespace pfl::feed
