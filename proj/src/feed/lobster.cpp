#include "pfl/feed/lobster.hpp"

#include <array>
#include <charconv>
#include <cstdio>

namespace pfl::feed {

namespace {

constexpr int kFields = 6;

std::string describe(int field, std::size_t line, const std::string& reason) {
    std::string out;
    if (line > 0) out += "line " + std::to_string(line) + ", ";
    if (field >= 0) {
        out += "field " + std::to_string(field) + ": ";
    } else {
        out += "arity: ";
    }
    return out + reason;
}

std::int64_t parse_int(std::string_view text, int field) {
    std::int64_t value = 0;
    const char* first = text.data();
    const char* last = text.data() + text.size();
    if (text.empty()) throw MalformedLineError(field, 0, "empty field");
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc{} || ptr != last) {
        throw MalformedLineError(field, 0, "not an integer: '" + std::string(text) + "'");
    }
    return value;
}

// Seconds after midnight with up to nine fractional digits, kept exact.
std::int64_t parse_time_ns(std::string_view text) {
    const auto dot = text.find('.');
    const std::string_view whole = text.substr(0, dot);
    if (whole.empty() || whole.front() == '-' || whole.front() == '+') {
        throw MalformedLineError(0, 0, "bad time '" + std::string(text) + "'");
    }
    const std::int64_t seconds = parse_int(whole, 0);
    std::int64_t nanos = 0;
    if (dot != std::string_view::npos) {
        const std::string_view frac = text.substr(dot + 1);
        if (frac.empty() || frac.size() > 9) {
            throw MalformedLineError(0, 0, "time needs 1 to 9 fractional digits");
        }
        for (char c : frac) {
            if (c < '0' || c > '9') throw MalformedLineError(0, 0, "bad time '" + std::string(text) + "'");
            nanos = nanos * 10 + (c - '0');
        }
        for (std::size_t i = frac.size(); i < 9; ++i) nanos *= 10;
    }
    return seconds * kNanosPerSecond + nanos;
}

}  // namespace

MalformedLineError::MalformedLineError(int field, std::size_t line, const std::string& reason)
    : Error(ErrorCode::MalformedLine, describe(field, line, reason)),
      field_(field),
      line_(line),
      reason_(reason) {}

Message parse_message_line(std::string_view line) {
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    std::array<std::string_view, kFields> fields;
    int count = 0;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        const auto piece = line.substr(start, comma == std::string_view::npos ? line.npos : comma - start);
        if (count == kFields) throw MalformedLineError(-1, 0, "more than 6 fields");
        fields[static_cast<std::size_t>(count++)] = piece;
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    if (count != kFields) {
        throw MalformedLineError(-1, 0, "expected 6 fields, got " + std::to_string(count));
    }

    Message msg;
    msg.time_ns = parse_time_ns(fields[0]);
    const std::int64_t kind = parse_int(fields[1], 1);
    if (!is_valid_kind(static_cast<int>(kind))) {
        throw MalformedLineError(1, 0, "invalid event type " + std::to_string(kind));
    }
    msg.kind = static_cast<MessageKind>(kind);
    msg.order_id = parse_int(fields[2], 2);
    msg.size = parse_int(fields[3], 3);
    msg.price = parse_int(fields[4], 4);
    const std::int64_t dir = parse_int(fields[5], 5);
    if (dir != 1 && dir != -1) throw MalformedLineError(5, 0, "direction must be 1 or -1");
    msg.direction = static_cast<std::int8_t>(dir);

    if (msg.kind != MessageKind::Halt) {
        if (msg.size <= 0) throw MalformedLineError(3, 0, "size must be positive");
        if (msg.price <= 0) throw MalformedLineError(4, 0, "price must be positive");
    } else if (msg.size < 0) {
        throw MalformedLineError(3, 0, "negative size");
    }
    return msg;
}

std::string serialize_message_line(const Message& msg) {
    std::array<char, 128> buf{};
    const int n = std::snprintf(buf.data(), buf.size(), "%lld.%09lld,%d,%lld,%lld,%lld,%d",
                                static_cast<long long>(msg.time_ns / kNanosPerSecond),
                                static_cast<long long>(msg.time_ns % kNanosPerSecond),
                                static_cast<int>(msg.kind), static_cast<long long>(msg.order_id),
                                static_cast<long long>(msg.size), static_cast<long long>(msg.price),
                                static_cast<int>(msg.direction));
    return std::string(buf.data(), static_cast<std::size_t>(n));
}

MessageReader::MessageReader(const std::filesystem::path& path) : path_(path), in_(path) {
    if (!in_) throw Error(ErrorCode::Io, "cannot open " + path.string());
}

std::optional<Message> MessageReader::next() {
    while (std::getline(in_, buffer_)) {
        ++line_no_;
        if (buffer_.empty() || buffer_ == "\r") continue;
        try {
            return parse_message_line(buffer_);
        } catch (const MalformedLineError& e) {
            throw MalformedLineError(e.field(), line_no_, e.reason() + " (" + path_.string() + ")");
        }
    }
    if (in_.bad()) throw Error(ErrorCode::Io, "read failure on " + path_.string());
    return std::nullopt;
}

std::vector<Message> read_messages(const std::filesystem::path& path) {
    MessageReader reader(path);
    std::vector<Message> out;
    while (auto msg = reader.next()) out.push_back(*msg);
    return out;
}

void write_messages(std::span<const Message> messages, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    for (const Message& m : messages) {
        out << serialize_message_line(m) << '\n';
    }
    if (!out) throw Error(ErrorCode::Io, "write failure on " + path.string());
}

std::string format_snapshot_row(const lob::DepthSnapshot& snap, std::int64_t units) {
    std::string row;
    row.reserve(snap.levels() * 24);
    auto price_of = [&](bool present, std::int64_t best, std::int64_t offset) {
        return present ? (best + offset) * units : kLobsterAbsentPrice;
    };
    for (std::size_t i = 0; i < snap.levels(); ++i) {
        const auto off = static_cast<std::int64_t>(i);
        if (i > 0) row += ',';
        row += std::to_string(price_of(snap.has_ask(), snap.best_ask, off));
        row += ',';
        row += std::to_string(snap.has_ask() ? snap.ask_sizes[i] : 0);
        row += ',';
        row += std::to_string(price_of(snap.has_bid(), snap.best_bid, -off));
        row += ',';
        row += std::to_string(snap.has_bid() ? snap.bid_sizes[i] : 0);
    }
    return row;
}

void write_snapshot_rows(std::span<const lob::DepthSnapshot> snaps,
                         const std::filesystem::path& path, std::int64_t units) {
    if (!snaps.empty()) {
        const std::size_t depth = snaps.front().levels();
        for (const auto& s : snaps) {
            if (s.levels() != depth || s.ask_sizes.size() != depth) {
                throw Error(ErrorCode::MixedDepth, "snapshots do not share one level count");
            }
        }
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    for (const auto& s : snaps) out << format_snapshot_row(s, units) << '\n';
    if (!out) throw Error(ErrorCode::Io, "write failure on " + path.string());
}

std::vector<lob::DepthSnapshot> read_snapshot_rows(const std::filesystem::path& path,
                                                   std::int64_t units) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
    std::vector<lob::DepthSnapshot> out;
    std::string line;
    std::size_t line_no = 0;
    std::vector<std::int64_t> values;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        values.clear();
        std::size_t start = 0;
        while (true) {
            const auto comma = line.find(',', start);
            const std::string_view piece(line.data() + start,
                                         (comma == std::string::npos ? line.size() : comma) - start);
            try {
                values.push_back(parse_int(piece, static_cast<int>(values.size())));
            } catch (const MalformedLineError& e) {
                throw MalformedLineError(e.field(), line_no, "bad snapshot value");
            }
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (values.empty() || values.size() % 4 != 0) {
            throw MalformedLineError(-1, line_no, "snapshot row needs 4*L columns");
        }
        const std::size_t levels = values.size() / 4;
        if (!out.empty() && out.front().levels() != levels) {
            throw Error(ErrorCode::MixedDepth, "line " + std::to_string(line_no));
        }
        lob::DepthSnapshot snap;
        snap.ask_sizes.resize(levels);
        snap.bid_sizes.resize(levels);
        if (values[0] != kLobsterAbsentPrice) snap.best_ask = values[0] / units;
        if (values[2] != kLobsterAbsentPrice) snap.best_bid = values[2] / units;
        for (std::size_t i = 0; i < levels; ++i) {
            snap.ask_sizes[i] = values[4 * i + 1];
            snap.bid_sizes[i] = values[4 * i + 3];
        }
        out.push_back(std::move(snap));
    }
    return out;
}

}  // namespace pfl::feed
