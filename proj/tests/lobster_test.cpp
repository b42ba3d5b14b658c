#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "pfl/feed/lobster.hpp"
#include "support/generators.hpp"

using namespace pfl;
using feed::Message;
using feed::MessageKind;

namespace {

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("pfl_lobster_" + name);
}

}  // namespace

TEST(ParseMessage, LobsterExample) {
    const std::string line = "34200.189462639,1,11885113,21,2238200,1";
    const Message m = feed::parse_message_line(line);
    EXPECT_EQ(m.time_ns, 34200189462639LL);
    EXPECT_EQ(m.kind, MessageKind::Submit);
    EXPECT_EQ(m.order_id, 11885113);
    EXPECT_EQ(m.size, 21);
    EXPECT_EQ(m.price, 2238200);
    EXPECT_EQ(m.direction, 1);
    EXPECT_EQ(feed::serialize_message_line(m), line);
}

TEST(ParseMessage, DeleteOfSellOrder) {
    const Message m = feed::parse_message_line("0.0,3,5,10,10000,-1");
    EXPECT_EQ(m.time_ns, 0);
    EXPECT_EQ(m.kind, MessageKind::Delete);
    EXPECT_EQ(m.order_id, 5);
    EXPECT_EQ(m.direction, -1);
    EXPECT_EQ(feed::serialize_message_line(m), "0.000000000,3,5,10,10000,-1");
}

TEST(ParseMessage, ShortTimeFraction) {
    EXPECT_EQ(feed::parse_message_line("34200.5,1,1,1,1,1").time_ns, 34200500000000LL);
    EXPECT_EQ(feed::parse_message_line("34200,1,1,1,1,1\r").time_ns, 34200000000000LL);
}

TEST(ParseMessage, Arity) {
    try {
        (void)feed::parse_message_line("1,2,3");
        FAIL();
    } catch (const feed::MalformedLineError& e) {
        EXPECT_EQ(e.code(), ErrorCode::MalformedLine);
        EXPECT_EQ(e.field(), -1);
    }
    EXPECT_THROW((void)feed::parse_message_line("1,1,1,1,1,1,1"), feed::MalformedLineError);
}

TEST(ParseMessage, BadFieldsNameTheField) {
    auto field_of = [](const std::string& line) {
        try {
            (void)feed::parse_message_line(line);
        } catch (const feed::MalformedLineError& e) {
            return e.field();
        }
        return -99;
    };
    EXPECT_EQ(field_of("abc,1,1,1,1,1"), 0);
    EXPECT_EQ(field_of("1.0123456789,1,1,1,1,1"), 0);
    EXPECT_EQ(field_of("-1.0,1,1,1,1,1"), 0);
    EXPECT_EQ(field_of("1,6,1,1,1,1"), 1);
    EXPECT_EQ(field_of("1,1,x,1,1,1"), 2);
    EXPECT_EQ(field_of("1,1,1,0,1,1"), 3);
    EXPECT_EQ(field_of("1,1,1,5,0,1"), 4);
    EXPECT_EQ(field_of("1,1,1,1,1,0"), 5);
    EXPECT_EQ(field_of("1,1,1,1,1,2"), 5);
}

TEST(ParseMessage, HaltLine) {
    const Message m = feed::parse_message_line("36000.000000000,7,0,0,-1,-1");
    EXPECT_EQ(m.kind, MessageKind::Halt);
    EXPECT_EQ(feed::serialize_message_line(m), "36000.000000000,7,0,0,-1,-1");
}

TEST(SerializeMessage, NegativeDirection) {
    Message m{1, MessageKind::ExecuteVisible, 3, 4, 5, -1};
    const auto line = feed::serialize_message_line(m);
    EXPECT_EQ(line.substr(line.size() - 3), ",-1");
}

TEST(SerializeMessage, RoundTripProperty) {
    Rng rng(2024);
    for (int i = 0; i < 200000; ++i) {
        const Message m = testkit::random_message(rng);
        const std::string line = feed::serialize_message_line(m);
        const Message back = feed::parse_message_line(line);
        ASSERT_EQ(back, m) << line;
        ASSERT_EQ(feed::serialize_message_line(back), line);
    }
}

TEST(MessageReader, ReadsInOrder) {
    const auto path = temp_file("three.csv");
    {
        std::ofstream out(path);
        out << "1.000000000,1,1,10,100,1\n2.000000000,1,2,10,101,-1\n3.000000000,3,1,10,100,1\n";
    }
    const auto msgs = feed::read_messages(path);
    ASSERT_EQ(msgs.size(), 3u);
    EXPECT_EQ(msgs[1].order_id, 2);
    EXPECT_EQ(msgs[2].kind, MessageKind::Delete);
    std::filesystem::remove(path);
}

TEST(MessageReader, ErrorNamesLine) {
    const auto path = temp_file("bad.csv");
    {
        std::ofstream out(path);
        out << "1.0,1,1,10,100,1\n1.5,9,1,10,100,1\n2.0,1,2,10,101,-1\n";
    }
    feed::MessageReader reader(path);
    EXPECT_TRUE(reader.next());
    try {
        (void)reader.next();
        FAIL();
    } catch (const feed::MalformedLineError& e) {
        EXPECT_EQ(e.line(), 2u);
        EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
    }
    std::filesystem::remove(path);
}

TEST(MessageReader, MissingFileIsIo) {
    try {
        feed::MessageReader reader(temp_file("does_not_exist.csv"));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::Io);
    }
}

TEST(MessageReader, WriteReadRoundTrip) {
    Rng rng(5);
    std::vector<Message> msgs;
    for (int i = 0; i < 5000; ++i) msgs.push_back(testkit::random_message(rng));
    const auto path = temp_file("roundtrip.csv");
    feed::write_messages(msgs, path);
    EXPECT_EQ(feed::read_messages(path), msgs);
    std::filesystem::remove(path);
}

TEST(SnapshotRows, Layout) {
    lob::DepthSnapshot s;
    s.best_ask = 10000;
    s.best_bid = 9999;
    s.ask_sizes = {50};
    s.bid_sizes = {100};
    EXPECT_EQ(feed::format_snapshot_row(s), "10000,50,9999,100");
    s.best_ask = lob::kAbsentPrice;
    s.ask_sizes = {0};
    EXPECT_EQ(feed::format_snapshot_row(s), "-9999999999,0,9999,100");
}

TEST(SnapshotRows, PriceUnits) {
    lob::DepthSnapshot s;
    s.best_ask = 101;
    s.best_bid = 100;
    s.ask_sizes = {1, 2};
    s.bid_sizes = {3, 4};
    EXPECT_EQ(feed::format_snapshot_row(s, 100), "10100,1,10000,3,10200,2,9900,4");
}

TEST(SnapshotRows, MixedDepthRejected) {
    lob::DepthSnapshot a;
    a.bid_sizes = {0};
    a.ask_sizes = {0};
    lob::DepthSnapshot b;
    b.bid_sizes = {0, 0};
    b.ask_sizes = {0, 0};
    std::vector<lob::DepthSnapshot> snaps{a, b};
    try {
        feed::write_snapshot_rows(snaps, temp_file("mixed.csv"));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::MixedDepth);
    }
}

TEST(SnapshotRows, WriteReadRoundTrip) {
    Rng rng(9);
    std::vector<lob::DepthSnapshot> snaps;
    for (int i = 0; i < 10000; ++i) {
        lob::DepthSnapshot s;
        s.bid_sizes.resize(5);
        s.ask_sizes.resize(5);
        if (uniform01(rng) < 0.95) s.best_bid = uniform_int(rng, 100, 200);
        if (uniform01(rng) < 0.95) {
            s.best_ask = (s.has_bid() ? s.best_bid : 100) + uniform_int(rng, 1, 3);
        }
        for (int l = 0; l < 5; ++l) {
            if (s.has_bid()) s.bid_sizes[l] = uniform_int(rng, 0, 500);
            if (s.has_ask()) s.ask_sizes[l] = uniform_int(rng, 0, 500);
        }
        snaps.push_back(s);
    }
    const auto path = temp_file("snaps.csv");
    feed::write_snapshot_rows(snaps, path, 100);
    EXPECT_EQ(feed::read_snapshot_rows(path, 100), snaps);
    std::filesystem::remove(path);
}
