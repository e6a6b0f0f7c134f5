#include "ember/envelope.hpp"
#include "ember/error.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <random>
#include <set>

using namespace ember;

namespace {

Envelope sample() {
    Envelope e;
    e.conversationId = "99501a11-7222-056f-b9e4-9ed13d5a93e5";
    e.senderName = "alice";
    e.timestamp = 1'700'000'000'000;
    e.ttl = 300'000;
    e.type = MsgType::message;
    e.keyVersion = 3;
    e.nonce.bytes.fill(0x11);
    e.ciphertext = {1, 2, 3, 4, 5};
    e.hmac.fill(0x22);
    return e;
}

Errc decodeError(std::string_view json) {
    try {
        decodeEnvelope(asBytes(json));
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "decode accepted: " << json;
    return Errc::io;
}

} // namespace

TEST(Envelope, RoundTripAllTypes) {
    for (auto t : {MsgType::message, MsgType::rotation_request, MsgType::rotation_confirm, MsgType::rotation_activate}) {
        auto e = sample();
        e.type = t;
        EXPECT_EQ(decodeEnvelope(encodeEnvelope(e)), e);
    }
}

TEST(Envelope, WireKeysAndZeroNonce) {
    auto e = sample();
    e.nonce = crypto::Nonce{};
    auto j = nlohmann::json::parse(toString(encodeEnvelope(e)));
    for (const char* key :
         {"version", "conversationId", "senderName", "timestamp", "ttl", "type", "keyVersion", "nonce", "ciphertext", "hmac"}) {
        EXPECT_TRUE(j.contains(key)) << key;
    }
    EXPECT_EQ(j.size(), 10u);
    EXPECT_EQ(j["nonce"], "AAAAAAAAAAAAAAAA");
    EXPECT_EQ(j["type"], "MESSAGE");
}

TEST(Envelope, EmptyObjectListsMissingFields) {
    try {
        decodeEnvelope(asBytes("{}"));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::structural);
        EXPECT_NE(std::string(e.what()).find("conversationId"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("hmac"), std::string::npos);
    }
}

TEST(Envelope, RejectsBadInput) {
    auto j = nlohmann::json::parse(toString(encodeEnvelope(sample())));
    auto with = [&](const char* key, nlohmann::json value) {
        auto copy = j;
        copy[key] = std::move(value);
        return copy.dump();
    };
    EXPECT_EQ(decodeError(with("version", 2)), Errc::unsupported_version);
    EXPECT_EQ(decodeError(with("ttl", 0)), Errc::structural);
    EXPECT_EQ(decodeError(with("type", "CHAT")), Errc::structural);
    EXPECT_EQ(decodeError(with("nonce", "AAAA")), Errc::structural);
    EXPECT_EQ(decodeError(with("hmac", "!!!")), Errc::structural);
    EXPECT_EQ(decodeError(with("conversationId", "not-an-id")), Errc::structural);
    EXPECT_EQ(decodeError(with("senderName", std::string(257, 'x'))), Errc::structural);
    EXPECT_EQ(decodeError("[1,2]"), Errc::structural);
    EXPECT_EQ(decodeError("{nope"), Errc::parse_error);

    auto extra = j;
    extra["future"] = true;
    EXPECT_EQ(decodeEnvelope(asBytes(extra.dump())), sample());
}

TEST(Frame, HelloBytes) {
    EXPECT_EQ(hexEncode(frame(asBytes("hello")), true), "0000000568656C6C6F");
}

TEST(Frame, BackToBackFramesInOrder) {
    Bytes stream = frame(asBytes("one"));
    auto second = frame(asBytes("two"));
    stream.insert(stream.end(), second.begin(), second.end());
    MemorySource src(stream);
    EXPECT_EQ(toString(*deframe(src)), "one");
    EXPECT_EQ(toString(*deframe(src)), "two");
    EXPECT_FALSE(deframe(src).has_value());
}

TEST(Frame, HugeDeclaredLengthRejectedBeforeAllocation) {
    Bytes header{0x7F, 0xFF, 0xFF, 0xFF, 'x'};
    MemorySource src(header);
    try {
        deframe(src);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::oversize);
    }
}

TEST(Frame, TruncatedAndZeroLength) {
    Bytes partial{0x00, 0x00, 0x00, 0x09, 'a', 'b'};
    MemorySource a(partial);
    EXPECT_THROW(deframe(a), Error);
    Bytes shortPrefix{0x00, 0x00};
    MemorySource b(shortPrefix);
    EXPECT_THROW(deframe(b), Error);
    Bytes zero{0, 0, 0, 0};
    MemorySource c(zero);
    EXPECT_THROW(deframe(c), Error);
    EXPECT_THROW(frame(Bytes(70'000, 1)), Error);
}

TEST(HmacInput, BindsSenderAndFieldBoundaries) {
    auto a = sample();
    auto b = sample();
    b.senderName = "mallory";
    EXPECT_NE(hmacInput(a), hmacInput(b));
    EXPECT_EQ(hmacInput(a), hmacInput(sample()));

    // ("ab","c") against ("a","bc") across senderName / type-adjacent fields
    auto x = sample();
    auto y = sample();
    x.senderName = "ab";
    x.ciphertext = toBytes("c");
    y.senderName = "a";
    y.ciphertext = toBytes("bc");
    EXPECT_NE(hmacInput(x), hmacInput(y));
    EXPECT_NE(aeadAssociatedData("ab", "c", MsgType::message, 1), aeadAssociatedData("a", "bc", MsgType::message, 1));
}

TEST(Endpoint, ParseCanonicalAndReject) {
    auto e = Endpoint::parse("0:0:0:0:0:0:0:1", 5896);
    EXPECT_EQ(e.address, "::1");
    EXPECT_EQ(e.display(), "[::1]:5896");
    EXPECT_EQ(Endpoint::parse("[2001:DB8::1]", 1).address, "2001:db8::1");
    EXPECT_EQ(Endpoint::parse("127.0.0.1", 80).display(), "127.0.0.1:80");
    for (auto bad : {"", "localhost", "1.2.3", "1.2.3.256", "::g", "01.2.3.4"}) {
        EXPECT_THROW(Endpoint::parse(bad, 80), Error) << bad;
    }
    EXPECT_THROW(Endpoint::parse("::1", 0), Error);
    EXPECT_THROW(Endpoint::parse("::1", 65536), Error);
}

TEST(ConversationId, FrozenSymmetricAndDistinct) {
    auto a = Endpoint::parse("::1", 5896);
    auto b = Endpoint::parse("::1", 5897);
    EXPECT_EQ(conversationId(a, b), "99501a11-7222-056f-b9e4-9ed13d5a93e5");
    EXPECT_EQ(conversationId(a, b), conversationId(b, a));
    EXPECT_TRUE(isWellFormedConversationId(conversationId(a, b)));
    EXPECT_THROW(conversationId(a, a), Error);

    std::mt19937 rng(7);
    std::uniform_int_distribution<int> octet(0, 255), port(1, 65535);
    std::set<std::string> ids;
    std::set<std::string> pairs;
    for (int i = 0; i < 10'000; ++i) {
        auto p = Endpoint::parse(std::to_string(octet(rng)) + ".1.2." + std::to_string(octet(rng)), port(rng));
        auto q = Endpoint::parse("fd00::" + std::to_string(octet(rng)), port(rng));
        pairs.insert(p.canonical() + "/" + q.canonical());
        ids.insert(conversationId(p, q));
    }
    EXPECT_EQ(ids.size(), pairs.size());
}
