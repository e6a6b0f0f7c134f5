#include "ember/bytes.hpp"
#include "ember/crypto.hpp"
#include "ember/error.hpp"

#include <gtest/gtest.h>

#include <regex>
#include <set>

using namespace ember;
using namespace ember::crypto;

namespace {

Bytes hex(std::string_view h) { return hexDecode(h); }

SymmetricKey counting_key() {
    Bytes b(32);
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = static_cast<std::uint8_t>(i);
    return SymmetricKey(b);
}

template <typename F>
Errc errcOf(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "expected ember::Error";
    return Errc::io;
}

} // namespace

TEST(Bytes, HexRoundTrip) {
    EXPECT_EQ(hexEncode(hex("00ff10ab")), "00ff10ab");
    EXPECT_EQ(hexEncode(hex("00FF"), true), "00FF");
}

TEST(Bytes, Base64KnownValues) {
    EXPECT_EQ(base64Encode(Bytes(12, 0)), "AAAAAAAAAAAAAAAA");
    EXPECT_EQ(base64Encode(asBytes("hello")), "aGVsbG8=");
    EXPECT_EQ(toString(base64Decode("aGVsbG8=")), "hello");
    EXPECT_EQ(errcOf([] { base64Decode("aGVsbG8"); }), Errc::parse_error);
    EXPECT_EQ(errcOf([] { base64Decode("aGVsbG9="); }), Errc::parse_error); // non-zero trailing bits
}

TEST(Bytes, CountOccurrencesOverlaps) {
    EXPECT_EQ(countOccurrences(asBytes("aaaa"), asBytes("aa")), 3u);
    EXPECT_EQ(countOccurrences(asBytes("abc"), asBytes("")), 0u);
}

TEST(Random, KeysAreDistinctAndNonZero) {
    std::set<Bytes> seen;
    for (int i = 0; i < 1000; ++i) {
        auto k = generateKey();
        ASSERT_EQ(k.bytes().size(), 32u);
        seen.emplace(k.bytes().begin(), k.bytes().end());
    }
    EXPECT_EQ(seen.size(), 1000u);
    EXPECT_EQ(seen.count(Bytes(32, 0)), 0u);
}

TEST(Random, HundredThousandNoncesDistinct) {
    std::set<Nonce> seen;
    for (int i = 0; i < 100'000; ++i) seen.insert(generateNonce());
    EXPECT_EQ(seen.size(), 100'000u);
}

TEST(Random, DeterministicIsReproducible) {
    DeterministicRandom a(42), b(42), c(43);
    EXPECT_EQ(generateKey(a), generateKey(b));
    EXPECT_FALSE(generateKey(a) == generateKey(c));
}

TEST(Aead, GcmZeroKeyVectors) {
    SymmetricKey zero(Bytes(32, 0));
    Nonce n{};
    EXPECT_EQ(hexEncode(aeadEncrypt(zero, n, {}, {})), "530f8afbc74536b9a963b4f1c4cb738b");
    EXPECT_EQ(hexEncode(aeadEncrypt(zero, n, Bytes(16, 0), {})),
              "cea7403d4d606b6e074ec5d3baf39d18d0d1c8a799996bf0265b98b5d48ab919");
}

TEST(Aead, RoundTripAndEmptyPlaintext) {
    auto k = generateKey();
    auto n = generateNonce();
    auto ct = aeadEncrypt(k, n, asBytes("hello"), asBytes("aad"));
    EXPECT_EQ(toString(aeadDecrypt(k, n, ct, asBytes("aad"))), "hello");
    EXPECT_EQ(aeadEncrypt(k, n, {}, {}).size(), 16u);
}

TEST(Aead, EverySingleBitFlipFails) {
    auto k = generateKey();
    auto n = generateNonce();
    auto ct = aeadEncrypt(k, n, asBytes("short message"), asBytes("aad"));
    for (std::size_t i = 0; i < ct.size() * 8; ++i) {
        auto bad = ct;
        bad[i / 8] ^= static_cast<std::uint8_t>(1u << (i % 8));
        EXPECT_EQ(errcOf([&] { aeadDecrypt(k, n, bad, asBytes("aad")); }), Errc::auth_failure) << "bit " << i;
    }
}

TEST(Aead, WrongAadFailsAndShortInputIsStructural) {
    auto k = generateKey();
    auto n = generateNonce();
    auto ct = aeadEncrypt(k, n, asBytes("hello"), asBytes("a"));
    EXPECT_EQ(errcOf([&] { aeadDecrypt(k, n, ct, asBytes("b")); }), Errc::auth_failure);
    EXPECT_EQ(errcOf([&] { aeadDecrypt(k, n, Bytes(15, 0), {}); }), Errc::structural);
}

TEST(Hmac, Rfc4231Case1) {
    auto tag = hmacSha256(Bytes(20, 0x0b), asBytes("Hi There"));
    EXPECT_EQ(hexEncode(tag), "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7");
}

TEST(Hmac, SignVerifyAndFlips) {
    auto k = generateKey();
    auto tag = hmacSign(k, asBytes("data"));
    ASSERT_EQ(tag.size(), 32u);
    EXPECT_TRUE(hmacVerify(k, asBytes("data"), tag));
    for (std::size_t i = 0; i < tag.size() * 8; ++i) {
        auto bad = tag;
        bad[i / 8] ^= static_cast<std::uint8_t>(1u << (i % 8));
        EXPECT_FALSE(hmacVerify(k, asBytes("data"), bad));
    }
    EXPECT_FALSE(hmacVerify(k, asBytes("data"), ByteView(tag).first(31)));
}

struct HkdfCase {
    const char* ikm;
    const char* salt;
    const char* info;
    std::size_t length;
    const char* prk;
    const char* okm;
};

TEST(Hkdf, Rfc5869Cases1To3) {
    const HkdfCase cases[] = {
        {"0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b", "000102030405060708090a0b0c", "f0f1f2f3f4f5f6f7f8f9", 42,
         "077709362c2e32df0ddc3f0dc47bba6390b6c73bb50f9c3122ec844ad7c2b3e5",
         "3cb25f25faacd57a90434f64d0362f2a2d2d0a90cf1a5a4c5db02d56ecc4c5bf34007208d5b887185865"},
        {"000102030405060708090a0b0c0d0e0f101112131415161718191a1b1c1d1e1f202122232425262728292a2b2c2d2e2f"
         "303132333435363738393a3b3c3d3e3f404142434445464748494a4b4c4d4e4f",
         "606162636465666768696a6b6c6d6e6f707172737475767778797a7b7c7d7e7f808182838485868788898a8b8c8d8e8f"
         "909192939495969798999a9b9c9d9e9fa0a1a2a3a4a5a6a7a8a9aaabacadaeaf",
         "b0b1b2b3b4b5b6b7b8b9babbbcbdbebfc0c1c2c3c4c5c6c7c8c9cacbcccdcecfd0d1d2d3d4d5d6d7d8d9dadbdcdddedf"
         "e0e1e2e3e4e5e6e7e8e9eaebecedeeeff0f1f2f3f4f5f6f7f8f9fafbfcfdfeff",
         82, "06a6b88c5853361a06104c9ceb35b45cef760014904671014a193f40c15fc244",
         "b11e398dc80327a1c8e7f78c596a49344f012eda2d4efad8a050cc4c19afa97c59045a99cac7827271cb41c65e590e09"
         "da3275600c2f09b8367793a9aca3db71cc30c58179ec3e87c14c01d5c1f3434f1d87"},
        {"0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b", "", "", 42,
         "19ef24a32c717b167f33a91d6f648bdf96596776afdb6377ac434c1c293ccb04",
         "8da4e775a563c18f715f802a063c5a31b8a11f5c5ee1879ec3454e5f3c738d2d9d201395faa4b61a96c8"},
    };
    for (const auto& c : cases) {
        auto prk = hkdfExtract(hex(c.salt), hex(c.ikm));
        EXPECT_EQ(hexEncode(prk), c.prk);
        EXPECT_EQ(hexEncode(hkdfExpand(prk, hex(c.info), c.length)), c.okm);
    }
}

TEST(Hkdf, LengthLimits) {
    auto prk = hkdfExtract({}, Bytes(32, 1));
    EXPECT_EQ(hkdfExpand(prk, {}, 32).size(), 32u);
    EXPECT_EQ(hkdfExpand(prk, {}, 8160).size(), 8160u);
    EXPECT_EQ(errcOf([&] { hkdfExpand(prk, {}, 8161); }), Errc::precondition);
}

TEST(Derive, FrozenValues) {
    auto k = counting_key();
    EXPECT_EQ(hexEncode(deriveNextKey(k, 1, 2).bytes()),
              "9fa31777eafbd2a4eecb514ae5da59f90c715efeaebc920e81d12f36626eddad");
    EXPECT_EQ(hexEncode(deriveHmacKey(k).bytes()), "bf391718b4ad2ac12495a61b8976f8ac239630b50cb3b9157a287370e6e1be49");
    EXPECT_EQ(hexEncode(deriveMessageKey(k, Nonce{}).bytes()),
              "1c29b01b07da4135b540d1a2f2052c6cdac427d1907a6680d03c11c013148c73");
    EXPECT_EQ(fingerprint(k).display(), "63:0D:CD:29:66:C4:33:66");
}

TEST(Derive, NextKeyRules) {
    auto k = generateKey();
    auto k2 = generateKey();
    EXPECT_EQ(deriveNextKey(k, 1, 2), deriveNextKey(k, 1, 2));
    EXPECT_FALSE(deriveNextKey(k, 1, 2) == deriveNextKey(k2, 1, 2));
    EXPECT_EQ(errcOf([&] { deriveNextKey(k, 1, 3); }), Errc::precondition);

    // two peers walking the same chain independently
    auto a = deriveNextKey(deriveNextKey(k, 1, 2), 2, 3);
    SymmetricKey copy(k.bytes());
    auto b = deriveNextKey(deriveNextKey(copy, 1, 2), 2, 3);
    EXPECT_EQ(a, b);
}

TEST(Derive, MessageKeysSeparated) {
    auto k = generateKey();
    std::set<Bytes> seen;
    for (int i = 0; i < 10'000; ++i) {
        auto mk = deriveMessageKey(k, generateNonce());
        seen.emplace(mk.bytes().begin(), mk.bytes().end());
    }
    EXPECT_EQ(seen.size(), 10'000u);
    Nonce n = generateNonce();
    EXPECT_EQ(deriveMessageKey(k, n), deriveMessageKey(k, n));
    EXPECT_FALSE(deriveMessageKey(k, n) == deriveHmacKey(k));
    EXPECT_FALSE(deriveHmacKey(k) == deriveHmacKey(generateKey()));
}

TEST(Fingerprint, FormatAndDistinct) {
    auto k = generateKey();
    const std::regex shape("^([0-9A-F]{2}:){7}[0-9A-F]{2}$");
    EXPECT_TRUE(std::regex_match(fingerprint(k).display(), shape));
    EXPECT_EQ(fingerprint(k), fingerprint(k));
    EXPECT_NE(fingerprint(k).display(), fingerprint(generateKey()).display());
}

TEST(Wipe, ZeroesBuffers) {
    Bytes b{1, 2, 3};
    secureWipe(b);
    EXPECT_EQ(b, (Bytes{0, 0, 0}));
    Bytes empty;
    secureWipe(empty);
    Bytes key(32, 0xAA);
    secureWipe(key);
    EXPECT_EQ(key, Bytes(32, 0));

    SecureBuffer buf(std::string_view("secret"));
    EXPECT_EQ(buf.str(), "secret");
    buf.wipe();
    EXPECT_TRUE(buf.empty());
}

TEST(ConstantTime, Compare) {
    EXPECT_TRUE(constantTimeEqual(asBytes("abc"), asBytes("abc")));
    EXPECT_FALSE(constantTimeEqual(asBytes("abc"), asBytes("abd")));
    EXPECT_FALSE(constantTimeEqual(asBytes("abc"), asBytes("ab")));
}
