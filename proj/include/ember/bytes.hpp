#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ember {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

inline ByteView asBytes(std::string_view s) {
    return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

inline Bytes toBytes(std::string_view s) {
    auto v = asBytes(s);
    return {v.begin(), v.end()};
}

inline std::string toString(ByteView b) {
    return {reinterpret_cast<const char*>(b.data()), b.size()};
}

void appendU32(Bytes& out, std::uint32_t v);
void appendU64(Bytes& out, std::uint64_t v);
std::uint32_t readU32(ByteView in);

std::string hexEncode(ByteView data, bool upper = false);
Bytes hexDecode(std::string_view hex);

/// Standard alphabet with '=' padding.
std::string base64Encode(ByteView data);
/// Strict decode: rejects bad characters, bad padding and non-zero trailing bits.
Bytes base64Decode(std::string_view text);

/// Number of (possibly overlapping) occurrences of needle in haystack.
std::size_t countOccurrences(ByteView haystack, ByteView needle);

} // namespace ember
