#include "ember/bytes.hpp"

#include "ember/error.hpp"

#include <algorithm>
#include <array>

namespace ember {

void appendU32(Bytes& out, std::uint32_t v) {
    for (int shift = 24; shift >= 0; shift -= 8) {
        out.push_back(static_cast<std::uint8_t>(v >> shift));
    }
}

void appendU64(Bytes& out, std::uint64_t v) {
    for (int shift = 56; shift >= 0; shift -= 8) {
        out.push_back(static_cast<std::uint8_t>(v >> shift));
    }
}

std::uint32_t readU32(ByteView in) {
    if (in.size() < 4) {
        throw Error(Errc::truncated, "need 4 bytes for u32");
    }
    return (std::uint32_t{in[0]} << 24) | (std::uint32_t{in[1]} << 16) |
           (std::uint32_t{in[2]} << 8) | std::uint32_t{in[3]};
}

std::string hexEncode(ByteView data, bool upper) {
    const char* digits = upper ? "0123456789ABCDEF" : "0123456789abcdef";
    std::string out;
    out.reserve(data.size() * 2);
    for (auto b : data) {
        out.push_back(digits[b >> 4]);
        out.push_back(digits[b & 0x0f]);
    }
    return out;
}

namespace {

int hexValue(char c) {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
}

constexpr std::string_view kAlphabet =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

constexpr std::array<int, 256> makeDecodeTable() {
    std::array<int, 256> table{};
    for (auto& v : table) v = -1;
    for (std::size_t i = 0; i < kAlphabet.size(); ++i) {
        table[static_cast<unsigned char>(kAlphabet[i])] = static_cast<int>(i);
    }
    return table;
}

constexpr auto kDecodeTable = makeDecodeTable();

} // namespace

Bytes hexDecode(std::string_view hex) {
    if (hex.size() % 2 != 0) {
        throw Error(Errc::parse_error, "odd-length hex string");
    }
    Bytes out;
    out.reserve(hex.size() / 2);
    for (std::size_t i = 0; i < hex.size(); i += 2) {
        int hi = hexValue(hex[i]);
        int lo = hexValue(hex[i + 1]);
        if (hi < 0 || lo < 0) {
            throw Error(Errc::parse_error, "invalid hex digit");
        }
        out.push_back(static_cast<std::uint8_t>((hi << 4) | lo));
    }
    return out;
}

std::string base64Encode(ByteView data) {
    std::string out;
    out.reserve((data.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 3 <= data.size(); i += 3) {
        std::uint32_t n = (std::uint32_t{data[i]} << 16) | (std::uint32_t{data[i + 1]} << 8) | data[i + 2];
        out.push_back(kAlphabet[(n >> 18) & 63]);
        out.push_back(kAlphabet[(n >> 12) & 63]);
        out.push_back(kAlphabet[(n >> 6) & 63]);
        out.push_back(kAlphabet[n & 63]);
    }
    std::size_t rest = data.size() - i;
    if (rest == 1) {
        std::uint32_t n = std::uint32_t{data[i]} << 16;
        out.push_back(kAlphabet[(n >> 18) & 63]);
        out.push_back(kAlphabet[(n >> 12) & 63]);
        out += "==";
    } else if (rest == 2) {
        std::uint32_t n = (std::uint32_t{data[i]} << 16) | (std::uint32_t{data[i + 1]} << 8);
        out.push_back(kAlphabet[(n >> 18) & 63]);
        out.push_back(kAlphabet[(n >> 12) & 63]);
        out.push_back(kAlphabet[(n >> 6) & 63]);
        out.push_back('=');
    }
    return out;
}

Bytes base64Decode(std::string_view text) {
    if (text.size() % 4 != 0) {
        throw Error(Errc::parse_error, "base64 length not a multiple of 4");
    }
    Bytes out;
    out.reserve(text.size() / 4 * 3);
    for (std::size_t i = 0; i < text.size(); i += 4) {
        bool last = i + 4 == text.size();
        int pad = 0;
        std::array<int, 4> v{};
        for (int j = 0; j < 4; ++j) {
            char c = text[i + j];
            if (c == '=') {
                // padding only in the final quantum, only in the last two slots
                if (!last || j < 2) throw Error(Errc::parse_error, "misplaced base64 padding");
                v[j] = 0;
                ++pad;
            } else {
                if (pad > 0) throw Error(Errc::parse_error, "data after base64 padding");
                v[j] = kDecodeTable[static_cast<unsigned char>(c)];
                if (v[j] < 0) throw Error(Errc::parse_error, "invalid base64 character");
            }
        }
        std::uint32_t n = (std::uint32_t(v[0]) << 18) | (std::uint32_t(v[1]) << 12) |
                          (std::uint32_t(v[2]) << 6) | std::uint32_t(v[3]);
        if ((pad == 1 && (n & 0xff) != 0) || (pad == 2 && (n & 0xffff) != 0)) {
            throw Error(Errc::parse_error, "non-canonical base64 trailing bits");
        }
        out.push_back(static_cast<std::uint8_t>(n >> 16));
        if (pad < 2) out.push_back(static_cast<std::uint8_t>(n >> 8));
        if (pad < 1) out.push_back(static_cast<std::uint8_t>(n));
    }
    return out;
}

std::size_t countOccurrences(ByteView haystack, ByteView needle) {
    if (needle.empty() || needle.size() > haystack.size()) return 0;
    std::size_t count = 0;
    auto it = haystack.begin();
    while (true) {
        it = std::search(it, haystack.end(), needle.begin(), needle.end());
        if (it == haystack.end()) break;
        ++count;
        ++it;
    }
    return count;
}

std::string_view errcName(Errc code) {
    switch (code) {
    case Errc::precondition: return "precondition";
    case Errc::parse_error: return "parse_error";
    case Errc::structural: return "structural";
    case Errc::unsupported_version: return "unsupported_version";
    case Errc::oversize: return "oversize";
    case Errc::truncated: return "truncated";
    case Errc::auth_failure: return "auth_failure";
    case Errc::not_found: return "not_found";
    case Errc::undecryptable_history: return "undecryptable_history";
    case Errc::integrity: return "integrity";
    case Errc::busy: return "busy";
    case Errc::protocol: return "protocol";
    case Errc::duplicate: return "duplicate";
    case Errc::validation: return "validation";
    case Errc::io: return "io";
    case Errc::timeout: return "timeout";
    case Errc::delivery_failure: return "delivery_failure";
    case Errc::refused: return "refused";
    case Errc::closed: return "closed";
    case Errc::randomness: return "randomness";
    }
    return "unknown";
}

std::optional<Errc> errcFromName(std::string_view name) {
    for (int i = 0; i <= static_cast<int>(Errc::randomness); ++i) {
        if (errcName(static_cast<Errc>(i)) == name) return static_cast<Errc>(i);
    }
    return std::nullopt;
}

} // namespace ember
