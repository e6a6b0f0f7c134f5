#pragma once

// Minimal RFC 6455 framing plus just enough HTTP/1.1 request parsing for the
// control port. Sockets are handled by the callers.

#include "ember/bytes.hpp"

#include <array>
#include <deque>
#include <map>
#include <optional>
#include <string>
#include <string_view>

namespace ember::ws {

inline constexpr std::size_t kDefaultMaxMessageBytes = 1 << 20;
inline constexpr std::size_t kMaxRequestHeadBytes = 16 * 1024;

enum class Opcode : std::uint8_t { continuation = 0x0, text = 0x1, binary = 0x2, close = 0x8, ping = 0x9, pong = 0xA };

/// Sec-WebSocket-Accept value for a client's Sec-WebSocket-Key.
std::string acceptKey(std::string_view clientKey);

using MaskKey = std::array<std::uint8_t, 4>;

/// Single FIN frame. Clients must pass a mask, servers must not.
Bytes encodeFrame(Opcode op, ByteView payload, const std::optional<MaskKey>& mask = std::nullopt);

struct Message {
    Opcode op = Opcode::text;
    Bytes payload;
};

/// Incremental decoder. Reassembles fragmented data messages and hands
/// control frames through as they arrive. Throws Errc::protocol on framing
/// violations and Errc::oversize past the message cap.
class Decoder {
public:
    Decoder(bool expectMasked, std::size_t maxMessageBytes = kDefaultMaxMessageBytes)
        : expectMasked_(expectMasked), maxMessageBytes_(maxMessageBytes) {}

    void feed(ByteView bytes);
    std::optional<Message> next();

private:
    bool expectMasked_;
    std::size_t maxMessageBytes_;
    Bytes buffer_;
    std::size_t offset_ = 0;
    std::optional<Opcode> fragmentOp_;
    Bytes fragments_;
};

struct HttpRequest {
    std::string method;
    std::string target; // raw request target
    std::string path;   // percent-decoded, without query
    std::map<std::string, std::string> query;
    std::map<std::string, std::string> headers; // lower-cased names

    std::optional<std::string> header(std::string_view name) const;
    bool isWebSocketUpgrade() const;
};

/// Parses a request head (everything before the blank line). Throws Errc::parse_error.
HttpRequest parseHttpRequest(std::string_view head);

/// '+' becomes a space only in query components.
std::string percentDecode(std::string_view in, bool plusAsSpace = false);

} // namespace ember::ws
