#pragma once

#include "ember/bytes.hpp"
#include "ember/crypto.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>

namespace ember {

inline constexpr std::int64_t kProtocolVersion = 1;
inline constexpr std::size_t kDefaultMaxEnvelopeBytes = 65536;
inline constexpr std::size_t kMaxSenderNameBytes = 256;

enum class MsgType { message, rotation_request, rotation_confirm, rotation_activate };

std::string_view msgTypeName(MsgType type);
std::optional<MsgType> msgTypeFromName(std::string_view name);

struct Envelope {
    std::int64_t version = kProtocolVersion;
    std::string conversationId;
    std::string senderName;
    std::int64_t timestamp = 0;
    std::int64_t ttl = 0;
    MsgType type = MsgType::message;
    std::uint32_t keyVersion = 1;
    crypto::Nonce nonce;
    Bytes ciphertext;
    std::array<std::uint8_t, crypto::kMacSize> hmac{};

    bool operator==(const Envelope&) const = default;
};

/// UTF-8 JSON with the wire key names; binary fields as padded standard Base64.
Bytes encodeEnvelope(const Envelope& env);

/// Full structural validation. Throws Errc::parse_error, Errc::structural,
/// Errc::unsupported_version or Errc::oversize. Unknown keys are ignored.
Envelope decodeEnvelope(ByteView payload, std::size_t maxEnvelopeBytes = kDefaultMaxEnvelopeBytes);

/// 4-byte big-endian length prefix followed by the payload.
Bytes frame(ByteView payload, std::size_t maxEnvelopeBytes = kDefaultMaxEnvelopeBytes);

class ByteSource {
public:
    virtual ~ByteSource() = default;
    /// Reads up to out.size() bytes; returns 0 only at end of stream.
    virtual std::size_t readSome(std::span<std::uint8_t> out) = 0;
};

class MemorySource final : public ByteSource {
public:
    explicit MemorySource(ByteView data) : data_(data) {}
    std::size_t readSome(std::span<std::uint8_t> out) override;

private:
    ByteView data_;
    std::size_t pos_ = 0;
};

/// Reads one frame. Returns nullopt on a clean end of stream at a frame
/// boundary. The declared length is checked against the cap before any
/// payload-sized allocation. Throws Errc::oversize, Errc::structural (zero
/// length) or Errc::truncated.
std::optional<Bytes> deframe(ByteSource& stream, std::size_t maxEnvelopeBytes = kDefaultMaxEnvelopeBytes);

/// Canonical MAC input over every field except the MAC itself. Each field is
/// written as a 4-byte big-endian length followed by its bytes; integers are
/// 8-byte big-endian.
Bytes hmacInput(const Envelope& env);

/// Associated data bound into the AEAD: conversation, sender, type, timestamp.
Bytes aeadAssociatedData(std::string_view conversationId, std::string_view senderName, MsgType type,
                         std::int64_t timestamp);

struct Endpoint {
    std::string address; // canonical text form
    std::uint16_t port = 0;

    /// Strict parse; IPv6 is rendered in RFC 5952 canonical form. Throws Errc::validation.
    static Endpoint parse(std::string_view address, int port);
    std::string canonical() const; // "address|port"
    std::string display() const;   // "[v6]:port" or "v4:port"
    bool isV6() const;

    bool operator==(const Endpoint&) const = default;
};

/// Symmetric, deterministic identifier: SHA-256 over the sorted canonical
/// endpoint strings joined by '\n', first 16 bytes as 8-4-4-4-12 lowercase hex.
std::string conversationId(const Endpoint& a, const Endpoint& b);

bool isWellFormedConversationId(std::string_view id);

} // namespace ember
