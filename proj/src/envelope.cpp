#include "ember/envelope.hpp"

#include "ember/error.hpp"

#include <json.hpp>

#include <arpa/inet.h>
#include <netinet/in.h>

#include <algorithm>

namespace ember {

using json = nlohmann::json;

namespace {

constexpr std::array<const char*, 10> kRequiredKeys = {
    "version", "conversationId", "senderName", "timestamp", "ttl",
    "type",    "keyVersion",     "nonce",      "ciphertext", "hmac"};

void appendField(Bytes& out, ByteView field) {
    appendU32(out, static_cast<std::uint32_t>(field.size()));
    out.insert(out.end(), field.begin(), field.end());
}

void appendIntField(Bytes& out, std::int64_t v) {
    appendU32(out, 8);
    appendU64(out, static_cast<std::uint64_t>(v));
}

std::int64_t requireInt(const json& obj, const char* key) {
    const auto& v = obj.at(key);
    if (!v.is_number_integer() ||
        (v.is_number_unsigned() && v.get<std::uint64_t>() > static_cast<std::uint64_t>(INT64_MAX))) {
        throw Error(Errc::structural, std::string("field '") + key + "' must be a 64-bit integer");
    }
    return v.get<std::int64_t>();
}

const std::string& requireString(const json& obj, const char* key) {
    const auto& v = obj.at(key);
    if (!v.is_string()) {
        throw Error(Errc::structural, std::string("field '") + key + "' must be a string");
    }
    return v.get_ref<const std::string&>();
}

Bytes requireBase64(const json& obj, const char* key) {
    try {
        return base64Decode(requireString(obj, key));
    } catch (const Error& e) {
        if (e.code() == Errc::structural) throw;
        throw Error(Errc::structural, std::string("field '") + key + "' is not valid Base64");
    }
}

} // namespace

std::string_view msgTypeName(MsgType type) {
    switch (type) {
    case MsgType::message: return "MESSAGE";
    case MsgType::rotation_request: return "ROTATION_REQUEST";
    case MsgType::rotation_confirm: return "ROTATION_CONFIRM";
    case MsgType::rotation_activate: return "ROTATION_ACTIVATE";
    }
    return "MESSAGE";
}

std::optional<MsgType> msgTypeFromName(std::string_view name) {
    for (auto t : {MsgType::message, MsgType::rotation_request, MsgType::rotation_confirm,
                   MsgType::rotation_activate}) {
        if (msgTypeName(t) == name) return t;
    }
    return std::nullopt;
}

Bytes encodeEnvelope(const Envelope& env) {
    json j = {
        {"version", env.version},
        {"conversationId", env.conversationId},
        {"senderName", env.senderName},
        {"timestamp", env.timestamp},
        {"ttl", env.ttl},
        {"type", msgTypeName(env.type)},
        {"keyVersion", env.keyVersion},
        {"nonce", base64Encode(env.nonce.view())},
        {"ciphertext", base64Encode(env.ciphertext)},
        {"hmac", base64Encode(env.hmac)},
    };
    return toBytes(j.dump());
}

Envelope decodeEnvelope(ByteView payload, std::size_t maxEnvelopeBytes) {
    if (payload.size() > maxEnvelopeBytes) {
        throw Error(Errc::oversize, "envelope exceeds maximum size");
    }
    json j = json::parse(payload.begin(), payload.end(), nullptr, false);
    if (j.is_discarded()) {
        throw Error(Errc::parse_error, "envelope is not valid JSON");
    }
    if (!j.is_object()) {
        throw Error(Errc::structural, "envelope must be a JSON object");
    }
    std::string missing;
    for (const char* key : kRequiredKeys) {
        if (!j.contains(key)) {
            if (!missing.empty()) missing += ", ";
            missing += key;
        }
    }
    if (!missing.empty()) {
        throw Error(Errc::structural, "missing required fields: " + missing);
    }

    Envelope env;
    env.version = requireInt(j, "version");
    if (env.version != kProtocolVersion) {
        throw Error(Errc::unsupported_version, "unsupported protocol version " + std::to_string(env.version));
    }
    env.conversationId = requireString(j, "conversationId");
    if (!isWellFormedConversationId(env.conversationId)) {
        throw Error(Errc::structural, "malformed conversationId");
    }
    env.senderName = requireString(j, "senderName");
    if (env.senderName.size() > kMaxSenderNameBytes) {
        throw Error(Errc::structural, "senderName longer than 256 bytes");
    }
    env.timestamp = requireInt(j, "timestamp");
    if (env.timestamp < 0) throw Error(Errc::structural, "timestamp must be non-negative");
    env.ttl = requireInt(j, "ttl");
    if (env.ttl <= 0) throw Error(Errc::structural, "ttl must be positive");
    auto type = msgTypeFromName(requireString(j, "type"));
    if (!type) throw Error(Errc::structural, "unknown message type");
    env.type = *type;
    std::int64_t keyVersion = requireInt(j, "keyVersion");
    if (keyVersion < 1 || keyVersion > UINT32_MAX) {
        throw Error(Errc::structural, "keyVersion out of range");
    }
    env.keyVersion = static_cast<std::uint32_t>(keyVersion);

    Bytes nonce = requireBase64(j, "nonce");
    if (nonce.size() != crypto::kNonceSize) throw Error(Errc::structural, "nonce must decode to 12 bytes");
    env.nonce = crypto::Nonce::fromBytes(nonce);
    env.ciphertext = requireBase64(j, "ciphertext");
    Bytes mac = requireBase64(j, "hmac");
    if (mac.size() != crypto::kMacSize) throw Error(Errc::structural, "hmac must decode to 32 bytes");
    std::copy(mac.begin(), mac.end(), env.hmac.begin());
    return env;
}

Bytes frame(ByteView payload, std::size_t maxEnvelopeBytes) {
    if (payload.size() > maxEnvelopeBytes) {
        throw Error(Errc::oversize, "payload exceeds maximum envelope size");
    }
    Bytes out;
    out.reserve(4 + payload.size());
    appendU32(out, static_cast<std::uint32_t>(payload.size()));
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

std::size_t MemorySource::readSome(std::span<std::uint8_t> out) {
    std::size_t n = std::min(out.size(), data_.size() - pos_);
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(pos_), n, out.begin());
    pos_ += n;
    return n;
}

namespace {

/// Fills `out` completely; returns bytes read before end of stream.
std::size_t readFully(ByteSource& stream, std::span<std::uint8_t> out) {
    std::size_t got = 0;
    while (got < out.size()) {
        std::size_t n = stream.readSome(out.subspan(got));
        if (n == 0) break;
        got += n;
    }
    return got;
}

} // namespace

std::optional<Bytes> deframe(ByteSource& stream, std::size_t maxEnvelopeBytes) {
    std::array<std::uint8_t, 4> prefix{};
    std::size_t got = readFully(stream, prefix);
    if (got == 0) return std::nullopt;
    if (got < prefix.size()) throw Error(Errc::truncated, "stream ended inside the length prefix");
    std::uint32_t length = readU32(prefix);
    if (length == 0) throw Error(Errc::structural, "zero-length frame");
    if (length > maxEnvelopeBytes) {
        throw Error(Errc::oversize, "declared frame length " + std::to_string(length) + " exceeds cap");
    }
    Bytes payload(length);
    if (readFully(stream, payload) != length) {
        throw Error(Errc::truncated, "stream ended inside the frame payload");
    }
    return payload;
}

Bytes hmacInput(const Envelope& env) {
    Bytes out;
    out.reserve(128 + env.senderName.size() + env.ciphertext.size());
    appendIntField(out, env.version);
    appendField(out, asBytes(env.conversationId));
    appendField(out, asBytes(env.senderName));
    appendIntField(out, env.timestamp);
    appendIntField(out, env.ttl);
    appendField(out, asBytes(msgTypeName(env.type)));
    appendIntField(out, env.keyVersion);
    appendField(out, env.nonce.view());
    appendField(out, env.ciphertext);
    return out;
}

Bytes aeadAssociatedData(std::string_view conversationId, std::string_view senderName, MsgType type,
                         std::int64_t timestamp) {
    Bytes out;
    appendField(out, asBytes(conversationId));
    appendField(out, asBytes(senderName));
    appendField(out, asBytes(msgTypeName(type)));
    appendIntField(out, timestamp);
    return out;
}

Endpoint Endpoint::parse(std::string_view address, int port) {
    if (port < 1 || port > 65535) {
        throw Error(Errc::validation, "port must be in 1..65535");
    }
    std::string text(address);
    if (text.size() >= 2 && text.front() == '[' && text.back() == ']') {
        text = text.substr(1, text.size() - 2);
    }
    char buf[INET6_ADDRSTRLEN] = {};
    if (text.find(':') != std::string::npos) {
        in6_addr addr6{};
        if (inet_pton(AF_INET6, text.c_str(), &addr6) != 1) {
            throw Error(Errc::validation, "invalid IPv6 address: " + text);
        }
        inet_ntop(AF_INET6, &addr6, buf, sizeof buf);
    } else {
        in_addr addr4{};
        // inet_pton(AF_INET) accepts only strict dotted-quad.
        if (inet_pton(AF_INET, text.c_str(), &addr4) != 1) {
            throw Error(Errc::validation, "invalid IP address: " + text);
        }
        inet_ntop(AF_INET, &addr4, buf, sizeof buf);
    }
    return Endpoint{buf, static_cast<std::uint16_t>(port)};
}

std::string Endpoint::canonical() const { return address + "|" + std::to_string(port); }

std::string Endpoint::display() const {
    return isV6() ? "[" + address + "]:" + std::to_string(port) : address + ":" + std::to_string(port);
}

bool Endpoint::isV6() const { return address.find(':') != std::string::npos; }

std::string conversationId(const Endpoint& a, const Endpoint& b) {
    std::string ca = a.canonical();
    std::string cb = b.canonical();
    if (ca == cb) {
        throw Error(Errc::precondition, "conversation endpoints must differ");
    }
    if (cb < ca) std::swap(ca, cb);
    Bytes digest = crypto::sha256(asBytes(ca + "\n" + cb));
    std::string hex = hexEncode(ByteView(digest).first(16));
    return hex.substr(0, 8) + "-" + hex.substr(8, 4) + "-" + hex.substr(12, 4) + "-" + hex.substr(16, 4) + "-" +
           hex.substr(20, 12);
}

bool isWellFormedConversationId(std::string_view id) {
    if (id.size() != 36) return false;
    for (std::size_t i = 0; i < id.size(); ++i) {
        char c = id[i];
        if (i == 8 || i == 13 || i == 18 || i == 23) {
            if (c != '-') return false;
        } else if (!((c >= '0' && c <= '9') || (c >= 'a' && c <= 'f'))) {
            return false;
        }
    }
    return true;
}

} // namespace ember
