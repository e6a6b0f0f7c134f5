#include "ember/websocket.hpp"

#include "ember/error.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cctype>

namespace ember::ws {

namespace {

constexpr std::string_view kHandshakeGuid = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11";

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
    return out;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

bool isControl(Opcode op) { return static_cast<std::uint8_t>(op) >= 0x8; }

bool knownOpcode(std::uint8_t op) {
    return op == 0x0 || op == 0x1 || op == 0x2 || op == 0x8 || op == 0x9 || op == 0xA;
}

bool headerHasToken(const std::string& value, std::string_view token) {
    std::string v = lower(value);
    std::size_t pos = 0;
    while (pos <= v.size()) {
        auto comma = v.find(',', pos);
        auto part = trim(std::string_view(v).substr(pos, comma == std::string::npos ? std::string::npos : comma - pos));
        if (part == token) return true;
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return false;
}

} // namespace

std::string acceptKey(std::string_view clientKey) {
    std::string material(trim(clientKey));
    material += kHandshakeGuid;
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(material.data(), material.size(), digest, &len, EVP_sha1(), nullptr) != 1) {
        throw Error(Errc::io, "SHA-1 digest failed");
    }
    return base64Encode(ByteView(digest, len));
}

Bytes encodeFrame(Opcode op, ByteView payload, const std::optional<MaskKey>& mask) {
    Bytes out;
    out.reserve(payload.size() + 14);
    out.push_back(static_cast<std::uint8_t>(0x80 | static_cast<std::uint8_t>(op)));
    const std::uint8_t maskBit = mask ? 0x80 : 0x00;
    if (payload.size() < 126) {
        out.push_back(static_cast<std::uint8_t>(maskBit | payload.size()));
    } else if (payload.size() <= 0xFFFF) {
        out.push_back(maskBit | 126);
        out.push_back(static_cast<std::uint8_t>(payload.size() >> 8));
        out.push_back(static_cast<std::uint8_t>(payload.size()));
    } else {
        out.push_back(maskBit | 127);
        appendU64(out, payload.size());
    }
    if (mask) {
        out.insert(out.end(), mask->begin(), mask->end());
        for (std::size_t i = 0; i < payload.size(); ++i) out.push_back(payload[i] ^ (*mask)[i % 4]);
    } else {
        out.insert(out.end(), payload.begin(), payload.end());
    }
    return out;
}

void Decoder::feed(ByteView bytes) {
    if (offset_ > 0) {
        buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(offset_));
        offset_ = 0;
    }
    buffer_.insert(buffer_.end(), bytes.begin(), bytes.end());
}

std::optional<Message> Decoder::next() {
    while (true) {
        const std::size_t avail = buffer_.size() - offset_;
        if (avail < 2) return std::nullopt;
        const std::uint8_t* p = buffer_.data() + offset_;
        const bool fin = (p[0] & 0x80) != 0;
        if ((p[0] & 0x70) != 0) throw Error(Errc::protocol, "reserved websocket bits set");
        const std::uint8_t rawOp = p[0] & 0x0F;
        if (!knownOpcode(rawOp)) throw Error(Errc::protocol, "unknown websocket opcode");
        const auto op = static_cast<Opcode>(rawOp);
        const bool masked = (p[1] & 0x80) != 0;
        if (masked != expectMasked_) {
            throw Error(Errc::protocol, expectMasked_ ? "client frames must be masked" : "server frames must not be masked");
        }
        std::uint64_t len = p[1] & 0x7F;
        std::size_t header = 2;
        if (len == 126) {
            if (avail < 4) return std::nullopt;
            len = (std::uint64_t{p[2]} << 8) | p[3];
            header = 4;
        } else if (len == 127) {
            if (avail < 10) return std::nullopt;
            len = 0;
            for (int i = 0; i < 8; ++i) len = (len << 8) | p[2 + i];
            if (len >> 63) throw Error(Errc::protocol, "websocket length has the high bit set");
            header = 10;
        }
        if (isControl(op) && (len > 125 || !fin)) throw Error(Errc::protocol, "invalid websocket control frame");
        if (len > maxMessageBytes_ || fragments_.size() + len > maxMessageBytes_) {
            throw Error(Errc::oversize, "websocket message exceeds " + std::to_string(maxMessageBytes_) + " bytes");
        }
        if (masked) header += 4;
        if (avail < header + len) return std::nullopt;

        Bytes payload(p + header, p + header + len);
        if (masked) {
            const std::uint8_t* key = p + header - 4;
            for (std::size_t i = 0; i < payload.size(); ++i) payload[i] ^= key[i % 4];
        }
        offset_ += header + static_cast<std::size_t>(len);

        if (isControl(op)) return Message{op, std::move(payload)};
        if (op == Opcode::continuation) {
            if (!fragmentOp_) throw Error(Errc::protocol, "continuation without a start frame");
            fragments_.insert(fragments_.end(), payload.begin(), payload.end());
            if (fin) {
                Message m{*fragmentOp_, std::move(fragments_)};
                fragments_.clear();
                fragmentOp_.reset();
                return m;
            }
            continue;
        }
        if (fragmentOp_) throw Error(Errc::protocol, "new data frame inside a fragmented message");
        if (fin) return Message{op, std::move(payload)};
        fragmentOp_ = op;
        fragments_ = std::move(payload);
    }
}

std::optional<std::string> HttpRequest::header(std::string_view name) const {
    auto it = headers.find(lower(name));
    if (it == headers.end()) return std::nullopt;
    return it->second;
}

bool HttpRequest::isWebSocketUpgrade() const {
    auto upgrade = header("upgrade");
    auto connection = header("connection");
    return method == "GET" && upgrade && headerHasToken(*upgrade, "websocket") && connection &&
           headerHasToken(*connection, "upgrade") && header("sec-websocket-key").has_value();
}

std::string percentDecode(std::string_view in, bool plusAsSpace) {
    std::string out;
    out.reserve(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) {
        if (in[i] == '%' && i + 2 < in.size()) {
            auto hex = [](char c) -> int {
                if (c >= '0' && c <= '9') return c - '0';
                if (c >= 'a' && c <= 'f') return c - 'a' + 10;
                if (c >= 'A' && c <= 'F') return c - 'A' + 10;
                return -1;
            };
            int hi = hex(in[i + 1]);
            int lo = hex(in[i + 2]);
            if (hi < 0 || lo < 0) throw Error(Errc::parse_error, "bad percent escape");
            out.push_back(static_cast<char>(hi * 16 + lo));
            i += 2;
        } else if (in[i] == '%') {
            throw Error(Errc::parse_error, "truncated percent escape");
        } else if (plusAsSpace && in[i] == '+') {
            out.push_back(' ');
        } else {
            out.push_back(in[i]);
        }
    }
    return out;
}

HttpRequest parseHttpRequest(std::string_view head) {
    if (head.size() > kMaxRequestHeadBytes) throw Error(Errc::parse_error, "request head too large");
    HttpRequest req;
    std::size_t lineEnd = head.find("\r\n");
    std::string_view requestLine = head.substr(0, lineEnd);
    auto sp1 = requestLine.find(' ');
    auto sp2 = requestLine.rfind(' ');
    if (sp1 == std::string_view::npos || sp2 == sp1) throw Error(Errc::parse_error, "malformed request line");
    req.method = std::string(requestLine.substr(0, sp1));
    req.target = std::string(requestLine.substr(sp1 + 1, sp2 - sp1 - 1));
    if (!requestLine.substr(sp2 + 1).starts_with("HTTP/1.")) throw Error(Errc::parse_error, "unsupported HTTP version");
    if (req.target.empty() || req.target.front() != '/') throw Error(Errc::parse_error, "request target must be a path");

    const auto q = req.target.find('?');
    req.path = percentDecode(std::string_view(req.target).substr(0, q));
    if (q != std::string::npos) {
        std::string_view rest = std::string_view(req.target).substr(q + 1);
        while (!rest.empty()) {
            auto amp = rest.find('&');
            auto pair = rest.substr(0, amp);
            auto eq = pair.find('=');
            std::string key = percentDecode(pair.substr(0, eq), true);
            std::string value = eq == std::string_view::npos ? "" : percentDecode(pair.substr(eq + 1), true);
            if (!key.empty()) req.query[key] = value;
            if (amp == std::string_view::npos) break;
            rest.remove_prefix(amp + 1);
        }
    }

    while (lineEnd != std::string_view::npos) {
        const std::size_t start = lineEnd + 2;
        lineEnd = head.find("\r\n", start);
        std::string_view line = head.substr(start, lineEnd == std::string_view::npos ? std::string_view::npos : lineEnd - start);
        if (line.empty()) break;
        auto colon = line.find(':');
        if (colon == std::string_view::npos || colon == 0) throw Error(Errc::parse_error, "malformed header line");
        req.headers[lower(trim(line.substr(0, colon)))] = std::string(trim(line.substr(colon + 1)));
    }
    return req;
}

} // namespace ember::ws
