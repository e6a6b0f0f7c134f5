#include "ember/control.hpp"

#include "ember/error.hpp"
#include "ember/log.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cstdlib>
#include <cstring>
#include <fstream>

namespace ember::control {

namespace fs = std::filesystem;

namespace {

std::int64_t parseInt(std::string_view name, std::string_view text, std::int64_t min, std::int64_t max) {
    std::int64_t v = 0;
    auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || p != text.data() + text.size() || v < min || v > max) {
        throw Error(Errc::validation, std::string(name) + ": expected an integer in [" + std::to_string(min) + ", " +
                                          std::to_string(max) + "], got '" + std::string(text) + "'");
    }
    return v;
}

bool parseBool(std::string_view name, std::string_view text) {
    if (text == "1" || text == "true" || text == "yes") return true;
    if (text == "0" || text == "false" || text == "no") return false;
    throw Error(Errc::validation, std::string(name) + ": expected a boolean");
}

Bytes readWholeFile(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::io, "cannot read " + path.string());
    return Bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

const json& param(const json& params, const char* name) {
    if (!params.is_object() || !params.contains(name)) {
        throw Error(Errc::validation, std::string("missing parameter '") + name + "'");
    }
    return params.at(name);
}

std::string stringParam(const json& params, const char* name) {
    const json& v = param(params, name);
    if (!v.is_string()) throw Error(Errc::validation, std::string("parameter '") + name + "' must be a string");
    return v.get<std::string>();
}

std::int64_t intParam(const json& params, const char* name, std::int64_t fallback) {
    if (!params.is_object() || !params.contains(name) || params.at(name).is_null()) return fallback;
    const json& v = params.at(name);
    if (!v.is_number_integer()) throw Error(Errc::validation, std::string("parameter '") + name + "' must be an integer");
    return v.get<std::int64_t>();
}

json trustJson(const TrustState& t) {
    return {{"status", trustStatusName(t.status)},
            {"firstSeenFingerprint", t.firstSeenFingerprint.display()},
            {"currentFingerprint", t.currentFingerprint.display()}};
}

} // namespace

void Config::validate() const {
    if (displayName.empty() || displayName.size() > kMaxSenderNameBytes) {
        throw Error(Errc::validation, "display name must be 1.." + std::to_string(kMaxSenderNameBytes) + " bytes");
    }
    if (listenPort != 0 && listenPort == controlPort) {
        throw Error(Errc::validation, "listen and control ports must differ");
    }
    if (defaultTtlMs <= 0 || sweepIntervalMs <= 0 || rotationTimeoutMs <= 0) {
        throw Error(Errc::validation, "durations must be positive");
    }
    if (maxEnvelopeBytes < 1024 || maxEnvelopeBytes > (16u << 20)) {
        throw Error(Errc::validation, "max envelope bytes must be between 1 KiB and 16 MiB");
    }
    if (!allowRemoteControl && !isLoopbackAddress(controlAddress)) {
        throw Error(Errc::validation, "control address " + controlAddress +
                                          " is not loopback; set allowRemoteControl to bind it anyway");
    }
    Endpoint::parse(advertiseAddress, listenPort == 0 ? 1 : listenPort);
    retry.validate();
}

std::optional<std::string> processEnv(std::string_view name) {
    const char* v = std::getenv(std::string(name).c_str());
    if (!v) return std::nullopt;
    return std::string(v);
}

void applyEnvironment(Config& c, const EnvLookup& env) {
    auto str = [&](const char* name, auto&& apply) {
        if (auto v = env(name); v && !v->empty()) apply(*v);
    };
    auto port = [&](const char* name, std::uint16_t& out) {
        str(name, [&](const std::string& v) { out = static_cast<std::uint16_t>(parseInt(name, v, 0, 65535)); });
    };
    auto millis = [&](const char* name, std::int64_t& out) {
        str(name, [&](const std::string& v) {
            try {
                out = parseDuration(v);
            } catch (const Error& e) {
                throw Error(Errc::validation, std::string(name) + ": " + e.what());
            }
        });
    };

    str("EMBER_DISPLAY_NAME", [&](const std::string& v) { c.displayName = v; });
    str("EMBER_IDENTITY_DIR", [&](const std::string& v) { c.identityDir = v; });
    str("EMBER_LISTEN_ADDRESS", [&](const std::string& v) { c.listenAddress = v; });
    port("EMBER_LISTEN_PORT", c.listenPort);
    str("EMBER_ADVERTISE_ADDRESS", [&](const std::string& v) { c.advertiseAddress = v; });
    str("EMBER_CONTROL_ADDRESS", [&](const std::string& v) { c.controlAddress = v; });
    port("EMBER_CONTROL_PORT", c.controlPort);
    str("EMBER_ALLOW_REMOTE_CONTROL",
        [&](const std::string& v) { c.allowRemoteControl = parseBool("EMBER_ALLOW_REMOTE_CONTROL", v); });
    str("EMBER_WEB_ROOT", [&](const std::string& v) { c.webRoot = v; });
    millis("EMBER_DEFAULT_TTL", c.defaultTtlMs);
    str("EMBER_MAX_ENVELOPE_BYTES", [&](const std::string& v) {
        c.maxEnvelopeBytes = static_cast<std::size_t>(parseInt("EMBER_MAX_ENVELOPE_BYTES", v, 1, 1 << 30));
    });
    millis("EMBER_SWEEP_INTERVAL", c.sweepIntervalMs);
    millis("EMBER_ROTATION_TIMEOUT", c.rotationTimeoutMs);
    millis("EMBER_CONNECT_TIMEOUT", c.retry.connectTimeoutMs);
    millis("EMBER_READ_TIMEOUT", c.retry.readTimeoutMs);
    millis("EMBER_WRITE_TIMEOUT", c.retry.writeTimeoutMs);
    str("EMBER_MAX_ATTEMPTS",
        [&](const std::string& v) { c.retry.maxAttempts = static_cast<int>(parseInt("EMBER_MAX_ATTEMPTS", v, 1, 100)); });
    millis("EMBER_BACKOFF", c.retry.baseBackoffMs);
    str("EMBER_PASSPHRASE", [&](const std::string& v) { c.passphrase = v; });
}

bool isLoopbackAddress(std::string_view address) {
    std::string a(address);
    if (a.size() >= 2 && a.front() == '[' && a.back() == ']') a = a.substr(1, a.size() - 2);
    in_addr v4{};
    if (inet_pton(AF_INET, a.c_str(), &v4) == 1) return (ntohl(v4.s_addr) >> 24) == 127;
    in6_addr v6{};
    if (inet_pton(AF_INET6, a.c_str(), &v6) == 1) {
        if (IN6_IS_ADDR_LOOPBACK(&v6)) return true;
        if (IN6_IS_ADDR_V4MAPPED(&v6)) return v6.s6_addr[12] == 127;
    }
    return false;
}

std::int64_t parseDuration(std::string_view text) {
    std::size_t digits = 0;
    while (digits < text.size() && text[digits] >= '0' && text[digits] <= '9') ++digits;
    if (digits == 0) throw Error(Errc::validation, "duration must start with a number: '" + std::string(text) + "'");
    const std::int64_t n = parseInt("duration", text.substr(0, digits), 0, std::int64_t{1} << 40);
    const std::string_view unit = text.substr(digits);
    if (unit.empty() || unit == "ms") return n;
    if (unit == "s") return n * 1000;
    if (unit == "m") return n * 60'000;
    if (unit == "h") return n * 3'600'000;
    if (unit == "d") return n * 86'400'000;
    throw Error(Errc::validation, "unknown duration unit '" + std::string(unit) + "'");
}

void writePrivateFile(const fs::path& path, ByteView contents) {
    const fs::path tmp = path.string() + ".tmp";
    int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0600);
    if (fd < 0) throw Error(Errc::io, "cannot create " + tmp.string() + ": " + std::strerror(errno));
    std::size_t off = 0;
    while (off < contents.size()) {
        ssize_t n = ::write(fd, contents.data() + off, contents.size() - off);
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0) {
            ::close(fd);
            throw Error(Errc::io, "cannot write " + tmp.string());
        }
        off += static_cast<std::size_t>(n);
    }
    ::fsync(fd);
    ::close(fd);
    if (::rename(tmp.c_str(), path.c_str()) != 0) {
        throw Error(Errc::io, "cannot rename " + tmp.string() + ": " + std::strerror(errno));
    }
}

std::string loadOrCreateToken(const fs::path& dir) {
    fs::create_directories(dir);
    const fs::path file = dir / kTokenFile;
    if (fs::exists(file)) {
        std::string token = toString(readWholeFile(file));
        while (!token.empty() && (token.back() == '\n' || token.back() == '\r' || token.back() == ' ')) token.pop_back();
        if (token.size() < 16) throw Error(Errc::integrity, file.string() + " holds a token that is too short");
        return token;
    }
    std::array<std::uint8_t, 32> raw{};
    crypto::systemRandom().fill(raw);
    std::string token = hexEncode(raw);
    writePrivateFile(file, asBytes(token + "\n"));
    return token;
}

crypto::SymmetricKey loadOrCreateMasterKey(const fs::path& dir, const std::optional<std::string>& passphrase) {
    fs::create_directories(dir);
    if (passphrase) {
        const fs::path saltFile = dir / kSaltFile;
        Bytes salt;
        if (fs::exists(saltFile)) {
            salt = readWholeFile(saltFile);
        } else {
            salt.resize(Store::kSaltSize);
            crypto::systemRandom().fill(salt);
            writePrivateFile(saltFile, salt);
        }
        return Store::deriveMasterKey(*passphrase, salt);
    }
    const fs::path keyFile = dir / kMasterKeyFile;
    if (fs::exists(keyFile)) {
        Bytes raw = readWholeFile(keyFile);
        if (raw.size() != crypto::kKeySize) throw Error(Errc::integrity, keyFile.string() + " is not a 32-byte key");
        crypto::SymmetricKey key(raw);
        crypto::secureWipe(raw);
        return key;
    }
    auto key = crypto::generateKey();
    writePrivateFile(keyFile, key.bytes());
    return key;
}

ControlApi::ControlApi(Pipeline& pipeline, Hooks hooks) : pipeline_(pipeline), hooks_(std::move(hooks)) {}

json ControlApi::capabilities() {
    return {{"apiVersion", kApiVersion},
            {"product", "ember"},
            {"methods",
             {"capabilities", "listConversations", "listContacts", "listMessages", "sendMessage", "addContact",
              "getFingerprint", "setVerified", "startRotation", "getRotationState", "getNetworkStatus", "sweepNow",
              "shutdown"}},
            {"events", {"CAPABILITIES", "MESSAGE_RECEIVED", "ROTATION_STATE", "CONNECTION_STATE", "TRUST_STATE"}}};
}

json ControlApi::eventToJson(const NotificationEvent& ev) {
    json data = {{"timestamp", ev.at}};
    if (!ev.conversationId.empty()) data["conversationId"] = ev.conversationId;
    switch (ev.kind) {
    case NotificationKind::message_received:
        data["messageId"] = ev.messageId;
        break;
    case NotificationKind::rotation_state:
    case NotificationKind::trust_state:
        data["state"] = ev.state;
        data["keyVersion"] = ev.keyVersion;
        break;
    case NotificationKind::connection_state:
        data["state"] = ev.state;
        break;
    }
    return {{"event", notificationKindName(ev.kind)}, {"data", data}};
}

json ControlApi::conversationSummary(const Contact& c) const {
    json out = {{"conversationId", c.conversationId},
                {"displayName", c.displayName},
                {"address", c.endpoint.address},
                {"port", c.endpoint.port},
                {"endpoint", c.endpoint.display()},
                {"createdAt", c.createdAt},
                {"keyVersion", pipeline_.activeKeyVersion(c.conversationId)},
                {"fingerprint", pipeline_.getFingerprint(c.conversationId).display()},
                {"trust", trustStatusName(pipeline_.trust(c.conversationId).status)},
                {"rotationPhase", rotationPhaseName(pipeline_.rotationState(c.conversationId).phase)}};
    return out;
}

json ControlApi::messageView(const MessageRecord& r) const {
    json out = {{"id", r.id},
                {"conversationId", r.conversationId},
                {"direction", directionName(r.direction)},
                {"senderName", r.senderName},
                {"timestamp", r.timestamp},
                {"ttl", r.ttl},
                {"expiresAt", r.expiresAt},
                {"keyVersion", r.keyVersion},
                {"deliveryStatus", deliveryStatusName(r.deliveryStatus)}};
    try {
        auto plain = pipeline_.decryptForDisplay(r);
        out["plaintext"] = std::string(plain.str());
    } catch (const Error& e) {
        out["plaintext"] = nullptr;
        out["error"] = errcName(e.code());
    }
    return out;
}

json ControlApi::call(std::string_view method, const json& params) {
    if (method == "capabilities") return capabilities();

    if (method == "listConversations") {
        json list = json::array();
        std::vector<std::pair<std::int64_t, json>> rows;
        for (const auto& meta : pipeline_.listConversationMeta()) {
            auto contact = pipeline_.contact(meta.conversationId);
            if (!contact) continue;
            json row = conversationSummary(*contact);
            row["lastActivity"] = meta.lastActivity;
            row["defaultTtl"] = meta.defaultTtl;
            rows.emplace_back(meta.lastActivity, std::move(row));
        }
        std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
        for (auto& [_, row] : rows) list.push_back(std::move(row));
        return {{"conversations", list}};
    }

    if (method == "listContacts") {
        json list = json::array();
        for (const auto& c : pipeline_.contacts()) list.push_back(conversationSummary(c));
        return {{"contacts", list}};
    }

    if (method == "listMessages") {
        const std::string id = stringParam(params, "conversationId");
        if (!pipeline_.contact(id)) throw Error(Errc::not_found, "unknown conversation " + id);
        const auto limit = intParam(params, "limit", 200);
        if (limit <= 0) throw Error(Errc::validation, "limit must be positive");
        json list = json::array();
        for (const auto& rec : pipeline_.listMessages(id, static_cast<std::size_t>(limit))) {
            list.push_back(messageView(rec));
        }
        return {{"conversationId", id}, {"messages", list}};
    }

    if (method == "sendMessage") {
        const std::string id = stringParam(params, "conversationId");
        const std::string text = stringParam(params, "text");
        if (text.empty()) throw Error(Errc::validation, "text must not be empty");
        const auto ttl = intParam(params, "ttl", hooks_.defaultTtlMs);
        if (ttl <= 0) throw Error(Errc::validation, "ttl must be positive");
        auto sent = pipeline_.sendMessage(id, text, ttl);
        json out = {{"id", sent.record.id},
                    {"conversationId", id},
                    {"timestamp", sent.record.timestamp},
                    {"ttl", sent.record.ttl},
                    {"expiresAt", sent.record.expiresAt},
                    {"keyVersion", sent.record.keyVersion},
                    {"deliveryStatus", deliveryStatusName(sent.record.deliveryStatus)},
                    {"attempts", sent.delivery.attempts}};
        if (!sent.delivery.delivered) out["failure"] = failureCauseName(sent.delivery.lastCause);
        return out;
    }

    if (method == "addContact") {
        const std::string name = stringParam(params, "displayName");
        if (name.empty()) throw Error(Errc::validation, "displayName must not be empty");
        const std::string address = stringParam(params, "address");
        const json& portJson = param(params, "port");
        if (!portJson.is_number_integer()) throw Error(Errc::validation, "port must be an integer");
        const Endpoint endpoint = Endpoint::parse(address, portJson.get<int>());
        Bytes raw;
        try {
            raw = base64Decode(stringParam(params, "key"));
        } catch (const Error&) {
            throw Error(Errc::validation, "key must be Base64");
        }
        if (raw.size() != crypto::kKeySize) {
            crypto::secureWipe(raw);
            throw Error(Errc::validation, "key must decode to 32 bytes");
        }
        crypto::SymmetricKey key(raw);
        crypto::secureWipe(raw);
        auto contact = pipeline_.addContact(name, endpoint, key);
        return conversationSummary(contact);
    }

    if (method == "getFingerprint") {
        const std::string id = stringParam(params, "conversationId");
        return {{"conversationId", id},
                {"fingerprint", pipeline_.getFingerprint(id).display()},
                {"keyVersion", pipeline_.activeKeyVersion(id)},
                {"trust", trustJson(pipeline_.trust(id))}};
    }

    if (method == "setVerified") {
        const std::string id = stringParam(params, "conversationId");
        pipeline_.setVerified(id);
        return {{"conversationId", id}, {"trust", trustJson(pipeline_.trust(id))}};
    }

    if (method == "startRotation") {
        const std::string id = stringParam(params, "conversationId");
        pipeline_.startRotation(id);
        auto st = pipeline_.rotationState(id);
        return {{"conversationId", id},
                {"phase", rotationPhaseName(st.phase)},
                {"proposedVersion", st.proposedVersion},
                {"keyVersion", pipeline_.activeKeyVersion(id)}};
    }

    if (method == "getRotationState") {
        const std::string id = stringParam(params, "conversationId");
        auto st = pipeline_.rotationState(id);
        return {{"conversationId", id},
                {"phase", rotationPhaseName(st.phase)},
                {"proposedVersion", st.proposedVersion},
                {"startedAt", st.startedAt},
                {"timeoutMs", st.timeoutMs},
                {"keyVersion", pipeline_.activeKeyVersion(id)}};
    }

    if (method == "getNetworkStatus") {
        if (!hooks_.networkStatus) return json::object();
        return hooks_.networkStatus();
    }

    if (method == "sweepNow") {
        SystemClock clock;
        return {{"removed", pipeline_.sweep(clock.nowMs())}};
    }

    if (method == "shutdown") {
        if (hooks_.shutdown) hooks_.shutdown();
        return {{"stopping", true}};
    }

    throw Error(Errc::not_found, "unknown method '" + std::string(method) + "'");
}

json ControlApi::handle(const json& request) {
    json id = nullptr;
    auto fail = [&](std::string_view code, const std::string& message) {
        return json{{"id", id}, {"error", {{"code", code}, {"message", message}}}};
    };
    if (!request.is_object()) return fail("parse_error", "request must be a JSON object");
    if (request.contains("id")) id = request.at("id");
    if (!request.contains("method") || !request.at("method").is_string()) {
        return fail("parse_error", "request needs a string 'method'");
    }
    const std::string method = request.at("method").get<std::string>();
    const json params = request.value("params", json::object());
    try {
        json result = call(method, params);
        log::debug("control.call", {{"method", method}, {"outcome", "ok"}});
        return {{"id", id}, {"result", std::move(result)}};
    } catch (const Error& e) {
        log::info("control.call", {{"method", method}, {"outcome", std::string(errcName(e.code()))}});
        return fail(errcName(e.code()), e.what());
    } catch (const json::exception& e) {
        return fail("validation", e.what());
    } catch (const std::exception& e) {
        log::error("control.call", {{"method", method}, {"outcome", "internal"}, {"detail", e.what()}});
        return fail("io", e.what());
    }
}

} // namespace ember::control
