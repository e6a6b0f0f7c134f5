#pragma once

// Local control surface. One loopback TCP port serves the web client's
// static files over plain HTTP and the JSON control API over a WebSocket:
//
//   request   {"id": 7, "method": "sendMessage", "params": {...}}
//   response  {"id": 7, "result": {...}}  or  {"id": 7, "error": {"code": "not_found", "message": "..."}}
//   push      {"event": "MESSAGE_RECEIVED", "data": {...}}
//
// The first frame on every connection is a CAPABILITIES push. docs/control-api.md
// lists every method and event.

#include "ember/pipeline.hpp"

#include <json.hpp>

#include <deque>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>

namespace ember::control {

using json = nlohmann::json;

inline constexpr int kApiVersion = 1;
inline constexpr std::uint16_t kDefaultListenPort = 5896;
inline constexpr std::uint16_t kDefaultControlPort = 7870;
inline constexpr std::int64_t kDefaultSweepIntervalMs = 60'000;

struct Config {
    std::string displayName = "ember";
    std::filesystem::path identityDir = ".ember";
    std::string listenAddress = "::";
    std::uint16_t listenPort = kDefaultListenPort;
    /// Address peers use to reach us; part of every conversation id.
    std::string advertiseAddress = "::1";
    std::string controlAddress = "127.0.0.1";
    std::uint16_t controlPort = kDefaultControlPort;
    bool allowRemoteControl = false;
    std::filesystem::path webRoot; // empty: no static files
    std::int64_t defaultTtlMs = kDefaultTtlMs;
    std::size_t maxEnvelopeBytes = kDefaultMaxEnvelopeBytes;
    std::int64_t sweepIntervalMs = kDefaultSweepIntervalMs;
    std::int64_t rotationTimeoutMs = kDefaultRotationTimeoutMs;
    RetryPolicy retry;
    std::optional<std::string> passphrase;

    /// Throws Errc::validation.
    void validate() const;
};

using EnvLookup = std::function<std::optional<std::string>(std::string_view)>;

std::optional<std::string> processEnv(std::string_view name);

/// Overrides fields from EMBER_* variables (EMBER_LISTEN_PORT, EMBER_CONTROL_PORT, ...).
/// Throws Errc::validation on unparsable values.
void applyEnvironment(Config& config, const EnvLookup& lookup = processEnv);

bool isLoopbackAddress(std::string_view address);

/// "1500ms", "60s", "5m", "2h" or a bare number of milliseconds.
std::int64_t parseDuration(std::string_view text);

// Identity directory files, all created with mode 0600.
inline constexpr std::string_view kTokenFile = "control.token";
inline constexpr std::string_view kMasterKeyFile = "master.key";
inline constexpr std::string_view kSaltFile = "store.salt";
inline constexpr std::string_view kStoreFile = "ember.store";
inline constexpr std::string_view kControlPortFile = "control.port";

void writePrivateFile(const std::filesystem::path& path, ByteView contents);
std::string loadOrCreateToken(const std::filesystem::path& identityDir);
crypto::SymmetricKey loadOrCreateMasterKey(const std::filesystem::path& identityDir,
                                           const std::optional<std::string>& passphrase);

/// Method dispatch over a pipeline. Every mutation maps onto exactly one
/// pipeline call. Responses carry fingerprints, never key bytes.
class ControlApi {
public:
    struct Hooks {
        std::function<json()> networkStatus;
        std::function<void()> shutdown;
        std::int64_t defaultTtlMs = kDefaultTtlMs;
    };

    ControlApi(Pipeline& pipeline, Hooks hooks);

    /// Throws ember::Error; unknown methods raise Errc::not_found.
    json call(std::string_view method, const json& params);
    /// Wraps call() into a response object. Never throws.
    json handle(const json& request);

    static json capabilities();
    static json eventToJson(const NotificationEvent& event);

private:
    json conversationSummary(const Contact& contact) const;
    json messageView(const MessageRecord& record) const;

    Pipeline& pipeline_;
    Hooks hooks_;
};

class ControlServer {
public:
    struct Options {
        std::string address = "127.0.0.1";
        std::uint16_t port = 0;
        std::string token;
        std::filesystem::path webRoot;
        bool allowRemote = false;
        std::size_t maxMessageBytes = 1 << 20;
    };

    /// Throws Errc::validation for a non-loopback address without allowRemote,
    /// Errc::io when the port cannot be bound.
    static std::unique_ptr<ControlServer> start(Options options, ControlApi& api,
                                                EventStream<NotificationEvent>& events);
    ~ControlServer();
    ControlServer(const ControlServer&) = delete;
    ControlServer& operator=(const ControlServer&) = delete;

    void stop();
    std::uint16_t port() const;
    std::size_t sessionCount() const;

    struct Impl;

private:
    explicit ControlServer(std::unique_ptr<Impl> impl);
    std::unique_ptr<Impl> impl_;
};

/// Blocking WebSocket client used by the CLI and the tests.
class ControlClient {
public:
    /// Throws Errc::refused when nothing answers, Errc::auth_failure on a
    /// rejected token, Errc::protocol on a bad handshake.
    static std::unique_ptr<ControlClient> connect(const std::string& address, std::uint16_t port,
                                                  const std::string& token, std::int64_t timeoutMs = 5'000);
    ~ControlClient();

    /// Throws ember::Error carrying the server's error category.
    json call(const std::string& method, const json& params = json::object(), std::int64_t timeoutMs = 60'000);
    /// Next pushed event, or nullopt after timeoutMs.
    std::optional<json> nextEvent(std::int64_t timeoutMs);
    const json& capabilities() const { return capabilities_; }
    void close();

private:
    ControlClient() = default;
    std::optional<json> readMessage(std::int64_t timeoutMs);
    void sendText(const std::string& text);

    int fd_ = -1;
    std::int64_t nextId_ = 1;
    std::deque<json> events_;
    json capabilities_;
    struct DecoderHolder;
    std::unique_ptr<DecoderHolder> decoder_;
};

} // namespace ember::control
