#pragma once

#include "ember/envelope.hpp"
#include "ember/events.hpp"

#include <atomic>
#include <chrono>
#include <functional>
#include <memory>
#include <string>
#include <thread>
#include <vector>

namespace ember {

enum class ConnState { disconnected, listening, connected, error };

std::string_view connStateName(ConnState state);

struct ConnectionState {
    ConnState value = ConnState::disconnected;
    std::string detail;
};

struct RetryPolicy {
    std::int64_t connectTimeoutMs = 5'000;
    std::int64_t readTimeoutMs = 10'000;
    std::int64_t writeTimeoutMs = 10'000;
    int maxAttempts = 3;
    std::int64_t baseBackoffMs = 500;

    /// Wait before attempt `attempt + 1`, i.e. base * 2^(attempt - 1).
    std::int64_t backoffAfter(int attempt) const;
    void validate() const;
};

enum class FailureCause { none, refused, connect_timeout, write_timeout, read_timeout, io };

std::string_view failureCauseName(FailureCause cause);

struct DeliveryResult {
    bool delivered = false;
    int attempts = 0;
    FailureCause lastCause = FailureCause::none;
    std::string detail;
    std::vector<std::int64_t> waitsMs; // backoff waits actually taken
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

void realSleep(std::chrono::milliseconds ms);

/// One connection per call: connect, write the bytes, close. Retries per policy.
DeliveryResult sendBytes(const Endpoint& endpoint, ByteView bytes, const RetryPolicy& policy,
                         const Sleeper& sleeper = realSleep);

DeliveryResult sendEnvelope(const Endpoint& endpoint, const Envelope& env, const RetryPolicy& policy,
                            std::size_t maxEnvelopeBytes = kDefaultMaxEnvelopeBytes,
                            const Sleeper& sleeper = realSleep);

struct ListenerConfig {
    std::string bindAddress = "::";
    std::uint16_t port = 0; // 0 picks an ephemeral port
    std::size_t maxEnvelopeBytes = kDefaultMaxEnvelopeBytes;
    std::int64_t readTimeoutMs = 10'000;
    int backlog = 16;
};

struct ListenerStats {
    std::uint64_t connections = 0;
    std::uint64_t envelopes = 0;
    std::uint64_t oversize = 0;
    std::uint64_t malformed = 0;
    std::uint64_t truncated = 0;
    std::uint64_t timeouts = 0;
    std::uint64_t handlerErrors = 0;
};

/// Sequential TCP listener: one connection at a time, each read frame by
/// frame until the peer closes. Framing and decoding errors close the
/// connection; only structurally valid envelopes reach the handler.
class Listener {
public:
    using Handler = std::function<void(const Envelope&)>;

    /// Publishes LISTENING on success. On bind failure publishes ERROR and throws Errc::io.
    static std::unique_ptr<Listener> start(const ListenerConfig& config, Handler handler,
                                           EventStream<ConnectionState>* events = nullptr);

    ~Listener();
    Listener(const Listener&) = delete;
    Listener& operator=(const Listener&) = delete;

    /// Idempotent. Publishes DISCONNECTED once.
    void stop();
    bool running() const { return running_.load(); }
    std::uint16_t port() const { return port_; }
    ListenerStats stats() const;

private:
    Listener(ListenerConfig config, Handler handler, EventStream<ConnectionState>* events);
    void run();
    void serveConnection(int fd);
    void publish(ConnState state, std::string detail = {});

    ListenerConfig config_;
    Handler handler_;
    EventStream<ConnectionState>* events_;
    int listenFd_ = -1;
    int wakeFds_[2] = {-1, -1};
    std::uint16_t port_ = 0;
    std::atomic<bool> running_{false};
    std::thread thread_;
    mutable std::mutex statsMutex_;
    ListenerStats stats_;
};

} // namespace ember
