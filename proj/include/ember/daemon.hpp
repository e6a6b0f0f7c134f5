#pragma once

#include "ember/control.hpp"

#include <condition_variable>
#include <thread>

namespace ember {

/// A running peer: encrypted store, pipeline, envelope listener, maintenance
/// thread (rotation timeouts and the TTL sweep) and the control server.
class Daemon {
public:
    /// Throws Errc::validation for bad config, Errc::auth_failure when the
    /// store does not open under the configured key, Errc::io on bind failure.
    static std::unique_ptr<Daemon> start(control::Config config);
    ~Daemon();
    Daemon(const Daemon&) = delete;
    Daemon& operator=(const Daemon&) = delete;

    void requestStop();
    bool stopRequested() const;
    /// Blocks until requestStop() or timeoutMs elapses. Returns true once stop was requested.
    bool waitForStop(std::int64_t timeoutMs);
    /// Idempotent.
    void stop();

    Pipeline& pipeline() { return *pipeline_; }
    std::uint16_t listenPort() const;
    std::uint16_t controlPort() const;
    const std::string& token() const { return token_; }
    const Endpoint& localEndpoint() const { return endpoint_; }
    const control::Config& config() const { return config_; }
    control::json networkStatus() const;

private:
    explicit Daemon(control::Config config);
    void maintenanceLoop();

    control::Config config_;
    std::string token_;
    Endpoint endpoint_;
    std::unique_ptr<Store> store_;
    std::unique_ptr<TcpOutbound> outbound_;
    SystemClock clock_;
    std::unique_ptr<Pipeline> pipeline_;
    std::atomic<Pipeline*> ready_{nullptr};
    EventStream<ConnectionState> connectionEvents_;
    Subscription<ConnectionState> connectionSub_;
    std::unique_ptr<Listener> listener_;
    std::unique_ptr<control::ControlApi> api_;
    std::unique_ptr<control::ControlServer> server_;
    std::thread maintenance_;
    std::int64_t startedAt_ = 0;

    mutable std::mutex mutex_;
    std::condition_variable cv_;
    bool stopRequested_ = false;
    bool stopped_ = false;
    ConnectionState lastState_;
};

} // namespace ember
