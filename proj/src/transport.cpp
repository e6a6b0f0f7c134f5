#include "ember/transport.hpp"

#include "ember/error.hpp"
#include "net.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

namespace ember {

namespace {

using net::Fd;
using net::SockAddr;
using net::waitFor;
using net::toSockAddr;

struct AttemptOutcome {
    FailureCause cause = FailureCause::none;
    std::string detail;
};

AttemptOutcome attemptSend(const SockAddr& addr, ByteView bytes, const RetryPolicy& policy) {
    auto conn = net::connectTo(addr, policy.connectTimeoutMs);
    if (conn.timedOut) return {FailureCause::connect_timeout, "connect timed out"};
    if (!conn.fd.valid()) {
        return {conn.error == ECONNREFUSED ? FailureCause::refused : FailureCause::io,
                std::string("connect: ") + std::strerror(conn.error)};
    }
    try {
        if (!net::writeAll(conn.fd.get(), bytes, policy.writeTimeoutMs)) {
            return {FailureCause::write_timeout, "write timed out"};
        }
    } catch (const Error& e) {
        return {FailureCause::io, e.what()};
    }
    ::shutdown(conn.fd.get(), SHUT_WR);
    return {};
}

/// Socket reader with a per-read inactivity timeout.
class SocketSource final : public ByteSource {
public:
    SocketSource(int fd, std::int64_t timeoutMs, const std::atomic<bool>& running)
        : fd_(fd), timeoutMs_(timeoutMs), running_(running) {}

    std::size_t readSome(std::span<std::uint8_t> out) override {
        while (true) {
            if (!running_.load()) throw Error(Errc::closed, "listener stopping");
            if (!waitFor(fd_, POLLIN, timeoutMs_)) throw Error(Errc::timeout, "read timed out");
            ssize_t n = ::recv(fd_, out.data(), out.size(), 0);
            if (n >= 0) return static_cast<std::size_t>(n);
            if (errno == EINTR || errno == EAGAIN) continue;
            if (errno == ECONNRESET) return 0;
            throw Error(Errc::io, std::string("recv: ") + std::strerror(errno));
        }
    }

private:
    int fd_;
    std::int64_t timeoutMs_;
    const std::atomic<bool>& running_;
};

} // namespace

std::string_view connStateName(ConnState state) {
    switch (state) {
    case ConnState::disconnected: return "DISCONNECTED";
    case ConnState::listening: return "LISTENING";
    case ConnState::connected: return "CONNECTED";
    case ConnState::error: return "ERROR";
    }
    return "DISCONNECTED";
}

std::string_view failureCauseName(FailureCause cause) {
    switch (cause) {
    case FailureCause::none: return "none";
    case FailureCause::refused: return "refused";
    case FailureCause::connect_timeout: return "connect_timeout";
    case FailureCause::write_timeout: return "write_timeout";
    case FailureCause::read_timeout: return "read_timeout";
    case FailureCause::io: return "io";
    }
    return "io";
}

std::int64_t RetryPolicy::backoffAfter(int attempt) const {
    return baseBackoffMs << (attempt - 1);
}

void RetryPolicy::validate() const {
    if (maxAttempts < 1) throw Error(Errc::precondition, "maxAttempts must be at least 1");
    if (connectTimeoutMs <= 0 || readTimeoutMs <= 0 || writeTimeoutMs <= 0 || baseBackoffMs < 0) {
        throw Error(Errc::precondition, "retry timeouts must be positive");
    }
}

void realSleep(std::chrono::milliseconds ms) { std::this_thread::sleep_for(ms); }

DeliveryResult sendBytes(const Endpoint& endpoint, ByteView bytes, const RetryPolicy& policy,
                         const Sleeper& sleeper) {
    policy.validate();
    const SockAddr addr = toSockAddr(endpoint.address, endpoint.port);
    DeliveryResult result;
    for (int attempt = 1; attempt <= policy.maxAttempts; ++attempt) {
        result.attempts = attempt;
        auto outcome = attemptSend(addr, bytes, policy);
        result.lastCause = outcome.cause;
        result.detail = outcome.detail;
        if (outcome.cause == FailureCause::none) {
            result.delivered = true;
            return result;
        }
        if (attempt < policy.maxAttempts) {
            auto wait = policy.backoffAfter(attempt);
            result.waitsMs.push_back(wait);
            sleeper(std::chrono::milliseconds(wait));
        }
    }
    return result;
}

DeliveryResult sendEnvelope(const Endpoint& endpoint, const Envelope& env, const RetryPolicy& policy,
                            std::size_t maxEnvelopeBytes, const Sleeper& sleeper) {
    Bytes bytes = frame(encodeEnvelope(env), maxEnvelopeBytes);
    return sendBytes(endpoint, bytes, policy, sleeper);
}

Listener::Listener(ListenerConfig config, Handler handler, EventStream<ConnectionState>* events)
    : config_(std::move(config)), handler_(std::move(handler)), events_(events) {}

std::unique_ptr<Listener> Listener::start(const ListenerConfig& config, Handler handler,
                                          EventStream<ConnectionState>* events) {
    std::unique_ptr<Listener> l(new Listener(config, std::move(handler), events));
    try {
        Fd fd = net::listenOn(config.bindAddress, config.port, config.backlog, l->port_);
        if (::pipe2(l->wakeFds_, O_CLOEXEC | O_NONBLOCK) != 0) {
            throw Error(Errc::io, std::string("pipe: ") + std::strerror(errno));
        }
        l->listenFd_ = fd.release();
    } catch (const Error& e) {
        l->publish(ConnState::error, e.what());
        throw;
    }
    l->running_ = true;
    l->publish(ConnState::listening, "port " + std::to_string(l->port_));
    l->thread_ = std::thread([raw = l.get()] { raw->run(); });
    return l;
}

Listener::~Listener() { stop(); }

void Listener::stop() {
    bool wasRunning = running_.exchange(false);
    if (wasRunning) {
        std::uint8_t b = 1;
        [[maybe_unused]] auto n = ::write(wakeFds_[1], &b, 1);
    }
    if (thread_.joinable()) thread_.join();
    if (listenFd_ >= 0) {
        ::close(listenFd_);
        listenFd_ = -1;
    }
    for (int& fd : wakeFds_) {
        if (fd >= 0) ::close(fd);
        fd = -1;
    }
    if (wasRunning) publish(ConnState::disconnected);
}

ListenerStats Listener::stats() const {
    std::lock_guard lock(statsMutex_);
    return stats_;
}

void Listener::publish(ConnState state, std::string detail) {
    if (events_) events_->publish(ConnectionState{state, std::move(detail)});
}

void Listener::run() {
    while (running_.load()) {
        pollfd fds[2] = {{listenFd_, POLLIN, 0}, {wakeFds_[0], POLLIN, 0}};
        int rc = ::poll(fds, 2, -1);
        if (rc < 0) {
            if (errno == EINTR) continue;
            publish(ConnState::error, std::string("poll: ") + std::strerror(errno));
            break;
        }
        if (fds[1].revents != 0 || !running_.load()) break;
        if ((fds[0].revents & POLLIN) == 0) continue;
        int conn = ::accept4(listenFd_, nullptr, nullptr, SOCK_CLOEXEC);
        if (conn < 0) continue;
        Fd guard(conn);
        {
            std::lock_guard lock(statsMutex_);
            ++stats_.connections;
        }
        publish(ConnState::connected);
        serveConnection(conn);
        guard.reset();
        if (running_.load()) publish(ConnState::listening, "port " + std::to_string(port_));
    }
}

void Listener::serveConnection(int fd) {
    SocketSource source(fd, config_.readTimeoutMs, running_);
    try {
        while (true) {
            auto payload = deframe(source, config_.maxEnvelopeBytes);
            if (!payload) return;
            Envelope env = decodeEnvelope(*payload, config_.maxEnvelopeBytes);
            {
                std::lock_guard lock(statsMutex_);
                ++stats_.envelopes;
            }
            try {
                handler_(env);
            } catch (const std::exception& e) {
                std::lock_guard lock(statsMutex_);
                ++stats_.handlerErrors;
            }
        }
    } catch (const Error& e) {
        std::lock_guard lock(statsMutex_);
        switch (e.code()) {
        case Errc::oversize: ++stats_.oversize; break;
        case Errc::truncated: ++stats_.truncated; break;
        case Errc::timeout: ++stats_.timeouts; break;
        case Errc::closed: break;
        default: ++stats_.malformed; break;
        }
    }
}

} // namespace ember
