#include "net.hpp"

#include "ember/error.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>

namespace ember::net {

Fd& Fd::operator=(Fd&& o) noexcept {
    if (this != &o) {
        reset();
        fd_ = o.fd_;
        o.fd_ = -1;
    }
    return *this;
}

int Fd::release() {
    int fd = fd_;
    fd_ = -1;
    return fd;
}

void Fd::reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
}

SockAddr toSockAddr(const std::string& address, std::uint16_t port) {
    SockAddr out;
    if (address.find(':') != std::string::npos) {
        auto* sa = reinterpret_cast<sockaddr_in6*>(&out.storage);
        sa->sin6_family = AF_INET6;
        sa->sin6_port = htons(port);
        if (inet_pton(AF_INET6, address.c_str(), &sa->sin6_addr) != 1) {
            throw Error(Errc::validation, "invalid IPv6 address " + address);
        }
        out.len = sizeof(sockaddr_in6);
        out.family = AF_INET6;
    } else {
        auto* sa = reinterpret_cast<sockaddr_in*>(&out.storage);
        sa->sin_family = AF_INET;
        sa->sin_port = htons(port);
        if (inet_pton(AF_INET, address.c_str(), &sa->sin_addr) != 1) {
            throw Error(Errc::validation, "invalid IPv4 address " + address);
        }
        out.len = sizeof(sockaddr_in);
        out.family = AF_INET;
    }
    return out;
}

void setNonBlocking(int fd, bool on) {
    int flags = ::fcntl(fd, F_GETFL, 0);
    ::fcntl(fd, F_SETFL, on ? (flags | O_NONBLOCK) : (flags & ~O_NONBLOCK));
}

bool waitFor(int fd, short events, std::int64_t timeoutMs) {
    pollfd p{fd, events, 0};
    auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeoutMs);
    while (true) {
        auto remaining =
            std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
        if (remaining.count() < 0) return false;
        int rc = ::poll(&p, 1, static_cast<int>(remaining.count()));
        if (rc > 0) return true;
        if (rc == 0) return false;
        if (errno != EINTR) throw Error(Errc::io, std::string("poll: ") + std::strerror(errno));
    }
}

ConnectOutcome connectTo(const SockAddr& addr, std::int64_t timeoutMs) {
    ConnectOutcome out;
    Fd fd(::socket(addr.family, SOCK_STREAM | SOCK_CLOEXEC, 0));
    if (!fd.valid()) {
        out.error = errno;
        return out;
    }
    int one = 1;
    ::setsockopt(fd.get(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    setNonBlocking(fd.get(), true);

    int rc = ::connect(fd.get(), reinterpret_cast<const sockaddr*>(&addr.storage), addr.len);
    if (rc != 0 && errno != EINPROGRESS) {
        out.error = errno;
        return out;
    }
    if (rc != 0) {
        if (!waitFor(fd.get(), POLLOUT, timeoutMs)) {
            out.timedOut = true;
            return out;
        }
        int err = 0;
        socklen_t len = sizeof err;
        ::getsockopt(fd.get(), SOL_SOCKET, SO_ERROR, &err, &len);
        if (err != 0) {
            out.error = err;
            return out;
        }
    }
    out.fd = std::move(fd);
    return out;
}

Fd listenOn(const std::string& address, std::uint16_t port, int backlog, std::uint16_t& boundPort) {
    SockAddr addr = toSockAddr(address, port);
    Fd fd(::socket(addr.family, SOCK_STREAM | SOCK_CLOEXEC, 0));
    if (!fd.valid()) throw Error(Errc::io, std::string("socket: ") + std::strerror(errno));
    int one = 1;
    ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (addr.family == AF_INET6) {
        int zero = 0;
        ::setsockopt(fd.get(), IPPROTO_IPV6, IPV6_V6ONLY, &zero, sizeof zero);
    }
    if (::bind(fd.get(), reinterpret_cast<const sockaddr*>(&addr.storage), addr.len) != 0) {
        throw Error(Errc::io, "bind " + address + ":" + std::to_string(port) + ": " + std::strerror(errno));
    }
    if (::listen(fd.get(), backlog) != 0) {
        throw Error(Errc::io, std::string("listen: ") + std::strerror(errno));
    }
    sockaddr_storage bound{};
    socklen_t len = sizeof bound;
    ::getsockname(fd.get(), reinterpret_cast<sockaddr*>(&bound), &len);
    boundPort = ntohs(bound.ss_family == AF_INET6 ? reinterpret_cast<sockaddr_in6*>(&bound)->sin6_port
                                                  : reinterpret_cast<sockaddr_in*>(&bound)->sin_port);
    setNonBlocking(fd.get(), true);
    return fd;
}

bool writeAll(int fd, ByteView bytes, std::int64_t timeoutMs) {
    std::size_t sent = 0;
    auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeoutMs);
    while (sent < bytes.size()) {
        ssize_t n = ::send(fd, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
        if (n > 0) {
            sent += static_cast<std::size_t>(n);
            continue;
        }
        if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR)) {
            auto remaining =
                std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
            if (remaining.count() <= 0 || !waitFor(fd, POLLOUT, remaining.count())) return false;
            continue;
        }
        throw Error(Errc::io, std::string("send: ") + std::strerror(errno));
    }
    return true;
}

} // namespace ember::net
