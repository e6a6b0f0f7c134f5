#pragma once

// Small POSIX socket helpers shared by the peer transport and the control
// server. Internal to the library.

#include "ember/bytes.hpp"

#include <sys/socket.h>

#include <cstdint>
#include <string>

namespace ember::net {

class Fd {
public:
    explicit Fd(int fd = -1) : fd_(fd) {}
    Fd(Fd&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
    Fd& operator=(Fd&& o) noexcept;
    Fd(const Fd&) = delete;
    Fd& operator=(const Fd&) = delete;
    ~Fd() { reset(); }

    int get() const { return fd_; }
    bool valid() const { return fd_ >= 0; }
    int release();
    void reset();

private:
    int fd_;
};

struct SockAddr {
    sockaddr_storage storage{};
    socklen_t len = 0;
    int family = 0;
};

/// Throws Errc::validation when the address is not a literal IPv4/IPv6 address.
SockAddr toSockAddr(const std::string& address, std::uint16_t port);

void setNonBlocking(int fd, bool on);

/// Waits for `events` on fd. Returns false on timeout.
bool waitFor(int fd, short events, std::int64_t timeoutMs);

struct ConnectOutcome {
    Fd fd;
    int error = 0; // errno of the failure, 0 on success
    bool timedOut = false;
};

/// Non-blocking connect bounded by timeoutMs. The returned socket is non-blocking.
ConnectOutcome connectTo(const SockAddr& addr, std::int64_t timeoutMs);

/// Bound, listening, non-blocking socket. IPv6 sockets accept IPv4 too.
/// Throws Errc::io.
Fd listenOn(const std::string& address, std::uint16_t port, int backlog, std::uint16_t& boundPort);

/// Writes everything or returns false once timeoutMs passes. Throws Errc::io on socket errors.
bool writeAll(int fd, ByteView bytes, std::int64_t timeoutMs);

} // namespace ember::net
