#include "ember/control.hpp"

#include "ember/error.hpp"
#include "ember/log.hpp"
#include "ember/websocket.hpp"
#include "net.hpp"

#include <fcntl.h>
#include <poll.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>
#include <list>

namespace ember::control {

namespace fs = std::filesystem;

namespace {

constexpr std::int64_t kHeadTimeoutMs = 5'000;
constexpr std::int64_t kWriteTimeoutMs = 5'000;
constexpr std::uintmax_t kMaxStaticFileBytes = 16u << 20;

std::string_view contentType(const fs::path& p) {
    const std::string ext = p.extension().string();
    if (ext == ".html") return "text/html; charset=utf-8";
    if (ext == ".js" || ext == ".mjs") return "text/javascript; charset=utf-8";
    if (ext == ".css") return "text/css; charset=utf-8";
    if (ext == ".json" || ext == ".map") return "application/json";
    if (ext == ".svg") return "image/svg+xml";
    if (ext == ".png") return "image/png";
    if (ext == ".ico") return "image/x-icon";
    if (ext == ".woff2") return "font/woff2";
    if (ext == ".txt") return "text/plain; charset=utf-8";
    return "application/octet-stream";
}

/// Waits for data on fd or a stop signal on wakeFd. Returns bytes read, 0 on
/// EOF or stop, -1 on timeout.
ssize_t readOrStop(int fd, int wakeFd, std::span<std::uint8_t> buf, int timeoutMs) {
    while (true) {
        pollfd fds[2] = {{fd, POLLIN, 0}, {wakeFd, POLLIN, 0}};
        int rc = ::poll(fds, 2, timeoutMs);
        if (rc < 0) {
            if (errno == EINTR) continue;
            return 0;
        }
        if (rc == 0) return -1;
        if (fds[1].revents != 0) return 0;
        ssize_t n = ::recv(fd, buf.data(), buf.size(), 0);
        if (n < 0 && (errno == EINTR || errno == EAGAIN)) continue;
        return n < 0 ? 0 : n;
    }
}

bool sendHttp(int fd, int status, std::string_view reason, std::string_view type, std::string_view body,
              bool headOnly = false) {
    std::string head = "HTTP/1.1 " + std::to_string(status) + " " + std::string(reason) + "\r\n";
    head += "Content-Type: " + std::string(type) + "\r\n";
    head += "Content-Length: " + std::to_string(body.size()) + "\r\n";
    head += "Cache-Control: no-store\r\nX-Content-Type-Options: nosniff\r\nConnection: close\r\n\r\n";
    if (!net::writeAll(fd, asBytes(head), kWriteTimeoutMs)) return false;
    return headOnly || net::writeAll(fd, asBytes(body), kWriteTimeoutMs);
}

} // namespace

struct Session {
    net::Fd fd;
    std::mutex writeMutex;
    std::atomic<bool> websocket{false};
    std::atomic<bool> done{false};
    std::thread thread;
};

struct ControlServer::Impl {
    Impl(Options o, ControlApi& a) : options(std::move(o)), api(a) {}

    Options options;
    ControlApi& api;
    net::Fd listenFd;
    std::uint16_t port = 0;
    int wake[2] = {-1, -1};
    std::atomic<bool> running{false};
    std::thread acceptThread;
    mutable std::mutex sessionsMutex;
    std::list<std::shared_ptr<Session>> sessions;
    Subscription<NotificationEvent> subscription;

    void acceptLoop();
    void serve(const std::shared_ptr<Session>& s);
    void serveStatic(Session& s, const ws::HttpRequest& req);
    void serveWebSocket(Session& s, const ws::HttpRequest& req, Bytes leftover);
    bool sendFrame(Session& s, ws::Opcode op, ByteView payload);
    void broadcast(const json& event);
    bool tokenMatches(const ws::HttpRequest& req) const;
    void reap();
};

bool ControlServer::Impl::sendFrame(Session& s, ws::Opcode op, ByteView payload) {
    if (s.done.load()) return false;
    std::lock_guard lock(s.writeMutex);
    try {
        if (net::writeAll(s.fd.get(), ws::encodeFrame(op, payload), kWriteTimeoutMs)) return true;
    } catch (const Error&) {
    }
    s.done = true;
    ::shutdown(s.fd.get(), SHUT_RDWR);
    return false;
}

void ControlServer::Impl::broadcast(const json& event) {
    const std::string text = event.dump();
    std::vector<std::shared_ptr<Session>> targets;
    {
        std::lock_guard lock(sessionsMutex);
        for (const auto& s : sessions) {
            if (s->websocket.load() && !s->done.load()) targets.push_back(s);
        }
    }
    for (const auto& s : targets) sendFrame(*s, ws::Opcode::text, asBytes(text));
}

bool ControlServer::Impl::tokenMatches(const ws::HttpRequest& req) const {
    std::string presented;
    if (auto auth = req.header("authorization"); auth && auth->starts_with("Bearer ")) {
        presented = auth->substr(7);
    } else if (auto it = req.query.find("token"); it != req.query.end()) {
        presented = it->second;
    }
    return !presented.empty() && crypto::constantTimeEqual(asBytes(presented), asBytes(options.token));
}

void ControlServer::Impl::reap() {
    std::lock_guard lock(sessionsMutex);
    for (auto it = sessions.begin(); it != sessions.end();) {
        if ((*it)->done.load() && (*it)->thread.joinable()) {
            (*it)->thread.join();
            it = sessions.erase(it);
        } else {
            ++it;
        }
    }
}

void ControlServer::Impl::acceptLoop() {
    while (running.load()) {
        pollfd fds[2] = {{listenFd.get(), POLLIN, 0}, {wake[0], POLLIN, 0}};
        int rc = ::poll(fds, 2, 1000);
        if (rc < 0 && errno != EINTR) break;
        if (fds[1].revents != 0 || !running.load()) break;
        reap();
        if (rc <= 0 || (fds[0].revents & POLLIN) == 0) continue;
        int conn = ::accept4(listenFd.get(), nullptr, nullptr, SOCK_CLOEXEC);
        if (conn < 0) continue;
        auto session = std::make_shared<Session>();
        session->fd = net::Fd(conn);
        net::setNonBlocking(conn, true);
        std::lock_guard lock(sessionsMutex);
        sessions.push_back(session);
        session->thread = std::thread([this, session] { serve(session); });
    }
}

void ControlServer::Impl::serve(const std::shared_ptr<Session>& s) {
    Bytes buf;
    std::array<std::uint8_t, 4096> chunk{};
    std::size_t headEnd = std::string::npos;
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(kHeadTimeoutMs);
    while (headEnd == std::string::npos) {
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
        ssize_t n = left.count() > 0 ? readOrStop(s->fd.get(), wake[0], chunk, static_cast<int>(left.count())) : -1;
        if (n <= 0) {
            s->done = true;
            return;
        }
        buf.insert(buf.end(), chunk.begin(), chunk.begin() + n);
        const std::string_view view(reinterpret_cast<const char*>(buf.data()), buf.size());
        headEnd = view.find("\r\n\r\n");
        if (headEnd == std::string::npos && buf.size() > ws::kMaxRequestHeadBytes) {
            sendHttp(s->fd.get(), 431, "Request Header Fields Too Large", "text/plain", "header too large\n");
            s->done = true;
            return;
        }
    }

    try {
        const std::string_view head(reinterpret_cast<const char*>(buf.data()), headEnd + 2);
        ws::HttpRequest req = ws::parseHttpRequest(head);
        Bytes leftover(buf.begin() + static_cast<std::ptrdiff_t>(headEnd + 4), buf.end());
        if (req.isWebSocketUpgrade()) {
            serveWebSocket(*s, req, std::move(leftover));
        } else {
            serveStatic(*s, req);
        }
    } catch (const Error& e) {
        sendHttp(s->fd.get(), 400, "Bad Request", "text/plain", std::string(errcName(e.code())) + "\n");
    }
    s->done = true;
}

void ControlServer::Impl::serveStatic(Session& s, const ws::HttpRequest& req) {
    const int fd = s.fd.get();
    if (req.method != "GET" && req.method != "HEAD") {
        sendHttp(fd, 405, "Method Not Allowed", "text/plain", "method not allowed\n");
        return;
    }
    const bool headOnly = req.method == "HEAD";
    if (options.webRoot.empty() || !fs::is_directory(options.webRoot)) {
        sendHttp(fd, 404, "Not Found", "text/plain", "web client not installed\n", headOnly);
        return;
    }
    std::string rel = req.path;
    if (rel.find('\0') != std::string::npos || rel.find("/../") != std::string::npos || rel.ends_with("/..")) {
        sendHttp(fd, 400, "Bad Request", "text/plain", "bad path\n", headOnly);
        return;
    }
    if (rel.empty() || rel.back() == '/') rel += "index.html";
    std::error_code ec;
    const fs::path root = fs::canonical(options.webRoot, ec);
    fs::path target = fs::weakly_canonical(root / fs::path(rel).relative_path(), ec);
    const auto rootStr = root.string();
    if (ec || target.string().compare(0, rootStr.size(), rootStr) != 0) {
        sendHttp(fd, 404, "Not Found", "text/plain", "not found\n", headOnly);
        return;
    }
    if (fs::is_directory(target)) target /= "index.html";
    if (!fs::is_regular_file(target) || fs::file_size(target) > kMaxStaticFileBytes) {
        sendHttp(fd, 404, "Not Found", "text/plain", "not found\n", headOnly);
        return;
    }
    std::ifstream in(target, std::ios::binary);
    std::string body((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    sendHttp(fd, 200, "OK", contentType(target), body, headOnly);
}

void ControlServer::Impl::serveWebSocket(Session& s, const ws::HttpRequest& req, Bytes leftover) {
    const int fd = s.fd.get();
    if (!tokenMatches(req)) {
        log::warn("control.reject", {{"reason", "bad token"}});
        sendHttp(fd, 401, "Unauthorized", "text/plain", "bad token\n");
        return;
    }
    if (req.header("sec-websocket-version").value_or("") != "13") {
        sendHttp(fd, 426, "Upgrade Required", "text/plain", "websocket version 13 required\n");
        return;
    }
    std::string response = "HTTP/1.1 101 Switching Protocols\r\nUpgrade: websocket\r\nConnection: Upgrade\r\n";
    response += "Sec-WebSocket-Accept: " + ws::acceptKey(*req.header("sec-websocket-key")) + "\r\n\r\n";
    {
        std::lock_guard lock(s.writeMutex);
        if (!net::writeAll(fd, asBytes(response), kWriteTimeoutMs)) return;
    }
    const std::string hello = json{{"event", "CAPABILITIES"}, {"data", ControlApi::capabilities()}}.dump();
    if (!sendFrame(s, ws::Opcode::text, asBytes(hello))) return;
    s.websocket = true;
    log::info("control.session", {{"state", "open"}});

    ws::Decoder decoder(true, options.maxMessageBytes);
    decoder.feed(leftover);
    std::array<std::uint8_t, 8192> chunk{};
    try {
        while (running.load() && !s.done.load()) {
            while (auto msg = decoder.next()) {
                switch (msg->op) {
                case ws::Opcode::text: {
                    json request = json::parse(msg->payload.begin(), msg->payload.end(), nullptr, false);
                    json reply = request.is_discarded()
                                     ? json{{"id", nullptr},
                                            {"error", {{"code", "parse_error"}, {"message", "invalid JSON"}}}}
                                     : api.handle(request);
                    sendFrame(s, ws::Opcode::text, asBytes(reply.dump()));
                    break;
                }
                case ws::Opcode::binary:
                    sendFrame(s, ws::Opcode::close, Bytes{0x03, 0xEB}); // 1003 unsupported data
                    return;
                case ws::Opcode::ping:
                    sendFrame(s, ws::Opcode::pong, msg->payload);
                    break;
                case ws::Opcode::close:
                    sendFrame(s, ws::Opcode::close, Bytes{0x03, 0xE8});
                    return;
                default:
                    break;
                }
            }
            ssize_t n = readOrStop(fd, wake[0], chunk, -1);
            if (n <= 0) break;
            decoder.feed(ByteView(chunk.data(), static_cast<std::size_t>(n)));
        }
    } catch (const Error& e) {
        const std::uint16_t code = e.code() == Errc::oversize ? 1009 : 1002;
        sendFrame(s, ws::Opcode::close, Bytes{static_cast<std::uint8_t>(code >> 8), static_cast<std::uint8_t>(code)});
    }
    log::info("control.session", {{"state", "closed"}});
}

ControlServer::ControlServer(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}

std::unique_ptr<ControlServer> ControlServer::start(Options options, ControlApi& api,
                                                    EventStream<NotificationEvent>& events) {
    if (!options.allowRemote && !isLoopbackAddress(options.address)) {
        throw Error(Errc::validation, "control server refuses non-loopback address " + options.address);
    }
    if (options.token.empty()) throw Error(Errc::precondition, "control server needs a token");
    auto impl = std::make_unique<Impl>(std::move(options), api);
    impl->listenFd = net::listenOn(impl->options.address, impl->options.port, 16, impl->port);
    if (::pipe2(impl->wake, O_CLOEXEC | O_NONBLOCK) != 0) {
        throw Error(Errc::io, std::string("pipe: ") + std::strerror(errno));
    }
    Impl* raw = impl.get();
    impl->subscription = Subscription<NotificationEvent>(
        events, [raw](const NotificationEvent& ev) { raw->broadcast(ControlApi::eventToJson(ev)); });
    impl->running = true;
    impl->acceptThread = std::thread([raw] { raw->acceptLoop(); });
    log::info("control.listen", {{"address", impl->options.address}, {"port", std::to_string(impl->port)}});
    return std::unique_ptr<ControlServer>(new ControlServer(std::move(impl)));
}

ControlServer::~ControlServer() { stop(); }

void ControlServer::stop() {
    if (!impl_) return;
    impl_->subscription.reset();
    if (impl_->running.exchange(false)) {
        std::uint8_t b = 1;
        [[maybe_unused]] auto n = ::write(impl_->wake[1], &b, 1);
    }
    if (impl_->acceptThread.joinable()) impl_->acceptThread.join();
    std::list<std::shared_ptr<Session>> sessions;
    {
        std::lock_guard lock(impl_->sessionsMutex);
        sessions.swap(impl_->sessions);
    }
    for (auto& s : sessions) {
        if (s->thread.joinable()) s->thread.join();
    }
    impl_->listenFd.reset();
    for (int& fd : impl_->wake) {
        if (fd >= 0) ::close(fd);
        fd = -1;
    }
}

std::uint16_t ControlServer::port() const { return impl_->port; }

std::size_t ControlServer::sessionCount() const {
    std::lock_guard lock(impl_->sessionsMutex);
    std::size_t n = 0;
    for (const auto& s : impl_->sessions) n += (s->websocket.load() && !s->done.load()) ? 1 : 0;
    return n;
}

// ---------------------------------------------------------------------------

struct ControlClient::DecoderHolder {
    ws::Decoder decoder{false};
};

std::unique_ptr<ControlClient> ControlClient::connect(const std::string& address, std::uint16_t port,
                                                     const std::string& token, std::int64_t timeoutMs) {
    auto conn = net::connectTo(net::toSockAddr(address, port), timeoutMs);
    if (!conn.fd.valid()) {
        throw Error(Errc::refused, "control port " + address + ":" + std::to_string(port) + " unreachable" +
                                       (conn.timedOut ? " (timeout)" : std::string(": ") + std::strerror(conn.error)));
    }
    std::unique_ptr<ControlClient> client(new ControlClient());
    client->decoder_ = std::make_unique<DecoderHolder>();

    std::array<std::uint8_t, 16> nonce{};
    crypto::systemRandom().fill(nonce);
    const std::string key = base64Encode(nonce);
    const std::string host = address.find(':') != std::string::npos ? "[" + address + "]" : address;
    std::string request = "GET /ws HTTP/1.1\r\nHost: " + host + ":" + std::to_string(port) + "\r\n";
    request += "Upgrade: websocket\r\nConnection: Upgrade\r\nSec-WebSocket-Version: 13\r\n";
    request += "Sec-WebSocket-Key: " + key + "\r\nAuthorization: Bearer " + token + "\r\n\r\n";
    if (!net::writeAll(conn.fd.get(), asBytes(request), timeoutMs)) throw Error(Errc::timeout, "handshake write timed out");

    Bytes buf;
    std::array<std::uint8_t, 4096> chunk{};
    std::size_t headEnd = std::string::npos;
    while (headEnd == std::string::npos) {
        if (!net::waitFor(conn.fd.get(), POLLIN, timeoutMs)) throw Error(Errc::timeout, "handshake timed out");
        ssize_t n = ::recv(conn.fd.get(), chunk.data(), chunk.size(), 0);
        if (n < 0 && (errno == EINTR || errno == EAGAIN)) continue;
        if (n <= 0) throw Error(Errc::closed, "control server closed during handshake");
        buf.insert(buf.end(), chunk.begin(), chunk.begin() + n);
        headEnd = std::string_view(reinterpret_cast<const char*>(buf.data()), buf.size()).find("\r\n\r\n");
        if (headEnd == std::string::npos && buf.size() > ws::kMaxRequestHeadBytes) {
            throw Error(Errc::protocol, "handshake response too large");
        }
    }
    const std::string head(reinterpret_cast<const char*>(buf.data()), headEnd);
    if (head.starts_with("HTTP/1.1 401")) throw Error(Errc::auth_failure, "control token rejected");
    if (!head.starts_with("HTTP/1.1 101")) {
        throw Error(Errc::protocol, "unexpected handshake response: " + head.substr(0, head.find("\r\n")));
    }
    const std::string expected = "sec-websocket-accept: " + ws::acceptKey(key);
    std::string lowered = head;
    std::transform(lowered.begin(), lowered.end(), lowered.begin(), [](unsigned char c) { return std::tolower(c); });
    std::string expectedLower = expected;
    std::transform(expectedLower.begin(), expectedLower.end(), expectedLower.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    if (lowered.find(expectedLower) == std::string::npos) throw Error(Errc::protocol, "bad Sec-WebSocket-Accept");

    client->fd_ = conn.fd.release();
    client->decoder_->decoder.feed(ByteView(buf).subspan(headEnd + 4));
    auto first = client->readMessage(timeoutMs);
    if (!first || first->value("event", "") != "CAPABILITIES") {
        throw Error(Errc::protocol, "control server did not announce capabilities");
    }
    client->capabilities_ = first->at("data");
    return client;
}

ControlClient::~ControlClient() { close(); }

void ControlClient::close() {
    if (fd_ < 0) return;
    std::array<std::uint8_t, 4> mask{};
    crypto::systemRandom().fill(mask);
    try {
        net::writeAll(fd_, ws::encodeFrame(ws::Opcode::close, Bytes{0x03, 0xE8}, mask), 1000);
    } catch (const Error&) {
    }
    ::close(fd_);
    fd_ = -1;
}

void ControlClient::sendText(const std::string& text) {
    if (fd_ < 0) throw Error(Errc::closed, "control connection closed");
    std::array<std::uint8_t, 4> mask{};
    crypto::systemRandom().fill(mask);
    if (!net::writeAll(fd_, ws::encodeFrame(ws::Opcode::text, asBytes(text), mask), kWriteTimeoutMs)) {
        throw Error(Errc::timeout, "control write timed out");
    }
}

std::optional<json> ControlClient::readMessage(std::int64_t timeoutMs) {
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeoutMs);
    std::array<std::uint8_t, 8192> chunk{};
    while (true) {
        while (auto msg = decoder_->decoder.next()) {
            if (msg->op == ws::Opcode::text) {
                json j = json::parse(msg->payload.begin(), msg->payload.end(), nullptr, false);
                if (j.is_discarded()) throw Error(Errc::parse_error, "control server sent invalid JSON");
                return j;
            }
            if (msg->op == ws::Opcode::ping) {
                std::array<std::uint8_t, 4> mask{};
                crypto::systemRandom().fill(mask);
                net::writeAll(fd_, ws::encodeFrame(ws::Opcode::pong, msg->payload, mask), kWriteTimeoutMs);
            } else if (msg->op == ws::Opcode::close) {
                throw Error(Errc::closed, "control server closed the connection");
            }
        }
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
        if (left.count() <= 0 || !net::waitFor(fd_, POLLIN, left.count())) return std::nullopt;
        ssize_t n = ::recv(fd_, chunk.data(), chunk.size(), 0);
        if (n < 0 && (errno == EINTR || errno == EAGAIN)) continue;
        if (n <= 0) throw Error(Errc::closed, "control server closed the connection");
        decoder_->decoder.feed(ByteView(chunk.data(), static_cast<std::size_t>(n)));
    }
}

json ControlClient::call(const std::string& method, const json& params, std::int64_t timeoutMs) {
    const std::int64_t id = nextId_++;
    sendText(json{{"id", id}, {"method", method}, {"params", params}}.dump());
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeoutMs);
    while (true) {
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
        auto msg = left.count() > 0 ? readMessage(left.count()) : std::nullopt;
        if (!msg) throw Error(Errc::timeout, "no response to " + method);
        if (msg->contains("event")) {
            events_.push_back(std::move(*msg));
            continue;
        }
        if (!msg->contains("id") || msg->at("id") != id) continue;
        if (msg->contains("error")) {
            const auto& err = msg->at("error");
            const auto code = errcFromName(err.value("code", "io")).value_or(Errc::io);
            throw Error(code, err.value("message", "control call failed"));
        }
        return msg->value("result", json::object());
    }
}

std::optional<json> ControlClient::nextEvent(std::int64_t timeoutMs) {
    if (!events_.empty()) {
        json ev = std::move(events_.front());
        events_.pop_front();
        return ev;
    }
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeoutMs);
    while (true) {
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
        auto msg = left.count() > 0 ? readMessage(left.count()) : std::nullopt;
        if (!msg) return std::nullopt;
        if (msg->contains("event")) return msg;
    }
}

} // namespace ember::control
