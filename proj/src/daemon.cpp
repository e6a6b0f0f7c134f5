#include "ember/daemon.hpp"

#include "ember/error.hpp"
#include "ember/log.hpp"

namespace ember {

namespace fs = std::filesystem;

Daemon::Daemon(control::Config config) : config_(std::move(config)) {}

std::unique_ptr<Daemon> Daemon::start(control::Config config) {
    config.validate();
    std::unique_ptr<Daemon> d(new Daemon(std::move(config)));
    const auto& cfg = d->config_;
    fs::create_directories(cfg.identityDir);
    fs::permissions(cfg.identityDir, fs::perms::owner_all, fs::perm_options::replace);

    d->token_ = control::loadOrCreateToken(cfg.identityDir);
    {
        auto master = control::loadOrCreateMasterKey(cfg.identityDir, cfg.passphrase);
        d->store_ = Store::open(cfg.identityDir / control::kStoreFile, master);
    }
    d->outbound_ = std::make_unique<TcpOutbound>(cfg.retry, cfg.maxEnvelopeBytes);

    Daemon* self = d.get();
    d->connectionSub_ = Subscription<ConnectionState>(d->connectionEvents_, [self](const ConnectionState& st) {
        {
            std::lock_guard lock(self->mutex_);
            self->lastState_ = st;
        }
        if (auto* p = self->ready_.load()) p->publishConnectionState(st);
    });

    ListenerConfig lc;
    lc.bindAddress = cfg.listenAddress;
    lc.port = cfg.listenPort;
    lc.maxEnvelopeBytes = cfg.maxEnvelopeBytes;
    lc.readTimeoutMs = cfg.retry.readTimeoutMs;
    d->listener_ = Listener::start(
        lc,
        [self](const Envelope& env) {
            Pipeline* p = self->ready_.load();
            if (!p) return;
            auto result = p->receiveEnvelope(env);
            if (!result.accepted()) {
                log::info("envelope.rejected", {{"conversationId", env.conversationId},
                                                {"type", std::string(msgTypeName(env.type))},
                                                {"reason", std::string(rejectReasonName(result.rejection->reason))}});
            } else {
                log::debug("envelope.accepted", {{"conversationId", env.conversationId},
                                                 {"type", std::string(msgTypeName(env.type))}});
            }
        },
        &d->connectionEvents_);

    d->endpoint_ = Endpoint::parse(cfg.advertiseAddress, d->listener_->port());
    PipelineConfig pc;
    pc.identity = LocalIdentity{cfg.displayName, d->endpoint_};
    pc.rotationTimeoutMs = cfg.rotationTimeoutMs;
    pc.defaultTtlMs = cfg.defaultTtlMs;
    d->pipeline_ = std::make_unique<Pipeline>(pc, *d->store_, *d->outbound_, d->clock_);
    d->ready_ = d->pipeline_.get();
    d->startedAt_ = d->clock_.nowMs();

    control::ControlApi::Hooks hooks;
    hooks.networkStatus = [self] { return self->networkStatus(); };
    hooks.shutdown = [self] { self->requestStop(); };
    hooks.defaultTtlMs = cfg.defaultTtlMs;
    d->api_ = std::make_unique<control::ControlApi>(*d->pipeline_, hooks);

    control::ControlServer::Options so;
    so.address = cfg.controlAddress;
    so.port = cfg.controlPort;
    so.token = d->token_;
    so.webRoot = cfg.webRoot;
    so.allowRemote = cfg.allowRemoteControl;
    d->server_ = control::ControlServer::start(so, *d->api_, d->pipeline_->notifications());
    control::writePrivateFile(cfg.identityDir / control::kControlPortFile,
                              asBytes(std::to_string(d->server_->port()) + "\n"));

    d->maintenance_ = std::thread([self] { self->maintenanceLoop(); });
    log::info("daemon.started", {{"endpoint", d->endpoint_.display()},
                                 {"controlPort", std::to_string(d->server_->port())},
                                 {"identityDir", cfg.identityDir.string()}});
    return d;
}

Daemon::~Daemon() { stop(); }

void Daemon::requestStop() {
    {
        std::lock_guard lock(mutex_);
        stopRequested_ = true;
    }
    cv_.notify_all();
}

bool Daemon::stopRequested() const {
    std::lock_guard lock(mutex_);
    return stopRequested_;
}

bool Daemon::waitForStop(std::int64_t timeoutMs) {
    std::unique_lock lock(mutex_);
    return cv_.wait_for(lock, std::chrono::milliseconds(timeoutMs), [this] { return stopRequested_; });
}

void Daemon::stop() {
    {
        std::lock_guard lock(mutex_);
        if (stopped_) return;
        stopped_ = true;
        stopRequested_ = true;
    }
    cv_.notify_all();
    if (server_) server_->stop();
    if (listener_) listener_->stop();
    if (maintenance_.joinable()) maintenance_.join();
    ready_ = nullptr;
    connectionSub_.reset();
    api_.reset();
    pipeline_.reset();
    if (store_) store_->close();
    std::error_code ec;
    fs::remove(config_.identityDir / control::kControlPortFile, ec);
    log::info("daemon.stopped");
}

std::uint16_t Daemon::listenPort() const { return listener_ ? listener_->port() : 0; }
std::uint16_t Daemon::controlPort() const { return server_ ? server_->port() : 0; }

control::json Daemon::networkStatus() const {
    ConnectionState st;
    {
        std::lock_guard lock(mutex_);
        st = lastState_;
    }
    const ListenerStats stats = listener_ ? listener_->stats() : ListenerStats{};
    return {{"state", connStateName(st.value)},
            {"detail", st.detail},
            {"endpoint", endpoint_.display()},
            {"listenAddress", config_.listenAddress},
            {"listenPort", listenPort()},
            {"controlPort", controlPort()},
            {"controlSessions", server_ ? server_->sessionCount() : 0},
            {"uptimeMs", clock_.nowMs() - startedAt_},
            {"stats",
             {{"connections", stats.connections},
              {"envelopes", stats.envelopes},
              {"oversize", stats.oversize},
              {"malformed", stats.malformed},
              {"truncated", stats.truncated},
              {"timeouts", stats.timeouts},
              {"handlerErrors", stats.handlerErrors}}}};
}

void Daemon::maintenanceLoop() {
    const std::int64_t tick = std::min<std::int64_t>(1000, config_.sweepIntervalMs);
    std::int64_t lastSweep = clock_.nowMs();
    while (!waitForStop(tick)) {
        const auto now = clock_.nowMs();
        try {
            pipeline_->tickRotations(now);
            if (now - lastSweep >= config_.sweepIntervalMs) {
                const auto removed = pipeline_->sweep(now);
                lastSweep = now;
                if (removed > 0) log::info("sweep", {{"removed", std::to_string(removed)}});
            }
        } catch (const std::exception& e) {
            log::error("maintenance.failed", {{"detail", e.what()}});
        }
    }
}

} // namespace ember
