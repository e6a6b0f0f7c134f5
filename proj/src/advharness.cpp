#include "ember/advharness.hpp"

#include "ember/error.hpp"

#include <charconv>
#include <deque>
#include <sstream>

namespace ember::harness {

namespace {

constexpr std::size_t kInjected = static_cast<std::size_t>(-1);

PeerId other(PeerId p) { return p == PeerId::A ? PeerId::B : PeerId::A; }

struct PendingFrame {
    std::size_t index = kInjected;
    PeerId from = PeerId::A;
    Bytes bytes;
    std::string note;
};

void flipBit(Bytes& data, std::size_t offset, unsigned bit) {
    if (data.empty()) return;
    data[offset % data.size()] ^= static_cast<std::uint8_t>(1u << (bit & 7u));
}

// Applies a field-level bit flip and re-frames. Field flips keep the JSON
// well-formed, so the receiver sees a structurally valid but forged envelope.
Bytes tamper(const Bytes& framed, const TamperBit& t, std::size_t maxBytes) {
    if (t.target == TamperTarget::raw) {
        Bytes out = framed;
        flipBit(out, t.byteOffset, t.bitIndex);
        return out;
    }
    Envelope env = decodeEnvelope(ByteView(framed).subspan(4), maxBytes);
    switch (t.target) {
    case TamperTarget::ciphertext:
        flipBit(env.ciphertext, t.byteOffset, t.bitIndex);
        break;
    case TamperTarget::nonce:
        env.nonce.bytes[t.byteOffset % env.nonce.bytes.size()] ^= static_cast<std::uint8_t>(1u << (t.bitIndex & 7u));
        break;
    case TamperTarget::hmac:
        env.hmac[t.byteOffset % env.hmac.size()] ^= static_cast<std::uint8_t>(1u << (t.bitIndex & 7u));
        break;
    case TamperTarget::raw:
        break;
    }
    return frame(encodeEnvelope(env), maxBytes);
}

class Proxy {
public:
    Proxy(const FaultPlan& plan, std::size_t maxBytes) : plan_(plan), maxBytes_(maxBytes) {}

    void submit(PeerId from, Bytes bytes) {
        PendingFrame f{next_++, from, std::move(bytes), {}};
        bool dropped = false;
        bool held = false;
        std::size_t replays = 0;
        for (const auto& action : plan_.actions) {
            if (auto* t = std::get_if<TamperBit>(&action); t && t->frameIndex == f.index) {
                f.bytes = tamper(f.bytes, *t, maxBytes_);
                appendNote(f, "tamper " + std::string(tamperTargetName(t->target)));
            } else if (auto* tr = std::get_if<Truncate>(&action); tr && tr->frameIndex == f.index) {
                if (tr->keepBytes < f.bytes.size()) f.bytes.resize(tr->keepBytes);
                appendNote(f, "truncate");
            } else if (auto* d = std::get_if<Drop>(&action); d && d->frameIndex == f.index) {
                dropped = true;
            } else if (auto* r = std::get_if<Replay>(&action); r && r->frameIndex == f.index) {
                ++replays;
            } else if (auto* ro = std::get_if<Reorder>(&action); ro && ro->first == f.index) {
                held = true;
            }
        }
        if (dropped) {
            appendNote(f, "drop");
            droppedFrames.push_back(std::move(f));
            return;
        }
        const PendingFrame copy = f;
        if (held) {
            for (const auto& action : plan_.actions) {
                if (auto* ro = std::get_if<Reorder>(&action); ro && ro->first == f.index) {
                    appendNote(f, "reordered");
                    held_[ro->second].push_back(std::move(f));
                    break;
                }
            }
        } else {
            queue.push_back(std::move(f));
        }
        for (std::size_t i = 0; i < replays; ++i) {
            PendingFrame dup = copy;
            dup.index = kInjected;
            appendNote(dup, "replay of " + std::to_string(copy.index));
            queue.push_back(std::move(dup));
        }
        if (auto it = held_.find(copy.index); it != held_.end()) {
            for (auto& h : it->second) queue.push_back(std::move(h));
            held_.erase(it);
        }
    }

    void inject(PeerId from, Bytes bytes, std::string note) {
        queue.push_back(PendingFrame{kInjected, from, std::move(bytes), std::move(note)});
    }

    /// Frames still waiting for a partner that never arrived go out last.
    bool releaseHeld() {
        bool any = false;
        for (auto& [_, frames] : held_) {
            for (auto& f : frames) {
                queue.push_back(std::move(f));
                any = true;
            }
        }
        held_.clear();
        return any;
    }

    std::deque<PendingFrame> queue;
    std::vector<PendingFrame> droppedFrames;

private:
    static void appendNote(PendingFrame& f, const std::string& note) {
        f.note = f.note.empty() ? note : f.note + "; " + note;
    }

    const FaultPlan& plan_;
    std::size_t maxBytes_;
    std::size_t next_ = 0;
    std::map<std::size_t, std::vector<PendingFrame>> held_;
};

class ProxyOutbound final : public Outbound {
public:
    ProxyOutbound(PeerId from, Proxy& proxy, std::size_t maxBytes) : from_(from), proxy_(proxy), maxBytes_(maxBytes) {}

    DeliveryResult deliver(const Endpoint&, const Envelope& env) override {
        proxy_.submit(from_, frame(encodeEnvelope(env), maxBytes_));
        DeliveryResult r;
        r.delivered = true;
        r.attempts = 1;
        return r;
    }

private:
    PeerId from_;
    Proxy& proxy_;
    std::size_t maxBytes_;
};

struct Peer {
    std::unique_ptr<crypto::DeterministicRandom> rng;
    std::unique_ptr<Store> store;
    std::unique_ptr<ProxyOutbound> outbound;
    std::unique_ptr<Pipeline> pipeline;
    std::vector<StageEvent> stages;
    std::vector<Subscription<NotificationEvent>> subs;
};

std::size_t parseSize(std::string_view token, std::size_t line) {
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
    if (ec != std::errc() || p != token.data() + token.size()) {
        throw Error(Errc::parse_error, "line " + std::to_string(line) + ": expected a number, got '" +
                                           std::string(token) + "'");
    }
    return static_cast<std::size_t>(v);
}

PeerId parsePeer(std::string_view token, std::size_t line) {
    if (token == "A") return PeerId::A;
    if (token == "B") return PeerId::B;
    throw Error(Errc::parse_error, "line " + std::to_string(line) + ": unknown peer '" + std::string(token) + "'");
}

} // namespace

std::string_view tamperTargetName(TamperTarget t) {
    switch (t) {
    case TamperTarget::ciphertext: return "ciphertext";
    case TamperTarget::nonce: return "nonce";
    case TamperTarget::hmac: return "hmac";
    case TamperTarget::raw: return "raw";
    }
    return "ciphertext";
}

std::string_view peerName(PeerId p) { return p == PeerId::A ? "A" : "B"; }

void FaultPlan::validate() const {
    for (const auto& action : actions) {
        if (auto* t = std::get_if<TamperBit>(&action); t && t->bitIndex > 7) {
            throw Error(Errc::validation, "tamper bit index must be 0..7");
        }
        if (auto* r = std::get_if<Reorder>(&action); r && r->first >= r->second) {
            throw Error(Errc::validation, "reorder needs i < j");
        }
    }
}

Script alternatingExchange(std::size_t count, std::string_view prefix) {
    Script s;
    for (std::size_t i = 0; i < count; ++i) {
        ScriptStep step;
        step.kind = ScriptStep::Kind::send;
        step.peer = i % 2 == 0 ? PeerId::A : PeerId::B;
        step.text = std::string(prefix) + " " + std::to_string(i + 1);
        s.push_back(std::move(step));
    }
    return s;
}

Fixture parseFixture(std::string_view text) {
    Fixture fx;
    std::istringstream in{std::string(text)};
    std::string raw;
    std::size_t lineNo = 0;
    while (std::getline(in, raw)) {
        ++lineNo;
        if (!raw.empty() && raw.back() == '\r') raw.pop_back();
        const auto start = raw.find_first_not_of(" \t");
        if (start == std::string::npos || raw[start] == '#') continue;
        std::istringstream ls(raw.substr(start));
        std::string word;
        ls >> word;
        auto next = [&]() {
            std::string tok;
            if (!(ls >> tok)) throw Error(Errc::parse_error, "line " + std::to_string(lineNo) + ": missing argument");
            return tok;
        };
        auto num = [&]() { return parseSize(next(), lineNo); };

        if (word == "seed") {
            fx.plan.seed = num();
        } else if (word == "ttl") {
            fx.ttlMs = static_cast<std::int64_t>(num());
        } else if (word == "fault") {
            const std::string kind = next();
            if (kind == "pass") {
                fx.plan.actions.emplace_back(PassThrough{});
            } else if (kind == "tamper") {
                TamperBit t;
                t.frameIndex = num();
                t.byteOffset = num();
                t.bitIndex = static_cast<unsigned>(num());
                std::string target;
                if (ls >> target) {
                    if (target == "ciphertext") t.target = TamperTarget::ciphertext;
                    else if (target == "nonce") t.target = TamperTarget::nonce;
                    else if (target == "hmac") t.target = TamperTarget::hmac;
                    else if (target == "raw") t.target = TamperTarget::raw;
                    else throw Error(Errc::parse_error, "line " + std::to_string(lineNo) + ": unknown tamper target");
                }
                fx.plan.actions.emplace_back(t);
            } else if (kind == "replay") {
                fx.plan.actions.emplace_back(Replay{num()});
            } else if (kind == "drop") {
                fx.plan.actions.emplace_back(Drop{num()});
            } else if (kind == "reorder") {
                const auto i = num();
                fx.plan.actions.emplace_back(Reorder{i, num()});
            } else if (kind == "oversize") {
                fx.plan.actions.emplace_back(OversizeLength{static_cast<std::uint32_t>(num())});
            } else if (kind == "truncate") {
                const auto i = num();
                fx.plan.actions.emplace_back(Truncate{i, num()});
            } else {
                throw Error(Errc::parse_error, "line " + std::to_string(lineNo) + ": unknown fault '" + kind + "'");
            }
        } else if (word == "script") {
            const std::string who = next();
            const std::string verb = next();
            ScriptStep step;
            if (verb == "advance") {
                if (who != "*") step.peer = parsePeer(who, lineNo);
                step.kind = ScriptStep::Kind::advance;
                step.millis = static_cast<std::int64_t>(num());
            } else {
                step.peer = parsePeer(who, lineNo);
                if (verb == "send") {
                    step.kind = ScriptStep::Kind::send;
                    std::string rest;
                    std::getline(ls, rest);
                    if (!rest.empty() && rest.front() == ' ') rest.erase(0, 1);
                    if (rest.empty()) throw Error(Errc::parse_error, "line " + std::to_string(lineNo) + ": empty send");
                    step.text = rest;
                } else if (verb == "rotate") {
                    step.kind = ScriptStep::Kind::rotate;
                } else if (verb == "sweep") {
                    step.kind = ScriptStep::Kind::sweep;
                } else {
                    throw Error(Errc::parse_error, "line " + std::to_string(lineNo) + ": unknown verb '" + verb + "'");
                }
            }
            fx.script.push_back(std::move(step));
        } else {
            throw Error(Errc::parse_error, "line " + std::to_string(lineNo) + ": unknown directive '" + word + "'");
        }
    }
    try {
        fx.plan.validate();
    } catch (const Error& e) {
        throw Error(Errc::parse_error, e.what());
    }
    return fx;
}

std::string serializeFixture(const Fixture& fx) {
    std::ostringstream out;
    out << "seed " << fx.plan.seed << "\n";
    out << "ttl " << fx.ttlMs << "\n";
    for (const auto& action : fx.plan.actions) {
        std::visit(
            [&](const auto& a) {
                using T = std::decay_t<decltype(a)>;
                if constexpr (std::is_same_v<T, PassThrough>) {
                    out << "fault pass\n";
                } else if constexpr (std::is_same_v<T, TamperBit>) {
                    out << "fault tamper " << a.frameIndex << ' ' << a.byteOffset << ' ' << a.bitIndex << ' '
                        << tamperTargetName(a.target) << "\n";
                } else if constexpr (std::is_same_v<T, Replay>) {
                    out << "fault replay " << a.frameIndex << "\n";
                } else if constexpr (std::is_same_v<T, Drop>) {
                    out << "fault drop " << a.frameIndex << "\n";
                } else if constexpr (std::is_same_v<T, Reorder>) {
                    out << "fault reorder " << a.first << ' ' << a.second << "\n";
                } else if constexpr (std::is_same_v<T, OversizeLength>) {
                    out << "fault oversize " << a.declaredLength << "\n";
                } else if constexpr (std::is_same_v<T, Truncate>) {
                    out << "fault truncate " << a.frameIndex << ' ' << a.keepBytes << "\n";
                }
            },
            action);
    }
    for (const auto& step : fx.script) {
        switch (step.kind) {
        case ScriptStep::Kind::send:
            if (step.text.find('\n') != std::string::npos) {
                throw Error(Errc::precondition, "fixture send text cannot span lines");
            }
            out << "script " << peerName(step.peer) << " send " << step.text << "\n";
            break;
        case ScriptStep::Kind::rotate:
            out << "script " << peerName(step.peer) << " rotate\n";
            break;
        case ScriptStep::Kind::sweep:
            out << "script " << peerName(step.peer) << " sweep\n";
            break;
        case ScriptStep::Kind::advance:
            out << "script * advance " << step.millis << "\n";
            break;
        }
    }
    return out.str();
}

std::size_t searchCapture(const CaptureLog& log, const std::vector<std::string>& probes) {
    std::size_t total = 0;
    for (const auto& probe : probes) {
        if (probe.empty()) continue;
        for (const auto& f : log.frames) total += countOccurrences(f.bytes, asBytes(probe));
    }
    return total;
}

std::size_t ScenarioReport::totalRejections(std::string_view reason) const {
    std::size_t n = 0;
    for (const auto& [_, peer] : peers) {
        if (auto it = peer.rejections.find(std::string(reason)); it != peer.rejections.end()) n += it->second;
    }
    return n;
}

ScenarioReport runScenario(const FaultPlan& plan, const Script& script, std::int64_t ttlMs,
                           const ScenarioOptions& options) {
    plan.validate();
    ScenarioReport report;

    namespace fs = std::filesystem;
    crypto::DeterministicRandom setupRng(plan.seed);
    fs::path dir;
    const bool ownDir = !options.workDir;
    if (ownDir) {
        std::array<std::uint8_t, 8> tag{};
        crypto::systemRandom().fill(tag);
        dir = fs::temp_directory_path() / ("ember-harness-" + hexEncode(tag));
    } else {
        dir = *options.workDir;
    }
    fs::create_directories(dir);

    ManualClock clock;
    Proxy proxy(plan, options.maxEnvelopeBytes);
    const auto sharedKey = crypto::generateKey(setupRng);
    const std::map<PeerId, Endpoint> endpoints{{PeerId::A, Endpoint::parse("::1", 47001)},
                                               {PeerId::B, Endpoint::parse("::1", 47002)}};

    std::map<PeerId, Peer> peers;
    for (PeerId id : {PeerId::A, PeerId::B}) {
        Peer& p = peers[id];
        p.rng = std::make_unique<crypto::DeterministicRandom>(plan.seed * 2 + (id == PeerId::A ? 1 : 2));
        const fs::path path = dir / (std::string("peer-") + std::string(peerName(id)) + ".store");
        fs::remove(path);
        report.storePaths[id] = path;
        p.store = Store::open(path, crypto::generateKey(setupRng), StoreOptions{options.durableStore, 256});
        p.outbound = std::make_unique<ProxyOutbound>(id, proxy, options.maxEnvelopeBytes);
        PipelineConfig cfg;
        cfg.identity = LocalIdentity{std::string("peer-") + std::string(peerName(id)), endpoints.at(id)};
        cfg.defaultTtlMs = ttlMs;
        p.pipeline = std::make_unique<Pipeline>(cfg, *p.store, *p.outbound, clock, *p.rng);
        p.pipeline->setStageObserver([&p](const StageEvent& ev) { p.stages.push_back(ev); });
        auto& outcome = report.peers[id];
        p.subs.emplace_back(p.pipeline->notifications(), [&outcome](const NotificationEvent& ev) {
            if (ev.kind == NotificationKind::rotation_state) outcome.rotationEvents.push_back(ev.state);
        });
    }
    for (PeerId id : {PeerId::A, PeerId::B}) {
        auto c = peers[id].pipeline->addContact(std::string("peer-") + std::string(peerName(other(id))),
                                                endpoints.at(other(id)), sharedKey);
        report.conversationId = c.conversationId;
    }

    for (const auto& action : plan.actions) {
        if (auto* o = std::get_if<OversizeLength>(&action)) {
            Bytes bogus;
            appendU32(bogus, o->declaredLength);
            bogus.resize(bogus.size() + 16, 0x41);
            proxy.inject(PeerId::A, std::move(bogus), "oversize " + std::to_string(o->declaredLength));
        }
    }

    std::size_t processed = 0;
    auto pump = [&]() {
        while (true) {
            while (!proxy.queue.empty()) {
                if (processed >= options.maxFrames) {
                    report.timedOut = true;
                    return;
                }
                ++processed;
                PendingFrame f = std::move(proxy.queue.front());
                proxy.queue.pop_front();
                const PeerId to = other(f.from);
                auto& outcome = report.peers[to];
                report.capture.frames.push_back(CapturedFrame{f.index, f.from, f.bytes, f.note});
                try {
                    MemorySource src(f.bytes);
                    auto payload = deframe(src, options.maxEnvelopeBytes);
                    if (!payload) {
                        ++outcome.frameErrors["empty"];
                        continue;
                    }
                    Envelope env = decodeEnvelope(*payload, options.maxEnvelopeBytes);
                    auto& pipeline = *peers[to].pipeline;
                    ReceiveResult res = pipeline.receiveEnvelope(env);
                    if (!res.accepted()) {
                        ++outcome.rejections[std::string(rejectReasonName(res.rejection->reason))];
                    } else if (res.kind == ReceiveResult::Kind::message) {
                        ++outcome.accepted;
                        auto plain = pipeline.decryptForDisplay(*res.record);
                        outcome.displayed.emplace_back(plain.str());
                    } else {
                        ++outcome.controlAccepted;
                    }
                } catch (const Error& e) {
                    ++outcome.frameErrors[std::string(errcName(e.code()))];
                }
            }
            if (!proxy.releaseHeld()) return;
        }
    };

    pump();
    for (const auto& step : script) {
        if (report.timedOut) break;
        try {
            auto& p = peers[step.peer];
            switch (step.kind) {
            case ScriptStep::Kind::send:
                ++report.sent;
                report.sentTexts.push_back(step.text);
                p.pipeline->sendMessage(report.conversationId, step.text, ttlMs);
                break;
            case ScriptStep::Kind::rotate:
                p.pipeline->startRotation(report.conversationId);
                break;
            case ScriptStep::Kind::sweep:
                p.pipeline->sweep(clock.nowMs());
                break;
            case ScriptStep::Kind::advance:
                clock.advance(step.millis);
                break;
            }
        } catch (const Error& e) {
            report.stepErrors.push_back(std::string(peerName(step.peer)) + ": " + std::string(errcName(e.code())));
        }
        pump();
    }
    for (auto& f : proxy.droppedFrames) {
        report.capture.frames.push_back(CapturedFrame{f.index, f.from, std::move(f.bytes), f.note});
    }

    for (PeerId id : {PeerId::A, PeerId::B}) {
        auto& p = peers[id];
        auto& outcome = report.peers[id];
        outcome.activeVersion = p.pipeline->activeKeyVersion(report.conversationId);
        outcome.persistedMessages = p.store->messageCount();
        report.delivered += outcome.accepted;

        // One receive call spans the events from a 'resolve' up to the next one.
        std::vector<std::vector<Stage>> calls;
        std::vector<MsgType> types;
        for (const auto& ev : p.stages) {
            if (ev.stage == Stage::resolve || calls.empty()) {
                calls.emplace_back();
                types.push_back(ev.type);
            }
            calls.back().push_back(ev.stage);
        }
        for (std::size_t i = 0; i < calls.size(); ++i) {
            const auto& c = calls[i];
            auto pos = [&](Stage s) { return std::find(c.begin(), c.end(), s); };
            const bool verified = pos(Stage::hmac_verify) != c.end();
            const bool ok = pos(Stage::hmac_ok) != c.end();
            const bool failed = pos(Stage::hmac_fail) != c.end();
            const bool decrypted = pos(Stage::decrypt) != c.end();
            if (types[i] == MsgType::message && verified) {
                ++report.hmacAttempts;
                if (ok) ++report.hmacPassed;
            }
            if (decrypted) ++report.decryptCalls;
            if (failed && decrypted) ++report.decryptOnAuthFailurePaths;
            if (decrypted && (!ok || pos(Stage::decrypt) < pos(Stage::hmac_ok))) ++report.verifyAfterDecrypt;
        }
        report.capture.stages[id] = p.stages;
    }

    for (auto& [_, p] : peers) {
        p.subs.clear();
        p.pipeline.reset();
        p.store->close();
        p.store.reset();
    }
    if (ownDir) {
        std::error_code ec;
        fs::remove_all(dir, ec);
    }
    return report;
}

} // namespace ember::harness
