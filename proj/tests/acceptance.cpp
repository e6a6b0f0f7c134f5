// Acceptance run: one PASS/FAIL line per release criterion, exit status 1 if
// any criterion fails. Everything runs in-process: the adversarial harness for
// the wire-level criteria and two real daemons on loopback for the rest.

#include "ember/advharness.hpp"
#include "ember/daemon.hpp"
#include "ember/error.hpp"
#include "ember/log.hpp"

#include <arpa/inet.h>
#include <malloc.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <condition_variable>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <iterator>
#include <random>
#include <sstream>

using namespace ember;
using namespace std::chrono_literals;
namespace fs = std::filesystem;
using Steady = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(bool ok, std::string_view name, const std::string& detail) {
    std::cout << (ok ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
    if (!ok) ++failures;
}

template <typename F>
void criterion(std::string_view name, F&& body) {
    try {
        body();
    } catch (const std::exception& e) {
        report(false, name, std::string("exception: ") + e.what());
    }
}

std::string fmt(double v, int precision = 3) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(precision) << v;
    return os.str();
}

double msSince(Steady::time_point start) {
    return std::chrono::duration<double, std::milli>(Steady::now() - start).count();
}

template <typename Pred>
bool waitUntil(Pred pred, std::chrono::milliseconds limit) {
    const auto deadline = Steady::now() + limit;
    while (Steady::now() < deadline) {
        if (pred()) return true;
        std::this_thread::sleep_for(5ms);
    }
    return pred();
}

/// Reads a "Vm*" line from /proc/self/status, in KiB.
long procStatusKb(const std::string& key) {
    std::ifstream in("/proc/self/status");
    std::string line;
    while (std::getline(in, line)) {
        if (line.rfind(key + ":", 0) == 0) return std::stol(line.substr(key.size() + 1));
    }
    return -1;
}

Bytes readFile(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

harness::FaultPlan plan(std::vector<harness::FaultAction> actions, std::uint64_t seed) {
    harness::FaultPlan p;
    p.actions = std::move(actions);
    p.seed = seed;
    return p;
}

std::size_t totalRejections(const harness::ScenarioReport& r) {
    std::size_t n = 0;
    for (const auto& [_, peer] : r.peers) {
        for (const auto& [reason, count] : peer.rejections) n += count;
    }
    return n;
}

// ---------------------------------------------------------------------------
// Two loopback daemons sharing one conversation.

struct Peers {
    std::vector<fs::path> dirs;
    std::unique_ptr<Daemon> a, b;
    std::string conv;
    crypto::SymmetricKey shared = crypto::generateKey();

    Peers() {
        a = start("alice");
        b = start("bob");
        auto ca = control::ControlClient::connect("127.0.0.1", a->controlPort(), a->token());
        auto cb = control::ControlClient::connect("127.0.0.1", b->controlPort(), b->token());
        const std::string key = base64Encode(shared.bytes());
        conv = ca->call("addContact",
                        {{"displayName", "bob"}, {"address", "::1"}, {"port", b->listenPort()}, {"key", key}})
                   .at("conversationId");
        cb->call("addContact", {{"displayName", "alice"}, {"address", "::1"}, {"port", a->listenPort()}, {"key", key}});
    }

    ~Peers() {
        a->stop();
        b->stop();
        for (const auto& d : dirs) fs::remove_all(d);
    }

    std::unique_ptr<Daemon> start(const std::string& name) {
        auto dir = fs::temp_directory_path() / ("ember-acceptance-" + name + "-" + std::to_string(::getpid()));
        fs::remove_all(dir);
        dirs.push_back(dir);
        control::Config cfg;
        cfg.displayName = name;
        cfg.identityDir = dir;
        cfg.listenAddress = "::1";
        cfg.listenPort = 0;
        cfg.advertiseAddress = "::1";
        cfg.controlPort = 0;
        cfg.sweepIntervalMs = 1000;
        cfg.rotationTimeoutMs = 5000;
        cfg.retry.connectTimeoutMs = 1000;
        return Daemon::start(cfg);
    }

    bool rotate(Daemon& initiator, std::uint32_t expected) {
        auto client = control::ControlClient::connect("127.0.0.1", initiator.controlPort(), initiator.token());
        client->call("startRotation", {{"conversationId", conv}});
        return waitUntil(
            [&] {
                return a->pipeline().activeKeyVersion(conv) == expected &&
                       b->pipeline().activeKeyVersion(conv) == expected;
            },
            5s);
    }
};

// ---------------------------------------------------------------------------

void cryptoPerformance() {
    auto key = crypto::generateKey();
    Bytes plain(1024);
    crypto::systemRandom().fill(plain);
    const Bytes aad = toBytes("acceptance");
    constexpr int kRuns = 100;
    std::vector<std::pair<crypto::Nonce, Bytes>> sealed;
    sealed.reserve(kRuns);

    auto t0 = Steady::now();
    for (int i = 0; i < kRuns; ++i) {
        auto n = crypto::generateNonce();
        sealed.emplace_back(n, crypto::aeadEncrypt(key, n, plain, aad));
    }
    const double encMs = msSince(t0) / kRuns;

    bool roundTrip = true;
    t0 = Steady::now();
    for (const auto& [n, ct] : sealed) roundTrip &= crypto::aeadDecrypt(key, n, ct, aad) == plain;
    const double decMs = msSince(t0) / kRuns;

    report(encMs < 10.0 && decMs < 10.0 && roundTrip, "crypto-performance",
           "1 KiB AES-256-GCM mean encrypt " + fmt(encMs, 4) + " ms, decrypt " + fmt(decMs, 4) +
               " ms over 100 runs (limit < 10 ms)");
}

void hkdfConformance() {
    struct Case {
        const char *ikm, *salt, *info;
        std::size_t len;
        const char* okm;
    };
    const Case cases[] = {
        {"0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b", "000102030405060708090a0b0c", "f0f1f2f3f4f5f6f7f8f9", 42,
         "3cb25f25faacd57a90434f64d0362f2a2d2d0a90cf1a5a4c5db02d56ecc4c5bf34007208d5b887185865"},
        {"000102030405060708090a0b0c0d0e0f101112131415161718191a1b1c1d1e1f202122232425262728292a2b2c2d2e2f"
         "303132333435363738393a3b3c3d3e3f404142434445464748494a4b4c4d4e4f",
         "606162636465666768696a6b6c6d6e6f707172737475767778797a7b7c7d7e7f808182838485868788898a8b8c8d8e8f"
         "909192939495969798999a9b9c9d9e9fa0a1a2a3a4a5a6a7a8a9aaabacadaeaf",
         "b0b1b2b3b4b5b6b7b8b9babbbcbdbebfc0c1c2c3c4c5c6c7c8c9cacbcccdcecfd0d1d2d3d4d5d6d7d8d9dadbdcdddedf"
         "e0e1e2e3e4e5e6e7e8e9eaebecedeeeff0f1f2f3f4f5f6f7f8f9fafbfcfdfeff",
         82,
         "b11e398dc80327a1c8e7f78c596a49344f012eda2d4efad8a050cc4c19afa97c59045a99cac7827271cb41c65e590e09"
         "da3275600c2f09b8367793a9aca3db71cc30c58179ec3e87c14c01d5c1f3434f1d87"},
        {"0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b", "", "", 42,
         "8da4e775a563c18f715f802a063c5a31b8a11f5c5ee1879ec3454e5f3c738d2d9d201395faa4b61a96c8"},
    };
    int matched = 0;
    for (const auto& c : cases) {
        auto prk = crypto::hkdfExtract(hexDecode(c.salt), hexDecode(c.ikm));
        if (hexEncode(crypto::hkdfExpand(prk, hexDecode(c.info), c.len)) == c.okm) ++matched;
    }
    report(matched == 3, "hkdf-rfc5869", std::to_string(matched) + "/3 RFC 5869 test cases byte-exact");
}

void eightMessageExchange() {
    auto r = harness::runScenario(plan({harness::PassThrough{}}, 1), harness::alternatingExchange(8));
    const bool ok = r.delivered == 8 && r.hmacAttempts == 8 && r.hmacPassed == 8 && totalRejections(r) == 0 &&
                    r.stepErrors.empty();
    report(ok, "eight-message-exchange",
           "delivered " + std::to_string(r.delivered) + "/8, HMAC verified " + std::to_string(r.hmacPassed) + "/" +
               std::to_string(r.hmacAttempts) + ", rejections " + std::to_string(totalRejections(r)));
}

void wireNonRecovery() {
    std::size_t plaintextHits = 0;
    std::size_t frames = 0;
    std::size_t positive = 0;
    // passThrough plus a few fault mixes, including a rotation mid-conversation
    harness::Script withRotation = harness::alternatingExchange(4, "before");
    withRotation.push_back({harness::ScriptStep::Kind::rotate, harness::PeerId::B, {}, 0});
    auto tail = harness::alternatingExchange(4, "after");
    withRotation.insert(withRotation.end(), tail.begin(), tail.end());

    const std::vector<std::pair<harness::FaultPlan, harness::Script>> runs = {
        {plan({harness::PassThrough{}}, 2), harness::alternatingExchange(8, "the quick brown fox")},
        {plan({harness::Replay{1}, harness::TamperBit{3, 2, 1}}, 3), harness::alternatingExchange(8)},
        {plan({harness::PassThrough{}}, 4), withRotation},
    };
    for (const auto& [p, s] : runs) {
        auto r = harness::runScenario(p, s);
        plaintextHits += harness::searchCapture(r.capture, r.sentTexts);
        frames += r.capture.frames.size();
        if (positive == 0 && !r.capture.frames.empty()) {
            const std::string wire = toString(r.capture.frames.front().bytes);
            const auto at = wire.find("\"ciphertext\":\"");
            if (at != std::string::npos) positive = harness::searchCapture(r.capture, {wire.substr(at + 14, 16)});
        }
    }
    report(plaintextHits == 0 && positive >= 1, "plaintext-wire",
           std::to_string(plaintextHits) + " plaintext matches over " + std::to_string(frames) +
               " captured frames; positive control matches " + std::to_string(positive));
}

void diskNonRecovery() {
    const auto dir = fs::temp_directory_path() / ("ember-acceptance-disk-" + std::to_string(::getpid()));
    fs::remove_all(dir);
    harness::ScenarioOptions opts;
    opts.workDir = dir;
    opts.durableStore = true;
    harness::Script script = harness::alternatingExchange(8, "disk probe sentence");
    script.push_back({harness::ScriptStep::Kind::rotate, harness::PeerId::A, {}, 0});
    auto more = harness::alternatingExchange(4, "post rotation disk probe");
    script.insert(script.end(), more.begin(), more.end());
    auto r = harness::runScenario(plan({harness::PassThrough{}}, 5), script, 300'000, opts);

    std::size_t hits = 0;
    std::size_t bytes = 0;
    for (const auto& [_, p] : r.storePaths) {
        auto data = readFile(p);
        bytes += data.size();
        for (const auto& text : r.sentTexts) hits += countOccurrences(data, asBytes(text));
    }
    fs::remove_all(dir);
    const bool ok = hits == 0 && r.storePaths.size() == 2 && bytes > 0 && r.delivered == 12;
    report(ok, "plaintext-disk",
           std::to_string(hits) + " matches for " + std::to_string(r.sentTexts.size()) + " plaintexts in " +
               std::to_string(r.storePaths.size()) + " closed store files (" + std::to_string(bytes) + " bytes)");
}

void verifyBeforeDecrypt() {
    std::mt19937_64 rng(20261015);
    std::size_t decryptOnFail = 0, verifyAfter = 0, rejected = 0, accepted = 0;
    constexpr int kCases = 1000;
    for (int i = 0; i < kCases; ++i) {
        harness::TamperBit t;
        t.frameIndex = rng() % 4;
        t.byteOffset = rng() % 64;
        t.bitIndex = static_cast<unsigned>(rng() % 8);
        t.target = static_cast<harness::TamperTarget>(rng() % 4);
        auto r = harness::runScenario(plan({t}, rng()), harness::alternatingExchange(4));
        decryptOnFail += r.decryptOnAuthFailurePaths;
        verifyAfter += r.verifyAfterDecrypt;
        rejected += totalRejections(r);
        accepted += r.delivered;
    }
    report(decryptOnFail == 0 && verifyAfter == 0 && accepted > 0, "verify-before-decrypt",
           std::to_string(kCases) + " randomized tamper cases: decrypts on auth-failure paths " +
               std::to_string(decryptOnFail) + ", accepted with decrypt before verify " + std::to_string(verifyAfter) +
               " (accepted " + std::to_string(accepted) + ", rejected " + std::to_string(rejected) + ")");
}

void tamperRejection() {
    std::mt19937_64 rng(500);
    constexpr int kCorpus = 500;
    int authFailures = 0;
    int persisted = 0;
    for (int i = 0; i < kCorpus; ++i) {
        harness::TamperBit t;
        t.frameIndex = 0; // A -> B
        t.target = static_cast<harness::TamperTarget>(rng() % 3); // ciphertext, nonce, hmac
        t.byteOffset = rng() % 32;
        t.bitIndex = static_cast<unsigned>(rng() % 8);
        harness::Script one{{harness::ScriptStep::Kind::send, harness::PeerId::A, "tamper corpus " + std::to_string(i), 0}};
        auto r = harness::runScenario(plan({t}, rng()), one);
        if (r.totalRejections("auth_failure") == 1 && totalRejections(r) == 1) ++authFailures;
        persisted += static_cast<int>(r.peers[harness::PeerId::B].persistedMessages);
    }
    report(authFailures == kCorpus && persisted == 0, "tamper-rejection",
           std::to_string(authFailures) + "/" + std::to_string(kCorpus) +
               " single-bit flips rejected as auth_failure; records persisted by receiver " + std::to_string(persisted));
}

void replayRejection() {
    struct Case {
        std::vector<std::size_t> frames;
    };
    const Case cases[] = {{{2}}, {{0}}, {{7}}, {{1, 4, 6}}, {{3, 3}}};
    bool ok = true;
    std::string detail;
    for (const auto& c : cases) {
        std::vector<harness::FaultAction> actions;
        for (auto f : c.frames) actions.push_back(harness::Replay{f});
        auto r = harness::runScenario(plan(actions, 6), harness::alternatingExchange(8));
        const auto replays = r.totalRejections("replay");
        ok &= replays == c.frames.size() && r.delivered == 8 && totalRejections(r) == replays;
        detail += (detail.empty() ? "" : ", ") + std::to_string(c.frames.size()) + " dup -> " +
                  std::to_string(r.delivered) + " accepted/" + std::to_string(replays) + " replay/" +
                  std::to_string(totalRejections(r)) + " rejected";
    }
    report(ok, "replay-rejection", detail);
}

/// Forged CONFIRM: a valid envelope from the responder whose challenge response is wrong.
bool invalidChallengeAborts(std::string& detail) {
    struct Sink final : Outbound {
        std::vector<Envelope> sent;
        DeliveryResult deliver(const Endpoint&, const Envelope& env) override {
            sent.push_back(env);
            return DeliveryResult{true, 1, FailureCause::none, {}, {}};
        }
    };
    const auto dir = fs::temp_directory_path() / ("ember-acceptance-abort-" + std::to_string(::getpid()));
    fs::create_directories(dir);
    ManualClock clock;
    Sink outA, outB;
    auto key = crypto::generateKey();
    auto storeA = Store::open(dir / "a.db", crypto::generateKey(), StoreOptions{false, 256});
    auto storeB = Store::open(dir / "b.db", crypto::generateKey(), StoreOptions{false, 256});
    auto epA = Endpoint::parse("::1", 5896), epB = Endpoint::parse("::1", 5897);
    Pipeline a(PipelineConfig{LocalIdentity{"alice", epA}}, *storeA, outA, clock);
    Pipeline b(PipelineConfig{LocalIdentity{"bob", epB}}, *storeB, outB, clock);
    const auto conv = a.addContact("bob", epB, key).conversationId;
    b.addContact("alice", epA, key);

    a.startRotation(conv);
    b.receiveEnvelope(outA.sent.back());
    const Envelope confirm = outB.sent.back();
    auto k1 = b.keys().getKey(conv, 1);
    auto payload = decodeRotationPayload(crypto::aeadDecrypt(
        crypto::deriveMessageKey(k1, confirm.nonce), confirm.nonce, confirm.ciphertext,
        aeadAssociatedData(confirm.conversationId, confirm.senderName, confirm.type, confirm.timestamp)));
    (*payload.challengeResponse)[7] ^= 0x10;
    a.receiveEnvelope(b.sealEnvelope(conv, MsgType::rotation_confirm, encodeRotationPayload(payload), 30'000));

    const auto phase = a.rotationState(conv).phase;
    const auto version = a.activeKeyVersion(conv);
    storeA->close();
    storeB->close();
    fs::remove_all(dir);
    detail = std::string("bad response -> initiator ") + std::string(rotationPhaseName(phase)) + " at v" +
             std::to_string(version);
    return phase == RotationPhase::aborted && version == 1;
}

void rotationAndRetention(Peers& peers) {
    auto& A = peers.a->pipeline();
    auto& B = peers.b->pipeline();
    const std::string historic = "sent under the first key";
    A.sendMessage(peers.conv, historic, 3'600'000);
    const bool arrived = waitUntil([&] { return B.listMessages(peers.conv).size() == 1; }, 3s);

    criterion("rotation-correctness", [&] {
        const bool rotated = peers.rotate(*peers.a, 2);
        const bool sameKey = A.keys().activeKey(peers.conv) == B.keys().activeKey(peers.conv);
        bool historyOk = arrived;
        for (auto* p : {&A, &B}) {
            for (const auto& rec : p->listMessages(peers.conv)) {
                historyOk &= rec.keyVersion == 1 && p->decryptForDisplay(rec).str() == historic;
            }
        }
        std::string abortDetail;
        const bool aborts = invalidChallengeAborts(abortDetail);
        report(rotated && sameKey && historyOk && aborts, "rotation-correctness",
               "active versions " + std::to_string(A.activeKeyVersion(peers.conv)) + "/" +
                   std::to_string(B.activeKeyVersion(peers.conv)) + ", v2 keys identical " +
                   (sameKey ? "yes" : "no") + ", v1 history decrypts " + (historyOk ? "yes" : "no") + ", " +
                   abortDetail);
    });

    criterion("key-retention", [&] {
        // Rotations alternate initiators until six key versions have existed (v1..v6).
        bool rotated = true;
        for (std::uint32_t v = 3; v <= 6; ++v) rotated &= peers.rotate(v % 2 ? *peers.b : *peers.a, v);
        const std::vector<std::uint32_t> want{2, 3, 4, 5, 6};
        const auto retainedA = A.keys().retainedVersions(peers.conv);
        const auto retainedB = B.keys().retainedVersions(peers.conv);

        auto client = control::ControlClient::connect("127.0.0.1", peers.b->controlPort(), peers.b->token());
        auto listed = client->call("listMessages", {{"conversationId", peers.conv}});
        std::size_t undecryptable = 0;
        for (const auto& m : listed.at("messages")) {
            if (m.at("keyVersion") == 1 && m.at("plaintext").is_null() && m.value("error", "") == "undecryptable_history") {
                ++undecryptable;
            }
        }
        std::string versions;
        for (auto v : retainedA) versions += (versions.empty() ? "" : ",") + std::to_string(v);
        report(rotated && retainedA == want && retainedB == want && undecryptable == 1, "key-retention",
               "retained {" + versions + "} on both peers after reaching v6; v1 record -> " +
                   (undecryptable == 1 ? "undecryptable_history" : "still readable or missing"));
    });
}

void ttlSweep(Peers& peers) {
    auto& A = peers.a->pipeline();
    auto& B = peers.b->pipeline();
    auto sent = A.sendMessage(peers.conv, "gone in a second", 1000);
    const auto id = sent.record.id;
    waitUntil([&] { return !B.listMessages(peers.conv, 1000).empty(); }, 2s);

    auto present = [&](Pipeline& p) {
        for (const auto& r : p.listMessages(peers.conv, 1000)) {
            if (r.timestamp == sent.record.timestamp && r.ttl == 1000) return true;
        }
        return false;
    };
    const auto expiresAt = sent.record.expiresAt;
    const bool goneA = waitUntil([&] { return !present(A); }, 5s);
    const double lagA = static_cast<double>(SystemClock().nowMs() - expiresAt);
    const bool goneB = waitUntil([&] { return !present(B); }, 5s);
    const double lagB = static_cast<double>(SystemClock().nowMs() - expiresAt);
    const std::int64_t budget = peers.a->config().sweepIntervalMs + 1000;
    const auto again = A.sweep(SystemClock().nowMs());
    report(goneA && goneB && lagA <= budget && lagB <= budget && again == 0, "ttl-sweep",
           "ttl 1 s record gone from sender " + fmt(lagA, 0) + " ms and receiver " + fmt(lagB, 0) +
               " ms after expiry (limit " + std::to_string(budget) + " ms); repeated sweep removed " +
               std::to_string(again));
}

void oversize(Peers& peers) {
    constexpr std::size_t kMax = kDefaultMaxEnvelopeBytes;
    // In-process deframe first.
    Bytes header{0x7F, 0xFF, 0xFF, 0xFF};
    header.resize(4 + 4096, 0x41);
    const auto heapBefore = ::mallinfo2().uordblks;
    const long hwmBefore = procStatusKb("VmHWM");
    bool rejected = false;
    try {
        MemorySource src(header);
        deframe(src, kMax);
    } catch (const Error& e) {
        rejected = e.code() == Errc::oversize;
    }

    // Then against the live listener over TCP, followed by a normal delivery.
    const auto statsBefore = peers.a->networkStatus().at("stats").at("oversize").get<std::uint64_t>();
    int fd = ::socket(AF_INET6, SOCK_STREAM, 0);
    sockaddr_in6 addr{};
    addr.sin6_family = AF_INET6;
    addr.sin6_port = htons(peers.a->listenPort());
    addr.sin6_addr = in6addr_loopback;
    bool sent = ::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0 &&
                ::write(fd, header.data(), header.size()) == static_cast<ssize_t>(header.size());
    char sink[16];
    timeval tv{3, 0};
    ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
    const bool closedByPeer = ::read(fd, sink, sizeof sink) <= 0;
    ::close(fd);

    const long hwmAfter = procStatusKb("VmHWM");
    const auto heapAfter = ::mallinfo2().uordblks;
    const long deltaKb = std::max<long>(hwmAfter - hwmBefore,
                                        (static_cast<long>(heapAfter) - static_cast<long>(heapBefore)) / 1024);
    const long budgetKb = static_cast<long>((kMax + (1u << 20)) / 1024);

    auto& B = peers.b->pipeline();
    auto& A = peers.a->pipeline();
    const auto before = A.listMessages(peers.conv, 1000).size();
    B.sendMessage(peers.conv, "still listening?", 60'000);
    const bool stillAccepting =
        waitUntil([&] { return A.listMessages(peers.conv, 1000).size() == before + 1; }, 3s);
    const auto statsAfter = peers.a->networkStatus().at("stats").at("oversize").get<std::uint64_t>();

    report(rejected && sent && closedByPeer && deltaKb < budgetKb && stillAccepting && statsAfter == statsBefore + 1,
           "oversize-dos",
           std::string("0x7FFFFFFF prefix rejected (deframe ") + (rejected ? "oversize" : "accepted") +
               ", listener closed connection " + (closedByPeer ? "yes" : "no") + "); memory delta " +
               std::to_string(deltaKb) + " KiB (limit " + std::to_string(budgetKb) + " KiB); listener accepted next envelope " +
               (stillAccepting ? "yes" : "no"));
}

void loopbackLatency(Peers& peers) {
    auto& A = peers.a->pipeline();
    auto& B = peers.b->pipeline();
    std::mutex m;
    std::condition_variable cv;
    std::map<std::string, Steady::time_point> verifiedAt;
    B.setStageObserver([&](const StageEvent& e) {
        if (e.stage != Stage::hmac_ok || e.type != MsgType::message) return;
        std::lock_guard lock(m);
        verifiedAt[e.nonceHex] = Steady::now();
        cv.notify_all();
    });

    constexpr int kWarmup = 5, kRuns = 50;
    std::vector<double> samples;
    for (int i = 0; i < kWarmup + kRuns; ++i) {
        const auto start = Steady::now();
        auto sent = A.sendMessage(peers.conv, "latency probe " + std::to_string(i), 60'000);
        const auto nonce = hexEncode(sent.record.nonce.view());
        std::unique_lock lock(m);
        if (!cv.wait_for(lock, 3s, [&] { return verifiedAt.contains(nonce); })) break;
        if (i >= kWarmup) samples.push_back(std::chrono::duration<double, std::milli>(verifiedAt[nonce] - start).count());
    }
    B.setStageObserver({});
    double mean = 0, worst = 0;
    for (double s : samples) {
        mean += s;
        worst = std::max(worst, s);
    }
    if (!samples.empty()) mean /= static_cast<double>(samples.size());
    report(samples.size() == static_cast<std::size_t>(kRuns) && mean < 350.0, "loopback-latency",
           "send-to-HMAC-verified over TCP loopback mean " + fmt(mean) + " ms, max " + fmt(worst) + " ms over " +
               std::to_string(samples.size()) + " messages (limit < 350 ms)");
}

} // namespace

int main() {
    log::setLevel(log::Level::warn);

    criterion("crypto-performance", cryptoPerformance);
    criterion("hkdf-rfc5869", hkdfConformance);
    criterion("eight-message-exchange", eightMessageExchange);
    criterion("plaintext-wire", wireNonRecovery);
    criterion("plaintext-disk", diskNonRecovery);
    criterion("verify-before-decrypt", verifyBeforeDecrypt);
    criterion("tamper-rejection", tamperRejection);
    criterion("replay-rejection", replayRejection);

    try {
        Peers peers;
        rotationAndRetention(peers);
        criterion("ttl-sweep", [&] { ttlSweep(peers); });
        criterion("oversize-dos", [&] { oversize(peers); });
        criterion("loopback-latency", [&] { loopbackLatency(peers); });
    } catch (const std::exception& e) {
        report(false, "daemon-setup", e.what());
    }

    std::cout << (failures == 0 ? "ALL CRITERIA PASSED" : std::to_string(failures) + " CRITERIA FAILED") << std::endl;
    return failures == 0 ? 0 : 1;
}
