#include "ember/pipeline.hpp"

#include "test_util.hpp"

#include <deque>
#include <fstream>
#include <iterator>

using namespace ember;
using ember::testing::errcOf;
using ember::testing::TempDir;

namespace {

/// Queues envelopes; pump() hands them to whichever pipeline owns the target endpoint.
class QueueOutbound final : public Outbound {
public:
    DeliveryResult deliver(const Endpoint& to, const Envelope& env) override {
        DeliveryResult r;
        r.attempts = 1;
        if (failing) {
            r.lastCause = FailureCause::refused;
            return r;
        }
        queue.emplace_back(to, env);
        r.delivered = true;
        return r;
    }

    bool failing = false;
    std::deque<std::pair<Endpoint, Envelope>> queue;
};

struct Peer {
    Peer(const TempDir& dir, const std::string& name, std::uint16_t port, QueueOutbound& out, ManualClock& clock)
        : endpoint(Endpoint::parse("::1", port)),
          store(Store::open(dir / (name + ".db"), crypto::generateKey(), StoreOptions{false, 256})),
          pipeline(PipelineConfig{LocalIdentity{name, endpoint}, 30'000, kDefaultMaxRetainedKeys, 300'000}, *store,
                   out, clock) {
        pipeline.setStageObserver([this](const StageEvent& e) { stages.push_back(e.stage); });
        sub = Subscription<NotificationEvent>(pipeline.notifications(),
                                              [this](const NotificationEvent& e) { events.push_back(e); });
    }

    std::size_t count(NotificationKind kind) const {
        return static_cast<std::size_t>(
            std::count_if(events.begin(), events.end(), [&](const auto& e) { return e.kind == kind; }));
    }

    Endpoint endpoint;
    std::unique_ptr<Store> store;
    Pipeline pipeline;
    std::vector<Stage> stages;
    std::vector<NotificationEvent> events;
    Subscription<NotificationEvent> sub;
};

class PipelineTest : public ::testing::Test {
protected:
    PipelineTest() : alice(dir, "alice", 5896, out, clock), bob(dir, "bob", 5897, out, clock) {
        conv = alice.pipeline.addContact("bob", bob.endpoint, key).conversationId;
        bob.pipeline.addContact("alice", alice.endpoint, key);
    }

    /// Delivers queued envelopes until the queue is empty; returns receive results in order.
    std::vector<ReceiveResult> pump() {
        std::vector<ReceiveResult> results;
        while (!out.queue.empty()) {
            auto [to, env] = out.queue.front();
            out.queue.pop_front();
            Peer& target = to == alice.endpoint ? alice : bob;
            results.push_back(target.pipeline.receiveEnvelope(env));
        }
        return results;
    }

    void rotate(Peer& initiator) {
        initiator.pipeline.startRotation(conv);
        pump();
    }

    TempDir dir;
    QueueOutbound out;
    ManualClock clock;
    crypto::SymmetricKey key = crypto::generateKey();
    Peer alice, bob;
    std::string conv;
};

} // namespace

TEST_F(PipelineTest, ContactsAgreeOnIdAndFingerprint) {
    EXPECT_EQ(conv, conversationId(alice.endpoint, bob.endpoint));
    EXPECT_EQ(alice.pipeline.getFingerprint(conv), crypto::fingerprint(key));
    EXPECT_EQ(bob.pipeline.getFingerprint(conv), alice.pipeline.getFingerprint(conv));
    EXPECT_EQ(alice.pipeline.trust(conv).status, TrustStatus::unverified);
    EXPECT_EQ(alice.pipeline.activeKeyVersion(conv), 1u);
}

TEST_F(PipelineTest, AddContactValidation) {
    EXPECT_EQ(errcOf([&] { alice.pipeline.addContact("bob again", bob.endpoint, crypto::generateKey()); }),
              Errc::duplicate);
    EXPECT_EQ(errcOf([&] { alice.pipeline.addContact("me", alice.endpoint, crypto::generateKey()); }),
              Errc::validation);
    EXPECT_EQ(errcOf([&] { Endpoint::parse("::1::2", 5000); }), Errc::validation);
}

TEST_F(PipelineTest, SendPersistsCiphertextRecord) {
    auto sent = alice.pipeline.sendMessage(conv, "hi", 300'000);
    const auto& r = sent.record;
    EXPECT_EQ(r.expiresAt, r.timestamp + 300'000);
    EXPECT_EQ(r.direction, Direction::sent);
    EXPECT_TRUE(sent.delivery.delivered);
    auto stored = alice.store->getMessage(r.id);
    ASSERT_TRUE(stored);
    EXPECT_EQ(stored->deliveryStatus, DeliveryStatus::delivered);
    EXPECT_EQ(stored->ciphertext.size(), 2u + crypto::kTagSize);
    EXPECT_EQ(toString(alice.pipeline.decryptForDisplay(r.id).view()), "hi");
}

TEST_F(PipelineTest, StoreFileNeverHoldsPlaintext) {
    const std::string probe = "probe: meet at the north gate";
    alice.pipeline.sendMessage(conv, probe, 300'000);
    pump();
    alice.store->close();
    bob.store->close();
    for (const char* name : {"alice.db", "bob.db"}) {
        std::ifstream in(dir / name, std::ios::binary);
        Bytes bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
        ASSERT_FALSE(bytes.empty());
        EXPECT_EQ(countOccurrences(bytes, asBytes(probe)), 0u) << name;
        EXPECT_EQ(countOccurrences(bytes, asBytes("north gate")), 0u) << name;
    }
}

TEST_F(PipelineTest, ReceiveVerifiesBeforeDecrypt) {
    alice.pipeline.sendMessage(conv, "hello bob", 60'000);
    auto results = pump();
    ASSERT_EQ(results.size(), 1u);
    ASSERT_TRUE(results[0].accepted());
    ASSERT_TRUE(results[0].record);
    EXPECT_EQ(toString(bob.pipeline.decryptForDisplay(*results[0].record).view()), "hello bob");
    EXPECT_EQ(bob.pipeline.listMessages(conv).size(), 1u);

    auto pos = [&](Stage s) { return std::find(bob.stages.begin(), bob.stages.end(), s) - bob.stages.begin(); };
    EXPECT_LT(pos(Stage::hmac_ok), pos(Stage::decrypt));
    EXPECT_LT(pos(Stage::decrypt_ok), pos(Stage::persist));
    EXPECT_EQ(bob.count(NotificationKind::message_received), 1u);
}

TEST_F(PipelineTest, TamperedCiphertextNeverDecrypted) {
    alice.pipeline.sendMessage(conv, "hello bob", 60'000);
    out.queue.front().second.ciphertext[0] ^= 0x01;
    auto results = pump();
    ASSERT_FALSE(results[0].accepted());
    EXPECT_EQ(results[0].rejection->reason, RejectReason::auth_failure);
    EXPECT_EQ(std::count(bob.stages.begin(), bob.stages.end(), Stage::decrypt), 0);
    EXPECT_TRUE(bob.pipeline.listMessages(conv).empty());
    EXPECT_EQ(bob.count(NotificationKind::message_received), 0u);
}

TEST_F(PipelineTest, DuplicateAndReflectedEnvelopesAreReplays) {
    alice.pipeline.sendMessage(conv, "once", 60'000);
    auto env = out.queue.front().second;
    out.queue.push_back(out.queue.front());
    auto results = pump();
    ASSERT_EQ(results.size(), 2u);
    EXPECT_TRUE(results[0].accepted());
    EXPECT_EQ(results[1].rejection->reason, RejectReason::replay);

    // alice remembers her own nonce, so a copy bounced back to her is rejected too
    auto reflected = alice.pipeline.receiveEnvelope(env);
    ASSERT_FALSE(reflected.accepted());
    EXPECT_EQ(reflected.rejection->reason, RejectReason::replay);
}

TEST_F(PipelineTest, UnknownConversationAndExpired) {
    auto env = alice.pipeline.sealEnvelope(conv, MsgType::message, asBytes("x"), 1000);
    env.conversationId = "00000000-0000-0000-0000-000000000000";
    EXPECT_EQ(bob.pipeline.receiveEnvelope(env).rejection->reason, RejectReason::unknown_conversation);

    auto old = alice.pipeline.sealEnvelope(conv, MsgType::message, asBytes("x"), 1000);
    clock.advance(1001);
    EXPECT_EQ(bob.pipeline.receiveEnvelope(old).rejection->reason, RejectReason::expired);
}

TEST_F(PipelineTest, RotationCompletesOnBothSides) {
    alice.pipeline.sendMessage(conv, "before rotation", 300'000);
    pump();
    rotate(alice);
    EXPECT_EQ(alice.pipeline.activeKeyVersion(conv), 2u);
    EXPECT_EQ(bob.pipeline.activeKeyVersion(conv), 2u);
    EXPECT_EQ(alice.pipeline.keys().activeKey(conv), bob.pipeline.keys().activeKey(conv));
    EXPECT_GE(alice.count(NotificationKind::rotation_state), 1u);
    EXPECT_GE(bob.count(NotificationKind::rotation_state), 1u);
    EXPECT_EQ(alice.events.back().state, "COMPLETED");

    // history under v1 is still readable on both sides
    for (Peer* p : {&alice, &bob}) {
        auto msgs = p->pipeline.listMessages(conv);
        ASSERT_EQ(msgs.size(), 1u);
        EXPECT_EQ(msgs[0].keyVersion, 1u);
        EXPECT_EQ(toString(p->pipeline.decryptForDisplay(msgs[0]).view()), "before rotation");
    }

    bob.pipeline.sendMessage(conv, "after rotation", 300'000);
    auto results = pump();
    ASSERT_TRUE(results[0].accepted());
    EXPECT_EQ(results[0].record->keyVersion, 2u);
}

TEST_F(PipelineTest, SixRotationsMakeV1Undecryptable) {
    alice.pipeline.sendMessage(conv, "ancient", 3'600'000);
    pump();
    for (int i = 0; i < 6; ++i) rotate(i % 2 ? bob : alice);
    EXPECT_EQ(alice.pipeline.activeKeyVersion(conv), 7u);
    EXPECT_EQ(alice.pipeline.keys().retainedVersions(conv), (std::vector<std::uint32_t>{3, 4, 5, 6, 7}));
    auto msgs = bob.pipeline.listMessages(conv);
    ASSERT_EQ(msgs.size(), 1u);
    EXPECT_EQ(errcOf([&] { bob.pipeline.decryptForDisplay(msgs[0]); }), Errc::undecryptable_history);
}

TEST_F(PipelineTest, RotationFailsClosedWhenPeerUnreachable) {
    out.failing = true;
    EXPECT_EQ(errcOf([&] { alice.pipeline.startRotation(conv); }), Errc::delivery_failure);
    EXPECT_EQ(alice.pipeline.activeKeyVersion(conv), 1u);
    EXPECT_EQ(alice.pipeline.rotationState(conv).phase, RotationPhase::idle);
}

TEST_F(PipelineTest, BadChallengeResponseAbortsInitiator) {
    alice.pipeline.startRotation(conv);
    auto request = out.queue.front().second;
    out.queue.clear();
    bob.pipeline.receiveEnvelope(request);
    ASSERT_EQ(out.queue.size(), 1u);
    auto confirm = out.queue.front().second;
    out.queue.clear();

    // Re-seal the CONFIRM with a corrupted response so only the challenge check can catch it.
    auto k1 = bob.pipeline.keys().getKey(conv, 1);
    auto payload = decodeRotationPayload(
        aeadDecrypt(crypto::deriveMessageKey(k1, confirm.nonce), confirm.nonce, confirm.ciphertext,
                    aeadAssociatedData(confirm.conversationId, confirm.senderName, confirm.type, confirm.timestamp)));
    (*payload.challengeResponse)[0] ^= 0x80;
    auto forged = bob.pipeline.sealEnvelope(conv, MsgType::rotation_confirm, encodeRotationPayload(payload), 30'000);
    alice.pipeline.receiveEnvelope(forged);
    EXPECT_EQ(alice.pipeline.rotationState(conv).phase, RotationPhase::aborted);
    EXPECT_EQ(alice.pipeline.activeKeyVersion(conv), 1u);
    EXPECT_EQ(alice.events.back().state, "ABORTED");
}

TEST_F(PipelineTest, ReplayedActivateIgnored) {
    alice.pipeline.startRotation(conv);
    std::optional<Envelope> activate;
    while (!out.queue.empty()) {
        auto [to, env] = out.queue.front();
        out.queue.pop_front();
        if (env.type == MsgType::rotation_activate) activate = env;
        (to == alice.endpoint ? alice : bob).pipeline.receiveEnvelope(env);
    }
    ASSERT_TRUE(activate);
    auto again = bob.pipeline.receiveEnvelope(*activate);
    EXPECT_FALSE(again.accepted());
    EXPECT_EQ(bob.pipeline.activeKeyVersion(conv), 2u);
    EXPECT_EQ(bob.pipeline.rotationState(conv).phase, RotationPhase::idle);
}

TEST_F(PipelineTest, SweepRemovesExpiredAndDisplayReportsNotFound) {
    auto sent = alice.pipeline.sendMessage(conv, "short lived", 1000);
    pump();
    clock.advance(1001);
    EXPECT_EQ(alice.pipeline.sweep(clock.nowMs()), 1u);
    EXPECT_EQ(alice.pipeline.sweep(clock.nowMs()), 0u);
    EXPECT_EQ(errcOf([&] { alice.pipeline.decryptForDisplay(sent.record.id); }), Errc::not_found);
}

TEST_F(PipelineTest, OutOfBandKeyChangeMarksTrustChanged) {
    alice.pipeline.setVerified(conv);
    EXPECT_EQ(alice.pipeline.trust(conv).status, TrustStatus::verified);
    alice.pipeline.replaceContactKey(conv, crypto::generateKey());
    EXPECT_EQ(alice.pipeline.trust(conv).status, TrustStatus::changed);
    EXPECT_EQ(alice.events.back().kind, NotificationKind::trust_state);
    EXPECT_EQ(alice.events.back().state, "CHANGED");
}

TEST_F(PipelineTest, NotificationsCarryNoContent) {
    alice.pipeline.sendMessage(conv, "secret words", 60'000);
    pump();
    ASSERT_EQ(bob.count(NotificationKind::message_received), 1u);
    const auto& e = bob.events.back();
    EXPECT_EQ(e.conversationId, conv);
    EXPECT_GT(e.at, 0);
    EXPECT_FALSE(e.messageId.empty());
    EXPECT_EQ(e.state.find("secret"), std::string::npos);
}

TEST_F(PipelineTest, EncryptAndPersistLatency) {
    TempDir durableDir;
    auto store = Store::open(durableDir / "d.db", crypto::generateKey());
    QueueOutbound sink;
    SystemClock sys;
    Pipeline p(PipelineConfig{LocalIdentity{"carol", Endpoint::parse("::1", 5898)}}, *store, sink, sys);
    auto c = p.addContact("dave", Endpoint::parse("::1", 5899), crypto::generateKey()).conversationId;
    const std::string text(1024, 'q');
    constexpr int kRuns = 20;
    const auto start = std::chrono::steady_clock::now();
    for (int i = 0; i < kRuns; ++i) p.sendMessage(c, text, 60'000);
    const auto meanMs =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count() / kRuns;
    EXPECT_LT(meanMs, 25.0);
}
