#pragma once

// Send, receive and display pipelines.
//
// Receive order is fixed: resolve conversation, replay check, HMAC verify,
// AEAD decrypt, persist ciphertext, route. Nothing is decrypted unless the
// envelope MAC verified first; the stage observer records every step so the
// ordering can be checked from outside.

#include "ember/crypto.hpp"
#include "ember/envelope.hpp"
#include "ember/events.hpp"
#include "ember/keystore.hpp"
#include "ember/rotation.hpp"
#include "ember/store.hpp"
#include "ember/transport.hpp"

#include <atomic>
#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>

namespace ember {

class Clock {
public:
    virtual ~Clock() = default;
    virtual std::int64_t nowMs() const = 0;
};

class SystemClock final : public Clock {
public:
    std::int64_t nowMs() const override;
};

class ManualClock final : public Clock {
public:
    explicit ManualClock(std::int64_t start = 1'700'000'000'000) : now_(start) {}
    std::int64_t nowMs() const override { return now_.load(); }
    void set(std::int64_t ms) { now_ = ms; }
    void advance(std::int64_t ms) { now_ += ms; }

private:
    std::atomic<std::int64_t> now_;
};

/// Where outbound envelopes go. TCP in production, a fault proxy in the harness.
class Outbound {
public:
    virtual ~Outbound() = default;
    virtual DeliveryResult deliver(const Endpoint& to, const Envelope& env) = 0;
};

class TcpOutbound final : public Outbound {
public:
    explicit TcpOutbound(RetryPolicy policy = {}, std::size_t maxEnvelopeBytes = kDefaultMaxEnvelopeBytes,
                         Sleeper sleeper = realSleep)
        : policy_(policy), maxEnvelopeBytes_(maxEnvelopeBytes), sleeper_(std::move(sleeper)) {}
    DeliveryResult deliver(const Endpoint& to, const Envelope& env) override;

private:
    RetryPolicy policy_;
    std::size_t maxEnvelopeBytes_;
    Sleeper sleeper_;
};

enum class Stage { resolve, replay_check, hmac_verify, hmac_ok, hmac_fail, decrypt, decrypt_ok, decrypt_fail, persist, route };

std::string_view stageName(Stage stage);

struct StageEvent {
    std::string conversationId;
    std::string nonceHex;
    MsgType type;
    Stage stage;
    std::chrono::steady_clock::time_point at;
};

enum class RejectReason { unknown_conversation, replay, expired, auth_failure, unknown_key_version, decrypt_failure, protocol };

std::string_view rejectReasonName(RejectReason reason);

struct Rejection {
    RejectReason reason;
    std::string detail;
};

struct ReceiveResult {
    enum class Kind { message, control, rejected };
    Kind kind = Kind::rejected;
    MsgType type = MsgType::message;
    std::optional<MessageRecord> record; // Kind::message
    std::optional<Rejection> rejection;  // Kind::rejected

    bool accepted() const { return kind != Kind::rejected; }
};

enum class NotificationKind { message_received, rotation_state, connection_state, trust_state };

std::string_view notificationKindName(NotificationKind kind);

/// Content-free: no message text, no sender name.
struct NotificationEvent {
    std::string conversationId;
    NotificationKind kind;
    std::int64_t at = 0;
    std::string state;            // rotation phase / connection state / trust status
    std::uint32_t keyVersion = 0; // rotation and trust events
    std::string messageId;        // message_received only
};

struct SendResult {
    MessageRecord record;
    DeliveryResult delivery;
};

/// Nonces seen per conversation, each held until its message expires.
class ReplayCache {
public:
    bool contains(const std::string& conversationId, const crypto::Nonce& nonce) const;
    void remember(const std::string& conversationId, const crypto::Nonce& nonce, std::int64_t expiresAt);
    /// Drops entries whose expiresAt < now.
    std::size_t evict(std::int64_t now);
    std::size_t size() const;

private:
    mutable std::mutex mutex_;
    std::map<std::string, std::map<crypto::Nonce, std::int64_t>> entries_;
};

struct LocalIdentity {
    std::string displayName;
    Endpoint endpoint;
};

struct PipelineConfig {
    LocalIdentity identity;
    std::int64_t rotationTimeoutMs = kDefaultRotationTimeoutMs;
    std::size_t maxRetainedKeys = kDefaultMaxRetainedKeys;
    std::int64_t defaultTtlMs = kDefaultTtlMs;
};

class Pipeline {
public:
    Pipeline(PipelineConfig config, Store& store, Outbound& outbound, Clock& clock,
             crypto::RandomSource& rng = crypto::systemRandom());
    ~Pipeline();

    Pipeline(const Pipeline&) = delete;
    Pipeline& operator=(const Pipeline&) = delete;

    /// Installs the imported key as version 1. Throws Errc::duplicate when the
    /// endpoint is already a contact, Errc::validation on a bad endpoint.
    Contact addContact(const std::string& displayName, const Endpoint& peer, const crypto::SymmetricKey& importedKey);
    /// Out-of-band key replacement; marks trust CHANGED.
    void replaceContactKey(const std::string& conversationId, const crypto::SymmetricKey& key);
    std::vector<Contact> contacts() const;
    std::optional<Contact> contact(const std::string& conversationId) const;

    crypto::Fingerprint getFingerprint(const std::string& conversationId) const;
    TrustState trust(const std::string& conversationId) const;
    void setVerified(const std::string& conversationId);
    std::uint32_t activeKeyVersion(const std::string& conversationId) const;

    /// Persists the ciphertext record before handing the envelope to the
    /// outbound path. A failed delivery leaves the record marked FAILED.
    SendResult sendMessage(const std::string& conversationId, std::string_view plaintext, std::int64_t ttlMs);

    ReceiveResult receiveEnvelope(const Envelope& env);

    /// In-memory decryption of a stored record. Throws
    /// Errc::undecryptable_history (key evicted), Errc::integrity (MAC or tag
    /// mismatch), Errc::not_found.
    crypto::SecureBuffer decryptForDisplay(const MessageRecord& record) const;
    crypto::SecureBuffer decryptForDisplay(const std::string& messageId) const;

    std::vector<ConversationMeta> listConversationMeta() const;
    std::vector<MessageRecord> listMessages(const std::string& conversationId, std::size_t limit = 1000) const;

    /// Sends a ROTATION_REQUEST. Throws Errc::busy if one is in flight and
    /// Errc::delivery_failure (rotation reset to IDLE) if it cannot be sent.
    Envelope startRotation(const std::string& conversationId);
    RotationState rotationState(const std::string& conversationId) const;

    /// Rotation timeouts, replay-cache eviction and the TTL sweep.
    std::size_t sweep(std::int64_t now);
    void tickRotations(std::int64_t now);

    EventStream<NotificationEvent>& notifications() { return notifications_; }
    void publishConnectionState(const ConnectionState& state);

    using StageObserver = std::function<void(const StageEvent&)>;
    void setStageObserver(StageObserver observer);

    const LocalIdentity& identity() const { return config_.identity; }
    KeyStore& keys() { return keys_; }
    const ReplayCache& replayCache() const { return replay_; }

    /// Builds a sealed envelope under the active key without sending it.
    /// Exposed for tests and the adversarial harness.
    Envelope sealEnvelope(const std::string& conversationId, MsgType type, ByteView payload, std::int64_t ttlMs);

private:
    struct Conversation {
        std::mutex mutex;
        std::unique_ptr<RotationMachine> rotation;
    };

    Conversation& conversation(const std::string& conversationId) const;
    Envelope sealLocked(const std::string& conversationId, MsgType type, ByteView payload, std::int64_t ttlMs,
                        std::uint32_t version, const crypto::SymmetricKey& key);
    void stage(const Envelope& env, Stage s) const;
    void notify(NotificationEvent event);
    void notifyRotation(const std::string& conversationId, std::string state);
    std::optional<Envelope> routeControl(Conversation& conv, const Envelope& env, ByteView payload,
                                         ReceiveResult& result, std::string& rotationNote);
    Endpoint peerEndpoint(const std::string& conversationId) const;
    std::string newMessageId();

    PipelineConfig config_;
    Store& store_;
    Outbound& outbound_;
    Clock& clock_;
    crypto::RandomSource& rng_;
    KeyStore keys_;
    ReplayCache replay_;
    EventStream<NotificationEvent> notifications_;

    mutable std::mutex conversationsMutex_;
    mutable std::map<std::string, std::unique_ptr<Conversation>> conversations_;

    mutable std::mutex observerMutex_;
    StageObserver observer_;
};

} // namespace ember
