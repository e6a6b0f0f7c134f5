#include "ember/pipeline.hpp"

#include "ember/error.hpp"

#include <algorithm>

namespace ember {

std::int64_t SystemClock::nowMs() const {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
}

DeliveryResult TcpOutbound::deliver(const Endpoint& to, const Envelope& env) {
    return sendEnvelope(to, env, policy_, maxEnvelopeBytes_, sleeper_);
}

std::string_view stageName(Stage stage) {
    switch (stage) {
    case Stage::resolve: return "resolve";
    case Stage::replay_check: return "replay_check";
    case Stage::hmac_verify: return "hmac_verify";
    case Stage::hmac_ok: return "hmac_ok";
    case Stage::hmac_fail: return "hmac_fail";
    case Stage::decrypt: return "decrypt";
    case Stage::decrypt_ok: return "decrypt_ok";
    case Stage::decrypt_fail: return "decrypt_fail";
    case Stage::persist: return "persist";
    case Stage::route: return "route";
    }
    return "unknown";
}

std::string_view rejectReasonName(RejectReason reason) {
    switch (reason) {
    case RejectReason::unknown_conversation: return "unknown_conversation";
    case RejectReason::replay: return "replay";
    case RejectReason::expired: return "expired";
    case RejectReason::auth_failure: return "auth_failure";
    case RejectReason::unknown_key_version: return "unknown_key_version";
    case RejectReason::decrypt_failure: return "decrypt_failure";
    case RejectReason::protocol: return "protocol";
    }
    return "unknown";
}

std::string_view notificationKindName(NotificationKind kind) {
    switch (kind) {
    case NotificationKind::message_received: return "MESSAGE_RECEIVED";
    case NotificationKind::rotation_state: return "ROTATION_STATE";
    case NotificationKind::connection_state: return "CONNECTION_STATE";
    case NotificationKind::trust_state: return "TRUST_STATE";
    }
    return "UNKNOWN";
}

bool ReplayCache::contains(const std::string& conversationId, const crypto::Nonce& nonce) const {
    std::lock_guard lock(mutex_);
    auto it = entries_.find(conversationId);
    return it != entries_.end() && it->second.contains(nonce);
}

void ReplayCache::remember(const std::string& conversationId, const crypto::Nonce& nonce, std::int64_t expiresAt) {
    std::lock_guard lock(mutex_);
    auto& slot = entries_[conversationId][nonce];
    slot = std::max(slot, expiresAt);
}

std::size_t ReplayCache::evict(std::int64_t now) {
    std::lock_guard lock(mutex_);
    std::size_t removed = 0;
    for (auto& [_, nonces] : entries_) {
        removed += std::erase_if(nonces, [now](const auto& kv) { return kv.second < now; });
    }
    return removed;
}

std::size_t ReplayCache::size() const {
    std::lock_guard lock(mutex_);
    std::size_t n = 0;
    for (const auto& [_, nonces] : entries_) n += nonces.size();
    return n;
}

Pipeline::Pipeline(PipelineConfig config, Store& store, Outbound& outbound, Clock& clock,
                   crypto::RandomSource& rng)
    : config_(std::move(config)),
      store_(store),
      outbound_(outbound),
      clock_(clock),
      rng_(rng),
      keys_(config_.maxRetainedKeys, [this](const VersionedKeyRing& ring) { store_.putKeyRing(ring); }) {
    for (auto& ring : store_.listKeyRings()) {
        keys_.load(std::move(ring));
    }
}

Pipeline::~Pipeline() = default;

Pipeline::Conversation& Pipeline::conversation(const std::string& conversationId) const {
    if (!keys_.contains(conversationId)) {
        throw Error(Errc::not_found, "unknown conversation " + conversationId);
    }
    std::lock_guard lock(conversationsMutex_);
    auto& slot = conversations_[conversationId];
    if (!slot) slot = std::make_unique<Conversation>();
    return *slot;
}

Endpoint Pipeline::peerEndpoint(const std::string& conversationId) const {
    auto c = store_.getContact(conversationId);
    if (!c) throw Error(Errc::not_found, "no contact for conversation " + conversationId);
    return c->endpoint;
}

std::string Pipeline::newMessageId() {
    std::array<std::uint8_t, 16> raw{};
    rng_.fill(raw);
    std::string hex = hexEncode(raw);
    return hex.substr(0, 8) + "-" + hex.substr(8, 4) + "-" + hex.substr(12, 4) + "-" + hex.substr(16, 4) + "-" +
           hex.substr(20, 12);
}

void Pipeline::setStageObserver(StageObserver observer) {
    std::lock_guard lock(observerMutex_);
    observer_ = std::move(observer);
}

void Pipeline::stage(const Envelope& env, Stage s) const {
    std::lock_guard lock(observerMutex_);
    if (observer_) {
        observer_(StageEvent{env.conversationId, hexEncode(env.nonce.view()), env.type, s, std::chrono::steady_clock::now()});
    }
}

void Pipeline::notify(NotificationEvent event) { notifications_.publish(event); }

void Pipeline::notifyRotation(const std::string& conversationId, std::string state) {
    NotificationEvent ev{conversationId, NotificationKind::rotation_state, clock_.nowMs(), std::move(state), 0, {}};
    ev.keyVersion = keys_.activeVersion(conversationId);
    notify(std::move(ev));
}

void Pipeline::publishConnectionState(const ConnectionState& state) {
    notify(NotificationEvent{"", NotificationKind::connection_state, clock_.nowMs(),
                             std::string(connStateName(state.value)), 0, {}});
}

Contact Pipeline::addContact(const std::string& displayName, const Endpoint& peer,
                             const crypto::SymmetricKey& importedKey) {
    // re-parse so hand-built endpoints get the same strict validation
    Endpoint checked = Endpoint::parse(peer.address, peer.port);
    if (checked == config_.identity.endpoint) {
        throw Error(Errc::validation, "contact endpoint equals the local endpoint");
    }
    if (importedKey.role() != crypto::KeyRole::conversation) {
        throw Error(Errc::precondition, "imported key must be a conversation key");
    }
    const std::string id = conversationId(config_.identity.endpoint, checked);
    for (const auto& c : store_.getContacts()) {
        if (c.endpoint == checked || c.conversationId == id) {
            throw Error(Errc::duplicate, "contact already exists for " + checked.display());
        }
    }
    if (keys_.contains(id)) {
        throw Error(Errc::duplicate, "keyring already exists for " + id);
    }
    const auto now = clock_.nowMs();
    Contact contact{id, displayName, checked, now};
    keys_.installKey(id, importedKey, 1, KeySource::initial);
    store_.putContact(contact);
    store_.putConversationMeta(ConversationMeta{id, now, config_.defaultTtlMs});
    return contact;
}

void Pipeline::replaceContactKey(const std::string& conversationId, const crypto::SymmetricKey& key) {
    auto& conv = conversation(conversationId);
    {
        std::lock_guard lock(conv.mutex);
        if (conv.rotation) conv.rotation->abandon();
        keys_.installKey(conversationId, key, keys_.activeVersion(conversationId) + 1, KeySource::out_of_band);
    }
    auto t = keys_.trust(conversationId);
    notify(NotificationEvent{conversationId, NotificationKind::trust_state, clock_.nowMs(),
                             std::string(trustStatusName(t.status)), keys_.activeVersion(conversationId), {}});
}

std::vector<Contact> Pipeline::contacts() const { return store_.getContacts(); }

std::optional<Contact> Pipeline::contact(const std::string& conversationId) const {
    return store_.getContact(conversationId);
}

crypto::Fingerprint Pipeline::getFingerprint(const std::string& conversationId) const {
    return crypto::fingerprint(keys_.activeKey(conversationId));
}

TrustState Pipeline::trust(const std::string& conversationId) const { return keys_.trust(conversationId); }

void Pipeline::setVerified(const std::string& conversationId) {
    keys_.markVerified(conversationId);
    notify(NotificationEvent{conversationId, NotificationKind::trust_state, clock_.nowMs(),
                             std::string(trustStatusName(TrustStatus::verified)),
                             keys_.activeVersion(conversationId), {}});
}

std::uint32_t Pipeline::activeKeyVersion(const std::string& conversationId) const {
    return keys_.activeVersion(conversationId);
}

Envelope Pipeline::sealLocked(const std::string& conversationId, MsgType type, ByteView payload,
                              std::int64_t ttlMs, std::uint32_t version, const crypto::SymmetricKey& key) {
    Envelope env;
    env.conversationId = conversationId;
    env.senderName = config_.identity.displayName;
    env.timestamp = clock_.nowMs();
    env.ttl = ttlMs;
    env.type = type;
    env.keyVersion = version;
    env.nonce = crypto::generateNonce(rng_);
    const auto messageKey = crypto::deriveMessageKey(key, env.nonce);
    const Bytes aad = aeadAssociatedData(env.conversationId, env.senderName, env.type, env.timestamp);
    env.ciphertext = crypto::aeadEncrypt(messageKey, env.nonce, payload, aad);
    Bytes mac = crypto::hmacSign(crypto::deriveHmacKey(key), hmacInput(env));
    std::copy(mac.begin(), mac.end(), env.hmac.begin());
    return env;
}

Envelope Pipeline::sealEnvelope(const std::string& conversationId, MsgType type, ByteView payload,
                                std::int64_t ttlMs) {
    auto& conv = conversation(conversationId);
    std::lock_guard lock(conv.mutex);
    return sealLocked(conversationId, type, payload, ttlMs, keys_.activeVersion(conversationId),
                      keys_.activeKey(conversationId));
}

SendResult Pipeline::sendMessage(const std::string& conversationId, std::string_view plaintext,
                                 std::int64_t ttlMs) {
    if (plaintext.empty()) throw Error(Errc::precondition, "message must not be empty");
    if (ttlMs <= 0) throw Error(Errc::precondition, "ttl must be positive");
    auto& conv = conversation(conversationId);
    const Endpoint peer = peerEndpoint(conversationId);

    MessageRecord rec;
    Envelope env;
    {
        std::lock_guard lock(conv.mutex);
        const auto version = keys_.activeVersion(conversationId);
        env = sealLocked(conversationId, MsgType::message, asBytes(plaintext), ttlMs, version,
                         keys_.activeKey(conversationId));
        rec.id = newMessageId();
        rec.conversationId = conversationId;
        rec.direction = Direction::sent;
        rec.senderName = env.senderName;
        rec.ciphertext = env.ciphertext;
        rec.nonce = env.nonce;
        rec.hmac = env.hmac;
        rec.keyVersion = env.keyVersion;
        rec.timestamp = env.timestamp;
        rec.ttl = env.ttl;
        rec.expiresAt = env.timestamp + env.ttl;
        rec.deliveryStatus = DeliveryStatus::pending;
        store_.putMessage(rec);
        // our own nonces count as seen, so a reflected envelope is a replay
        replay_.remember(conversationId, env.nonce, rec.expiresAt);
        auto meta = store_.getConversationMeta(conversationId);
        meta.lastActivity = env.timestamp;
        store_.putConversationMeta(meta);
    }

    DeliveryResult delivery = outbound_.deliver(peer, env);
    rec.deliveryStatus = delivery.delivered ? DeliveryStatus::delivered : DeliveryStatus::failed;
    if (store_.getMessage(rec.id)) {
        store_.setDeliveryStatus(rec.id, rec.deliveryStatus);
    }
    return SendResult{std::move(rec), std::move(delivery)};
}

ReceiveResult Pipeline::receiveEnvelope(const Envelope& env) {
    ReceiveResult result;
    auto reject = [&](RejectReason reason, std::string detail) {
        result.kind = ReceiveResult::Kind::rejected;
        result.type = env.type;
        result.rejection = Rejection{reason, std::move(detail)};
        return result;
    };

    stage(env, Stage::resolve);
    if (!keys_.contains(env.conversationId) || !store_.getContact(env.conversationId)) {
        return reject(RejectReason::unknown_conversation, env.conversationId);
    }
    auto& conv = conversation(env.conversationId);
    std::optional<Envelope> reply;
    std::vector<NotificationEvent> events;
    {
        std::lock_guard lock(conv.mutex);

        stage(env, Stage::replay_check);
        if (replay_.contains(env.conversationId, env.nonce)) {
            return reject(RejectReason::replay, "nonce already seen");
        }
        const auto now = clock_.nowMs();
        if (env.timestamp + env.ttl < now) {
            return reject(RejectReason::expired, "envelope expired before arrival");
        }

        std::optional<crypto::SymmetricKey> key;
        bool lateActivation = false;
        try {
            key = keys_.getKey(env.conversationId, env.keyVersion);
        } catch (const Error&) {
            std::optional<std::pair<std::uint32_t, crypto::SymmetricKey>> late;
            if (conv.rotation) late = conv.rotation->lateCandidate();
            if (late && late->first == env.keyVersion &&
                env.keyVersion == keys_.activeVersion(env.conversationId) + 1) {
                key = late->second;
                lateActivation = true;
            } else {
                return reject(RejectReason::unknown_key_version, "key version " + std::to_string(env.keyVersion));
            }
        }

        stage(env, Stage::hmac_verify);
        if (!crypto::hmacVerify(crypto::deriveHmacKey(*key), hmacInput(env), env.hmac)) {
            stage(env, Stage::hmac_fail);
            return reject(RejectReason::auth_failure, "envelope HMAC mismatch");
        }
        stage(env, Stage::hmac_ok);
        if (lateActivation) {
            // the peer is already on the version we confirmed
            conv.rotation->completeLate();
            events.push_back(NotificationEvent{env.conversationId, NotificationKind::rotation_state, now, "COMPLETED",
                                               env.keyVersion, {}});
        }

        stage(env, Stage::decrypt);
        crypto::SecureBuffer plaintext;
        try {
            const auto messageKey = crypto::deriveMessageKey(*key, env.nonce);
            const Bytes aad = aeadAssociatedData(env.conversationId, env.senderName, env.type, env.timestamp);
            plaintext = crypto::SecureBuffer(crypto::aeadDecrypt(messageKey, env.nonce, env.ciphertext, aad));
        } catch (const Error& e) {
            stage(env, Stage::decrypt_fail);
            return reject(RejectReason::decrypt_failure, e.what());
        }
        stage(env, Stage::decrypt_ok);
        replay_.remember(env.conversationId, env.nonce, env.timestamp + env.ttl);

        if (env.type == MsgType::message) {
            stage(env, Stage::persist);
            MessageRecord rec;
            rec.id = newMessageId();
            rec.conversationId = env.conversationId;
            rec.direction = Direction::received;
            rec.senderName = env.senderName;
            rec.ciphertext = env.ciphertext;
            rec.nonce = env.nonce;
            rec.hmac = env.hmac;
            rec.keyVersion = env.keyVersion;
            rec.timestamp = env.timestamp;
            rec.ttl = env.ttl;
            rec.expiresAt = env.timestamp + env.ttl;
            rec.deliveryStatus = DeliveryStatus::received;
            store_.putMessage(rec);
            auto meta = store_.getConversationMeta(env.conversationId);
            meta.lastActivity = std::max(meta.lastActivity, env.timestamp);
            store_.putConversationMeta(meta);
            stage(env, Stage::route);
            result.kind = ReceiveResult::Kind::message;
            result.type = env.type;
            events.push_back(NotificationEvent{env.conversationId, NotificationKind::message_received, now, "", 0,
                                               rec.id});
            result.record = std::move(rec);
        } else {
            stage(env, Stage::route);
            std::string note;
            reply = routeControl(conv, env, plaintext.view(), result, note);
            if (!note.empty()) {
                events.push_back(NotificationEvent{env.conversationId, NotificationKind::rotation_state, now, note,
                                                   keys_.activeVersion(env.conversationId), {}});
            }
        }
    }

    for (auto& ev : events) notify(std::move(ev));
    if (reply) {
        outbound_.deliver(peerEndpoint(env.conversationId), *reply);
    }
    return result;
}

std::optional<Envelope> Pipeline::routeControl(Conversation& conv, const Envelope& env, ByteView payload,
                                               ReceiveResult& result, std::string& rotationNote) {
    result.type = env.type;
    auto protocolReject = [&](std::string detail) {
        result.kind = ReceiveResult::Kind::rejected;
        result.rejection = Rejection{RejectReason::protocol, std::move(detail)};
        return std::nullopt;
    };

    const std::string& id = env.conversationId;
    const std::uint32_t active = keys_.activeVersion(id);
    if (env.keyVersion != active) {
        return protocolReject("rotation control must travel under the active key");
    }
    RotationPayload p;
    try {
        p = decodeRotationPayload(payload);
    } catch (const Error& e) {
        return protocolReject(e.what());
    }
    if (!conv.rotation) {
        const Endpoint peer = peerEndpoint(id);
        const bool localWins = config_.identity.endpoint.canonical() < peer.canonical();
        conv.rotation = std::make_unique<RotationMachine>(id, keys_, localWins, config_.rotationTimeoutMs, rng_);
    }
    auto& rot = *conv.rotation;
    const auto now = clock_.nowMs();
    const auto activeKey = keys_.activeKey(id);
    result.kind = ReceiveResult::Kind::control;

    try {
        switch (env.type) {
        case MsgType::rotation_request: {
            auto confirm = rot.onRequest(p, now);
            if (!confirm) return std::nullopt; // tie-break kept our own request
            rotationNote = "CONFIRM_SENT";
            return sealLocked(id, MsgType::rotation_confirm, encodeRotationPayload(*confirm),
                              config_.rotationTimeoutMs, active, activeKey);
        }
        case MsgType::rotation_confirm: {
            // ACTIVATE is authenticated under the key both sides still share
            auto activate = rot.onConfirm(p, now);
            rotationNote = "COMPLETED";
            return sealLocked(id, MsgType::rotation_activate, encodeRotationPayload(activate),
                              config_.rotationTimeoutMs, active, activeKey);
        }
        case MsgType::rotation_activate:
            rot.onActivate(p, now);
            rotationNote = "COMPLETED";
            return std::nullopt;
        case MsgType::message:
            break;
        }
    } catch (const Error& e) {
        if (e.code() == Errc::auth_failure) {
            rotationNote = "ABORTED";
            return std::nullopt;
        }
        return protocolReject(e.what());
    }
    return std::nullopt;
}

crypto::SecureBuffer Pipeline::decryptForDisplay(const MessageRecord& record) const {
    if (!keys_.contains(record.conversationId)) {
        throw Error(Errc::not_found, "unknown conversation " + record.conversationId);
    }
    std::optional<crypto::SymmetricKey> key;
    try {
        key = keys_.getKey(record.conversationId, record.keyVersion);
    } catch (const Error&) {
        throw Error(Errc::undecryptable_history,
                    "key version " + std::to_string(record.keyVersion) + " is no longer retained");
    }
    Envelope env;
    env.conversationId = record.conversationId;
    env.senderName = record.senderName;
    env.timestamp = record.timestamp;
    env.ttl = record.ttl;
    env.type = MsgType::message;
    env.keyVersion = record.keyVersion;
    env.nonce = record.nonce;
    env.ciphertext = record.ciphertext;
    env.hmac = record.hmac;
    if (!crypto::hmacVerify(crypto::deriveHmacKey(*key), hmacInput(env), env.hmac)) {
        throw Error(Errc::integrity, "stored record failed HMAC verification");
    }
    try {
        const auto messageKey = crypto::deriveMessageKey(*key, env.nonce);
        const Bytes aad = aeadAssociatedData(env.conversationId, env.senderName, env.type, env.timestamp);
        return crypto::SecureBuffer(crypto::aeadDecrypt(messageKey, env.nonce, env.ciphertext, aad));
    } catch (const Error&) {
        throw Error(Errc::integrity, "stored record failed authenticated decryption");
    }
}

crypto::SecureBuffer Pipeline::decryptForDisplay(const std::string& messageId) const {
    auto rec = store_.getMessage(messageId);
    if (!rec) throw Error(Errc::not_found, "unknown message " + messageId);
    return decryptForDisplay(*rec);
}

std::vector<ConversationMeta> Pipeline::listConversationMeta() const { return store_.listConversationMeta(); }

std::vector<MessageRecord> Pipeline::listMessages(const std::string& conversationId, std::size_t limit) const {
    return store_.queryMessages(conversationId, limit);
}

Envelope Pipeline::startRotation(const std::string& conversationId) {
    auto& conv = conversation(conversationId);
    const Endpoint peer = peerEndpoint(conversationId);
    Envelope env;
    {
        std::lock_guard lock(conv.mutex);
        if (!conv.rotation) {
            const bool localWins = config_.identity.endpoint.canonical() < peer.canonical();
            conv.rotation = std::make_unique<RotationMachine>(conversationId, keys_, localWins,
                                                              config_.rotationTimeoutMs, rng_);
        }
        auto payload = conv.rotation->initiate(clock_.nowMs());
        env = sealLocked(conversationId, MsgType::rotation_request, encodeRotationPayload(payload),
                         config_.rotationTimeoutMs, keys_.activeVersion(conversationId),
                         keys_.activeKey(conversationId));
        replay_.remember(conversationId, env.nonce, env.timestamp + env.ttl);
    }
    notifyRotation(conversationId, "REQUEST_SENT");

    auto delivery = outbound_.deliver(peer, env);
    if (!delivery.delivered) {
        {
            std::lock_guard lock(conv.mutex);
            if (conv.rotation->state().phase == RotationPhase::request_sent) conv.rotation->abandon();
        }
        notifyRotation(conversationId, "FAILED");
        throw Error(Errc::delivery_failure, "rotation request not delivered: " + delivery.detail);
    }
    return env;
}

RotationState Pipeline::rotationState(const std::string& conversationId) const {
    auto& conv = conversation(conversationId);
    std::lock_guard lock(conv.mutex);
    if (!conv.rotation) {
        RotationState s;
        s.conversationId = conversationId;
        s.timeoutMs = config_.rotationTimeoutMs;
        return s;
    }
    return conv.rotation->state();
}

void Pipeline::tickRotations(std::int64_t now) {
    std::vector<std::string> ids;
    {
        std::lock_guard lock(conversationsMutex_);
        for (const auto& [id, _] : conversations_) ids.push_back(id);
    }
    for (const auto& id : ids) {
        auto& conv = conversation(id);
        bool timedOut = false;
        {
            std::lock_guard lock(conv.mutex);
            timedOut = conv.rotation && conv.rotation->tick(now);
        }
        if (timedOut) notifyRotation(id, "TIMEOUT");
    }
}

std::size_t Pipeline::sweep(std::int64_t now) {
    tickRotations(now);
    replay_.evict(now);
    return store_.sweepExpired(now);
}

} // namespace ember
