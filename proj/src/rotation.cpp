#include "ember/rotation.hpp"

#include "ember/error.hpp"

#include <json.hpp>

namespace ember {

using json = nlohmann::json;

namespace {

Challenge challengeFromBase64(const json& j, const char* key) {
    if (!j.at(key).is_string()) throw Error(Errc::structural, std::string(key) + " must be a string");
    Bytes raw = base64Decode(j.at(key).get<std::string>());
    if (raw.size() != kChallengeSize) throw Error(Errc::structural, std::string(key) + " must be 32 bytes");
    Challenge c{};
    std::copy(raw.begin(), raw.end(), c.begin());
    return c;
}

} // namespace

std::string_view rotationPhaseName(RotationPhase phase) {
    switch (phase) {
    case RotationPhase::idle: return "IDLE";
    case RotationPhase::request_sent: return "REQUEST_SENT";
    case RotationPhase::confirm_sent: return "CONFIRM_SENT";
    case RotationPhase::aborted: return "ABORTED";
    }
    return "IDLE";
}

Bytes encodeRotationPayload(const RotationPayload& payload) {
    json j = {{"proposedVersion", payload.proposedVersion}};
    if (payload.challenge) j["challenge"] = base64Encode(*payload.challenge);
    if (payload.challengeResponse) j["challengeResponse"] = base64Encode(*payload.challengeResponse);
    return toBytes(j.dump());
}

RotationPayload decodeRotationPayload(ByteView bytes) {
    json j = json::parse(bytes.begin(), bytes.end(), nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("proposedVersion") ||
        !j.at("proposedVersion").is_number_unsigned()) {
        throw Error(Errc::structural, "malformed rotation payload");
    }
    RotationPayload p;
    try {
        p.proposedVersion = j.at("proposedVersion").get<std::uint32_t>();
        if (j.contains("challenge")) p.challenge = challengeFromBase64(j, "challenge");
        if (j.contains("challengeResponse")) p.challengeResponse = challengeFromBase64(j, "challengeResponse");
    } catch (const Error& e) {
        throw Error(Errc::structural, std::string("malformed rotation payload: ") + e.what());
    }
    return p;
}

RotationMachine::RotationMachine(std::string conversationId, KeyStore& keys, bool localWinsTies,
                                 std::int64_t timeoutMs, crypto::RandomSource& rng)
    : keys_(keys), localWinsTies_(localWinsTies), rng_(rng) {
    state_.conversationId = std::move(conversationId);
    state_.timeoutMs = timeoutMs;
}

void RotationMachine::reset() {
    state_.phase = RotationPhase::idle;
    state_.proposedVersion = 0;
    if (state_.challenge) crypto::secureWipe(*state_.challenge);
    state_.challenge.reset();
    state_.startedAt = 0;
    candidate_.reset();
}

Bytes RotationMachine::challengeResponse(const crypto::SymmetricKey& candidate, const Challenge& challenge) {
    return crypto::hmacSign(crypto::deriveHmacKey(candidate), challenge);
}

RotationPayload RotationMachine::initiate(std::int64_t now) {
    if (state_.phase == RotationPhase::request_sent || state_.phase == RotationPhase::confirm_sent) {
        throw Error(Errc::busy, "rotation already in flight for " + state_.conversationId);
    }
    reset();
    const std::uint32_t active = keys_.activeVersion(state_.conversationId);
    Challenge challenge{};
    rng_.fill(challenge);
    state_.phase = RotationPhase::request_sent;
    state_.proposedVersion = active + 1;
    state_.challenge = challenge;
    state_.startedAt = now;
    late_.reset();
    return RotationPayload{active + 1, challenge, std::nullopt};
}

std::optional<RotationPayload> RotationMachine::onRequest(const RotationPayload& request, std::int64_t now) {
    const std::uint32_t active = keys_.activeVersion(state_.conversationId);
    if (request.proposedVersion != active + 1) {
        throw Error(Errc::protocol, "rotation request proposes version " + std::to_string(request.proposedVersion) +
                                        " but active version is " + std::to_string(active));
    }
    if (!request.challenge) {
        throw Error(Errc::protocol, "rotation request without a challenge");
    }
    if (state_.phase == RotationPhase::request_sent) {
        if (localWinsTies_) return std::nullopt;
        reset(); // abandon our own request and answer theirs
    }
    if (state_.phase == RotationPhase::confirm_sent && state_.proposedVersion != request.proposedVersion) {
        throw Error(Errc::protocol, "rotation request for a different version while confirming");
    }

    auto candidate = crypto::deriveNextKey(keys_.activeKey(state_.conversationId), active, active + 1);
    Bytes response = challengeResponse(candidate, *request.challenge);
    Challenge responseArr{};
    std::copy(response.begin(), response.end(), responseArr.begin());

    state_.phase = RotationPhase::confirm_sent;
    state_.proposedVersion = active + 1;
    state_.challenge.reset();
    state_.startedAt = now;
    candidate_ = candidate;
    late_.reset();
    return RotationPayload{active + 1, std::nullopt, responseArr};
}

RotationPayload RotationMachine::onConfirm(const RotationPayload& confirm, std::int64_t now) {
    (void)now;
    if (state_.phase != RotationPhase::request_sent) {
        throw Error(Errc::protocol, "unexpected rotation confirm in phase " +
                                        std::string(rotationPhaseName(state_.phase)));
    }
    if (confirm.proposedVersion != state_.proposedVersion) {
        throw Error(Errc::protocol, "rotation confirm for version " + std::to_string(confirm.proposedVersion));
    }
    const std::uint32_t active = keys_.activeVersion(state_.conversationId);
    auto candidate = crypto::deriveNextKey(keys_.activeKey(state_.conversationId), active, state_.proposedVersion);
    const bool verified = confirm.challengeResponse &&
                          crypto::hmacVerify(crypto::deriveHmacKey(candidate), *state_.challenge,
                                             *confirm.challengeResponse);
    if (!verified) {
        reset();
        state_.phase = RotationPhase::aborted;
        throw Error(Errc::auth_failure, "rotation challenge response did not verify; rotation aborted");
    }
    const std::uint32_t version = state_.proposedVersion;
    keys_.installKey(state_.conversationId, candidate, version, KeySource::rotation);
    reset();
    return RotationPayload{version, std::nullopt, std::nullopt};
}

void RotationMachine::onActivate(const RotationPayload& activate, std::int64_t now) {
    (void)now;
    if (state_.phase != RotationPhase::confirm_sent || !candidate_) {
        throw Error(Errc::protocol, "unexpected rotation activate in phase " +
                                        std::string(rotationPhaseName(state_.phase)));
    }
    if (activate.proposedVersion != state_.proposedVersion) {
        throw Error(Errc::protocol, "rotation activate for version " + std::to_string(activate.proposedVersion));
    }
    keys_.installKey(state_.conversationId, *candidate_, state_.proposedVersion, KeySource::rotation);
    reset();
}

void RotationMachine::abandon() { reset(); }

bool RotationMachine::tick(std::int64_t now) {
    const bool inFlight =
        state_.phase == RotationPhase::request_sent || state_.phase == RotationPhase::confirm_sent;
    if (!inFlight || now - state_.startedAt < state_.timeoutMs) return false;
    if (state_.phase == RotationPhase::confirm_sent && candidate_) {
        late_.emplace(state_.proposedVersion, *candidate_);
    }
    reset();
    return true;
}

std::optional<std::pair<std::uint32_t, crypto::SymmetricKey>> RotationMachine::lateCandidate() const {
    if (state_.phase == RotationPhase::confirm_sent && candidate_) {
        return std::make_pair(state_.proposedVersion, *candidate_);
    }
    return late_;
}

void RotationMachine::completeLate() {
    auto pending = lateCandidate();
    if (!pending) throw Error(Errc::protocol, "no pending rotation candidate");
    if (pending->first != keys_.activeVersion(state_.conversationId) + 1) {
        late_.reset();
        throw Error(Errc::protocol, "stale rotation candidate");
    }
    keys_.installKey(state_.conversationId, pending->second, pending->first, KeySource::rotation);
    late_.reset();
    reset();
}

} // namespace ember
