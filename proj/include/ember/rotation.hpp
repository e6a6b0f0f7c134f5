#pragma once

// Three-stage key rotation (REQUEST -> CONFIRM -> ACTIVATE) for one
// conversation. The machine works on decrypted control payloads; the
// pipeline seals them into envelopes under the current active key.
//
//   initiator                          responder
//   initiate(): challenge c, v+1  -->  onRequest(): K' = next(K_v), not active
//                                 <--  response = HMAC(hmacKey(K'), c)
//   onConfirm(): derive K', verify
//     ok   -> install K', ACTIVATE -->  onActivate(): install K'
//     fail -> ABORTED, K_v stays active

#include "ember/crypto.hpp"
#include "ember/keystore.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>

namespace ember {

inline constexpr std::int64_t kDefaultRotationTimeoutMs = 30'000;
inline constexpr std::size_t kChallengeSize = 32;

using Challenge = std::array<std::uint8_t, kChallengeSize>;

enum class RotationPhase { idle, request_sent, confirm_sent, aborted };

std::string_view rotationPhaseName(RotationPhase phase);

struct RotationPayload {
    std::uint32_t proposedVersion = 0;
    std::optional<Challenge> challenge;         // REQUEST only
    std::optional<Challenge> challengeResponse; // CONFIRM only

    bool operator==(const RotationPayload&) const = default;
};

Bytes encodeRotationPayload(const RotationPayload& payload);
/// Throws Errc::structural on malformed input.
RotationPayload decodeRotationPayload(ByteView bytes);

struct RotationState {
    std::string conversationId;
    RotationPhase phase = RotationPhase::idle;
    std::uint32_t proposedVersion = 0;
    std::optional<Challenge> challenge;
    std::int64_t startedAt = 0;
    std::int64_t timeoutMs = kDefaultRotationTimeoutMs;
};

/// Outcome of onRequest when both peers initiated at once.
enum class RequestDisposition { respond, ignored_tie_break };

class RotationMachine {
public:
    /// localWinsTies: true when this peer's canonical endpoint sorts lower,
    /// so its own in-flight request survives a simultaneous initiation.
    RotationMachine(std::string conversationId, KeyStore& keys, bool localWinsTies,
                    std::int64_t timeoutMs = kDefaultRotationTimeoutMs,
                    crypto::RandomSource& rng = crypto::systemRandom());

    /// Allowed from IDLE or ABORTED. Throws Errc::busy while a rotation is in flight.
    RotationPayload initiate(std::int64_t now);

    /// Responder side. Returns the CONFIRM payload, or nullopt when the tie-break
    /// keeps our own request. Throws Errc::protocol on a non-successor version.
    std::optional<RotationPayload> onRequest(const RotationPayload& request, std::int64_t now);

    /// Initiator side. On a valid response installs K' and returns the ACTIVATE
    /// payload. On a bad response moves to ABORTED and throws Errc::auth_failure.
    /// Throws Errc::protocol when not awaiting a confirmation.
    RotationPayload onConfirm(const RotationPayload& confirm, std::int64_t now);

    /// Responder side. Installs K'. Throws Errc::protocol outside CONFIRM_SENT.
    void onActivate(const RotationPayload& activate, std::int64_t now);

    /// Drops an in-flight rotation without touching keys (e.g. the request could not be sent).
    void abandon();

    /// Applies the in-flight timeout. Returns true if a rotation was abandoned.
    bool tick(std::int64_t now);

    /// Candidate key the responder confirmed but never saw activated. Kept
    /// after a timeout so an envelope under the new version can finish the
    /// rotation once it authenticates under that candidate.
    std::optional<std::pair<std::uint32_t, crypto::SymmetricKey>> lateCandidate() const;
    void completeLate();

    const RotationState& state() const { return state_; }
    const std::string& conversationId() const { return state_.conversationId; }

    /// Challenge response for a candidate key: HMAC(deriveHmacKey(K'), challenge).
    static Bytes challengeResponse(const crypto::SymmetricKey& candidate, const Challenge& challenge);

private:
    void reset();

    RotationState state_;
    KeyStore& keys_;
    bool localWinsTies_;
    crypto::RandomSource& rng_;
    std::optional<crypto::SymmetricKey> candidate_;
    std::optional<std::pair<std::uint32_t, crypto::SymmetricKey>> late_;
};

} // namespace ember
