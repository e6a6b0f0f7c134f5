#pragma once

// In-process adversarial harness: two pipelines joined by a frame-level
// proxy that can tamper, replay, drop, reorder, truncate or inject frames.
// Everything runs on the calling thread in a fixed order, so a (plan, seed,
// script) triple always produces the same capture.
//
// Fixture text format (one directive per line, '#' starts a comment):
//
//   seed 42
//   ttl 300000
//   fault pass
//   fault tamper <frame> <byteOffset> <bit> [ciphertext|nonce|hmac|raw]
//   fault replay <frame>
//   fault drop <frame>
//   fault reorder <i> <j>
//   fault oversize <declaredLength>
//   fault truncate <frame> <keepBytes>
//   script A send <text to end of line>
//   script B rotate
//   script A sweep
//   script * advance <ms>
//
// Frame indices count genuine frames handed to the proxy, from 0, across
// both directions.

#include "ember/pipeline.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

namespace ember::harness {

enum class TamperTarget { ciphertext, nonce, hmac, raw };

std::string_view tamperTargetName(TamperTarget t);

struct PassThrough {
    bool operator==(const PassThrough&) const = default;
};
struct TamperBit {
    std::size_t frameIndex = 0;
    std::size_t byteOffset = 0;
    unsigned bitIndex = 0;
    TamperTarget target = TamperTarget::ciphertext;
    bool operator==(const TamperBit&) const = default;
};
struct Replay {
    std::size_t frameIndex = 0;
    bool operator==(const Replay&) const = default;
};
struct Drop {
    std::size_t frameIndex = 0;
    bool operator==(const Drop&) const = default;
};
struct Reorder {
    std::size_t first = 0;
    std::size_t second = 0;
    bool operator==(const Reorder&) const = default;
};
struct OversizeLength {
    std::uint32_t declaredLength = 0;
    bool operator==(const OversizeLength&) const = default;
};
struct Truncate {
    std::size_t frameIndex = 0;
    std::size_t keepBytes = 0;
    bool operator==(const Truncate&) const = default;
};

using FaultAction = std::variant<PassThrough, TamperBit, Replay, Drop, Reorder, OversizeLength, Truncate>;

struct FaultPlan {
    std::vector<FaultAction> actions;
    std::uint64_t seed = 1;

    /// Throws Errc::validation (e.g. reorder with i >= j, bit index > 7).
    void validate() const;
    bool operator==(const FaultPlan&) const = default;
};

enum class PeerId { A, B };

std::string_view peerName(PeerId p);

struct ScriptStep {
    enum class Kind { send, rotate, sweep, advance };
    Kind kind = Kind::send;
    PeerId peer = PeerId::A;
    std::string text;        // send
    std::int64_t millis = 0; // advance
    bool operator==(const ScriptStep&) const = default;
};

using Script = std::vector<ScriptStep>;

/// Builds an alternating A/B exchange of `count` messages.
Script alternatingExchange(std::size_t count, std::string_view prefix = "message");

struct Fixture {
    FaultPlan plan;
    Script script;
    std::int64_t ttlMs = kDefaultTtlMs;
    bool operator==(const Fixture&) const = default;
};

/// Throws Errc::parse_error with the offending line number.
Fixture parseFixture(std::string_view text);
std::string serializeFixture(const Fixture& fixture);

struct CapturedFrame {
    std::size_t index = 0; // genuine frame index, or SIZE_MAX for injected/replayed copies
    PeerId from = PeerId::A;
    Bytes bytes;           // exactly what the receiver was handed
    std::string note;      // fault applied, empty for a clean pass
};

struct CaptureLog {
    std::vector<CapturedFrame> frames;
    std::map<PeerId, std::vector<StageEvent>> stages;
};

/// Sum of byte-subsequence occurrences of every probe across all frames.
std::size_t searchCapture(const CaptureLog& log, const std::vector<std::string>& probes);

struct PeerOutcome {
    std::vector<std::string> displayed; // decrypted received messages, in arrival order
    std::size_t accepted = 0;           // MESSAGE envelopes accepted
    std::size_t controlAccepted = 0;
    std::size_t persistedMessages = 0;  // store rows at end of run
    std::uint32_t activeVersion = 0;
    std::map<std::string, std::size_t> rejections; // reason name -> count
    std::map<std::string, std::size_t> frameErrors; // deframe/decode error category -> count
    std::vector<std::string> rotationEvents;
};

struct ScenarioReport {
    std::map<PeerId, PeerOutcome> peers;
    std::size_t sent = 0;      // MESSAGE sends issued by the script
    std::size_t delivered = 0; // MESSAGE envelopes accepted by the receiving peer
    std::size_t hmacAttempts = 0;
    std::size_t hmacPassed = 0;
    std::size_t decryptCalls = 0;
    std::size_t decryptOnAuthFailurePaths = 0; // must stay 0
    std::size_t verifyAfterDecrypt = 0;        // accepted envelopes whose decrypt preceded verify; must stay 0
    std::vector<std::string> sentTexts;
    std::vector<std::string> stepErrors; // script steps that threw, with error category
    bool timedOut = false;
    CaptureLog capture;
    std::map<PeerId, std::filesystem::path> storePaths;
    std::string conversationId;

    std::size_t totalRejections(std::string_view reason) const;
};

struct ScenarioOptions {
    /// Store files are kept here when set; otherwise a temporary directory is
    /// created and removed after the run.
    std::optional<std::filesystem::path> workDir;
    std::size_t maxFrames = 100'000;
    std::size_t maxEnvelopeBytes = kDefaultMaxEnvelopeBytes;
    bool durableStore = false;
};

ScenarioReport runScenario(const FaultPlan& plan, const Script& script, std::int64_t ttlMs = kDefaultTtlMs,
                           const ScenarioOptions& options = {});
inline ScenarioReport runScenario(const Fixture& fixture, const ScenarioOptions& options = {}) {
    return runScenario(fixture.plan, fixture.script, fixture.ttlMs, options);
}

} // namespace ember::harness
