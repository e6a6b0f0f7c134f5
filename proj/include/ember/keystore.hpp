#pragma once

#include "ember/crypto.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace ember {

inline constexpr std::size_t kDefaultMaxRetainedKeys = 5;

enum class TrustStatus { unverified, verified, changed };

std::string_view trustStatusName(TrustStatus status);
std::optional<TrustStatus> trustStatusFromName(std::string_view name);

struct TrustState {
    std::string conversationId;
    crypto::Fingerprint firstSeenFingerprint{""};
    crypto::Fingerprint currentFingerprint{""};
    TrustStatus status = TrustStatus::unverified;

    bool operator==(const TrustState&) const = default;
};

/// Retained conversation-key versions. Versions are consecutive and end at
/// activeVersion; the lowest versions are evicted past maxRetained.
struct VersionedKeyRing {
    std::string conversationId;
    std::map<std::uint32_t, crypto::SymmetricKey> entries;
    std::uint32_t activeVersion = 0;
    std::size_t maxRetained = kDefaultMaxRetainedKeys;
    std::optional<TrustState> trust;

    const crypto::SymmetricKey& activeKey() const { return entries.at(activeVersion); }
    bool operator==(const VersionedKeyRing&) const = default;
};

/// Why a key is being installed. Only an out-of-band replacement of an
/// existing ring marks trust as CHANGED.
enum class KeySource { initial, rotation, out_of_band };

class KeyStore {
public:
    /// Called with the updated ring after every mutation, while the store lock is held.
    using PersistHook = std::function<void(const VersionedKeyRing&)>;

    explicit KeyStore(std::size_t maxRetained = kDefaultMaxRetainedKeys, PersistHook persist = {});

    /// Restores a ring loaded from persistence.
    void load(VersionedKeyRing ring);

    /// version must be activeVersion + 1, or 1 on an empty ring. Throws Errc::precondition on a gap or regression.
    void installKey(const std::string& conversationId, const crypto::SymmetricKey& key, std::uint32_t version,
                    KeySource source = KeySource::initial);

    /// Throws Errc::not_found for an unknown conversation or evicted/unknown version.
    crypto::SymmetricKey getKey(const std::string& conversationId, std::uint32_t version) const;
    crypto::SymmetricKey activeKey(const std::string& conversationId) const;
    std::uint32_t activeVersion(const std::string& conversationId) const;
    bool contains(const std::string& conversationId) const;
    /// True when the version was once installed but has since been evicted.
    bool wasEvicted(const std::string& conversationId, std::uint32_t version) const;

    std::vector<std::uint32_t> retainedVersions(const std::string& conversationId) const;
    VersionedKeyRing snapshot(const std::string& conversationId) const;

    void markVerified(const std::string& conversationId);
    TrustState observeFingerprint(const std::string& conversationId, const crypto::Fingerprint& fp);
    TrustState trust(const std::string& conversationId) const;

private:
    VersionedKeyRing& ringFor(const std::string& conversationId);
    const VersionedKeyRing& ringFor(const std::string& conversationId) const;
    void persist(const VersionedKeyRing& ring);

    mutable std::mutex mutex_;
    std::size_t maxRetained_;
    PersistHook persist_;
    std::map<std::string, VersionedKeyRing> rings_;
};

} // namespace ember
