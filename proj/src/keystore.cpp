#include "ember/keystore.hpp"

#include "ember/error.hpp"

namespace ember {

std::string_view trustStatusName(TrustStatus status) {
    switch (status) {
    case TrustStatus::unverified: return "UNVERIFIED";
    case TrustStatus::verified: return "VERIFIED";
    case TrustStatus::changed: return "CHANGED";
    }
    return "UNVERIFIED";
}

std::optional<TrustStatus> trustStatusFromName(std::string_view name) {
    for (auto s : {TrustStatus::unverified, TrustStatus::verified, TrustStatus::changed}) {
        if (trustStatusName(s) == name) return s;
    }
    return std::nullopt;
}

KeyStore::KeyStore(std::size_t maxRetained, PersistHook persist)
    : maxRetained_(maxRetained), persist_(std::move(persist)) {
    if (maxRetained_ == 0) {
        throw Error(Errc::precondition, "maxRetained must be at least 1");
    }
}

void KeyStore::load(VersionedKeyRing ring) {
    if (ring.entries.empty() || !ring.entries.contains(ring.activeVersion)) {
        throw Error(Errc::integrity, "keyring for " + ring.conversationId + " has no active key");
    }
    std::lock_guard lock(mutex_);
    rings_.insert_or_assign(ring.conversationId, std::move(ring));
}

void KeyStore::installKey(const std::string& conversationId, const crypto::SymmetricKey& key,
                          std::uint32_t version, KeySource source) {
    if (key.role() != crypto::KeyRole::conversation) {
        throw Error(Errc::precondition, "only conversation keys are stored");
    }
    std::lock_guard lock(mutex_);
    auto it = rings_.find(conversationId);
    if (it == rings_.end()) {
        if (version != 1) {
            throw Error(Errc::precondition, "first key version must be 1");
        }
        VersionedKeyRing ring;
        ring.conversationId = conversationId;
        ring.maxRetained = maxRetained_;
        it = rings_.emplace(conversationId, std::move(ring)).first;
    } else if (version != it->second.activeVersion + 1) {
        throw Error(Errc::precondition, "key version " + std::to_string(version) + " does not follow active version " +
                                            std::to_string(it->second.activeVersion));
    }

    VersionedKeyRing& ring = it->second;
    ring.entries.insert_or_assign(version, key);
    ring.activeVersion = version;
    while (ring.entries.size() > ring.maxRetained) {
        ring.entries.erase(ring.entries.begin());
    }

    auto fp = crypto::fingerprint(key);
    if (!ring.trust) {
        ring.trust = TrustState{conversationId, fp, fp, TrustStatus::unverified};
    } else if (source == KeySource::out_of_band) {
        if (!(fp == ring.trust->currentFingerprint)) {
            ring.trust->status = TrustStatus::changed;
        }
        ring.trust->currentFingerprint = fp;
    } else {
        // rotation-derived keys inherit the lineage's trust
        ring.trust->currentFingerprint = fp;
    }
    persist(ring);
}

crypto::SymmetricKey KeyStore::getKey(const std::string& conversationId, std::uint32_t version) const {
    std::lock_guard lock(mutex_);
    const auto& ring = ringFor(conversationId);
    auto it = ring.entries.find(version);
    if (it == ring.entries.end()) {
        throw Error(Errc::not_found, "key version " + std::to_string(version) + " not retained");
    }
    return it->second;
}

crypto::SymmetricKey KeyStore::activeKey(const std::string& conversationId) const {
    std::lock_guard lock(mutex_);
    return ringFor(conversationId).activeKey();
}

std::uint32_t KeyStore::activeVersion(const std::string& conversationId) const {
    std::lock_guard lock(mutex_);
    return ringFor(conversationId).activeVersion;
}

bool KeyStore::contains(const std::string& conversationId) const {
    std::lock_guard lock(mutex_);
    return rings_.contains(conversationId);
}

bool KeyStore::wasEvicted(const std::string& conversationId, std::uint32_t version) const {
    std::lock_guard lock(mutex_);
    auto it = rings_.find(conversationId);
    if (it == rings_.end() || it->second.entries.empty()) return false;
    return version >= 1 && version < it->second.entries.begin()->first;
}

std::vector<std::uint32_t> KeyStore::retainedVersions(const std::string& conversationId) const {
    std::lock_guard lock(mutex_);
    std::vector<std::uint32_t> out;
    for (const auto& [v, _] : ringFor(conversationId).entries) out.push_back(v);
    return out;
}

VersionedKeyRing KeyStore::snapshot(const std::string& conversationId) const {
    std::lock_guard lock(mutex_);
    return ringFor(conversationId);
}

void KeyStore::markVerified(const std::string& conversationId) {
    std::lock_guard lock(mutex_);
    auto& ring = ringFor(conversationId);
    if (!ring.trust) throw Error(Errc::not_found, "no trust state for " + conversationId);
    ring.trust->status = TrustStatus::verified;
    persist(ring);
}

TrustState KeyStore::observeFingerprint(const std::string& conversationId, const crypto::Fingerprint& fp) {
    std::lock_guard lock(mutex_);
    auto& ring = ringFor(conversationId);
    if (!ring.trust) {
        ring.trust = TrustState{conversationId, fp, fp, TrustStatus::unverified};
        persist(ring);
    } else if (!(fp == ring.trust->currentFingerprint)) {
        ring.trust->currentFingerprint = fp;
        ring.trust->status = TrustStatus::changed;
        persist(ring);
    }
    return *ring.trust;
}

TrustState KeyStore::trust(const std::string& conversationId) const {
    std::lock_guard lock(mutex_);
    const auto& ring = ringFor(conversationId);
    if (!ring.trust) throw Error(Errc::not_found, "no trust state for " + conversationId);
    return *ring.trust;
}

VersionedKeyRing& KeyStore::ringFor(const std::string& conversationId) {
    auto it = rings_.find(conversationId);
    if (it == rings_.end()) throw Error(Errc::not_found, "unknown conversation " + conversationId);
    return it->second;
}

const VersionedKeyRing& KeyStore::ringFor(const std::string& conversationId) const {
    auto it = rings_.find(conversationId);
    if (it == rings_.end()) throw Error(Errc::not_found, "unknown conversation " + conversationId);
    return it->second;
}

void KeyStore::persist(const VersionedKeyRing& ring) {
    if (persist_) persist_(ring);
}

} // namespace ember
