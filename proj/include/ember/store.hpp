#pragma once

// Encrypted single-file store. Every row (contact, conversation metadata,
// message record, keyring) is serialized and sealed with AES-256-GCM under a
// record key derived from the master key; the container is an append-only
// log that is compacted by atomic rewrite.
//
// File layout (all integers big-endian):
//   "EMBR" | u16 formatVersion | u16 flags | salt[16]
//   check: nonce[12] | AEAD("ember-store-check")[33]
//   record*: u32 length | nonce[12] | AEAD(row JSON)
// Record AAD is "EMBR/rec" || u64 sequence number, so records cannot be
// reordered or spliced between files.

#include "ember/crypto.hpp"
#include "ember/envelope.hpp"
#include "ember/keystore.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace ember {

inline constexpr std::int64_t kDefaultTtlMs = 300'000;

struct Contact {
    std::string conversationId;
    std::string displayName;
    Endpoint endpoint;
    std::int64_t createdAt = 0;

    bool operator==(const Contact&) const = default;
};

struct ConversationMeta {
    std::string conversationId;
    std::int64_t lastActivity = 0;
    std::int64_t defaultTtl = kDefaultTtlMs;

    bool operator==(const ConversationMeta&) const = default;
};

enum class Direction { sent, received };
enum class DeliveryStatus { received, pending, delivered, failed };

std::string_view directionName(Direction d);
std::string_view deliveryStatusName(DeliveryStatus s);

/// Ciphertext-only message row. There is deliberately no plaintext member.
struct MessageRecord {
    std::string id;
    std::string conversationId;
    Direction direction = Direction::received;
    std::string senderName;
    Bytes ciphertext;
    crypto::Nonce nonce;
    std::array<std::uint8_t, crypto::kMacSize> hmac{};
    std::uint32_t keyVersion = 1;
    std::int64_t timestamp = 0;
    std::int64_t ttl = 0;
    std::int64_t expiresAt = 0;
    DeliveryStatus deliveryStatus = DeliveryStatus::received;

    bool operator==(const MessageRecord&) const = default;
};

struct StoreOptions {
    bool durable = true; // fdatasync after every record
    std::size_t compactionThreshold = 256;
};

class Store {
public:
    static constexpr std::uint16_t kFormatVersion = 1;
    static constexpr std::size_t kSaltSize = 16;

    /// Creates the file if absent. Throws Errc::auth_failure on a wrong key
    /// (file untouched), Errc::refused on a newer format, Errc::integrity on
    /// corruption before the tail.
    static std::unique_ptr<Store> open(const std::filesystem::path& path, const crypto::SymmetricKey& masterKey,
                                       StoreOptions options = {});

    /// Stretches a passphrase into a master key with HKDF over a stored salt.
    static crypto::SymmetricKey deriveMasterKey(std::string_view passphrase, ByteView salt);

    ~Store();
    Store(const Store&) = delete;
    Store& operator=(const Store&) = delete;

    void close();
    bool isOpen() const;
    const std::filesystem::path& path() const { return path_; }

    void putMessage(const MessageRecord& rec);
    std::vector<MessageRecord> queryMessages(const std::string& conversationId, std::size_t limit) const;
    std::optional<MessageRecord> getMessage(const std::string& id) const;
    void deleteMessage(const std::string& id);
    void setDeliveryStatus(const std::string& id, DeliveryStatus status);
    std::size_t messageCount() const;

    /// Removes every record with expiresAt < now. Returns the number removed.
    std::size_t sweepExpired(std::int64_t now);

    void putContact(const Contact& contact);
    std::vector<Contact> getContacts() const;
    std::optional<Contact> getContact(const std::string& conversationId) const;

    void putConversationMeta(const ConversationMeta& meta);
    ConversationMeta getConversationMeta(const std::string& conversationId) const;
    std::vector<ConversationMeta> listConversationMeta() const;

    void putKeyRing(const VersionedKeyRing& ring);
    VersionedKeyRing getKeyRing(const std::string& conversationId) const;
    std::vector<VersionedKeyRing> listKeyRings() const;

    /// Rewrites the log with live rows only (atomic rename).
    void compact();

private:
    Store(std::filesystem::path path, Bytes header, crypto::SymmetricKey recordKey, StoreOptions options);

    void requireOpen() const;
    void appendRow(const std::string& op, const std::string& kind, const std::string& key, const std::string& data);
    void apply(const std::string& op, const std::string& kind, const std::string& key, const std::string& data);
    Bytes sealRow(std::uint64_t seq, const std::string& plaintext) const;
    void maybeCompact();
    void compactLocked();

    static std::unique_ptr<Store> create(const std::filesystem::path& path, const crypto::SymmetricKey& masterKey,
                                         StoreOptions options);

    std::filesystem::path path_;
    Bytes header_;
    crypto::SymmetricKey recordKey_;
    StoreOptions options_;
    int fd_ = -1;
    std::uint64_t nextSeq_ = 0;
    std::size_t garbage_ = 0;

    mutable std::mutex mutex_;
    std::map<std::string, Contact> contacts_;
    std::map<std::string, ConversationMeta> conversations_;
    std::map<std::string, MessageRecord> messages_;
    std::map<std::string, std::uint64_t> messageOrder_;
    std::map<std::string, VersionedKeyRing> keyrings_;
};

} // namespace ember
