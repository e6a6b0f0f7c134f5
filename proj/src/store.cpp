#include "ember/store.hpp"

#include "ember/error.hpp"

#include <json.hpp>

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <fstream>

namespace ember {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::string_view kMagic = "EMBR";
constexpr std::string_view kCheckPlaintext = "ember-store-check";
constexpr std::string_view kRecordKeyLabel = "ember:v1:store-record";
constexpr std::string_view kMasterKeyLabel = "ember:v1:master";
constexpr std::size_t kHeaderPrefixSize = 4 + 2 + 2 + Store::kSaltSize;
constexpr std::size_t kCheckSize = crypto::kNonceSize + kCheckPlaintext.size() + crypto::kTagSize;
constexpr std::size_t kHeaderSize = kHeaderPrefixSize + kCheckSize;
// Upper bound on one sealed row; rows are small JSON documents.
constexpr std::uint32_t kMaxRecordBytes = 16 * 1024 * 1024;

[[noreturn]] void throwErrno(const std::string& what) {
    throw Error(Errc::io, what + ": " + std::strerror(errno));
}

void writeAll(int fd, ByteView data) {
    std::size_t done = 0;
    while (done < data.size()) {
        ssize_t n = ::write(fd, data.data() + done, data.size() - done);
        if (n < 0) {
            if (errno == EINTR) continue;
            throwErrno("store write");
        }
        done += static_cast<std::size_t>(n);
    }
}

void syncFd(int fd) {
    if (::fdatasync(fd) != 0) throwErrno("store fdatasync");
}

void syncDirectory(const fs::path& file) {
    fs::path dir = file.parent_path().empty() ? fs::path(".") : file.parent_path();
    int dfd = ::open(dir.c_str(), O_RDONLY | O_DIRECTORY | O_CLOEXEC);
    if (dfd >= 0) {
        ::fsync(dfd);
        ::close(dfd);
    }
}

Bytes readFile(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::io, "cannot read store file " + path.string());
    return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

crypto::SymmetricKey recordKeyFor(const crypto::SymmetricKey& masterKey, ByteView salt) {
    Bytes prk = crypto::hkdfExtract(salt, masterKey.bytes());
    Bytes okm = crypto::hkdfExpand(prk, asBytes(kRecordKeyLabel), crypto::kKeySize);
    crypto::SymmetricKey key(okm);
    crypto::secureWipe(prk);
    crypto::secureWipe(okm);
    return key;
}

Bytes recordAad(std::uint64_t seq) {
    Bytes aad = toBytes("EMBR/rec");
    appendU64(aad, seq);
    return aad;
}

std::string b64(ByteView b) { return base64Encode(b); }

json contactToJson(const Contact& c) {
    return {{"conversationId", c.conversationId},
            {"displayName", c.displayName},
            {"address", c.endpoint.address},
            {"port", c.endpoint.port},
            {"createdAt", c.createdAt}};
}

Contact contactFromJson(const json& j) {
    return Contact{j.at("conversationId").get<std::string>(), j.at("displayName").get<std::string>(),
                   Endpoint::parse(j.at("address").get<std::string>(), j.at("port").get<int>()),
                   j.at("createdAt").get<std::int64_t>()};
}

json metaToJson(const ConversationMeta& m) {
    return {{"conversationId", m.conversationId}, {"lastActivity", m.lastActivity}, {"defaultTtl", m.defaultTtl}};
}

ConversationMeta metaFromJson(const json& j) {
    return ConversationMeta{j.at("conversationId").get<std::string>(), j.at("lastActivity").get<std::int64_t>(),
                            j.at("defaultTtl").get<std::int64_t>()};
}

json messageToJson(const MessageRecord& r) {
    return {{"id", r.id},
            {"conversationId", r.conversationId},
            {"direction", directionName(r.direction)},
            {"senderName", r.senderName},
            {"ciphertext", b64(r.ciphertext)},
            {"nonce", b64(r.nonce.view())},
            {"hmac", b64(r.hmac)},
            {"keyVersion", r.keyVersion},
            {"timestamp", r.timestamp},
            {"ttl", r.ttl},
            {"expiresAt", r.expiresAt},
            {"deliveryStatus", deliveryStatusName(r.deliveryStatus)}};
}

MessageRecord messageFromJson(const json& j) {
    MessageRecord r;
    r.id = j.at("id").get<std::string>();
    r.conversationId = j.at("conversationId").get<std::string>();
    r.direction = j.at("direction").get<std::string>() == "SENT" ? Direction::sent : Direction::received;
    r.senderName = j.at("senderName").get<std::string>();
    r.ciphertext = base64Decode(j.at("ciphertext").get<std::string>());
    r.nonce = crypto::Nonce::fromBytes(base64Decode(j.at("nonce").get<std::string>()));
    Bytes mac = base64Decode(j.at("hmac").get<std::string>());
    if (mac.size() != r.hmac.size()) throw Error(Errc::integrity, "stored hmac has wrong length");
    std::copy(mac.begin(), mac.end(), r.hmac.begin());
    r.keyVersion = j.at("keyVersion").get<std::uint32_t>();
    r.timestamp = j.at("timestamp").get<std::int64_t>();
    r.ttl = j.at("ttl").get<std::int64_t>();
    r.expiresAt = j.at("expiresAt").get<std::int64_t>();
    const auto status = j.at("deliveryStatus").get<std::string>();
    r.deliveryStatus = DeliveryStatus::received;
    for (auto s : {DeliveryStatus::received, DeliveryStatus::pending, DeliveryStatus::delivered,
                   DeliveryStatus::failed}) {
        if (deliveryStatusName(s) == status) r.deliveryStatus = s;
    }
    return r;
}

json keyringToJson(const VersionedKeyRing& ring) {
    json entries = json::object();
    for (const auto& [version, key] : ring.entries) {
        if (key.role() != crypto::KeyRole::conversation) {
            throw Error(Errc::precondition, "refusing to persist a non-conversation key");
        }
        entries[std::to_string(version)] = b64(key.bytes());
    }
    json j = {{"conversationId", ring.conversationId},
              {"activeVersion", ring.activeVersion},
              {"maxRetained", ring.maxRetained},
              {"entries", entries}};
    if (ring.trust) {
        j["trust"] = {{"firstSeen", ring.trust->firstSeenFingerprint.display()},
                      {"current", ring.trust->currentFingerprint.display()},
                      {"status", trustStatusName(ring.trust->status)}};
    }
    return j;
}

VersionedKeyRing keyringFromJson(const json& j) {
    VersionedKeyRing ring;
    ring.conversationId = j.at("conversationId").get<std::string>();
    ring.activeVersion = j.at("activeVersion").get<std::uint32_t>();
    ring.maxRetained = j.at("maxRetained").get<std::size_t>();
    for (const auto& [version, value] : j.at("entries").items()) {
        Bytes raw = base64Decode(value.get<std::string>());
        ring.entries.insert_or_assign(static_cast<std::uint32_t>(std::stoul(version)), crypto::SymmetricKey(raw));
        crypto::secureWipe(raw);
    }
    if (j.contains("trust")) {
        const auto& t = j.at("trust");
        auto status = trustStatusFromName(t.at("status").get<std::string>());
        ring.trust = TrustState{ring.conversationId, crypto::Fingerprint(t.at("firstSeen").get<std::string>()),
                                crypto::Fingerprint(t.at("current").get<std::string>()),
                                status.value_or(TrustStatus::unverified)};
    }
    return ring;
}

} // namespace

std::string_view directionName(Direction d) { return d == Direction::sent ? "SENT" : "RECEIVED"; }

std::string_view deliveryStatusName(DeliveryStatus s) {
    switch (s) {
    case DeliveryStatus::received: return "RECEIVED";
    case DeliveryStatus::pending: return "PENDING";
    case DeliveryStatus::delivered: return "DELIVERED";
    case DeliveryStatus::failed: return "FAILED";
    }
    return "RECEIVED";
}

crypto::SymmetricKey Store::deriveMasterKey(std::string_view passphrase, ByteView salt) {
    Bytes prk = crypto::hkdfExtract(salt, asBytes(passphrase));
    Bytes okm = crypto::hkdfExpand(prk, asBytes(kMasterKeyLabel), crypto::kKeySize);
    crypto::SymmetricKey key(okm);
    crypto::secureWipe(prk);
    crypto::secureWipe(okm);
    return key;
}

Store::Store(fs::path path, Bytes header, crypto::SymmetricKey recordKey, StoreOptions options)
    : path_(std::move(path)), header_(std::move(header)), recordKey_(std::move(recordKey)), options_(options) {}

Store::~Store() { close(); }

std::unique_ptr<Store> Store::create(const fs::path& path, const crypto::SymmetricKey& masterKey,
                                     StoreOptions options) {
    Bytes header = toBytes(kMagic);
    header.push_back(static_cast<std::uint8_t>(kFormatVersion >> 8));
    header.push_back(static_cast<std::uint8_t>(kFormatVersion & 0xff));
    header.push_back(0);
    header.push_back(0);
    Bytes salt(kSaltSize);
    crypto::systemRandom().fill(salt);
    header.insert(header.end(), salt.begin(), salt.end());

    auto recordKey = recordKeyFor(masterKey, salt);
    auto nonce = crypto::generateNonce();
    Bytes check = crypto::aeadEncrypt(recordKey, nonce, asBytes(kCheckPlaintext), header);
    header.insert(header.end(), nonce.bytes.begin(), nonce.bytes.end());
    header.insert(header.end(), check.begin(), check.end());

    fs::path tmp = path;
    tmp += ".tmp";
    int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0600);
    if (fd < 0) throwErrno("create store " + tmp.string());
    try {
        writeAll(fd, header);
        syncFd(fd);
    } catch (...) {
        ::close(fd);
        throw;
    }
    ::close(fd);
    fs::rename(tmp, path);
    syncDirectory(path);

    std::unique_ptr<Store> store(new Store(path, header, std::move(recordKey), options));
    store->fd_ = ::open(path.c_str(), O_WRONLY | O_APPEND | O_CLOEXEC);
    if (store->fd_ < 0) throwErrno("open store " + path.string());
    return store;
}

std::unique_ptr<Store> Store::open(const fs::path& path, const crypto::SymmetricKey& masterKey,
                                   StoreOptions options) {
    if (!fs::exists(path)) {
        return create(path, masterKey, options);
    }
    Bytes data = readFile(path);
    if (data.size() < kHeaderPrefixSize || !std::equal(kMagic.begin(), kMagic.end(), data.begin())) {
        throw Error(Errc::integrity, "not an ember store: " + path.string());
    }
    std::uint16_t version = static_cast<std::uint16_t>((data[4] << 8) | data[5]);
    if (version > kFormatVersion) {
        throw Error(Errc::refused, "store format " + std::to_string(version) + " is newer than supported " +
                                       std::to_string(kFormatVersion));
    }
    if (version == 0) {
        throw Error(Errc::integrity, "invalid store format version 0");
    }
    // Older formats would be migrated forward here, one version at a time, by
    // rewriting into a new file and renaming over the original. Format 1 is
    // the first, so there is nothing to migrate yet.
    if (data.size() < kHeaderSize) {
        throw Error(Errc::integrity, "store header truncated");
    }
    ByteView all(data);
    ByteView prefix = all.first(kHeaderPrefixSize);
    ByteView salt = prefix.subspan(8, kSaltSize);
    auto recordKey = recordKeyFor(masterKey, salt);
    auto checkNonce = crypto::Nonce::fromBytes(all.subspan(kHeaderPrefixSize, crypto::kNonceSize));
    try {
        crypto::aeadDecrypt(recordKey, checkNonce, all.subspan(kHeaderPrefixSize + crypto::kNonceSize,
                                                               kCheckSize - crypto::kNonceSize),
                            prefix);
    } catch (const Error&) {
        throw Error(Errc::auth_failure, "store key check failed (wrong master key?)");
    }

    std::unique_ptr<Store> store(
        new Store(path, Bytes(all.begin(), all.begin() + kHeaderSize), std::move(recordKey), options));

    std::size_t pos = kHeaderSize;
    std::size_t validEnd = pos;
    std::uint64_t seq = 0;
    while (pos < data.size()) {
        if (data.size() - pos < 4) break; // torn length prefix
        std::uint32_t len = readU32(all.subspan(pos, 4));
        if (len < crypto::kNonceSize + crypto::kTagSize || len > kMaxRecordBytes || data.size() - pos - 4 < len) {
            break; // torn or garbage tail
        }
        ByteView body = all.subspan(pos + 4, len);
        auto nonce = crypto::Nonce::fromBytes(body.first(crypto::kNonceSize));
        Bytes plain;
        try {
            plain = crypto::aeadDecrypt(store->recordKey_, nonce, body.subspan(crypto::kNonceSize), recordAad(seq));
        } catch (const Error&) {
            if (pos + 4 + len == data.size()) break; // torn final record
            throw Error(Errc::integrity, "store record " + std::to_string(seq) + " failed authentication");
        }
        store->nextSeq_ = seq;
        json row = json::parse(plain.begin(), plain.end(), nullptr, false);
        crypto::secureWipe(plain);
        if (row.is_discarded()) throw Error(Errc::integrity, "store record is not valid JSON");
        store->apply(row.at("op").get<std::string>(), row.at("kind").get<std::string>(),
                     row.at("key").get<std::string>(), row.contains("data") ? row.at("data").dump() : "");
        pos += 4 + len;
        validEnd = pos;
        ++seq;
    }
    store->nextSeq_ = seq;

    store->fd_ = ::open(path.c_str(), O_WRONLY | O_APPEND | O_CLOEXEC);
    if (store->fd_ < 0) throwErrno("open store " + path.string());
    ::fchmod(store->fd_, 0600);
    if (validEnd < data.size()) {
        if (::ftruncate(store->fd_, static_cast<off_t>(validEnd)) != 0) throwErrno("truncate torn store tail");
        syncFd(store->fd_);
    }
    return store;
}

void Store::close() {
    std::lock_guard lock(mutex_);
    if (fd_ >= 0) {
        ::close(fd_);
        fd_ = -1;
    }
}

bool Store::isOpen() const {
    std::lock_guard lock(mutex_);
    return fd_ >= 0;
}

void Store::requireOpen() const {
    if (fd_ < 0) throw Error(Errc::closed, "store is closed");
}

Bytes Store::sealRow(std::uint64_t seq, const std::string& plaintext) const {
    auto nonce = crypto::generateNonce();
    Bytes sealed = crypto::aeadEncrypt(recordKey_, nonce, asBytes(plaintext), recordAad(seq));
    Bytes out;
    out.reserve(4 + crypto::kNonceSize + sealed.size());
    appendU32(out, static_cast<std::uint32_t>(crypto::kNonceSize + sealed.size()));
    out.insert(out.end(), nonce.bytes.begin(), nonce.bytes.end());
    out.insert(out.end(), sealed.begin(), sealed.end());
    return out;
}

void Store::appendRow(const std::string& op, const std::string& kind, const std::string& key,
                      const std::string& data) {
    requireOpen();
    json row = {{"op", op}, {"kind", kind}, {"key", key}};
    if (!data.empty()) row["data"] = json::parse(data);
    std::string plain = row.dump();
    Bytes record = sealRow(nextSeq_, plain);
    crypto::secureWipe(std::span(reinterpret_cast<std::uint8_t*>(plain.data()), plain.size()));
    writeAll(fd_, record);
    if (options_.durable) syncFd(fd_);
    ++nextSeq_;
    apply(op, kind, key, data);
}

void Store::apply(const std::string& op, const std::string& kind, const std::string& key, const std::string& data) {
    const bool put = op == "put";
    auto replaced = [&](bool existed) {
        if (existed) ++garbage_;
    };
    if (kind == "msg") {
        if (put) {
            auto rec = messageFromJson(json::parse(data));
            replaced(messages_.contains(key));
            if (!messageOrder_.contains(key)) messageOrder_[key] = nextSeq_;
            messages_.insert_or_assign(key, std::move(rec));
        } else {
            replaced(messages_.erase(key) > 0);
            messageOrder_.erase(key);
            ++garbage_;
        }
    } else if (kind == "contact") {
        replaced(contacts_.contains(key));
        if (put) contacts_.insert_or_assign(key, contactFromJson(json::parse(data)));
        else contacts_.erase(key);
    } else if (kind == "conv") {
        replaced(conversations_.contains(key));
        if (put) conversations_.insert_or_assign(key, metaFromJson(json::parse(data)));
        else conversations_.erase(key);
    } else if (kind == "keyring") {
        replaced(keyrings_.contains(key));
        if (put) keyrings_.insert_or_assign(key, keyringFromJson(json::parse(data)));
        else keyrings_.erase(key);
    }
    // Unknown kinds from a newer minor revision are skipped.
}

void Store::maybeCompact() {
    if (garbage_ >= options_.compactionThreshold) {
        std::size_t live = contacts_.size() + conversations_.size() + messages_.size() + keyrings_.size();
        if (garbage_ > live) compactLocked();
    }
}

void Store::putMessage(const MessageRecord& rec) {
    if (rec.expiresAt != rec.timestamp + rec.ttl || rec.ttl <= 0) {
        throw Error(Errc::precondition, "message record must satisfy expiresAt = timestamp + ttl with ttl > 0");
    }
    std::lock_guard lock(mutex_);
    appendRow("put", "msg", rec.id, messageToJson(rec).dump());
}

std::vector<MessageRecord> Store::queryMessages(const std::string& conversationId, std::size_t limit) const {
    std::lock_guard lock(mutex_);
    requireOpen();
    std::vector<const MessageRecord*> matches;
    for (const auto& [id, rec] : messages_) {
        if (rec.conversationId == conversationId) matches.push_back(&rec);
    }
    std::sort(matches.begin(), matches.end(), [&](const MessageRecord* a, const MessageRecord* b) {
        if (a->timestamp != b->timestamp) return a->timestamp > b->timestamp;
        return messageOrder_.at(a->id) > messageOrder_.at(b->id);
    });
    if (matches.size() > limit) matches.resize(limit);
    std::vector<MessageRecord> out;
    out.reserve(matches.size());
    for (const auto* rec : matches) out.push_back(*rec);
    return out;
}

std::optional<MessageRecord> Store::getMessage(const std::string& id) const {
    std::lock_guard lock(mutex_);
    requireOpen();
    auto it = messages_.find(id);
    if (it == messages_.end()) return std::nullopt;
    return it->second;
}

void Store::deleteMessage(const std::string& id) {
    std::lock_guard lock(mutex_);
    requireOpen();
    if (!messages_.contains(id)) return;
    appendRow("del", "msg", id, "");
    maybeCompact();
}

void Store::setDeliveryStatus(const std::string& id, DeliveryStatus status) {
    std::lock_guard lock(mutex_);
    requireOpen();
    auto it = messages_.find(id);
    if (it == messages_.end()) throw Error(Errc::not_found, "unknown message " + id);
    MessageRecord rec = it->second;
    rec.deliveryStatus = status;
    appendRow("put", "msg", id, messageToJson(rec).dump());
}

std::size_t Store::messageCount() const {
    std::lock_guard lock(mutex_);
    return messages_.size();
}

std::size_t Store::sweepExpired(std::int64_t now) {
    std::lock_guard lock(mutex_);
    requireOpen();
    std::vector<std::string> expired;
    for (const auto& [id, rec] : messages_) {
        if (rec.expiresAt < now) expired.push_back(id);
    }
    for (const auto& id : expired) appendRow("del", "msg", id, "");
    if (!expired.empty()) maybeCompact();
    return expired.size();
}

void Store::putContact(const Contact& contact) {
    std::lock_guard lock(mutex_);
    appendRow("put", "contact", contact.conversationId, contactToJson(contact).dump());
}

std::vector<Contact> Store::getContacts() const {
    std::lock_guard lock(mutex_);
    requireOpen();
    std::vector<Contact> out;
    for (const auto& [_, c] : contacts_) out.push_back(c);
    return out;
}

std::optional<Contact> Store::getContact(const std::string& conversationId) const {
    std::lock_guard lock(mutex_);
    requireOpen();
    auto it = contacts_.find(conversationId);
    if (it == contacts_.end()) return std::nullopt;
    return it->second;
}

void Store::putConversationMeta(const ConversationMeta& meta) {
    if (meta.defaultTtl <= 0) throw Error(Errc::precondition, "defaultTtl must be positive");
    std::lock_guard lock(mutex_);
    appendRow("put", "conv", meta.conversationId, metaToJson(meta).dump());
}

ConversationMeta Store::getConversationMeta(const std::string& conversationId) const {
    std::lock_guard lock(mutex_);
    requireOpen();
    auto it = conversations_.find(conversationId);
    if (it == conversations_.end()) throw Error(Errc::not_found, "unknown conversation " + conversationId);
    return it->second;
}

std::vector<ConversationMeta> Store::listConversationMeta() const {
    std::lock_guard lock(mutex_);
    requireOpen();
    std::vector<ConversationMeta> out;
    for (const auto& [_, m] : conversations_) out.push_back(m);
    return out;
}

void Store::putKeyRing(const VersionedKeyRing& ring) {
    std::lock_guard lock(mutex_);
    appendRow("put", "keyring", ring.conversationId, keyringToJson(ring).dump());
}

VersionedKeyRing Store::getKeyRing(const std::string& conversationId) const {
    std::lock_guard lock(mutex_);
    requireOpen();
    auto it = keyrings_.find(conversationId);
    if (it == keyrings_.end()) throw Error(Errc::not_found, "no keyring for " + conversationId);
    return it->second;
}

std::vector<VersionedKeyRing> Store::listKeyRings() const {
    std::lock_guard lock(mutex_);
    requireOpen();
    std::vector<VersionedKeyRing> out;
    for (const auto& [_, r] : keyrings_) out.push_back(r);
    return out;
}

void Store::compact() {
    std::lock_guard lock(mutex_);
    compactLocked();
}

void Store::compactLocked() {
    requireOpen();
    fs::path tmp = path_;
    tmp += ".compact";
    int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0600);
    if (fd < 0) throwErrno("create " + tmp.string());

    std::uint64_t seq = 0;
    std::map<std::string, std::uint64_t> order;
    try {
        writeAll(fd, header_);
        auto emit = [&](const std::string& kind, const std::string& key, const json& data) {
            json row = {{"op", "put"}, {"kind", kind}, {"key", key}, {"data", data}};
            std::string plain = row.dump();
            writeAll(fd, sealRow(seq, plain));
            crypto::secureWipe(std::span(reinterpret_cast<std::uint8_t*>(plain.data()), plain.size()));
            ++seq;
        };
        for (const auto& [k, c] : contacts_) emit("contact", k, contactToJson(c));
        for (const auto& [k, m] : conversations_) emit("conv", k, metaToJson(m));
        for (const auto& [k, r] : keyrings_) emit("keyring", k, keyringToJson(r));
        // keep insertion order so newest-first ties survive compaction
        std::vector<std::pair<std::uint64_t, std::string>> byOrder;
        for (const auto& [id, o] : messageOrder_) byOrder.emplace_back(o, id);
        std::sort(byOrder.begin(), byOrder.end());
        for (const auto& [_, id] : byOrder) {
            order[id] = seq;
            emit("msg", id, messageToJson(messages_.at(id)));
        }
        syncFd(fd);
    } catch (...) {
        ::close(fd);
        fs::remove(tmp);
        throw;
    }
    ::close(fd);
    fs::rename(tmp, path_);
    syncDirectory(path_);

    ::close(fd_);
    fd_ = ::open(path_.c_str(), O_WRONLY | O_APPEND | O_CLOEXEC);
    if (fd_ < 0) throwErrno("reopen store " + path_.string());
    nextSeq_ = seq;
    messageOrder_ = std::move(order);
    garbage_ = 0;
}

} // namespace ember
