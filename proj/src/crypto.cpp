#include "ember/crypto.hpp"

#include "ember/error.hpp"

#include <openssl/crypto.h>
#include <openssl/evp.h>
#include <openssl/hmac.h>
#include <openssl/rand.h>
#include <openssl/sha.h>

#include <climits>

namespace ember::crypto {

namespace {

constexpr std::string_view kMessageKeyLabel = "ember:v1:msgkey";
constexpr std::string_view kHmacKeyLabel = "ember:v1:hmackey";
constexpr std::string_view kRotateSaltLabel = "ember:v1:rotate:";
constexpr std::string_view kKeyVersionLabel = "ember:v1:keyver:";

struct CipherCtxDeleter {
    void operator()(EVP_CIPHER_CTX* ctx) const { EVP_CIPHER_CTX_free(ctx); }
};
using CipherCtx = std::unique_ptr<EVP_CIPHER_CTX, CipherCtxDeleter>;

CipherCtx newCipherCtx() {
    CipherCtx ctx(EVP_CIPHER_CTX_new());
    if (!ctx) throw std::bad_alloc();
    return ctx;
}

int checkedLen(std::size_t n) {
    if (n > static_cast<std::size_t>(INT_MAX)) {
        throw Error(Errc::precondition, "buffer too large for AEAD");
    }
    return static_cast<int>(n);
}

class SystemRandom final : public RandomSource {
public:
    void fill(std::span<std::uint8_t> out) override {
        if (out.empty()) return;
        if (RAND_bytes(out.data(), checkedLen(out.size())) != 1) {
            throw Error(Errc::randomness, "CSPRNG failure");
        }
    }
};

SymmetricKey deriveLabelled(ByteView salt, const SymmetricKey& ikm, ByteView info, KeyRole role) {
    Bytes prk = hkdfExtract(salt, ikm.bytes());
    Bytes okm = hkdfExpand(prk, info, kKeySize);
    SymmetricKey key(okm, role);
    secureWipe(prk);
    secureWipe(okm);
    return key;
}

} // namespace

SymmetricKey::SymmetricKey(ByteView bytes, KeyRole role) : role_(role) {
    if (bytes.size() != kKeySize) {
        throw Error(Errc::precondition, "symmetric key must be exactly 32 bytes");
    }
    std::copy(bytes.begin(), bytes.end(), bytes_.begin());
}

SymmetricKey::~SymmetricKey() { secureWipe(bytes_); }

bool operator==(const SymmetricKey& a, const SymmetricKey& b) {
    return constantTimeEqual(a.bytes_, b.bytes_);
}

Nonce Nonce::fromBytes(ByteView b) {
    if (b.size() != kNonceSize) {
        throw Error(Errc::precondition, "nonce must be exactly 12 bytes");
    }
    Nonce n;
    std::copy(b.begin(), b.end(), n.bytes.begin());
    return n;
}

RandomSource& systemRandom() {
    static SystemRandom instance;
    return instance;
}

DeterministicRandom::DeterministicRandom(std::uint64_t seed) {
    Bytes s;
    appendU64(s, seed);
    seedKey_ = sha256(s);
}

void DeterministicRandom::fill(std::span<std::uint8_t> out) {
    std::lock_guard lock(mutex_);
    std::size_t written = 0;
    while (written < out.size()) {
        if (pool_.empty()) {
            Bytes block;
            appendU64(block, counter_++);
            pool_ = hmacSha256(seedKey_, block);
        }
        std::size_t take = std::min(pool_.size(), out.size() - written);
        std::copy_n(pool_.begin(), take, out.begin() + static_cast<std::ptrdiff_t>(written));
        pool_.erase(pool_.begin(), pool_.begin() + static_cast<std::ptrdiff_t>(take));
        written += take;
    }
}

SymmetricKey generateKey(RandomSource& rng) {
    std::array<std::uint8_t, kKeySize> raw{};
    rng.fill(raw);
    SymmetricKey key(raw);
    secureWipe(raw);
    return key;
}

Nonce generateNonce(RandomSource& rng) {
    Nonce n;
    rng.fill(n.bytes);
    return n;
}

Bytes aeadEncrypt(const SymmetricKey& key, const Nonce& nonce, ByteView plaintext, ByteView aad) {
    auto ctx = newCipherCtx();
    if (EVP_EncryptInit_ex(ctx.get(), EVP_aes_256_gcm(), nullptr, nullptr, nullptr) != 1 ||
        EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_SET_IVLEN, kNonceSize, nullptr) != 1 ||
        EVP_EncryptInit_ex(ctx.get(), nullptr, nullptr, key.bytes().data(), nonce.bytes.data()) != 1) {
        throw Error(Errc::precondition, "AES-GCM init failed");
    }
    int len = 0;
    if (!aad.empty() && EVP_EncryptUpdate(ctx.get(), nullptr, &len, aad.data(), checkedLen(aad.size())) != 1) {
        throw Error(Errc::precondition, "AES-GCM aad failed");
    }
    Bytes out(plaintext.size() + kTagSize);
    int written = 0;
    if (!plaintext.empty()) {
        if (EVP_EncryptUpdate(ctx.get(), out.data(), &len, plaintext.data(), checkedLen(plaintext.size())) != 1) {
            throw Error(Errc::precondition, "AES-GCM encrypt failed");
        }
        written = len;
    }
    if (EVP_EncryptFinal_ex(ctx.get(), out.data() + written, &len) != 1) {
        throw Error(Errc::precondition, "AES-GCM final failed");
    }
    written += len;
    if (EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_GET_TAG, kTagSize, out.data() + written) != 1) {
        throw Error(Errc::precondition, "AES-GCM tag failed");
    }
    return out;
}

Bytes aeadDecrypt(const SymmetricKey& key, const Nonce& nonce, ByteView ciphertextAndTag, ByteView aad) {
    if (ciphertextAndTag.size() < kTagSize) {
        throw Error(Errc::structural, "ciphertext shorter than the GCM tag");
    }
    const std::size_t ctLen = ciphertextAndTag.size() - kTagSize;
    auto ctx = newCipherCtx();
    if (EVP_DecryptInit_ex(ctx.get(), EVP_aes_256_gcm(), nullptr, nullptr, nullptr) != 1 ||
        EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_SET_IVLEN, kNonceSize, nullptr) != 1 ||
        EVP_DecryptInit_ex(ctx.get(), nullptr, nullptr, key.bytes().data(), nonce.bytes.data()) != 1) {
        throw Error(Errc::precondition, "AES-GCM init failed");
    }
    int len = 0;
    if (!aad.empty() && EVP_DecryptUpdate(ctx.get(), nullptr, &len, aad.data(), checkedLen(aad.size())) != 1) {
        throw Error(Errc::precondition, "AES-GCM aad failed");
    }
    Bytes out(ctLen);
    int written = 0;
    if (ctLen > 0) {
        if (EVP_DecryptUpdate(ctx.get(), out.data(), &len, ciphertextAndTag.data(), checkedLen(ctLen)) != 1) {
            secureWipe(out);
            throw Error(Errc::auth_failure, "AES-GCM decrypt failed");
        }
        written = len;
    }
    Bytes tag(ciphertextAndTag.end() - kTagSize, ciphertextAndTag.end());
    if (EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_SET_TAG, kTagSize, tag.data()) != 1) {
        throw Error(Errc::precondition, "AES-GCM set tag failed");
    }
    if (EVP_DecryptFinal_ex(ctx.get(), out.data() + written, &len) != 1) {
        secureWipe(out);
        throw Error(Errc::auth_failure, "AES-GCM authentication failed");
    }
    return out;
}

Bytes sha256(ByteView data) {
    Bytes out(SHA256_DIGEST_LENGTH);
    if (EVP_Digest(data.data(), data.size(), out.data(), nullptr, EVP_sha256(), nullptr) != 1) {
        throw Error(Errc::precondition, "SHA-256 failed");
    }
    return out;
}

Bytes hmacSha256(ByteView key, ByteView data) {
    Bytes out(kMacSize);
    unsigned int len = 0;
    // OpenSSL rejects a null key pointer even for a zero-length key.
    static const std::uint8_t empty = 0;
    const std::uint8_t* keyPtr = key.empty() ? &empty : key.data();
    if (HMAC(EVP_sha256(), keyPtr, checkedLen(key.size()), data.data(), data.size(), out.data(), &len) == nullptr ||
        len != kMacSize) {
        throw Error(Errc::precondition, "HMAC-SHA256 failed");
    }
    return out;
}

Bytes hmacSign(const SymmetricKey& key, ByteView data) { return hmacSha256(key.bytes(), data); }

bool hmacVerify(const SymmetricKey& key, ByteView data, ByteView tag) {
    if (tag.size() != kMacSize) return false;
    Bytes expected = hmacSign(key, data);
    return constantTimeEqual(expected, tag);
}

bool constantTimeEqual(ByteView a, ByteView b) {
    if (a.size() != b.size()) return false;
    volatile std::uint8_t diff = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff = diff | static_cast<std::uint8_t>(a[i] ^ b[i]);
    }
    return diff == 0;
}

Bytes hkdfExtract(ByteView salt, ByteView ikm) {
    // RFC 5869: an absent salt is HashLen zero bytes.
    if (salt.empty()) {
        Bytes zeros(kMacSize, 0);
        return hmacSha256(zeros, ikm);
    }
    return hmacSha256(salt, ikm);
}

Bytes hkdfExpand(ByteView prk, ByteView info, std::size_t length) {
    if (length > kHkdfMaxOutput) {
        throw Error(Errc::precondition, "HKDF expand length exceeds 255 * HashLen");
    }
    Bytes okm;
    okm.reserve(length);
    Bytes previous;
    Bytes block;
    for (std::uint8_t counter = 1; okm.size() < length; ++counter) {
        block.assign(previous.begin(), previous.end());
        block.insert(block.end(), info.begin(), info.end());
        block.push_back(counter);
        secureWipe(previous);
        previous = hmacSha256(prk, block);
        std::size_t take = std::min(previous.size(), length - okm.size());
        okm.insert(okm.end(), previous.begin(), previous.begin() + static_cast<std::ptrdiff_t>(take));
    }
    secureWipe(previous);
    secureWipe(block);
    return okm;
}

SymmetricKey deriveNextKey(const SymmetricKey& current, std::uint32_t currentVersion, std::uint32_t targetVersion) {
    if (currentVersion == UINT32_MAX || targetVersion != currentVersion + 1) {
        throw Error(Errc::precondition, "target key version must be the successor of the current version");
    }
    Bytes salt = toBytes(kRotateSaltLabel);
    appendU32(salt, currentVersion);
    Bytes info = toBytes(kKeyVersionLabel);
    appendU32(info, targetVersion);
    return deriveLabelled(salt, current, info, KeyRole::conversation);
}

SymmetricKey deriveMessageKey(const SymmetricKey& conversationKey, const Nonce& nonce) {
    return deriveLabelled(nonce.view(), conversationKey, asBytes(kMessageKeyLabel), KeyRole::message);
}

SymmetricKey deriveHmacKey(const SymmetricKey& conversationKey) {
    return deriveLabelled({}, conversationKey, asBytes(kHmacKeyLabel), KeyRole::hmac);
}

Fingerprint fingerprint(const SymmetricKey& key) {
    Bytes digest = sha256(key.bytes());
    std::string display;
    for (std::size_t i = 0; i < 8; ++i) {
        if (i > 0) display.push_back(':');
        display += hexEncode(ByteView(digest).subspan(i, 1), true);
    }
    return Fingerprint(std::move(display));
}

void secureWipe(std::span<std::uint8_t> buffer) {
    if (!buffer.empty()) {
        OPENSSL_cleanse(buffer.data(), buffer.size());
    }
}

SecureBuffer& SecureBuffer::operator=(SecureBuffer&& other) noexcept {
    if (this != &other) {
        wipe();
        data_ = std::move(other.data_);
    }
    return *this;
}

void SecureBuffer::wipe() {
    secureWipe(data_);
    data_.clear();
}

} // namespace ember::crypto
