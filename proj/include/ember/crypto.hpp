#pragma once

// Cryptographic primitives used by the protocol: AES-256-GCM, HMAC-SHA256,
// HKDF-SHA256 (RFC 5869), key fingerprints and buffer wiping. OpenSSL
// provides the block cipher, SHA-256 and the CSPRNG; HKDF and the derivation
// layouts live here.

#include "ember/bytes.hpp"

#include <array>
#include <compare>
#include <cstdint>
#include <memory>
#include <mutex>
#include <string>

namespace ember::crypto {

inline constexpr std::size_t kKeySize = 32;
inline constexpr std::size_t kNonceSize = 12;
inline constexpr std::size_t kTagSize = 16;
inline constexpr std::size_t kMacSize = 32;
inline constexpr std::size_t kHkdfMaxOutput = 255 * 32;

enum class KeyRole { conversation, message, hmac };

/// 32-byte secret. Wiped on destruction; comparison is constant-time.
class SymmetricKey {
public:
    explicit SymmetricKey(ByteView bytes, KeyRole role = KeyRole::conversation);
    SymmetricKey(const SymmetricKey&) = default;
    SymmetricKey& operator=(const SymmetricKey&) = default;
    ~SymmetricKey();

    ByteView bytes() const { return bytes_; }
    KeyRole role() const { return role_; }

    friend bool operator==(const SymmetricKey& a, const SymmetricKey& b);

private:
    std::array<std::uint8_t, kKeySize> bytes_{};
    KeyRole role_;
};

struct Nonce {
    std::array<std::uint8_t, kNonceSize> bytes{};

    static Nonce fromBytes(ByteView b);
    ByteView view() const { return bytes; }
    auto operator<=>(const Nonce&) const = default;
};

class Fingerprint {
public:
    explicit Fingerprint(std::string display) : display_(std::move(display)) {}
    const std::string& display() const { return display_; }
    bool operator==(const Fingerprint&) const = default;

private:
    std::string display_;
};

/// Source of random bytes. Implementations must be safe for concurrent use.
class RandomSource {
public:
    virtual ~RandomSource() = default;
    virtual void fill(std::span<std::uint8_t> out) = 0;
};

/// Process-wide OS-backed CSPRNG. Failure to draw is fatal (throws Errc::randomness).
RandomSource& systemRandom();

/// Reproducible generator (HMAC-SHA256 in counter mode over a seed). Test and
/// harness use only: output is fully determined by the seed.
class DeterministicRandom final : public RandomSource {
public:
    explicit DeterministicRandom(std::uint64_t seed);
    void fill(std::span<std::uint8_t> out) override;

private:
    std::mutex mutex_;
    Bytes seedKey_;
    std::uint64_t counter_ = 0;
    Bytes pool_;
};

SymmetricKey generateKey(RandomSource& rng = systemRandom());
Nonce generateNonce(RandomSource& rng = systemRandom());

/// Returns ciphertext || 16-byte tag.
Bytes aeadEncrypt(const SymmetricKey& key, const Nonce& nonce, ByteView plaintext, ByteView aad);
/// Throws Errc::structural when the input is shorter than a tag and
/// Errc::auth_failure when the tag does not verify. Nothing is returned on failure.
Bytes aeadDecrypt(const SymmetricKey& key, const Nonce& nonce, ByteView ciphertextAndTag, ByteView aad);

Bytes sha256(ByteView data);
Bytes hmacSha256(ByteView key, ByteView data);
Bytes hmacSign(const SymmetricKey& key, ByteView data);
bool hmacVerify(const SymmetricKey& key, ByteView data, ByteView tag);

/// Accumulates XOR differences over the full length; only a length mismatch exits early.
bool constantTimeEqual(ByteView a, ByteView b);

Bytes hkdfExtract(ByteView salt, ByteView ikm);
Bytes hkdfExpand(ByteView prk, ByteView info, std::size_t length);

SymmetricKey deriveNextKey(const SymmetricKey& current, std::uint32_t currentVersion, std::uint32_t targetVersion);
SymmetricKey deriveMessageKey(const SymmetricKey& conversationKey, const Nonce& nonce);
SymmetricKey deriveHmacKey(const SymmetricKey& conversationKey);

Fingerprint fingerprint(const SymmetricKey& key);

void secureWipe(std::span<std::uint8_t> buffer);

/// Byte buffer that is wiped when it goes out of scope. Used for plaintext.
class SecureBuffer {
public:
    SecureBuffer() = default;
    explicit SecureBuffer(Bytes data) : data_(std::move(data)) {}
    explicit SecureBuffer(std::string_view text) : data_(toBytes(text)) {}
    SecureBuffer(SecureBuffer&& other) noexcept : data_(std::move(other.data_)) {}
    SecureBuffer& operator=(SecureBuffer&& other) noexcept;
    SecureBuffer(const SecureBuffer&) = delete;
    SecureBuffer& operator=(const SecureBuffer&) = delete;
    ~SecureBuffer() { wipe(); }

    ByteView view() const { return data_; }
    std::string_view str() const { return {reinterpret_cast<const char*>(data_.data()), data_.size()}; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    void wipe();

private:
    Bytes data_;
};

} // namespace ember::crypto
