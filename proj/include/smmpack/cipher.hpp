#pragma once

// AES-128 in CBC mode (FIPS 197 block cipher, SP 800-38A chaining).
// No padding is applied here: callers hand in block multiples.

#include <array>
#include <cstdint>
#include <cstring>
#include <random>

#include "smmpack/bytes.hpp"

namespace smmpack {

inline constexpr std::size_t kAesBlockSize = 16;

struct SymmetricKey {
    std::array<std::uint8_t, 16> bytes{};

    static SymmetricKey from_bytes(ByteView raw)
    {
        if (raw.size() != 16) fail(ErrorCode::InvalidArgument, "AES-128 key must be 16 bytes");
        SymmetricKey k;
        std::copy(raw.begin(), raw.end(), k.bytes.begin());
        return k;
    }

    static SymmetricKey from_hex(std::string_view hex) { return from_bytes(smmpack::from_hex(hex)); }

    friend bool operator==(const SymmetricKey&, const SymmetricKey&) = default;
};

struct Iv {
    std::array<std::uint8_t, 16> bytes{};

    static Iv from_bytes(ByteView raw)
    {
        if (raw.size() != 16) fail(ErrorCode::InvalidArgument, "CBC IV must be 16 bytes");
        Iv iv;
        std::copy(raw.begin(), raw.end(), iv.bytes.begin());
        return iv;
    }

    friend bool operator==(const Iv&, const Iv&) = default;
};

template <class Rng>
std::array<std::uint8_t, 16> random_block(Rng& rng)
{
    std::array<std::uint8_t, 16> out{};
    std::uniform_int_distribution<int> byte(0, 255);
    for (auto& b : out) b = static_cast<std::uint8_t>(byte(rng));
    return out;
}

namespace detail {

inline constexpr std::uint8_t kSbox[256] = {
    0x63, 0x7c, 0x77, 0x7b, 0xf2, 0x6b, 0x6f, 0xc5, 0x30, 0x01, 0x67, 0x2b, 0xfe, 0xd7, 0xab, 0x76, 0xca, 0x82, 0xc9,
    0x7d, 0xfa, 0x59, 0x47, 0xf0, 0xad, 0xd4, 0xa2, 0xaf, 0x9c, 0xa4, 0x72, 0xc0, 0xb7, 0xfd, 0x93, 0x26, 0x36, 0x3f,
    0xf7, 0xcc, 0x34, 0xa5, 0xe5, 0xf1, 0x71, 0xd8, 0x31, 0x15, 0x04, 0xc7, 0x23, 0xc3, 0x18, 0x96, 0x05, 0x9a, 0x07,
    0x12, 0x80, 0xe2, 0xeb, 0x27, 0xb2, 0x75, 0x09, 0x83, 0x2c, 0x1a, 0x1b, 0x6e, 0x5a, 0xa0, 0x52, 0x3b, 0xd6, 0xb3,
    0x29, 0xe3, 0x2f, 0x84, 0x53, 0xd1, 0x00, 0xed, 0x20, 0xfc, 0xb1, 0x5b, 0x6a, 0xcb, 0xbe, 0x39, 0x4a, 0x4c, 0x58,
    0xcf, 0xd0, 0xef, 0xaa, 0xfb, 0x43, 0x4d, 0x33, 0x85, 0x45, 0xf9, 0x02, 0x7f, 0x50, 0x3c, 0x9f, 0xa8, 0x51, 0xa3,
    0x40, 0x8f, 0x92, 0x9d, 0x38, 0xf5, 0xbc, 0xb6, 0xda, 0x21, 0x10, 0xff, 0xf3, 0xd2, 0xcd, 0x0c, 0x13, 0xec, 0x5f,
    0x97, 0x44, 0x17, 0xc4, 0xa7, 0x7e, 0x3d, 0x64, 0x5d, 0x19, 0x73, 0x60, 0x81, 0x4f, 0xdc, 0x22, 0x2a, 0x90, 0x88,
    0x46, 0xee, 0xb8, 0x14, 0xde, 0x5e, 0x0b, 0xdb, 0xe0, 0x32, 0x3a, 0x0a, 0x49, 0x06, 0x24, 0x5c, 0xc2, 0xd3, 0xac,
    0x62, 0x91, 0x95, 0xe4, 0x79, 0xe7, 0xc8, 0x37, 0x6d, 0x8d, 0xd5, 0x4e, 0xa9, 0x6c, 0x56, 0xf4, 0xea, 0x65, 0x7a,
    0xae, 0x08, 0xba, 0x78, 0x25, 0x2e, 0x1c, 0xa6, 0xb4, 0xc6, 0xe8, 0xdd, 0x74, 0x1f, 0x4b, 0xbd, 0x8b, 0x8a, 0x70,
    0x3e, 0xb5, 0x66, 0x48, 0x03, 0xf6, 0x0e, 0x61, 0x35, 0x57, 0xb9, 0x86, 0xc1, 0x1d, 0x9e, 0xe1, 0xf8, 0x98, 0x11,
    0x69, 0xd9, 0x8e, 0x94, 0x9b, 0x1e, 0x87, 0xe9, 0xce, 0x55, 0x28, 0xdf, 0x8c, 0xa1, 0x89, 0x0d, 0xbf, 0xe6, 0x42,
    0x68, 0x41, 0x99, 0x2d, 0x0f, 0xb0, 0x54, 0xbb, 0x16};

constexpr std::array<std::uint8_t, 256> make_inverse_sbox()
{
    std::array<std::uint8_t, 256> inv{};
    for (int i = 0; i < 256; ++i) inv[kSbox[i]] = static_cast<std::uint8_t>(i);
    return inv;
}

inline constexpr std::array<std::uint8_t, 256> kInvSbox = make_inverse_sbox();

constexpr std::uint8_t xtime(std::uint8_t x) { return static_cast<std::uint8_t>((x << 1) ^ ((x & 0x80) ? 0x1b : 0)); }

constexpr std::uint8_t gmul(std::uint8_t a, std::uint8_t b)
{
    std::uint8_t p = 0;
    while (b) {
        if (b & 1) p ^= a;
        a = xtime(a);
        b >>= 1;
    }
    return p;
}

constexpr std::array<std::uint8_t, 256> make_mul_table(std::uint8_t factor)
{
    std::array<std::uint8_t, 256> t{};
    for (int i = 0; i < 256; ++i) t[i] = gmul(static_cast<std::uint8_t>(i), factor);
    return t;
}

inline constexpr auto kMul9 = make_mul_table(9);
inline constexpr auto kMul11 = make_mul_table(11);
inline constexpr auto kMul13 = make_mul_table(13);
inline constexpr auto kMul14 = make_mul_table(14);

using Block = std::array<std::uint8_t, 16>;

/// Expanded AES-128 key schedule: 11 round keys.
class Aes128 {
public:
    explicit Aes128(const SymmetricKey& key)
    {
        static constexpr std::uint8_t rcon[10] = {0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1b, 0x36};
        std::memcpy(round_keys_.data(), key.bytes.data(), 16);
        for (int i = 4; i < 44; ++i) {
            std::uint8_t t[4];
            std::memcpy(t, &round_keys_[4 * (i - 1)], 4);
            if (i % 4 == 0) {
                std::uint8_t first = t[0];
                t[0] = static_cast<std::uint8_t>(kSbox[t[1]] ^ rcon[i / 4 - 1]);
                t[1] = kSbox[t[2]];
                t[2] = kSbox[t[3]];
                t[3] = kSbox[first];
            }
            for (int j = 0; j < 4; ++j) round_keys_[4 * i + j] = round_keys_[4 * (i - 4) + j] ^ t[j];
        }
    }

    void encrypt_block(Block& s) const
    {
        add_round_key(s, 0);
        for (int round = 1; round < 10; ++round) {
            sub_bytes(s);
            shift_rows(s);
            mix_columns(s);
            add_round_key(s, round);
        }
        sub_bytes(s);
        shift_rows(s);
        add_round_key(s, 10);
    }

    void decrypt_block(Block& s) const
    {
        add_round_key(s, 10);
        for (int round = 9; round > 0; --round) {
            inv_shift_rows(s);
            inv_sub_bytes(s);
            add_round_key(s, round);
            inv_mix_columns(s);
        }
        inv_shift_rows(s);
        inv_sub_bytes(s);
        add_round_key(s, 0);
    }

private:
    // State is column-major: byte index = 4 * column + row.
    void add_round_key(Block& s, int round) const
    {
        for (int i = 0; i < 16; ++i) s[i] ^= round_keys_[16 * round + i];
    }

    static void sub_bytes(Block& s)
    {
        for (auto& b : s) b = kSbox[b];
    }

    static void inv_sub_bytes(Block& s)
    {
        for (auto& b : s) b = kInvSbox[b];
    }

    static void shift_rows(Block& s)
    {
        Block t = s;
        for (int c = 0; c < 4; ++c)
            for (int r = 0; r < 4; ++r) s[4 * c + r] = t[4 * ((c + r) % 4) + r];
    }

    static void inv_shift_rows(Block& s)
    {
        Block t = s;
        for (int c = 0; c < 4; ++c)
            for (int r = 0; r < 4; ++r) s[4 * ((c + r) % 4) + r] = t[4 * c + r];
    }

    static void mix_columns(Block& s)
    {
        for (int c = 0; c < 4; ++c) {
            std::uint8_t* col = &s[4 * c];
            std::uint8_t a0 = col[0], a1 = col[1], a2 = col[2], a3 = col[3];
            std::uint8_t all = a0 ^ a1 ^ a2 ^ a3;
            col[0] ^= all ^ xtime(a0 ^ a1);
            col[1] ^= all ^ xtime(a1 ^ a2);
            col[2] ^= all ^ xtime(a2 ^ a3);
            col[3] ^= all ^ xtime(a3 ^ a0);
        }
    }

    static void inv_mix_columns(Block& s)
    {
        for (int c = 0; c < 4; ++c) {
            std::uint8_t* col = &s[4 * c];
            std::uint8_t a0 = col[0], a1 = col[1], a2 = col[2], a3 = col[3];
            col[0] = kMul14[a0] ^ kMul11[a1] ^ kMul13[a2] ^ kMul9[a3];
            col[1] = kMul9[a0] ^ kMul14[a1] ^ kMul11[a2] ^ kMul13[a3];
            col[2] = kMul13[a0] ^ kMul9[a1] ^ kMul14[a2] ^ kMul11[a3];
            col[3] = kMul11[a0] ^ kMul13[a1] ^ kMul9[a2] ^ kMul14[a3];
        }
    }

    std::array<std::uint8_t, 176> round_keys_{};
};

inline void require_block_multiple(std::size_t len)
{
    if (len % kAesBlockSize != 0)
        fail(ErrorCode::LengthNotBlockMultiple, std::to_string(len) + " is not a multiple of 16");
}

} // namespace detail

/// Encrypts `data` in place. Length must be a multiple of 16.
inline void encrypt_cbc_in_place(const SymmetricKey& key, const Iv& iv, std::span<std::uint8_t> data)
{
    detail::require_block_multiple(data.size());
    detail::Aes128 aes(key);
    detail::Block chain = iv.bytes;
    for (std::size_t off = 0; off < data.size(); off += kAesBlockSize) {
        detail::Block block;
        for (std::size_t i = 0; i < kAesBlockSize; ++i) block[i] = data[off + i] ^ chain[i];
        aes.encrypt_block(block);
        std::copy(block.begin(), block.end(), data.begin() + static_cast<std::ptrdiff_t>(off));
        chain = block;
    }
}

/// Decrypts `data` in place. Length must be a multiple of 16.
inline void decrypt_cbc_in_place(const SymmetricKey& key, const Iv& iv, std::span<std::uint8_t> data)
{
    detail::require_block_multiple(data.size());
    detail::Aes128 aes(key);
    detail::Block chain = iv.bytes;
    for (std::size_t off = 0; off < data.size(); off += kAesBlockSize) {
        detail::Block cipher;
        std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(off), kAesBlockSize, cipher.begin());
        detail::Block block = cipher;
        aes.decrypt_block(block);
        for (std::size_t i = 0; i < kAesBlockSize; ++i) data[off + i] = block[i] ^ chain[i];
        chain = cipher;
    }
}

inline Bytes encrypt_cbc(const SymmetricKey& key, const Iv& iv, ByteView plaintext)
{
    Bytes out(plaintext.begin(), plaintext.end());
    encrypt_cbc_in_place(key, iv, out);
    return out;
}

inline Bytes decrypt_cbc(const SymmetricKey& key, const Iv& iv, ByteView ciphertext)
{
    Bytes out(ciphertext.begin(), ciphertext.end());
    decrypt_cbc_in_place(key, iv, out);
    return out;
}

} // namespace smmpack
