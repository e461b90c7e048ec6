#include <random>

#include "oracle/vectors.hpp"
#include "support.hpp"

using namespace smmpack;

namespace {

const SymmetricKey kKey = SymmetricKey::from_hex(vectors::kCbcKey);
const Iv kIv = Iv::from_bytes(from_hex(vectors::kCbcIv));

} // namespace

TEST(Cipher, Sp80038aEncrypt) { EXPECT_EQ(to_hex(encrypt_cbc(kKey, kIv, from_hex(vectors::kCbcPlain))), vectors::kCbcCipher); }

TEST(Cipher, Sp80038aDecrypt) { EXPECT_EQ(to_hex(decrypt_cbc(kKey, kIv, from_hex(vectors::kCbcCipher))), vectors::kCbcPlain); }

TEST(Cipher, EmptyInputIsEmpty)
{
    EXPECT_TRUE(encrypt_cbc(kKey, kIv, {}).empty());
    EXPECT_TRUE(decrypt_cbc(kKey, kIv, {}).empty());
}

TEST(Cipher, RejectsPartialBlocks)
{
    Bytes odd(17);
    try {
        encrypt_cbc(kKey, kIv, odd);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::LengthNotBlockMultiple);
    }
    EXPECT_THROW(decrypt_cbc(kKey, kIv, Bytes(15)), Error);
}

TEST(Cipher, RandomRoundTripsAgreeWithOpenSsl)
{
    std::mt19937_64 rng(11);
    for (int i = 0; i < 200; ++i) {
        SymmetricKey key;
        key.bytes = random_block(rng);
        Iv iv;
        iv.bytes = random_block(rng);
        Bytes plain(16 * (rng() % 20));
        for (auto& b : plain) b = static_cast<std::uint8_t>(rng());
        const Bytes ct = encrypt_cbc(key, iv, plain);
        EXPECT_EQ(ct, oracle::aes128_cbc(true, testsupport::to_oracle(key.bytes), testsupport::to_oracle(iv.bytes), plain));
        EXPECT_EQ(decrypt_cbc(key, iv, ct), plain);
    }
}

// Flipping one ciphertext bit garbles its own block and flips the same bit of
// the next plaintext block; nothing else changes.
TEST(Cipher, CbcBitFlipPropagation)
{
    std::mt19937_64 rng(3);
    Bytes plain(16 * 6);
    for (auto& b : plain) b = static_cast<std::uint8_t>(rng());
    const Bytes ct = encrypt_cbc(kKey, kIv, plain);
    for (std::size_t block = 0; block < 6; ++block) {
        Bytes bad = ct;
        const std::size_t bit_at = block * 16 + 5;
        bad[bit_at] ^= 0x04;
        const Bytes out = decrypt_cbc(kKey, kIv, bad);
        for (std::size_t i = 0; i < out.size(); ++i) {
            const std::size_t b = i / 16;
            if (b == block) continue;
            if (b == block + 1)
                EXPECT_EQ(out[i] ^ plain[i], i == bit_at + 16 ? 0x04 : 0x00);
            else
                EXPECT_EQ(out[i], plain[i]);
        }
        EXPECT_NE(Bytes(out.begin() + block * 16, out.begin() + block * 16 + 16),
                  Bytes(plain.begin() + block * 16, plain.begin() + block * 16 + 16));
    }
}

TEST(Cipher, KeyFromHexValidatesLength) { EXPECT_THROW(SymmetricKey::from_hex("00112233"), Error); }
