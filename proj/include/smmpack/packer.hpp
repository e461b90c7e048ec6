#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>

#include "smmpack/bytes.hpp"
#include "smmpack/cipher.hpp"
#include "smmpack/pe_image.hpp"
#include "smmpack/tpm.hpp"

namespace smmpack {

inline constexpr std::string_view kTextSectionName = ".text";
inline constexpr std::string_view kStubSectionName = ".ext";
inline constexpr std::array<std::uint8_t, 4> kStubMagic = {'S', 'P', 'K', '1'};
inline constexpr std::uint16_t kStubVersion = 1;
inline constexpr std::size_t kStubDescriptorSize = 64;
inline constexpr std::uint32_t kStubCharacteristics = pe::kCodeCharacteristics;

/// GUID under which the unpack protocol is installed.
inline const Guid kSmmPackProtocolGuid = Guid::parse("6b0f3c1e-9a4d-4c2b-8e5f-53d2a7c91e04");

/// Parameters the decrypt stub carries. Layout (little-endian):
///   0  magic "SPK1"          22 iv[16]
///   4  version u16           38 protocol_guid[16]
///   6  original_entry_rva    54 reserved, zero up to 64
///  10  text_rva
///  14  text_cipher_len
///  18  text_plain_len
struct StubDescriptor {
    std::uint16_t version = kStubVersion;
    std::uint32_t original_entry_rva = 0;
    std::uint32_t text_rva = 0;
    std::uint32_t text_cipher_len = 0;
    std::uint32_t text_plain_len = 0;
    Iv iv;
    Guid protocol_guid = kSmmPackProtocolGuid;

    Bytes encode() const
    {
        Bytes out(kStubMagic.begin(), kStubMagic.end());
        append_le16(out, version);
        append_le32(out, original_entry_rva);
        append_le32(out, text_rva);
        append_le32(out, text_cipher_len);
        append_le32(out, text_plain_len);
        append(out, iv.bytes);
        append(out, protocol_guid.bytes);
        out.resize(kStubDescriptorSize, 0);
        return out;
    }

    static std::optional<StubDescriptor> decode(ByteView raw)
    {
        if (raw.size() < kStubDescriptorSize || !std::equal(kStubMagic.begin(), kStubMagic.end(), raw.begin()))
            return std::nullopt;
        StubDescriptor d;
        d.version = load_le16(&raw[4]);
        d.original_entry_rva = load_le32(&raw[6]);
        d.text_rva = load_le32(&raw[10]);
        d.text_cipher_len = load_le32(&raw[14]);
        d.text_plain_len = load_le32(&raw[18]);
        d.iv = Iv::from_bytes(raw.subspan(22, 16));
        d.protocol_guid = Guid::from_bytes(raw.subspan(38, 16));
        if (d.text_cipher_len % kAesBlockSize != 0 || d.text_plain_len > d.text_cipher_len ||
            d.text_cipher_len >= d.text_plain_len + kAesBlockSize)
            return std::nullopt;
        return d;
    }

    friend bool operator==(const StubDescriptor&, const StubDescriptor&) = default;
};

struct PackReport {
    std::string module_name;
    std::uint32_t text_size_bytes = 0;
    std::uint32_t stub_section_raw_size = 0;
    std::uint32_t size_overhead_bytes = 0;
    bool packed = false;
};

struct PackResult {
    Bytes packed;
    PackReport report;
    StubDescriptor descriptor;
};

namespace detail {

inline pe::PeImage parse_or_not_a_pe(ByteView bytes)
{
    try {
        return pe::PeImage::parse(bytes);
    } catch (const Error& e) {
        fail(ErrorCode::NotAPe, e.what());
    }
}

inline std::optional<StubDescriptor> stub_of(const pe::PeImage& image)
{
    const pe::Section* ext = image.find_section(kStubSectionName);
    if (!ext) return std::nullopt;
    return StubDescriptor::decode(ext->data);
}

/// Plaintext length of .text: its virtual size, capped by the raw data.
inline std::uint32_t text_plain_length(const pe::Section& text)
{
    return text.virtual_size == 0 ? text.raw_size : std::min(text.virtual_size, text.raw_size);
}

} // namespace detail

inline std::optional<StubDescriptor> read_stub(ByteView pe_bytes)
{
    return detail::stub_of(detail::parse_or_not_a_pe(pe_bytes));
}

inline bool is_packed(ByteView pe_bytes) { return read_stub(pe_bytes).has_value(); }

/// Encrypts .text in place (zero-padded to a block multiple inside the
/// section's raw slack), appends .ext holding the stub descriptor and points
/// the entry at it. The IV is random unless a seed is given.
inline PackResult pack_module(ByteView pe_bytes, const SymmetricKey& key, std::optional<std::uint64_t> rng_seed = {},
                              std::string module_name = {})
{
    const pe::PeImage image = detail::parse_or_not_a_pe(pe_bytes);
    if (detail::stub_of(image)) fail(ErrorCode::AlreadyPacked);
    const pe::Section* text = image.find_section(kTextSectionName);
    if (!text) fail(ErrorCode::NoTextSection);

    const std::uint32_t plain_len = detail::text_plain_length(*text);
    const auto cipher_len = static_cast<std::uint32_t>(align_up(plain_len, kAesBlockSize));
    if (plain_len == 0) fail(ErrorCode::NoTextSection, ".text is empty");
    if (cipher_len > text->raw_size)
        fail(ErrorCode::NoSlackForPadding, "need " + std::to_string(cipher_len) + " bytes, section has " +
                                               std::to_string(text->raw_size));

    StubDescriptor stub;
    if (rng_seed) {
        std::mt19937_64 rng(*rng_seed);
        stub.iv.bytes = random_block(rng);
    } else {
        std::random_device rd;
        std::mt19937_64 rng((static_cast<std::uint64_t>(rd()) << 32) ^ rd());
        stub.iv.bytes = random_block(rng);
    }
    stub.original_entry_rva = image.entry_point_rva();
    stub.text_rva = text->virtual_address;
    stub.text_cipher_len = cipher_len;
    stub.text_plain_len = plain_len;

    Bytes text_bytes = text->data;
    std::fill(text_bytes.begin() + plain_len, text_bytes.begin() + cipher_len, 0);
    encrypt_cbc_in_place(key, stub.iv, std::span(text_bytes).first(cipher_len));

    pe::PeImage packed = image.replace_section_data(kTextSectionName, text_bytes)
                             .append_section(kStubSectionName, stub.encode(), kStubCharacteristics);
    packed = packed.set_entry_point(packed.section(kStubSectionName).virtual_address);

    PackResult result;
    result.packed = packed.serialize();
    result.descriptor = stub;
    result.report.module_name = std::move(module_name);
    result.report.text_size_bytes = text->virtual_extent();
    result.report.stub_section_raw_size = packed.section(kStubSectionName).raw_size;
    result.report.size_overhead_bytes = result.report.stub_section_raw_size;
    result.report.packed = true;
    return result;
}

inline PackReport inspect(ByteView pe_bytes, std::string module_name = {})
{
    const pe::PeImage image = detail::parse_or_not_a_pe(pe_bytes);
    PackReport r;
    r.module_name = std::move(module_name);
    if (const pe::Section* text = image.find_section(kTextSectionName)) r.text_size_bytes = text->virtual_extent();
    if (detail::stub_of(image)) {
        r.packed = true;
        r.stub_section_raw_size = image.section(kStubSectionName).raw_size;
        r.size_overhead_bytes = r.stub_section_raw_size;
    }
    return r;
}

/// Size added to a firmware image by packing `module_count` modules plus the
/// unpacking agent itself. Linear in the module count.
constexpr std::uint64_t size_overhead(std::uint64_t module_count, std::uint64_t stub_raw_size, std::uint64_t agent_size)
{
    return module_count * stub_raw_size + agent_size;
}

// -- key sealing --------------------------------------------------------------

inline constexpr std::uint16_t kSealedKeySize = 16;

namespace detail {

/// Flushes a session when leaving scope.
class ScopedSession {
public:
    ScopedSession(tpm::Tpm& t, tpm::SessionKind kind) : tpm_(t), handle_(t.start_auth_session(kind)) {}
    ~ScopedSession()
    {
        try {
            tpm_.flush_context(handle_);
        } catch (const Error&) {
        }
    }
    ScopedSession(const ScopedSession&) = delete;
    ScopedSession& operator=(const ScopedSession&) = delete;

    tpm::SessionHandle handle() const { return handle_; }

private:
    tpm::Tpm& tpm_;
    tpm::SessionHandle handle_;
};

} // namespace detail

/// Policy digest that authorizes reads exactly when PCR0 == enrolled_pcr0,
/// computed on a trial session.
inline Digest trial_policy_for_pcr0(tpm::Tpm& t, const Digest& enrolled_pcr0)
{
    detail::ScopedSession trial(t, tpm::SessionKind::trial);
    t.policy_pcr(trial.handle(), tpm::PcrSelection{0}, sha256(enrolled_pcr0));
    return t.policy_get_digest(trial.handle());
}

/// Trial session -> PolicyPCR -> PolicyGetDigest -> NV_DefineSpace -> NV_Write.
inline void seal_key(tpm::Tpm& t, std::uint32_t nv_index, const SymmetricKey& key, const Digest& enrolled_pcr0)
{
    const Digest policy = trial_policy_for_pcr0(t, enrolled_pcr0);
    t.nv_define_space(nv_index, kSealedKeySize, policy);
    t.nv_write(nv_index, key.bytes);
}

/// StartAuthSession (policy) -> PolicyPCR over PCR0 -> NV_Read.
inline SymmetricKey unseal_key(tpm::Tpm& t, std::uint32_t nv_index)
{
    detail::ScopedSession session(t, tpm::SessionKind::policy);
    t.policy_pcr(session.handle(), tpm::PcrSelection{0});
    Bytes data = t.nv_read(nv_index, session.handle());
    if (data.size() != kSealedKeySize) fail(ErrorCode::MalformedState, "sealed key has the wrong length");
    return SymmetricKey::from_bytes(data);
}

} // namespace smmpack
