#pragma once

// Builds small, valid PE32+ modules with a known sentinel in .text. Used to
// populate simulated firmware volumes; the sentinel lets the simulator prove
// that a module's code was decrypted correctly.

#include <array>
#include <cstdint>
#include <random>

#include "smmpack/bytes.hpp"
#include "smmpack/pe_image.hpp"

namespace smmpack {

inline constexpr std::size_t kSentinelSize = 16;
using Sentinel = std::array<std::uint8_t, kSentinelSize>;

struct ModuleSpec {
    std::uint32_t text_size = 4096;
    std::uint32_t data_size = 512;
    Sentinel sentinel{};
    std::uint32_t sentinel_offset = 16;
    std::uint32_t entry_offset = 0;
    std::uint32_t file_alignment = 512;
    std::uint32_t section_alignment = 4096;
    std::uint64_t seed = 0;
    bool with_checksum = false;
};

namespace detail {

inline void fill_random(Bytes& out, std::size_t begin, std::size_t end, std::mt19937_64& rng)
{
    for (std::size_t i = begin; i < end; ++i) out[i] = static_cast<std::uint8_t>(rng() & 0xff);
}

} // namespace detail

inline Bytes build_module(const ModuleSpec& spec)
{
    if (spec.text_size == 0) fail(ErrorCode::InvalidArgument, "text section must be nonempty");
    if (spec.sentinel_offset + kSentinelSize > spec.text_size)
        fail(ErrorCode::InvalidArgument, "sentinel does not fit in the text section");
    if (spec.entry_offset >= spec.text_size) fail(ErrorCode::InvalidArgument, "entry offset outside text");
    if (!is_power_of_two(spec.file_alignment) || !is_power_of_two(spec.section_alignment) ||
        spec.section_alignment < spec.file_alignment)
        fail(ErrorCode::InvalidArgument, "bad alignment");

    std::mt19937_64 rng(spec.seed);
    constexpr std::uint32_t kPeOffset = 0x40;
    constexpr std::uint32_t kOptionalSize = 240;
    constexpr std::uint32_t kTableOffset = kPeOffset + 24 + kOptionalSize;
    // Room for four section headers so the packer can append one more.
    const auto headers_size = static_cast<std::uint32_t>(align_up(kTableOffset + 4 * pe::kSectionHeaderSize, spec.file_alignment));
    const bool has_data = spec.data_size != 0;

    const auto text_raw = static_cast<std::uint32_t>(align_up(spec.text_size, spec.file_alignment));
    const auto data_raw = static_cast<std::uint32_t>(align_up(spec.data_size, spec.file_alignment));
    const auto text_va = static_cast<std::uint32_t>(align_up(headers_size, spec.section_alignment));
    const auto data_va = static_cast<std::uint32_t>(align_up(text_va + spec.text_size, spec.section_alignment));
    const auto image_end = has_data ? data_va + spec.data_size : text_va + spec.text_size;
    const auto size_of_image = static_cast<std::uint32_t>(align_up(image_end, spec.section_alignment));

    const std::uint32_t text_off = headers_size;
    const std::uint32_t data_off = text_off + text_raw;
    Bytes file(data_off + (has_data ? data_raw : 0), 0);

    // DOS header.
    file[0] = 'M';
    file[1] = 'Z';
    store_le32(&file[0x3c], kPeOffset);

    // PE signature + COFF header.
    std::uint8_t* coff = &file[kPeOffset];
    coff[0] = 'P';
    coff[1] = 'E';
    store_le16(coff + 4, pe::kMachineAmd64);
    store_le16(coff + 6, has_data ? 2 : 1);
    store_le16(coff + 20, kOptionalSize);
    store_le16(coff + 22, 0x2022); // executable, large-address-aware, DLL

    // Optional header (PE32+).
    std::uint8_t* opt = &file[kPeOffset + 24];
    store_le16(opt + 0, pe::kOptionalMagicPe32Plus);
    store_le32(opt + 4, text_raw);
    store_le32(opt + 8, has_data ? data_raw : 0);
    store_le32(opt + 16, text_va + spec.entry_offset);
    store_le32(opt + 20, text_va);
    store_le32(opt + 32, spec.section_alignment);
    store_le32(opt + 36, spec.file_alignment);
    store_le32(opt + 56, size_of_image);
    store_le32(opt + 60, headers_size);
    store_le16(opt + 68, 11); // EFI boot service driver
    store_le64(opt + 72, 0x100000);
    store_le64(opt + 80, 0x1000);
    store_le64(opt + 88, 0x100000);
    store_le64(opt + 96, 0x1000);
    store_le32(opt + 108, 16);

    auto write_header = [&](int index, const char* name, std::uint32_t vsize, std::uint32_t va, std::uint32_t raw,
                            std::uint32_t offset, std::uint32_t flags) {
        std::uint8_t* h = &file[kTableOffset + index * pe::kSectionHeaderSize];
        auto n = pe::section_name(name);
        std::copy(n.begin(), n.end(), reinterpret_cast<char*>(h));
        store_le32(h + 8, vsize);
        store_le32(h + 12, va);
        store_le32(h + 16, raw);
        store_le32(h + 20, offset);
        store_le32(h + 36, flags);
    };
    write_header(0, ".text", spec.text_size, text_va, text_raw, text_off, pe::kCodeCharacteristics);
    if (has_data) write_header(1, ".data", spec.data_size, data_va, data_raw, data_off, pe::kDataCharacteristics);

    // Section contents: random "code" with the sentinel at its offset; raw
    // slack past virtual_size stays zero.
    detail::fill_random(file, text_off, text_off + spec.text_size, rng);
    std::copy(spec.sentinel.begin(), spec.sentinel.end(), file.begin() + text_off + spec.sentinel_offset);
    if (has_data) detail::fill_random(file, data_off, data_off + spec.data_size, rng);

    if (spec.with_checksum) {
        const std::size_t at = kPeOffset + 24 + pe::off::kOptCheckSum;
        store_le32(&file[at], pe::compute_checksum(file, at));
    }
    return file;
}

} // namespace smmpack
