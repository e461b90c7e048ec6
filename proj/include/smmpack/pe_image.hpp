#pragma once

// PE32+ reader/writer scoped to what a packer needs: the section table,
// entry point and image-size fields. Everything else in the headers is kept
// as opaque bytes so that serialize(parse(b)) reproduces b exactly.

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "smmpack/bytes.hpp"

namespace smmpack::pe {

inline constexpr std::uint16_t kMachineAmd64 = 0x8664;
inline constexpr std::uint16_t kOptionalMagicPe32Plus = 0x020b;
inline constexpr std::size_t kSectionHeaderSize = 40;

// Section characteristics.
inline constexpr std::uint32_t kScnCntCode = 0x00000020;
inline constexpr std::uint32_t kScnCntInitializedData = 0x00000040;
inline constexpr std::uint32_t kScnMemExecute = 0x20000000;
inline constexpr std::uint32_t kScnMemRead = 0x40000000;
inline constexpr std::uint32_t kScnMemWrite = 0x80000000;

inline constexpr std::uint32_t kCodeCharacteristics = kScnCntCode | kScnMemExecute | kScnMemRead;
inline constexpr std::uint32_t kDataCharacteristics = kScnCntInitializedData | kScnMemRead | kScnMemWrite;

// Field offsets.
namespace off {
inline constexpr std::size_t kDosLfanew = 0x3c;
inline constexpr std::size_t kCoffMachine = 4;
inline constexpr std::size_t kCoffNumberOfSections = 6;
inline constexpr std::size_t kCoffSizeOfOptionalHeader = 20;
inline constexpr std::size_t kOptionalHeader = 24;
// Relative to the optional header.
inline constexpr std::size_t kOptMagic = 0;
inline constexpr std::size_t kOptEntryPoint = 16;
inline constexpr std::size_t kOptSectionAlignment = 32;
inline constexpr std::size_t kOptFileAlignment = 36;
inline constexpr std::size_t kOptSizeOfImage = 56;
inline constexpr std::size_t kOptSizeOfHeaders = 60;
inline constexpr std::size_t kOptCheckSum = 64;
inline constexpr std::size_t kOptMinimumSize = 112;
} // namespace off

struct Section {
    std::array<char, 8> name{};
    std::uint32_t virtual_size = 0;
    std::uint32_t virtual_address = 0;
    std::uint32_t raw_size = 0;
    std::uint32_t raw_offset = 0;
    std::uint32_t characteristics = 0;
    Bytes data; // exactly raw_size bytes

    std::string name_str() const
    {
        auto end = std::find(name.begin(), name.end(), '\0');
        return std::string(name.begin(), end);
    }

    bool executable() const { return (characteristics & (kScnMemExecute | kScnCntCode)) != 0; }

    /// Extent of the section in the loaded image.
    std::uint32_t virtual_extent() const { return virtual_size != 0 ? virtual_size : raw_size; }

    bool contains_rva(std::uint64_t rva) const
    {
        return rva >= virtual_address && rva < static_cast<std::uint64_t>(virtual_address) + virtual_extent();
    }

    friend bool operator==(const Section&, const Section&) = default;
};

inline std::array<char, 8> section_name(std::string_view name)
{
    if (name.empty() || name.size() > 8) fail(ErrorCode::InvalidArgument, "section name must be 1..8 bytes");
    std::array<char, 8> out{};
    std::copy(name.begin(), name.end(), out.begin());
    return out;
}

/// Standard PE image checksum: 16-bit one's-complement-style folding sum over
/// the file with the checksum field skipped, plus the file length.
inline std::uint32_t compute_checksum(ByteView file, std::size_t checksum_offset)
{
    std::uint64_t sum = 0;
    for (std::size_t i = 0; i < file.size(); i += 2) {
        if (i == checksum_offset || i == checksum_offset + 2) continue;
        std::uint32_t word = file[i];
        if (i + 1 < file.size()) word |= static_cast<std::uint32_t>(file[i + 1]) << 8;
        sum += word;
        sum = (sum & 0xffff) + (sum >> 16);
    }
    sum = (sum & 0xffff) + (sum >> 16);
    return static_cast<std::uint32_t>(sum + file.size());
}

/// Immutable parsed PE32+ image. Edits return new values.
class PeImage {
public:
    static PeImage parse(ByteView file)
    {
        auto malformed = [](const std::string& why) { fail(ErrorCode::MalformedHeader, why); };

        if (file.size() < 0x40) malformed("file too small for a DOS header");
        if (file[0] != 'M' || file[1] != 'Z') malformed("missing MZ signature");

        PeImage img;
        img.file_size_ = static_cast<std::uint32_t>(file.size());
        img.pe_offset_ = load_le32(&file[off::kDosLfanew]);
        const std::uint64_t pe = img.pe_offset_;
        if (pe + off::kOptionalHeader > file.size()) malformed("PE header beyond end of file");
        if (file[pe] != 'P' || file[pe + 1] != 'E' || file[pe + 2] != 0 || file[pe + 3] != 0)
            malformed("missing PE signature");

        if (load_le16(&file[pe + off::kCoffMachine]) != kMachineAmd64) malformed("machine is not x86-64");
        const std::uint16_t section_count = load_le16(&file[pe + off::kCoffNumberOfSections]);
        const std::uint16_t optional_size = load_le16(&file[pe + off::kCoffSizeOfOptionalHeader]);

        const std::uint64_t opt = pe + off::kOptionalHeader;
        if (optional_size < off::kOptMinimumSize || opt + optional_size > file.size())
            malformed("truncated optional header");
        if (load_le16(&file[opt + off::kOptMagic]) != kOptionalMagicPe32Plus) malformed("not a PE32+ image");

        img.optional_offset_ = static_cast<std::uint32_t>(opt);
        img.entry_point_rva_ = load_le32(&file[opt + off::kOptEntryPoint]);
        img.section_alignment_ = load_le32(&file[opt + off::kOptSectionAlignment]);
        img.file_alignment_ = load_le32(&file[opt + off::kOptFileAlignment]);
        img.size_of_image_ = load_le32(&file[opt + off::kOptSizeOfImage]);
        img.size_of_headers_ = load_le32(&file[opt + off::kOptSizeOfHeaders]);
        img.checksum_ = load_le32(&file[opt + off::kOptCheckSum]);

        if (!is_power_of_two(img.file_alignment_) || img.file_alignment_ > 0x10000)
            malformed("file alignment must be a power of two <= 64K");
        if (!is_power_of_two(img.section_alignment_) || img.section_alignment_ < img.file_alignment_)
            malformed("section alignment must be a power of two >= file alignment");

        img.section_table_offset_ = static_cast<std::uint32_t>(opt + optional_size);
        const std::uint64_t table_end =
            static_cast<std::uint64_t>(img.section_table_offset_) + std::uint64_t{section_count} * kSectionHeaderSize;
        if (table_end > file.size()) malformed("truncated section table");

        std::uint64_t headers_end = file.size();
        for (std::uint16_t i = 0; i < section_count; ++i) {
            const std::uint8_t* h = &file[img.section_table_offset_ + i * kSectionHeaderSize];
            Section s;
            std::copy_n(reinterpret_cast<const char*>(h), 8, s.name.begin());
            s.virtual_size = load_le32(h + 8);
            s.virtual_address = load_le32(h + 12);
            s.raw_size = load_le32(h + 16);
            s.raw_offset = load_le32(h + 20);
            s.characteristics = load_le32(h + 36);

            if (s.raw_offset % img.file_alignment_ != 0 || s.raw_size % img.file_alignment_ != 0)
                malformed("section " + s.name_str() + " is not file-aligned");
            if (static_cast<std::uint64_t>(s.raw_offset) + s.raw_size > file.size())
                malformed("section " + s.name_str() + " extends beyond end of file");
            if (s.raw_size != 0) {
                if (s.raw_offset < table_end) malformed("section " + s.name_str() + " overlaps the headers");
                headers_end = std::min<std::uint64_t>(headers_end, s.raw_offset);
                s.data.assign(file.begin() + s.raw_offset, file.begin() + s.raw_offset + s.raw_size);
            }
            img.sections_.push_back(std::move(s));
        }

        // Virtual layout: sorted, non-overlapping, inside SizeOfImage.
        for (std::size_t i = 0; i < img.sections_.size(); ++i) {
            const auto& s = img.sections_[i];
            std::uint64_t end = static_cast<std::uint64_t>(s.virtual_address) + s.virtual_extent();
            if (end > img.size_of_image_) malformed("section " + s.name_str() + " exceeds SizeOfImage");
            if (i + 1 < img.sections_.size() && img.sections_[i + 1].virtual_address < end)
                malformed("sections overlap or are unsorted in the virtual layout");
        }

        // File layout: non-overlapping raw ranges.
        std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
        for (const auto& s : img.sections_)
            if (s.raw_size != 0) ranges.emplace_back(s.raw_offset, s.raw_offset + std::uint64_t{s.raw_size});
        std::sort(ranges.begin(), ranges.end());
        for (std::size_t i = 1; i < ranges.size(); ++i)
            if (ranges[i].first < ranges[i - 1].second) malformed("sections overlap in the file layout");

        bool entry_ok = std::any_of(img.sections_.begin(), img.sections_.end(), [&](const Section& s) {
            return s.executable() && s.contains_rva(img.entry_point_rva_);
        });
        if (!entry_ok) malformed("entry point is not inside an executable section");

        img.headers_.assign(file.begin(), file.begin() + static_cast<std::ptrdiff_t>(headers_end));

        // Whatever lies between or after sections is kept verbatim.
        std::uint64_t cursor = headers_end;
        auto keep_gap = [&](std::uint64_t until) {
            if (until > cursor)
                img.extra_.push_back({static_cast<std::uint32_t>(cursor),
                                      Bytes(file.begin() + static_cast<std::ptrdiff_t>(cursor),
                                            file.begin() + static_cast<std::ptrdiff_t>(until))});
        };
        for (const auto& [begin, end] : ranges) {
            keep_gap(begin);
            cursor = std::max(cursor, end);
        }
        keep_gap(file.size());
        return img;
    }

    Bytes serialize() const
    {
        Bytes out(file_size_, 0);
        std::copy(headers_.begin(), headers_.end(), out.begin());
        for (const auto& s : sections_)
            if (s.raw_size != 0) std::copy(s.data.begin(), s.data.end(), out.begin() + s.raw_offset);
        for (const auto& chunk : extra_) std::copy(chunk.bytes.begin(), chunk.bytes.end(), out.begin() + chunk.offset);
        return out;
    }

    std::uint16_t machine() const { return kMachineAmd64; }
    std::uint32_t entry_point_rva() const { return entry_point_rva_; }
    std::uint32_t section_alignment() const { return section_alignment_; }
    std::uint32_t file_alignment() const { return file_alignment_; }
    std::uint32_t size_of_image() const { return size_of_image_; }
    std::uint32_t size_of_headers() const { return size_of_headers_; }
    std::uint32_t checksum() const { return checksum_; }
    std::uint32_t file_size() const { return file_size_; }
    const std::vector<Section>& sections() const { return sections_; }
    /// Header bytes up to the first section's raw data.
    ByteView raw_headers() const { return headers_; }

    /// First section whose full 8-byte name matches, or nullptr.
    const Section* find_section(std::string_view name) const noexcept
    {
        if (name.size() > 8) return nullptr;
        std::array<char, 8> key{};
        std::copy(name.begin(), name.end(), key.begin());
        for (const auto& s : sections_)
            if (s.name == key) return &s;
        return nullptr;
    }

    const Section& section(std::string_view name) const
    {
        if (const Section* s = find_section(name)) return *s;
        fail(ErrorCode::NotFound, "no section named '" + std::string(name) + "'");
    }

    /// Appends a section after the last one in both the file and the virtual
    /// layout. Only the section count, SizeOfImage, the new table entry (and
    /// the checksum, when the image carried one) change in the headers.
    PeImage append_section(std::string_view name, ByteView data, std::uint32_t characteristics) const
    {
        auto raw_name = section_name(name);
        if (find_section(name)) fail(ErrorCode::DuplicateSectionName, std::string(name));
        if (data.empty()) fail(ErrorCode::InvalidArgument, "appended section data must be nonempty");

        const std::uint64_t slot = section_table_offset_ + sections_.size() * kSectionHeaderSize;
        const std::uint64_t header_limit = std::min<std::uint64_t>(headers_.size(), size_of_headers_);
        if (slot + kSectionHeaderSize > header_limit)
            fail(ErrorCode::HeaderFull, "no room in the headers for another section entry");

        std::uint64_t virtual_end = align_up(size_of_headers_, section_alignment_);
        for (const auto& s : sections_)
            virtual_end = std::max<std::uint64_t>(virtual_end, std::uint64_t{s.virtual_address} + s.virtual_extent());

        const auto raw_offset = static_cast<std::uint32_t>(align_up(file_size_, file_alignment_));
        const auto raw_size = static_cast<std::uint32_t>(align_up(data.size(), file_alignment_));
        const auto va = static_cast<std::uint32_t>(align_up(virtual_end, section_alignment_));
        const auto vsize = static_cast<std::uint32_t>(data.size());
        const auto new_size_of_image = static_cast<std::uint32_t>(align_up(std::uint64_t{va} + vsize, section_alignment_));

        Bytes file = serialize();
        file.resize(std::uint64_t{raw_offset} + raw_size, 0);
        std::copy(data.begin(), data.end(), file.begin() + raw_offset);

        std::uint8_t* h = &file[slot];
        std::fill_n(h, kSectionHeaderSize, 0);
        std::copy(raw_name.begin(), raw_name.end(), reinterpret_cast<char*>(h));
        store_le32(h + 8, vsize);
        store_le32(h + 12, va);
        store_le32(h + 16, raw_size);
        store_le32(h + 20, raw_offset);
        store_le32(h + 36, characteristics);

        store_le16(&file[pe_offset_ + off::kCoffNumberOfSections], static_cast<std::uint16_t>(sections_.size() + 1));
        store_le32(&file[optional_offset_ + off::kOptSizeOfImage], new_size_of_image);
        return reparse_with_checksum(std::move(file));
    }

    PeImage set_entry_point(std::uint32_t rva) const
    {
        if (rva >= size_of_image_) fail(ErrorCode::RvaOutOfRange, "rva beyond SizeOfImage");
        bool ok = std::any_of(sections_.begin(), sections_.end(),
                              [&](const Section& s) { return s.executable() && s.contains_rva(rva); });
        if (!ok) fail(ErrorCode::RvaOutOfRange, "rva is not inside an executable section");
        Bytes file = serialize();
        store_le32(&file[optional_offset_ + off::kOptEntryPoint], rva);
        return reparse_with_checksum(std::move(file));
    }

    /// Replaces a section's raw bytes with same-sized content.
    PeImage replace_section_data(std::string_view name, ByteView data) const
    {
        const Section& s = section(name);
        if (data.size() != s.raw_size) fail(ErrorCode::InvalidArgument, "replacement must keep the raw size");
        Bytes file = serialize();
        std::copy(data.begin(), data.end(), file.begin() + s.raw_offset);
        return reparse_with_checksum(std::move(file));
    }

    friend bool operator==(const PeImage&, const PeImage&) = default;

private:
    struct Chunk {
        std::uint32_t offset = 0;
        Bytes bytes;
        friend bool operator==(const Chunk&, const Chunk&) = default;
    };

    PeImage reparse_with_checksum(Bytes file) const
    {
        if (checksum_ != 0) {
            const std::size_t at = optional_offset_ + off::kOptCheckSum;
            store_le32(&file[at], compute_checksum(file, at));
        }
        return parse(file);
    }

    Bytes headers_;
    std::vector<Section> sections_;
    std::vector<Chunk> extra_;
    std::uint32_t file_size_ = 0;
    std::uint32_t pe_offset_ = 0;
    std::uint32_t optional_offset_ = 0;
    std::uint32_t section_table_offset_ = 0;
    std::uint32_t entry_point_rva_ = 0;
    std::uint32_t section_alignment_ = 0;
    std::uint32_t file_alignment_ = 0;
    std::uint32_t size_of_image_ = 0;
    std::uint32_t size_of_headers_ = 0;
    std::uint32_t checksum_ = 0;
};

inline PeImage parse_pe(ByteView bytes) { return PeImage::parse(bytes); }
inline Bytes serialize_pe(const PeImage& image) { return image.serialize(); }

} // namespace smmpack::pe
