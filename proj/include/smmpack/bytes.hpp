#pragma once

#include <algorithm>
#include <array>
#include <compare>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "smmpack/error.hpp"

namespace smmpack {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

/// 32-byte SHA-256 value: PCR contents, policy digests, measurements.
using Digest = std::array<std::uint8_t, 32>;

inline std::string to_hex(ByteView bytes)
{
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string out;
    out.reserve(bytes.size() * 2);
    for (auto b : bytes) {
        out.push_back(kDigits[b >> 4]);
        out.push_back(kDigits[b & 0x0f]);
    }
    return out;
}

inline Bytes from_hex(std::string_view text)
{
    auto nibble = [](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        if (c >= 'A' && c <= 'F') return c - 'A' + 10;
        return -1;
    };
    if (text.size() % 2 != 0) fail(ErrorCode::InvalidArgument, "odd-length hex string");
    Bytes out(text.size() / 2);
    for (std::size_t i = 0; i < out.size(); ++i) {
        int hi = nibble(text[2 * i]);
        int lo = nibble(text[2 * i + 1]);
        if (hi < 0 || lo < 0) fail(ErrorCode::InvalidArgument, "invalid hex digit");
        out[i] = static_cast<std::uint8_t>((hi << 4) | lo);
    }
    return out;
}

template <std::size_t N>
std::array<std::uint8_t, N> array_from_hex(std::string_view text)
{
    Bytes raw = from_hex(text);
    if (raw.size() != N) fail(ErrorCode::InvalidArgument, "expected " + std::to_string(N) + " hex bytes");
    std::array<std::uint8_t, N> out{};
    std::copy(raw.begin(), raw.end(), out.begin());
    return out;
}

// Little-endian and big-endian field access. Bounds are the caller's job.

inline std::uint16_t load_le16(const std::uint8_t* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }

inline std::uint32_t load_le32(const std::uint8_t* p)
{
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint64_t load_le64(const std::uint8_t* p)
{
    return static_cast<std::uint64_t>(load_le32(p)) | (static_cast<std::uint64_t>(load_le32(p + 4)) << 32);
}

inline void store_le16(std::uint8_t* p, std::uint16_t v)
{
    p[0] = static_cast<std::uint8_t>(v);
    p[1] = static_cast<std::uint8_t>(v >> 8);
}

inline void store_le32(std::uint8_t* p, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i) p[i] = static_cast<std::uint8_t>(v >> (8 * i));
}

inline void store_le64(std::uint8_t* p, std::uint64_t v)
{
    for (int i = 0; i < 8; ++i) p[i] = static_cast<std::uint8_t>(v >> (8 * i));
}

inline void append_le16(Bytes& out, std::uint16_t v)
{
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void append_le32(Bytes& out, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void append_be16(Bytes& out, std::uint16_t v)
{
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

inline void append_be32(Bytes& out, std::uint32_t v)
{
    for (int i = 3; i >= 0; --i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void append(Bytes& out, ByteView more) { out.insert(out.end(), more.begin(), more.end()); }

constexpr std::uint64_t align_up(std::uint64_t value, std::uint64_t alignment)
{
    return alignment == 0 ? value : (value + alignment - 1) / alignment * alignment;
}

constexpr bool is_power_of_two(std::uint64_t v) { return v != 0 && (v & (v - 1)) == 0; }

/// True when `needle` occurs anywhere in `haystack`. Empty needles never match.
inline bool contains_bytes(ByteView haystack, ByteView needle)
{
    if (needle.empty() || needle.size() > haystack.size()) return false;
    return std::search(haystack.begin(), haystack.end(), needle.begin(), needle.end()) != haystack.end();
}

/// EFI GUID. Stored in on-disk byte order: the first three fields are
/// little-endian, the last eight bytes are taken verbatim.
struct Guid {
    std::array<std::uint8_t, 16> bytes{};

    static Guid parse(std::string_view text)
    {
        // xxxxxxxx-xxxx-xxxx-xxxx-xxxxxxxxxxxx
        if (text.size() != 36 || text[8] != '-' || text[13] != '-' || text[18] != '-' || text[23] != '-')
            fail(ErrorCode::InvalidArgument, "malformed GUID '" + std::string(text) + "'");
        std::string compact;
        for (char c : text)
            if (c != '-') compact.push_back(c);
        Bytes raw = from_hex(compact);
        Guid g;
        // data1 (4), data2 (2), data3 (2) are little-endian on disk.
        g.bytes = {raw[3], raw[2], raw[1], raw[0], raw[5], raw[4], raw[7], raw[6],
                   raw[8], raw[9], raw[10], raw[11], raw[12], raw[13], raw[14], raw[15]};
        return g;
    }

    static Guid from_bytes(ByteView raw)
    {
        if (raw.size() < 16) fail(ErrorCode::InvalidArgument, "GUID needs 16 bytes");
        Guid g;
        std::copy_n(raw.begin(), 16, g.bytes.begin());
        return g;
    }

    std::string str() const
    {
        const auto& b = bytes;
        std::array<std::uint8_t, 16> canon = {b[3], b[2], b[1], b[0], b[5], b[4], b[7], b[6],
                                              b[8], b[9], b[10], b[11], b[12], b[13], b[14], b[15]};
        std::string hex = to_hex(canon);
        return hex.substr(0, 8) + "-" + hex.substr(8, 4) + "-" + hex.substr(12, 4) + "-" + hex.substr(16, 4) +
               "-" + hex.substr(20);
    }

    bool is_zero() const
    {
        return std::all_of(bytes.begin(), bytes.end(), [](auto b) { return b == 0; });
    }

    friend auto operator<=>(const Guid&, const Guid&) = default;
};

inline Bytes read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
    return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, ByteView data)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!out) fail(ErrorCode::IoError, "short write to " + path.string());
}

inline void write_text_file(const std::filesystem::path& path, std::string_view text)
{
    write_file(path, ByteView(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::string read_text_file(const std::filesystem::path& path)
{
    Bytes raw = read_file(path);
    return std::string(raw.begin(), raw.end());
}

} // namespace smmpack
