#pragma once

// A software TPM 2.0 subset: one SHA-256 PCR bank, trial and policy sessions
// with PolicyPCR, and policy-gated NV storage. The command surface is an
// in-process API; state persists through a JSON snapshot.

#include <algorithm>
#include <array>
#include <bitset>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <map>
#include <optional>
#include <string>

#include <json.hpp>

#include "smmpack/bytes.hpp"
#include "smmpack/sha256.hpp"

namespace smmpack::tpm {

inline constexpr std::size_t kPcrCount = 24;
inline constexpr std::size_t kMaxSessions = 64;
inline constexpr std::uint32_t kCcPolicyPcr = 0x0000017f;
inline constexpr std::uint16_t kAlgSha256 = 0x000b;
inline constexpr std::uint32_t kFirstSessionHandle = 0x03000000;
inline constexpr int kSnapshotVersion = 1;

enum class SessionKind { trial, policy };

struct SessionHandle {
    std::uint32_t value = 0;
    friend auto operator<=>(const SessionHandle&, const SessionHandle&) = default;
};

struct PolicySession {
    SessionHandle handle;
    SessionKind kind = SessionKind::policy;
    Digest policy_digest{};
};

struct NvSlot {
    std::uint32_t index = 0;
    std::uint16_t size = 0;
    Digest auth_policy{};
    Bytes data;
    bool written = false;

    friend bool operator==(const NvSlot&, const NvSlot&) = default;
};

class PcrSelection {
public:
    PcrSelection(std::initializer_list<unsigned> indices)
    {
        for (unsigned i : indices) {
            if (i >= kPcrCount) fail(ErrorCode::IndexOutOfRange, "PCR " + std::to_string(i));
            bits_.set(i);
        }
        if (bits_.none()) fail(ErrorCode::InvalidArgument, "PCR selection must be nonempty");
    }

    bool selected(unsigned index) const { return index < kPcrCount && bits_.test(index); }

    /// TPML_PCR_SELECTION with a single SHA-256 bank:
    /// count (u32 BE) = 1, hash (u16 BE) = 0x000B, sizeofSelect (u8) = 3,
    /// then a 3-byte bitmap where PCR i is bit (i % 8) of byte (i / 8).
    Bytes encode() const
    {
        Bytes out;
        append_be32(out, 1);
        append_be16(out, kAlgSha256);
        out.push_back(3);
        for (unsigned byte = 0; byte < 3; ++byte) {
            std::uint8_t v = 0;
            for (unsigned bit = 0; bit < 8; ++bit)
                if (bits_.test(byte * 8 + bit)) v |= static_cast<std::uint8_t>(1u << bit);
            out.push_back(v);
        }
        return out;
    }

private:
    std::bitset<kPcrCount> bits_;
};

/// SHA-256 over the selected PCR values, concatenated in index order.
inline Digest pcr_composite_digest(const std::array<Digest, kPcrCount>& pcrs, const PcrSelection& selection)
{
    Sha256 h;
    for (unsigned i = 0; i < kPcrCount; ++i)
        if (selection.selected(i)) h.update(pcrs[i]);
    return h.finish();
}

/// PolicyPCR digest chaining:
/// new = SHA-256(old || CC_PolicyPCR || selection || pcr_digest).
inline Digest chain_policy_pcr(const Digest& old_digest, const PcrSelection& selection, const Digest& pcr_digest)
{
    Bytes cc;
    append_be32(cc, kCcPolicyPcr);
    Sha256 h;
    h.update(old_digest);
    h.update(cc);
    h.update(selection.encode());
    h.update(pcr_digest);
    return h.finish();
}

class Tpm {
public:
    Tpm() = default;

    const Digest& pcr(unsigned index) const
    {
        check_pcr_index(index);
        return pcrs_[index];
    }

    const std::array<Digest, kPcrCount>& pcrs() const { return pcrs_; }

    /// pcr[index] := SHA-256(pcr[index] || measurement)
    Digest pcr_extend(unsigned index, const Digest& measurement)
    {
        check_pcr_index(index);
        pcrs_[index] = sha256_concat(pcrs_[index], measurement);
        return pcrs_[index];
    }

    SessionHandle start_auth_session(SessionKind kind)
    {
        if (sessions_.size() >= kMaxSessions) fail(ErrorCode::SessionTableFull);
        SessionHandle handle{kFirstSessionHandle + next_session_++};
        sessions_[handle] = PolicySession{handle, kind, Digest{}};
        return handle;
    }

    /// Extends the session's policy digest with the current values of the
    /// selected PCRs. A trial session may instead supply the PCR composite
    /// digest it wants to bind to (how a policy for a future PCR state is
    /// computed). A policy session given an expected digest must match the
    /// live PCRs.
    Digest policy_pcr(SessionHandle handle, const PcrSelection& selection,
                      const std::optional<Digest>& expected_pcr_digest = std::nullopt)
    {
        PolicySession& s = session(handle);
        Digest live = pcr_composite_digest(pcrs_, selection);
        Digest bound = live;
        if (expected_pcr_digest) {
            if (s.kind == SessionKind::trial)
                bound = *expected_pcr_digest;
            else if (*expected_pcr_digest != live)
                fail(ErrorCode::PolicyMismatch, "PCR digest differs from the live PCR values");
        }
        s.policy_digest = chain_policy_pcr(s.policy_digest, selection, bound);
        return s.policy_digest;
    }

    Digest policy_get_digest(SessionHandle handle) const { return session(handle).policy_digest; }

    void flush_context(SessionHandle handle)
    {
        if (sessions_.erase(handle) == 0) fail(ErrorCode::UnknownSession);
    }

    std::size_t active_sessions() const { return sessions_.size(); }

    void nv_define_space(std::uint32_t index, std::uint16_t size, const Digest& auth_policy)
    {
        require_platform_hierarchy();
        if (nv_.contains(index)) fail(ErrorCode::IndexInUse, hex_index(index));
        nv_[index] = NvSlot{index, size, auth_policy, {}, false};
    }

    void nv_write(std::uint32_t index, ByteView data)
    {
        require_platform_hierarchy();
        NvSlot& slot = nv_slot_mut(index);
        if (data.size() > slot.size) fail(ErrorCode::DataTooLarge);
        slot.data.assign(data.begin(), data.end());
        slot.written = true;
    }

    /// Returns the slot contents iff the policy session's digest equals the
    /// slot's auth policy.
    Bytes nv_read(std::uint32_t index, SessionHandle handle) const
    {
        const NvSlot& slot = nv_slot(index);
        const PolicySession& s = session(handle);
        if (s.kind == SessionKind::trial) fail(ErrorCode::TrialSessionNotAllowed);
        if (!slot.written) fail(ErrorCode::NotWritten, hex_index(index));
        if (s.policy_digest != slot.auth_policy) fail(ErrorCode::PolicyMismatch, hex_index(index));
        return slot.data;
    }

    void nv_undefine_space(std::uint32_t index)
    {
        require_platform_hierarchy();
        if (nv_.erase(index) == 0) fail(ErrorCode::UnknownIndex, hex_index(index));
    }

    bool nv_defined(std::uint32_t index) const { return nv_.contains(index); }

    const NvSlot& nv_slot(std::uint32_t index) const
    {
        auto it = nv_.find(index);
        if (it == nv_.end()) fail(ErrorCode::UnknownIndex, hex_index(index));
        return it->second;
    }

    const std::map<std::uint32_t, NvSlot>& nv_slots() const { return nv_; }

    /// Power cycle: PCRs zeroed, sessions dropped, NV retained, platform
    /// hierarchy re-enabled.
    void reset()
    {
        pcrs_ = {};
        sessions_.clear();
        platform_hierarchy_enabled_ = true;
    }

    void disable_platform_hierarchy() { platform_hierarchy_enabled_ = false; }
    bool platform_hierarchy_enabled() const { return platform_hierarchy_enabled_; }

    // -- persistence ------------------------------------------------------

    nlohmann::ordered_json snapshot() const
    {
        nlohmann::ordered_json j;
        j["format"] = "smmpack-tpm-state";
        j["version"] = kSnapshotVersion;
        j["platform_hierarchy_enabled"] = platform_hierarchy_enabled_;
        auto& pcrs = j["pcrs"] = nlohmann::ordered_json::array();
        for (const auto& p : pcrs_) pcrs.push_back(to_hex(p));
        auto& nv = j["nv"] = nlohmann::ordered_json::array();
        for (const auto& [index, slot] : nv_) {
            nlohmann::ordered_json s;
            s["index"] = hex_index(index);
            s["size"] = slot.size;
            s["auth_policy"] = to_hex(slot.auth_policy);
            s["data"] = to_hex(slot.data);
            s["written"] = slot.written;
            nv.push_back(std::move(s));
        }
        return j;
    }

    static Tpm from_snapshot(const nlohmann::json& j)
    {
        try {
            if (j.at("format") != "smmpack-tpm-state") fail(ErrorCode::MalformedState, "unexpected format tag");
            if (j.at("version") != kSnapshotVersion) fail(ErrorCode::MalformedState, "unsupported version");
            Tpm t;
            t.platform_hierarchy_enabled_ = j.at("platform_hierarchy_enabled").get<bool>();
            const auto& pcrs = j.at("pcrs");
            if (!pcrs.is_array() || pcrs.size() != kPcrCount) fail(ErrorCode::MalformedState, "need 24 PCR values");
            for (std::size_t i = 0; i < kPcrCount; ++i) t.pcrs_[i] = array_from_hex<32>(pcrs[i].get<std::string>());
            for (const auto& s : j.at("nv")) {
                NvSlot slot;
                slot.index = parse_index(s.at("index").get<std::string>());
                slot.size = s.at("size").get<std::uint16_t>();
                slot.auth_policy = array_from_hex<32>(s.at("auth_policy").get<std::string>());
                slot.data = from_hex(s.at("data").get<std::string>());
                slot.written = s.at("written").get<bool>();
                if (slot.data.size() > slot.size) fail(ErrorCode::MalformedState, "NV data larger than slot");
                if (t.nv_.contains(slot.index)) fail(ErrorCode::MalformedState, "duplicate NV index");
                t.nv_[slot.index] = std::move(slot);
            }
            return t;
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorCode::MalformedState, e.what());
        } catch (const Error& e) {
            if (e.code() == ErrorCode::MalformedState) throw;
            fail(ErrorCode::MalformedState, e.what());
        }
    }

    void save(const std::filesystem::path& path) const { write_text_file(path, snapshot().dump(2) + "\n"); }

    static Tpm load(const std::filesystem::path& path)
    {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(read_text_file(path));
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorCode::MalformedState, e.what());
        }
        return from_snapshot(j);
    }

    /// Loads the snapshot if the file exists, otherwise a factory-fresh TPM.
    static Tpm load_or_fresh(const std::filesystem::path& path)
    {
        return std::filesystem::exists(path) ? load(path) : Tpm{};
    }

    static std::string hex_index(std::uint32_t index)
    {
        char buf[16];
        std::snprintf(buf, sizeof buf, "0x%08x", index);
        return buf;
    }

    static std::uint32_t parse_index(const std::string& text)
    {
        try {
            std::size_t used = 0;
            unsigned long v = std::stoul(text, &used, 0);
            if (used != text.size() || v > 0xffffffffUL) throw std::invalid_argument(text);
            return static_cast<std::uint32_t>(v);
        } catch (const std::logic_error&) {
            fail(ErrorCode::InvalidArgument, "bad NV index '" + text + "'");
        }
    }

private:
    static void check_pcr_index(unsigned index)
    {
        if (index >= kPcrCount) fail(ErrorCode::IndexOutOfRange, "PCR " + std::to_string(index));
    }

    void require_platform_hierarchy() const
    {
        if (!platform_hierarchy_enabled_) fail(ErrorCode::HierarchyDisabled);
    }

    PolicySession& session(SessionHandle handle)
    {
        auto it = sessions_.find(handle);
        if (it == sessions_.end()) fail(ErrorCode::UnknownSession);
        return it->second;
    }

    const PolicySession& session(SessionHandle handle) const
    {
        auto it = sessions_.find(handle);
        if (it == sessions_.end()) fail(ErrorCode::UnknownSession);
        return it->second;
    }

    NvSlot& nv_slot_mut(std::uint32_t index)
    {
        auto it = nv_.find(index);
        if (it == nv_.end()) fail(ErrorCode::UnknownIndex, hex_index(index));
        return it->second;
    }

    std::array<Digest, kPcrCount> pcrs_{};
    std::map<SessionHandle, PolicySession> sessions_;
    std::map<std::uint32_t, NvSlot> nv_;
    std::uint32_t next_session_ = 0;
    bool platform_hierarchy_enabled_ = true;
};

} // namespace smmpack::tpm
