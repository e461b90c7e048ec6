#pragma once

// Platform description: the SPI flash as an ordered list of firmware volumes,
// TPM provisioning parameters and platform security flags. Loaded from and
// saved to a versioned JSON document whose modules reference PE files.
//
// Measurement format of a firmware volume (what PEI hashes into PCR0):
//   u32 LE apriori count, apriori GUIDs (16 bytes each),
//   u32 LE module count, then per module: GUID (16) | u32 LE length | PE bytes.

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "smmpack/bytes.hpp"
#include "smmpack/packer.hpp"
#include "smmpack/sha256.hpp"
#include "smmpack/synth.hpp"

namespace smmpack::sim {

inline constexpr int kDescriptionVersion = 1;
inline constexpr std::uint32_t kDefaultNvIndex = 0x01500000;

enum class ModuleKind { dxe, smm };

enum class ModuleRole {
    normal,
    agent,   // unseals the key, installs the unpack protocol and the sealing SMI handler
    sealer,  // recovery-image module carrying a sealing SMI handler
    injected // attacker-supplied code; behavior is a simulator callback
};

enum class FvPhase { pei, dxe };

struct ModuleBehavior {
    std::vector<Guid> protocols;
    std::vector<std::string> smi_handlers; // echo handlers answering with the sentinel
    std::optional<Sentinel> sentinel;
    std::uint32_t sentinel_offset = 0;

    friend bool operator==(const ModuleBehavior&, const ModuleBehavior&) = default;
};

struct UefiModule {
    Guid guid;
    std::string name;
    ModuleKind kind = ModuleKind::smm;
    ModuleRole role = ModuleRole::normal;
    Bytes pe_bytes;
    ModuleBehavior behavior;
    std::string pe_path; // as written in the description, for saving

    friend bool operator==(const UefiModule&, const UefiModule&) = default;
};

struct FirmwareVolume {
    std::string name;
    FvPhase phase = FvPhase::dxe;
    std::vector<Guid> apriori;
    std::vector<UefiModule> modules;

    Bytes raw_bytes() const
    {
        Bytes out;
        append_le32(out, static_cast<std::uint32_t>(apriori.size()));
        for (const auto& g : apriori) append(out, g.bytes);
        append_le32(out, static_cast<std::uint32_t>(modules.size()));
        for (const auto& m : modules) {
            append(out, m.guid.bytes);
            append_le32(out, static_cast<std::uint32_t>(m.pe_bytes.size()));
            append(out, m.pe_bytes);
        }
        return out;
    }

    Digest measurement() const { return sha256(raw_bytes()); }

    const UefiModule* find(const Guid& guid) const
    {
        for (const auto& m : modules)
            if (m.guid == guid) return &m;
        return nullptr;
    }

    UefiModule* find(const Guid& guid)
    {
        for (auto& m : modules)
            if (m.guid == guid) return &m;
        return nullptr;
    }

    /// Apriori modules first in file order, then the rest in volume order.
    std::vector<const UefiModule*> dispatch_order() const
    {
        std::vector<const UefiModule*> order;
        std::set<Guid> seen;
        for (const auto& g : apriori)
            if (const UefiModule* m = find(g); m && seen.insert(g).second) order.push_back(m);
        for (const auto& m : modules)
            if (seen.insert(m.guid).second) order.push_back(&m);
        return order;
    }

    friend bool operator==(const FirmwareVolume&, const FirmwareVolume&) = default;
};

struct SecurityFlags {
    bool dpr_enabled = false;
    bool memory_scrambling = false;
    bool mor_bit = true;
    bool tme_enabled = false;

    friend bool operator==(const SecurityFlags&, const SecurityFlags&) = default;
};

struct TpmConfig {
    std::uint32_t nv_index = kDefaultNvIndex;
    std::uint32_t backup_nv_index = kDefaultNvIndex + 1;
    std::string state_file = "tpm_state.json";
    bool cap_extend = true;

    friend bool operator==(const TpmConfig&, const TpmConfig&) = default;
};

struct SmramConfig {
    std::uint64_t base = 0x7f000000;
    std::uint64_t size = 0x00800000;

    friend bool operator==(const SmramConfig&, const SmramConfig&) = default;
};

struct PlatformDescription {
    std::vector<FirmwareVolume> fvs;
    TpmConfig tpm;
    SecurityFlags security;
    SmramConfig smram;
    std::string recovery_fv;       // optional path
    std::string update_state_file; // optional path
    std::filesystem::path base_dir;

    std::filesystem::path resolve(const std::string& p) const
    {
        std::filesystem::path path(p);
        return path.is_absolute() ? path : base_dir / path;
    }

    std::filesystem::path tpm_state_path() const { return resolve(tpm.state_file); }

    std::filesystem::path update_state_path() const
    {
        return resolve(update_state_file.empty() ? "update_state.json" : update_state_file);
    }

    const UefiModule* find_module(const Guid& guid) const
    {
        for (const auto& fv : fvs)
            if (const UefiModule* m = fv.find(guid)) return m;
        return nullptr;
    }

    UefiModule* find_module(const Guid& guid)
    {
        for (auto& fv : fvs)
            if (UefiModule* m = fv.find(guid)) return m;
        return nullptr;
    }
};

// -- measurement --------------------------------------------------------------

/// PCR0 after measuring every volume in SPI order from a reset TPM: the
/// value the agent sees when it runs, before any cap extend.
inline Digest compute_enrolled_pcr0(const std::vector<FirmwareVolume>& fvs)
{
    if (fvs.empty()) fail(ErrorCode::InvalidPlatformDescription, "platform has no firmware volumes");
    Digest pcr{};
    for (const auto& fv : fvs) pcr = sha256_concat(pcr, fv.measurement());
    return pcr;
}

inline Digest compute_enrolled_pcr0(const PlatformDescription& desc) { return compute_enrolled_pcr0(desc.fvs); }

// -- validation ---------------------------------------------------------------

inline void validate(const PlatformDescription& desc)
{
    auto invalid = [](const std::string& why) { fail(ErrorCode::InvalidPlatformDescription, why); };
    if (desc.fvs.empty()) invalid("platform has no firmware volumes");
    if (desc.smram.size == 0) invalid("SMRAM size must be nonzero");
    if (desc.tpm.nv_index == desc.tpm.backup_nv_index) invalid("backup NV index must differ from the key index");
    std::set<Guid> guids;
    int agents = 0;
    for (const auto& fv : desc.fvs) {
        for (const auto& m : fv.modules) {
            if (!guids.insert(m.guid).second) invalid("duplicate module GUID " + m.guid.str());
            if (m.role == ModuleRole::agent) ++agents;
            if (m.role == ModuleRole::agent && fv.phase != FvPhase::dxe) invalid("agent must live in a DXE volume");
            // Plaintext modules must carry their sentinel where they claim it is.
            if (m.behavior.sentinel && m.role != ModuleRole::injected) {
                bool packed = false;
                try {
                    packed = is_packed(m.pe_bytes);
                } catch (const Error&) {
                    invalid("module " + m.name + " is not a PE32+ image");
                }
                if (!packed) {
                    const pe::PeImage img = pe::PeImage::parse(m.pe_bytes);
                    const pe::Section* text = img.find_section(kTextSectionName);
                    const std::size_t at = m.behavior.sentinel_offset;
                    if (!text || at + kSentinelSize > text->data.size() ||
                        !std::equal(m.behavior.sentinel->begin(), m.behavior.sentinel->end(), text->data.begin() + at))
                        invalid("sentinel of module " + m.name + " not found in its text section");
                }
            }
        }
        for (const auto& g : fv.apriori)
            if (!fv.find(g)) invalid("apriori GUID " + g.str() + " is not in volume " + fv.name);
    }
    if (agents > 1) invalid("more than one agent module");
}

// -- JSON ---------------------------------------------------------------------

namespace detail {

inline std::string to_string(ModuleKind k) { return k == ModuleKind::smm ? "smm" : "dxe"; }

inline std::string to_string(ModuleRole r)
{
    switch (r) {
    case ModuleRole::normal: return "normal";
    case ModuleRole::agent: return "agent";
    case ModuleRole::sealer: return "sealer";
    case ModuleRole::injected: return "injected";
    }
    return "normal";
}

inline std::string to_string(FvPhase p) { return p == FvPhase::pei ? "pei" : "dxe"; }

inline std::uint64_t parse_u64(const nlohmann::json& v)
{
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_string()) {
        const std::string s = v.get<std::string>();
        std::size_t used = 0;
        std::uint64_t out = std::stoull(s, &used, 0);
        if (used != s.size()) throw std::invalid_argument(s);
        return out;
    }
    throw std::invalid_argument("expected an unsigned integer");
}

inline std::string hex_u64(std::uint64_t v)
{
    char buf[24];
    std::snprintf(buf, sizeof buf, "0x%llx", static_cast<unsigned long long>(v));
    return buf;
}

inline UefiModule module_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir)
{
    UefiModule m;
    m.guid = Guid::parse(j.at("guid").get<std::string>());
    m.name = j.value("name", m.guid.str());
    const std::string kind = j.value("kind", "smm");
    if (kind == "smm")
        m.kind = ModuleKind::smm;
    else if (kind == "dxe")
        m.kind = ModuleKind::dxe;
    else
        throw std::invalid_argument("unknown module kind '" + kind + "'");
    const std::string role = j.value("role", "normal");
    if (role == "normal")
        m.role = ModuleRole::normal;
    else if (role == "agent")
        m.role = ModuleRole::agent;
    else if (role == "sealer")
        m.role = ModuleRole::sealer;
    else
        throw std::invalid_argument("unknown module role '" + role + "'");
    m.pe_path = j.at("pe").get<std::string>();
    std::filesystem::path path(m.pe_path);
    m.pe_bytes = read_file(path.is_absolute() ? path : base_dir / path);
    if (j.contains("behavior")) {
        const auto& b = j.at("behavior");
        for (const auto& p : b.value("protocols", nlohmann::json::array())) m.behavior.protocols.push_back(Guid::parse(p.get<std::string>()));
        for (const auto& h : b.value("smi_handlers", nlohmann::json::array())) m.behavior.smi_handlers.push_back(h.get<std::string>());
        if (b.contains("sentinel")) m.behavior.sentinel = array_from_hex<kSentinelSize>(b.at("sentinel").get<std::string>());
        m.behavior.sentinel_offset = static_cast<std::uint32_t>(b.value("sentinel_offset", 0u));
    }
    return m;
}

inline nlohmann::ordered_json module_to_json(const UefiModule& m)
{
    nlohmann::ordered_json j;
    j["guid"] = m.guid.str();
    j["name"] = m.name;
    j["kind"] = to_string(m.kind);
    j["role"] = to_string(m.role);
    j["pe"] = m.pe_path;
    nlohmann::ordered_json b;
    auto& protocols = b["protocols"] = nlohmann::ordered_json::array();
    for (const auto& p : m.behavior.protocols) protocols.push_back(p.str());
    b["smi_handlers"] = m.behavior.smi_handlers;
    if (m.behavior.sentinel) {
        b["sentinel"] = to_hex(*m.behavior.sentinel);
        b["sentinel_offset"] = m.behavior.sentinel_offset;
    }
    j["behavior"] = std::move(b);
    return j;
}

inline FirmwareVolume fv_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir)
{
    FirmwareVolume fv;
    fv.name = j.at("name").get<std::string>();
    const std::string phase = j.value("phase", "dxe");
    if (phase == "pei")
        fv.phase = FvPhase::pei;
    else if (phase == "dxe")
        fv.phase = FvPhase::dxe;
    else
        throw std::invalid_argument("unknown volume phase '" + phase + "'");
    for (const auto& g : j.value("apriori", nlohmann::json::array())) fv.apriori.push_back(Guid::parse(g.get<std::string>()));
    for (const auto& m : j.at("modules")) fv.modules.push_back(module_from_json(m, base_dir));
    return fv;
}

inline nlohmann::ordered_json fv_to_json(const FirmwareVolume& fv)
{
    nlohmann::ordered_json j;
    j["name"] = fv.name;
    j["phase"] = to_string(fv.phase);
    auto& apriori = j["apriori"] = nlohmann::ordered_json::array();
    for (const auto& g : fv.apriori) apriori.push_back(g.str());
    auto& modules = j["modules"] = nlohmann::ordered_json::array();
    for (const auto& m : fv.modules) modules.push_back(module_to_json(m));
    return j;
}

template <class Fn>
auto describe_errors(Fn&& fn) -> decltype(fn())
{
    try {
        return fn();
    } catch (const Error& e) {
        if (e.code() == ErrorCode::InvalidPlatformDescription) throw;
        fail(ErrorCode::InvalidPlatformDescription, e.what());
    } catch (const std::exception& e) {
        fail(ErrorCode::InvalidPlatformDescription, e.what());
    }
}

} // namespace detail

inline PlatformDescription platform_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir)
{
    return detail::describe_errors([&] {
        if (j.at("format") != "smmpack-platform") fail(ErrorCode::InvalidPlatformDescription, "unexpected format tag");
        if (j.at("version") != kDescriptionVersion) fail(ErrorCode::InvalidPlatformDescription, "unsupported version");
        PlatformDescription d;
        d.base_dir = base_dir;
        if (j.contains("tpm")) {
            const auto& t = j.at("tpm");
            if (t.contains("nv_index")) d.tpm.nv_index = static_cast<std::uint32_t>(detail::parse_u64(t.at("nv_index")));
            d.tpm.backup_nv_index = t.contains("backup_nv_index")
                                        ? static_cast<std::uint32_t>(detail::parse_u64(t.at("backup_nv_index")))
                                        : d.tpm.nv_index + 1;
            d.tpm.state_file = t.value("state_file", d.tpm.state_file);
            d.tpm.cap_extend = t.value("cap_extend", d.tpm.cap_extend);
        }
        if (j.contains("security")) {
            const auto& s = j.at("security");
            d.security.dpr_enabled = s.value("dpr_enabled", d.security.dpr_enabled);
            d.security.memory_scrambling = s.value("memory_scrambling", d.security.memory_scrambling);
            d.security.mor_bit = s.value("mor_bit", d.security.mor_bit);
            d.security.tme_enabled = s.value("tme_enabled", d.security.tme_enabled);
        }
        if (j.contains("smram")) {
            const auto& s = j.at("smram");
            if (s.contains("base")) d.smram.base = detail::parse_u64(s.at("base"));
            if (s.contains("size")) d.smram.size = detail::parse_u64(s.at("size"));
        }
        d.recovery_fv = j.value("recovery_fv", "");
        d.update_state_file = j.value("update_state_file", "");
        for (const auto& fv : j.at("firmware_volumes")) d.fvs.push_back(detail::fv_from_json(fv, base_dir));
        validate(d);
        return d;
    });
}

inline nlohmann::ordered_json platform_to_json(const PlatformDescription& d)
{
    nlohmann::ordered_json j;
    j["format"] = "smmpack-platform";
    j["version"] = kDescriptionVersion;
    j["tpm"] = {{"nv_index", tpm::Tpm::hex_index(d.tpm.nv_index)},
                {"backup_nv_index", tpm::Tpm::hex_index(d.tpm.backup_nv_index)},
                {"state_file", d.tpm.state_file},
                {"cap_extend", d.tpm.cap_extend}};
    j["security"] = {{"dpr_enabled", d.security.dpr_enabled},
                     {"memory_scrambling", d.security.memory_scrambling},
                     {"mor_bit", d.security.mor_bit},
                     {"tme_enabled", d.security.tme_enabled}};
    j["smram"] = {{"base", detail::hex_u64(d.smram.base)}, {"size", detail::hex_u64(d.smram.size)}};
    if (!d.recovery_fv.empty()) j["recovery_fv"] = d.recovery_fv;
    if (!d.update_state_file.empty()) j["update_state_file"] = d.update_state_file;
    auto& fvs = j["firmware_volumes"] = nlohmann::ordered_json::array();
    for (const auto& fv : d.fvs) fvs.push_back(detail::fv_to_json(fv));
    return j;
}

/// Reads a platform description; module paths resolve against its directory.
inline PlatformDescription load_platform(const std::filesystem::path& path)
{
    nlohmann::json j = detail::describe_errors([&] { return nlohmann::json::parse(read_text_file(path)); });
    return platform_from_json(j, path.parent_path());
}

inline void save_platform(const PlatformDescription& d, const std::filesystem::path& path)
{
    write_text_file(path, platform_to_json(d).dump(2) + "\n");
}

/// A standalone volume file (used for the recovery image).
inline FirmwareVolume load_fv(const std::filesystem::path& path)
{
    return detail::describe_errors([&] {
        nlohmann::json j = nlohmann::json::parse(read_text_file(path));
        if (j.at("format") != "smmpack-fv") fail(ErrorCode::InvalidPlatformDescription, "unexpected format tag");
        if (j.at("version") != kDescriptionVersion) fail(ErrorCode::InvalidPlatformDescription, "unsupported version");
        FirmwareVolume fv = detail::fv_from_json(j, path.parent_path());
        for (const auto& g : fv.apriori)
            if (!fv.find(g)) fail(ErrorCode::InvalidPlatformDescription, "apriori GUID not in volume");
        return fv;
    });
}

inline void save_fv(const FirmwareVolume& fv, const std::filesystem::path& path)
{
    nlohmann::ordered_json j;
    j["format"] = "smmpack-fv";
    j["version"] = kDescriptionVersion;
    const nlohmann::ordered_json body = detail::fv_to_json(fv);
    for (auto& [k, v] : body.items()) j[k] = v;
    write_text_file(path, j.dump(2) + "\n");
}

} // namespace smmpack::sim
