#pragma once

// Scripted attacker actions against a simulated platform, one per row of the
// threat matrix. Each scenario collects whatever bytes the attacker ends up
// holding; the outcome compares that haul against the ground-truth key and
// the plaintext sentinels of the packed modules.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "smmpack/bytes.hpp"
#include "smmpack/cipher.hpp"
#include "smmpack/packer.hpp"
#include "smmpack/platform.hpp"
#include "smmpack/simulator.hpp"
#include "smmpack/synth.hpp"

namespace smmpack::sim {

inline constexpr std::string_view kScenarioNames[] = {
    "bios_update_file",        "spi_flash_dump_software", "tpm_key_read_software",      "memory_dump_from_os",
    "spi_flash_dump_hardware", "tpm_key_read_hardware",   "smram_read_from_smm_module", "dma",
    "coldboot_same_device",    "coldboot_memory_transplant",
};

/// DRAM retention after power loss, even when cooled.
inline constexpr double kDramRetentionSeconds = 60.0;
/// Time to reflash the BIOS with a residual-reading module.
inline constexpr double kReflashSeconds = 180.0;
/// Time to move frozen DIMMs to another machine.
inline constexpr double kTransplantSeconds = 10.0;

struct ScenarioOutcome {
    std::string scenario_name;
    int attacker_class = 0;
    bool obtained_plaintext_module = false;
    bool obtained_key = false;
    bool prevented = true;
    std::string detail;

    nlohmann::ordered_json to_json() const
    {
        nlohmann::ordered_json j;
        j["scenario"] = scenario_name;
        j["attacker_class"] = attacker_class;
        j["obtained_plaintext_module"] = obtained_plaintext_module;
        j["obtained_key"] = obtained_key;
        j["prevented"] = prevented;
        j["detail"] = detail;
        return j;
    }
};

/// Adds an attacker module to a DXE volume. PEI volumes are protected by the
/// hardware root of trust and cannot be edited.
inline void inject_module(PlatformDescription& desc, std::size_t fv_index, UefiModule m, bool apriori_first)
{
    if (fv_index >= desc.fvs.size()) fail(ErrorCode::InvalidArgument, "no such volume");
    FirmwareVolume& fv = desc.fvs[fv_index];
    if (fv.phase == FvPhase::pei) fail(ErrorCode::ImmutableFirmwareVolume, fv.name);
    if (apriori_first) fv.apriori.insert(fv.apriori.begin(), m.guid);
    fv.modules.push_back(std::move(m));
}

namespace detail {

/// What counts as a win for the attacker.
struct Secrets {
    std::vector<Bytes> keys;
    std::vector<Sentinel> sentinels;
};

inline Secrets secrets_of(const Platform& p)
{
    Secrets s;
    for (std::uint32_t index : {p.description().tpm.nv_index, p.description().tpm.backup_nv_index}) {
        if (!p.tpm().nv_defined(index)) continue;
        const auto& slot = p.tpm().nv_slot(index);
        if (slot.written) s.keys.push_back(slot.data);
    }
    for (const auto& fv : p.flash())
        for (const auto& m : fv.modules) {
            if (!m.behavior.sentinel) continue;
            bool packed = false;
            try {
                packed = is_packed(m.pe_bytes);
            } catch (const Error&) {
            }
            if (packed) s.sentinels.push_back(*m.behavior.sentinel);
        }
    return s;
}

inline ScenarioOutcome judge(std::string name, int cls, const Secrets& secrets, const Bytes& haul,
                             const std::vector<std::string>& notes)
{
    ScenarioOutcome o;
    o.scenario_name = std::move(name);
    o.attacker_class = cls;
    for (const auto& k : secrets.keys) o.obtained_key = o.obtained_key || contains_bytes(haul, k);
    for (const auto& s : secrets.sentinels)
        o.obtained_plaintext_module = o.obtained_plaintext_module || contains_bytes(haul, s);
    o.prevented = !(o.obtained_key || o.obtained_plaintext_module);
    for (const auto& n : notes) o.detail += (o.detail.empty() ? "" : "; ") + n;
    return o;
}

inline Bytes flash_image(const Platform& p)
{
    Bytes out;
    for (const auto& fv : p.flash()) append(out, fv.raw_bytes());
    return out;
}

inline UefiModule attacker_module(std::string name, ModuleKind kind, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    UefiModule m;
    for (auto& b : m.guid.bytes) b = static_cast<std::uint8_t>(rng() & 0xff);
    m.name = std::move(name);
    m.kind = kind;
    m.role = ModuleRole::injected;
    ModuleSpec spec;
    spec.seed = rng();
    m.pe_bytes = build_module(spec);
    m.pe_path = m.name + ".efi";
    return m;
}

inline std::size_t first_dxe_fv(const PlatformDescription& d)
{
    for (std::size_t i = 0; i < d.fvs.size(); ++i)
        if (d.fvs[i].phase == FvPhase::dxe) return i;
    fail(ErrorCode::InvalidPlatformDescription, "platform has no DXE volume");
}

inline std::size_t last_dxe_fv(const PlatformDescription& d)
{
    for (std::size_t i = d.fvs.size(); i-- > 0;)
        if (d.fvs[i].phase == FvPhase::dxe) return i;
    fail(ErrorCode::InvalidPlatformDescription, "platform has no DXE volume");
}

/// SMRAM as it sits in the DIMMs. With total memory encryption the DIMMs hold
/// ciphertext under a key that never leaves the processor.
inline Bytes dram_image(const Platform& p)
{
    Bytes image(p.smram().contents().begin(), p.smram().contents().end());
    if (p.security().tme_enabled) {
        std::mt19937_64 rng(0x7e3d1f5a9c2b4e61ULL);
        SymmetricKey soc_key;
        soc_key.bytes = random_block(rng);
        Iv iv;
        iv.bytes = random_block(rng);
        image.resize(align_up(image.size(), kAesBlockSize), 0);
        encrypt_cbc_in_place(soc_key, iv, image);
    }
    return image;
}

/// Residual contents after `seconds` without refresh: intact within the
/// retention window, gone after it.
inline void decay(Bytes& dram, double seconds)
{
    if (seconds >= kDramRetentionSeconds) std::fill(dram.begin(), dram.end(), 0);
}

inline std::string boot_note(const BootResult& r)
{
    return r.halted_reason ? "boot halted with " + *r.halted_reason : "boot reached " + to_string(r.reached);
}

/// Runs `f`, appending what it returns to `haul`; errors become notes.
inline void attempt(Bytes& haul, std::vector<std::string>& notes, const std::string& what,
                    const std::function<Bytes()>& f)
{
    try {
        append(haul, f());
        notes.push_back(what + ": succeeded");
    } catch (const Error& e) {
        notes.push_back(what + ": " + std::string(to_string(e.code())));
    }
}

inline ScenarioOutcome bios_update_file(const Platform& base)
{
    return judge("bios_update_file", 1, secrets_of(base), flash_image(base),
                 {"attacker analyzed the distributed BIOS image"});
}

inline ScenarioOutcome spi_flash_dump_software(const Platform& base)
{
    Platform p = base;
    const Secrets sec = secrets_of(p);
    BootResult r = boot(p);
    if (r.succeeded()) launch_os(p);
    return judge("spi_flash_dump_software", 2, sec, flash_image(p), {boot_note(r), "OS dumped the SPI flash"});
}

inline ScenarioOutcome tpm_key_read_software(const Platform& base)
{
    Platform p = base;
    const Secrets sec = secrets_of(p);
    BootResult r = boot(p);
    std::vector<std::string> notes{boot_note(r)};
    if (r.succeeded()) launch_os(p);
    Bytes haul;
    tpm::Tpm& t = p.tpm();
    const auto& cfg = p.description().tpm;
    for (std::uint32_t index : {cfg.nv_index, cfg.backup_nv_index}) {
        const std::string at = tpm::Tpm::hex_index(index);
        attempt(haul, notes, "policy-session read " + at, [&] {
            SymmetricKey k = unseal_key(t, index);
            return Bytes(k.bytes.begin(), k.bytes.end());
        });
        attempt(haul, notes, "trial-session read " + at, [&] {
            ::smmpack::detail::ScopedSession s(t, tpm::SessionKind::trial);
            return t.nv_read(index, s.handle());
        });
        attempt(haul, notes, "re-provision " + at, [&] {
            t.nv_undefine_space(index);
            return Bytes{};
        });
    }
    // Claiming the enrolled PCR value does not help: the policy checks the real PCR.
    attempt(haul, notes, "forged pcrDigest", [&] {
        ::smmpack::detail::ScopedSession s(t, tpm::SessionKind::policy);
        t.policy_pcr(s.handle(), tpm::PcrSelection{0}, sha256(compute_enrolled_pcr0(p.flash())));
        return t.nv_read(cfg.nv_index, s.handle());
    });
    return judge("tpm_key_read_software", 2, sec, haul, notes);
}

inline ScenarioOutcome memory_dump_from_os(const Platform& base)
{
    Platform p = base;
    const Secrets sec = secrets_of(p);
    BootResult r = boot(p);
    std::vector<std::string> notes{boot_note(r)};
    if (r.succeeded()) launch_os(p);
    Bytes haul;
    attempt(haul, notes, "physical memory read of SMRAM", [&] { return read_smram(p, Accessor::os_software); });
    // Point an SMI handler's comm buffer into SMRAM to make it copy secrets out.
    if (p.smi_handlers().contains(kSealHandlerId) && p.phase() == BootPhase::rt) {
        const SmiResult res = smi_invoke(p, kSealHandlerId, CommBuffer{p.smram().base(), Bytes(kSealRequestSize, 0)});
        append(haul, res.output);
        notes.push_back("comm buffer inside SMRAM: " + res.status);
    }
    return judge("memory_dump_from_os", 2, sec, haul, notes);
}

inline ScenarioOutcome spi_flash_dump_hardware(const Platform& base)
{
    Platform p = base;
    const Secrets sec = secrets_of(p);
    Bytes haul = flash_image(p); // chip clip before power-on
    BootResult r = boot(p);
    p.power_off();
    append(haul, flash_image(p)); // and again after a full boot
    return judge("spi_flash_dump_hardware", 3, sec, haul, {boot_note(r), "SPI chip read with a programmer twice"});
}

inline ScenarioOutcome tpm_key_read_hardware(const Platform& base)
{
    // The TPM is assumed tamper resistant: physical access yields no NV data.
    return judge("tpm_key_read_hardware", 3, secrets_of(base), {}, {"TPM tamper resistance assumed"});
}

inline ScenarioOutcome smram_read_from_smm_module(const Platform& base)
{
    const Secrets sec = secrets_of(base);
    Bytes haul;
    std::vector<std::string> notes;

    try {
        PlatformDescription d = base.description();
        for (std::size_t i = 0; i < d.fvs.size(); ++i)
            if (d.fvs[i].phase == FvPhase::pei)
                inject_module(d, i, attacker_module("PeiDumper", ModuleKind::smm, 1), true);
        notes.push_back("PEI injection accepted");
    } catch (const Error& e) {
        notes.push_back("PEI injection: " + std::string(to_string(e.code())));
    }

    struct Variant {
        const char* label;
        bool first;
    };
    for (const Variant v : {Variant{"apriori-first", true}, Variant{"last", false}}) {
        PlatformDescription d = base.description();
        UefiModule dumper = attacker_module(std::string("SmramDumper-") + v.label, ModuleKind::smm, v.first ? 2 : 3);
        const Guid g = dumper.guid;
        inject_module(d, v.first ? first_dxe_fv(d) : last_dxe_fv(d), std::move(dumper), v.first);
        Platform p(std::move(d), base.tpm());
        bool ran = false;
        p.injected_code[g] = [&](Platform& q) {
            ran = true;
            append(haul, read_smram(q, Accessor::smm));
        };
        BootResult r = boot(p);
        notes.push_back(std::string(v.label) + " dumper " + (ran ? "ran" : "never ran") + ", " + boot_note(r));
    }
    return judge("smram_read_from_smm_module", 3, sec, haul, notes);
}

inline ScenarioOutcome dma(const Platform& base)
{
    Platform p = base;
    const Secrets sec = secrets_of(p);
    Bytes haul;
    int granted = 0;
    int denied = 0;
    BootOptions opts;
    opts.after_dispatch = [&](Platform& q, const UefiModule&) {
        try {
            append(haul, read_smram(q, Accessor::dma));
            ++granted;
        } catch (const Error&) {
            ++denied;
        }
    };
    BootResult r = boot(p, opts);
    std::vector<std::string> notes{boot_note(r)};
    notes.push_back("DMA during DXE: " + std::to_string(granted) + " reads granted, " + std::to_string(denied) + " denied");
    if (r.succeeded()) attempt(haul, notes, "DMA after SMRAM lock", [&] { return read_smram(p, Accessor::dma); });
    if (p.security().dpr_enabled) notes.push_back("DPR covers SMRAM");
    return judge("dma", 3, sec, haul, notes);
}

inline ScenarioOutcome coldboot_same_device(const Platform& base)
{
    Platform victim = base;
    const Secrets sec = secrets_of(victim);
    BootResult r = boot(victim);
    std::vector<std::string> notes{boot_note(r)};
    Bytes residual = dram_image(victim);
    victim.power_off(); // cold reset, no clean shutdown

    // Reflash with a residual reader that runs first in DXE.
    PlatformDescription d = victim.description();
    UefiModule reader = attacker_module("ResidualReader", ModuleKind::dxe, 4);
    const Guid g = reader.guid;
    inject_module(d, first_dxe_fv(d), std::move(reader), true);
    decay(residual, kReflashSeconds);
    notes.push_back("reflash took " + std::to_string(static_cast<int>(kReflashSeconds)) + " s");
    if (victim.security().mor_bit) {
        std::fill(residual.begin(), residual.end(), 0);
        notes.push_back("MOR cleared memory at POST");
    }
    if (victim.security().memory_scrambling) notes.push_back("scrambled DRAM assumed descrambled by the attacker");

    Platform p(std::move(d), victim.tpm());
    Bytes haul;
    p.injected_code[g] = [&](Platform&) { append(haul, residual); };
    BootResult again = boot(p);
    notes.push_back("attacker boot: " + boot_note(again));
    return judge("coldboot_same_device", 3, sec, haul, notes);
}

inline ScenarioOutcome coldboot_memory_transplant(const Platform& base)
{
    Platform victim = base;
    const Secrets sec = secrets_of(victim);
    BootResult r = boot(victim);
    std::vector<std::string> notes{boot_note(r)};
    Bytes residual = dram_image(victim);
    victim.power_off();
    decay(residual, kTransplantSeconds);
    // The target machine had its MOR bit cleared by a clean shutdown, so POST leaves DRAM alone.
    notes.push_back("DIMMs moved in " + std::to_string(static_cast<int>(kTransplantSeconds)) + " s");
    if (victim.security().memory_scrambling) notes.push_back("scrambled DRAM assumed descrambled by the attacker");
    if (victim.security().tme_enabled) notes.push_back("DIMMs hold memory-encryption ciphertext");
    return judge("coldboot_memory_transplant", 3, sec, residual, notes);
}

} // namespace detail

inline ScenarioOutcome run_scenario(const Platform& platform, std::string_view name)
{
    if (name == "bios_update_file") return detail::bios_update_file(platform);
    if (name == "spi_flash_dump_software") return detail::spi_flash_dump_software(platform);
    if (name == "tpm_key_read_software") return detail::tpm_key_read_software(platform);
    if (name == "memory_dump_from_os") return detail::memory_dump_from_os(platform);
    if (name == "spi_flash_dump_hardware") return detail::spi_flash_dump_hardware(platform);
    if (name == "tpm_key_read_hardware") return detail::tpm_key_read_hardware(platform);
    if (name == "smram_read_from_smm_module") return detail::smram_read_from_smm_module(platform);
    if (name == "dma") return detail::dma(platform);
    if (name == "coldboot_same_device") return detail::coldboot_same_device(platform);
    if (name == "coldboot_memory_transplant") return detail::coldboot_memory_transplant(platform);
    fail(ErrorCode::UnknownScenario, std::string(name));
}

inline std::vector<ScenarioOutcome> run_all_scenarios(const Platform& platform)
{
    std::vector<ScenarioOutcome> out;
    for (std::string_view n : kScenarioNames) out.push_back(run_scenario(platform, n));
    return out;
}

} // namespace smmpack::sim
