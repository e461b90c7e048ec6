#pragma once

// A small reference platform: two PEI modules, the agent, a plain DXE driver,
// packed SMM test modules spread over two DXE volumes, and a recovery volume
// with a sealer. Used by the CLI `demo` command, the tests and the benches.

#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "smmpack/packer.hpp"
#include "smmpack/platform.hpp"
#include "smmpack/simulator.hpp"
#include "smmpack/synth.hpp"
#include "smmpack/tpm.hpp"

namespace smmpack::sim {

struct DemoOptions {
    std::size_t module_count = 4;
    std::vector<std::uint32_t> text_sizes; // cycled; default 3000..50000 spread
    std::uint64_t seed = 1;
    std::optional<SymmetricKey> key;
    bool pack = true; // false: plaintext modules and no agent
    bool second_dxe_fv = true;
    bool cap_extend = true;
};

struct Demo {
    PlatformDescription desc;
    FirmwareVolume recovery_fv;
    SymmetricKey key;
    tpm::Tpm tpm;
    std::vector<Guid> test_modules;
    Digest enrolled_pcr0{};
};

namespace detail {

inline Guid random_guid(std::mt19937_64& rng)
{
    Guid g;
    for (auto& b : g.bytes) b = static_cast<std::uint8_t>(rng() & 0xff);
    g.bytes[7] = static_cast<std::uint8_t>((g.bytes[7] & 0x0f) | 0x40); // version 4
    g.bytes[8] = static_cast<std::uint8_t>((g.bytes[8] & 0x3f) | 0x80);
    return g;
}

inline Sentinel random_sentinel(std::mt19937_64& rng)
{
    Sentinel s;
    for (auto& b : s) b = static_cast<std::uint8_t>(rng() & 0xff);
    return s;
}

inline UefiModule plain_module(std::mt19937_64& rng, std::string name, ModuleKind kind, ModuleRole role,
                               std::uint32_t text_size)
{
    UefiModule m;
    m.guid = random_guid(rng);
    m.name = std::move(name);
    m.kind = kind;
    m.role = role;
    ModuleSpec spec;
    spec.text_size = text_size;
    spec.sentinel = random_sentinel(rng);
    spec.seed = rng();
    m.pe_bytes = build_module(spec);
    m.behavior.sentinel = spec.sentinel;
    m.behavior.sentinel_offset = spec.sentinel_offset;
    m.pe_path = "modules/" + m.name + ".efi";
    return m;
}

} // namespace detail

inline Demo make_demo(const DemoOptions& opt = {})
{
    std::mt19937_64 rng(opt.seed);
    Demo d;
    if (opt.key) {
        d.key = *opt.key;
    } else {
        for (auto& b : d.key.bytes) b = static_cast<std::uint8_t>(rng() & 0xff);
    }

    FirmwareVolume pei{"PeiFv", FvPhase::pei, {}, {}};
    pei.modules.push_back(detail::plain_module(rng, "PeiCore", ModuleKind::dxe, ModuleRole::normal, 2048));
    pei.modules.push_back(detail::plain_module(rng, "Tcg2Pei", ModuleKind::dxe, ModuleRole::normal, 2048));

    FirmwareVolume dxe{"DxeFv", FvPhase::dxe, {}, {}};
    FirmwareVolume dxe2{"DxeFv2", FvPhase::dxe, {}, {}};
    if (opt.pack) {
        UefiModule agent = detail::plain_module(rng, "SmmPackSmm", ModuleKind::smm, ModuleRole::agent, 8192);
        dxe.apriori.push_back(agent.guid);
        dxe.modules.push_back(std::move(agent));
    }
    UefiModule driver = detail::plain_module(rng, "PlatformDxe", ModuleKind::dxe, ModuleRole::normal, 4096);
    driver.behavior.protocols.push_back(detail::random_guid(rng));
    dxe.modules.push_back(std::move(driver));

    static constexpr std::uint32_t kDefaultSizes[] = {3000, 20000, 50000, 8000, 12345, 4096, 30000, 16};
    for (std::size_t i = 0; i < opt.module_count; ++i) {
        const std::uint32_t size = opt.text_sizes.empty() ? std::max<std::uint32_t>(kDefaultSizes[i % 8], 64)
                                                          : opt.text_sizes[i % opt.text_sizes.size()];
        char name[32];
        std::snprintf(name, sizeof name, "TestSmm%02zu", i);
        UefiModule m = detail::plain_module(rng, name, ModuleKind::smm, ModuleRole::normal, size);
        m.behavior.protocols.push_back(detail::random_guid(rng));
        m.behavior.smi_handlers.push_back(std::string(name) + ".echo");
        if (opt.pack) m.pe_bytes = pack_module(m.pe_bytes, d.key, rng(), m.name).packed;
        d.test_modules.push_back(m.guid);
        const bool second = opt.second_dxe_fv && i % 2 == 1;
        (second ? dxe2 : dxe).modules.push_back(std::move(m));
    }

    d.desc.fvs.push_back(std::move(pei));
    d.desc.fvs.push_back(std::move(dxe));
    if (!dxe2.modules.empty()) d.desc.fvs.push_back(std::move(dxe2));
    d.desc.tpm.cap_extend = opt.cap_extend;
    d.desc.recovery_fv = "recovery_fv.json";

    d.recovery_fv = FirmwareVolume{"RecoveryFv", FvPhase::dxe, {}, {}};
    d.recovery_fv.modules.push_back(
        detail::plain_module(rng, "SmmPackRecovery", ModuleKind::smm, ModuleRole::sealer, 4096));

    validate(d.desc);
    d.enrolled_pcr0 = compute_enrolled_pcr0(d.desc);
    if (opt.pack) seal_key(d.tpm, d.desc.tpm.nv_index, d.key, d.enrolled_pcr0);
    return d;
}

inline Platform demo_platform(const Demo& d) { return Platform(d.desc, d.tpm); }

/// Writes the demo as files: platform.json, recovery_fv.json, the PE images
/// under modules/ and the TPM snapshot.
inline std::filesystem::path write_demo(Demo& d, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir / "modules");
    d.desc.base_dir = dir;
    for (const auto& fv : d.desc.fvs)
        for (const auto& m : fv.modules) write_file(dir / m.pe_path, m.pe_bytes);
    for (const auto& m : d.recovery_fv.modules) write_file(dir / m.pe_path, m.pe_bytes);
    save_platform(d.desc, dir / "platform.json");
    save_fv(d.recovery_fv, dir / "recovery_fv.json");
    d.tpm.save(d.desc.tpm_state_path());
    return dir / "platform.json";
}

} // namespace smmpack::sim
