#pragma once

// BIOS update for packed firmware: capsule format, the apply flow that
// re-seals the key through the agent's SMI handler, and recovery.

#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "smmpack/bytes.hpp"
#include "smmpack/cipher.hpp"
#include "smmpack/packer.hpp"
#include "smmpack/platform.hpp"
#include "smmpack/simulator.hpp"

namespace smmpack::update {

using sim::FirmwareVolume;
using sim::Platform;
using sim::PlatformDescription;
using sim::UefiModule;
using sim::UpdateStage;

inline constexpr std::array<std::uint8_t, 4> kCapsuleMagic = {'S', 'P', 'K', 'C'};
inline constexpr std::uint16_t kCapsuleVersion = 1;
inline constexpr std::size_t kCapsuleHeaderSize = 4 + 2 + 2 + 16 + 32 + 32;

/// Address of the comm buffer the update driver hands to the seal handler.
inline constexpr std::uint64_t kUpdateCommBuffer = 0x00100000;

struct CapsuleModule {
    Guid guid;
    Bytes pe_bytes;

    friend bool operator==(const CapsuleModule&, const CapsuleModule&) = default;
};

struct Capsule {
    Iv wrap_iv;
    std::array<std::uint8_t, 32> wrapped_new_key{};
    Digest new_enrolled_pcr0{};
    std::vector<CapsuleModule> modules;

    Bytes encode() const
    {
        if (modules.size() > 0xffff) fail(ErrorCode::InvalidArgument, "too many modules for one capsule");
        Bytes out(kCapsuleMagic.begin(), kCapsuleMagic.end());
        append_le16(out, kCapsuleVersion);
        append_le16(out, static_cast<std::uint16_t>(modules.size()));
        append(out, wrap_iv.bytes);
        append(out, wrapped_new_key);
        append(out, new_enrolled_pcr0);
        for (const auto& m : modules) {
            append(out, m.guid.bytes);
            append_le32(out, static_cast<std::uint32_t>(m.pe_bytes.size()));
            append(out, m.pe_bytes);
        }
        return out;
    }

    static Capsule decode(ByteView raw)
    {
        auto bad = [](const std::string& why) { fail(ErrorCode::MalformedCapsule, why); };
        if (raw.size() < kCapsuleHeaderSize) bad("truncated header");
        if (!std::equal(kCapsuleMagic.begin(), kCapsuleMagic.end(), raw.begin())) bad("bad magic");
        if (load_le16(&raw[4]) != kCapsuleVersion) bad("unsupported version");
        const std::uint16_t count = load_le16(&raw[6]);
        Capsule c;
        c.wrap_iv = Iv::from_bytes(raw.subspan(8, 16));
        std::copy_n(raw.begin() + 24, 32, c.wrapped_new_key.begin());
        std::copy_n(raw.begin() + 56, 32, c.new_enrolled_pcr0.begin());
        std::size_t at = kCapsuleHeaderSize;
        for (std::uint16_t i = 0; i < count; ++i) {
            if (raw.size() - at < 20) bad("truncated module entry");
            CapsuleModule m;
            m.guid = Guid::from_bytes(raw.subspan(at, 16));
            const std::uint32_t len = load_le32(&raw[at + 16]);
            at += 20;
            if (raw.size() - at < len) bad("module data runs past the end");
            m.pe_bytes.assign(raw.begin() + at, raw.begin() + at + len);
            at += len;
            c.modules.push_back(std::move(m));
        }
        if (at != raw.size()) bad("trailing bytes");
        return c;
    }

    friend bool operator==(const Capsule&, const Capsule&) = default;
};

/// Flash contents after writing `modules` over the matching GUIDs.
inline std::vector<FirmwareVolume> flash_after(std::vector<FirmwareVolume> fvs, const std::vector<CapsuleModule>& modules)
{
    for (const auto& cm : modules) {
        UefiModule* target = nullptr;
        for (auto& fv : fvs)
            if ((target = fv.find(cm.guid))) break;
        if (!target) fail(ErrorCode::UnknownModuleInCapsule, cm.guid.str());
        target->pe_bytes = cm.pe_bytes;
    }
    return fvs;
}

/// Builds a capsule for `current`. The new key is wrapped under the current
/// platform key; `new_pcr0` must match the post-update flash contents.
inline Bytes build_capsule(const PlatformDescription& current, const std::vector<CapsuleModule>& modules,
                           const SymmetricKey& new_key, const SymmetricKey& current_key, const Digest& new_pcr0,
                           std::uint64_t seed)
{
    for (const auto& m : modules) {
        bool packed = false;
        try {
            packed = is_packed(m.pe_bytes);
        } catch (const Error&) {
        }
        if (!packed) fail(ErrorCode::UnpackedModuleInCapsule, m.guid.str());
    }
    const auto flash = flash_after(current.fvs, modules);
    // The current key is retired by the update, so every packed module must be replaced.
    for (const auto& fv : current.fvs)
        for (const auto& m : fv.modules) {
            const bool replaced =
                std::any_of(modules.begin(), modules.end(), [&](const CapsuleModule& c) { return c.guid == m.guid; });
            if (!replaced && is_packed(m.pe_bytes))
                fail(ErrorCode::IncompleteCapsule, m.name + " stays packed under the current key");
        }
    const Digest expected = compute_enrolled_pcr0(flash);
    if (expected != new_pcr0)
        fail(ErrorCode::PcrMismatchWithContents, "contents measure to " + to_hex(expected));

    std::mt19937_64 rng(seed);
    for (;;) {
        Capsule c;
        c.wrap_iv.bytes = random_block(rng);
        Bytes wrapped = sim::wrap_key(current_key, c.wrap_iv, new_key);
        std::copy(wrapped.begin(), wrapped.end(), c.wrapped_new_key.begin());
        c.new_enrolled_pcr0 = new_pcr0;
        c.modules = modules;
        Bytes out = c.encode();
        // A chance collision of the key with ciphertext would fail the scan; draw another IV.
        if (!contains_bytes(out, new_key.bytes)) return out;
    }
}

enum class RecoveredVia { none, recovery_fv, rollback };

inline std::string to_string(RecoveredVia v)
{
    switch (v) {
    case RecoveredVia::none: return "none";
    case RecoveredVia::recovery_fv: return "recovery_fv";
    case RecoveredVia::rollback: return "rollback";
    }
    return "none";
}

struct UpdateResult {
    bool flashed = false;
    bool sealed = false;
    RecoveredVia recovered_via = RecoveredVia::none;
    std::string final_key_index_state;
    std::optional<UpdateStage> failed_stage;
    std::vector<std::string> log;

    bool succeeded() const { return sealed && !failed_stage; }

    nlohmann::ordered_json to_json() const
    {
        nlohmann::ordered_json j;
        j["format"] = "smmpack-update-result";
        j["version"] = 1;
        j["flashed"] = flashed;
        j["sealed"] = sealed;
        j["recovered_via"] = to_string(recovered_via);
        j["final_key_index_state"] = final_key_index_state;
        j["failed_stage"] = failed_stage ? nlohmann::ordered_json(sim::to_string(*failed_stage)) : nlohmann::ordered_json(nullptr);
        j["log"] = log;
        return j;
    }
};

/// e.g. "primary=0x01500000:written backup=0x01500001:undefined"
inline std::string describe_key_slots(const Platform& p)
{
    auto slot = [&](std::uint32_t index) {
        std::string s = tpm::Tpm::hex_index(index) + ":";
        if (!p.tpm().nv_defined(index)) return s + "undefined";
        return s + (p.tpm().nv_slot(index).written ? "written" : "empty");
    };
    return "primary=" + slot(p.description().tpm.nv_index) + " backup=" + slot(p.description().tpm.backup_nv_index);
}

namespace detail {

inline bool injected(const std::optional<UpdateStage>& inject, UpdateStage s) { return inject && *inject == s; }

inline UpdateResult& stop(Platform& p, UpdateResult& r, UpdateStage s, const std::string& why)
{
    r.failed_stage = s;
    r.log.push_back(sim::to_string(s) + ": " + why);
    if (p.pending_update) p.pending_update->failed_stage = s;
    r.final_key_index_state = describe_key_slots(p);
    return r;
}

} // namespace detail

/// Applies a capsule on a running system: boots to the end of DXE, writes
/// the modules to flash, hands the wrapped key to the seal handler, then
/// verifies with a reboot and deletes the backup key. `inject` aborts at the
/// named stage. Until the update completes the capsule and the pre-update
/// flash stay recorded in `p.pending_update`.
inline UpdateResult apply_capsule(Platform& p, ByteView capsule_bytes, std::optional<UpdateStage> inject = {})
{
    UpdateResult r;
    const std::vector<FirmwareVolume> before = p.flash();

    sim::BootOptions first;
    first.stop_before_end_of_dxe = true;
    sim::BootResult br = sim::boot(p, first);
    if (br.halted_reason)
        fail(ErrorCode::WrongPhase, "platform must boot with its key before an update (" + *br.halted_reason + ")");
    r.log.push_back("booted to end of DXE");

    // coalesce
    Capsule capsule;
    try {
        if (detail::injected(inject, UpdateStage::coalesce)) fail(ErrorCode::InjectedFailure);
        capsule = Capsule::decode(capsule_bytes);
        flash_after(before, capsule.modules);
        for (const auto& m : capsule.modules)
            if (!is_packed(m.pe_bytes)) fail(ErrorCode::UnpackedModuleInCapsule, m.guid.str());
    } catch (const Error& e) {
        sim::finish_boot(p, br);
        return detail::stop(p, r, UpdateStage::coalesce, e.what());
    }
    if (!p.pending_update || p.pending_update->capsule != Bytes(capsule_bytes.begin(), capsule_bytes.end()))
        p.pending_update = sim::PendingUpdate{Bytes(capsule_bytes.begin(), capsule_bytes.end()), before, std::nullopt};
    p.pending_update->failed_stage.reset();

    // flash
    if (detail::injected(inject, UpdateStage::flash)) {
        // Power loss mid-write: the first module is left half written.
        if (!capsule.modules.empty()) {
            Bytes partial = capsule.modules.front().pe_bytes;
            partial.resize(partial.size() / 2);
            p.flash() = flash_after(p.flash(), {CapsuleModule{capsule.modules.front().guid, partial}});
        }
        r.flashed = false;
        sim::finish_boot(p, br);
        return detail::stop(p, r, UpdateStage::flash, "injected failure while writing flash");
    }
    p.flash() = flash_after(p.flash(), capsule.modules);
    r.flashed = true;
    r.log.push_back("flashed " + std::to_string(capsule.modules.size()) + " modules");

    // In-SMM key handling.
    sim::CommBuffer buffer{kUpdateCommBuffer,
                           sim::encode_seal_request(capsule.wrap_iv, capsule.wrapped_new_key, capsule.new_enrolled_pcr0)};
    if (inject && *inject >= UpdateStage::decrypt_key && *inject <= UpdateStage::seal_new) p.injected_failure = inject;
    sim::SmiResult res;
    try {
        res = sim::smi_invoke(p, sim::kSealHandlerId, buffer);
    } catch (const Error& e) {
        res.status = std::string("failed:decrypt_key (") + e.what() + ")";
    }
    p.injected_failure.reset();
    sim::finish_boot(p, br);
    if (res.status != "ok") {
        UpdateStage at = UpdateStage::decrypt_key;
        if (res.status.rfind("failed:", 0) == 0) {
            const std::string name = res.status.substr(7, res.status.find(' ') == std::string::npos
                                                               ? std::string::npos
                                                               : res.status.find(' ') - 7);
            at = sim::parse_update_stage(name);
        }
        return detail::stop(p, r, at, "seal handler returned " + res.status);
    }
    r.sealed = true;
    r.log.push_back("new key sealed");

    // verify_boot, then delete the backup before the platform hierarchy goes away.
    if (detail::injected(inject, UpdateStage::verify_boot))
        return detail::stop(p, r, UpdateStage::verify_boot, "injected failure during the verification reboot");
    bool delete_failed = false;
    sim::BootOptions verify;
    verify.before_end_of_dxe = [&](Platform& q) {
        const std::uint32_t backup = q.description().tpm.backup_nv_index;
        if (detail::injected(inject, UpdateStage::delete_backup)) {
            delete_failed = true;
            return;
        }
        if (q.tpm().nv_defined(backup)) q.tpm().nv_undefine_space(backup);
    };
    sim::BootResult vb = sim::boot(p, verify);
    if (!vb.succeeded())
        return detail::stop(p, r, UpdateStage::verify_boot,
                            "verification boot halted: " + vb.halted_reason.value_or("?") + " " + vb.halted_detail);
    r.log.push_back("verification boot reached runtime");
    if (delete_failed) return detail::stop(p, r, UpdateStage::delete_backup, "injected failure deleting the backup key");
    r.log.push_back("backup key deleted");

    p.pending_update.reset();
    r.final_key_index_state = describe_key_slots(p);
    return r;
}

inline bool has_sealer(const FirmwareVolume& fv)
{
    return std::any_of(fv.modules.begin(), fv.modules.end(), [](const UefiModule& m) {
        return m.role == sim::ModuleRole::sealer && m.kind == sim::ModuleKind::smm;
    });
}

/// Recovery after a failed update. Boots the untouched PEI volumes plus the
/// recovery DXE volume, whose sealer module writes the pre-update flash back;
/// the original BIOS then unseals its key (primary or backup slot) and the
/// pending capsule is applied again. If that fails as well, the original
/// BIOS stays and the backed-up key is restored to the primary slot.
/// `inject` lets tests make the second attempt fail too.
inline UpdateResult recover(Platform& p, const FirmwareVolume& recovery_fv, std::optional<UpdateStage> inject = {})
{
    if (!has_sealer(recovery_fv)) fail(ErrorCode::RecoveryFvMissingSealer, recovery_fv.name);
    UpdateResult r;
    if (!p.pending_update) {
        r.log.push_back("no pending update");
        r.final_key_index_state = describe_key_slots(p);
        return r;
    }
    const sim::PendingUpdate pending = *p.pending_update;

    // Recovery boot.
    p.power_on();
    p.set_phase(sim::BootPhase::pei);
    for (const auto& fv : p.flash())
        if (fv.phase == sim::FvPhase::pei) p.tpm().pcr_extend(0, fv.measurement());
    p.tpm().pcr_extend(0, recovery_fv.measurement());
    p.set_phase(sim::BootPhase::dxe);
    p.flash() = pending.original_flash;
    r.log.push_back("recovery volume " + recovery_fv.name + " restored the pre-update flash");
    p.power_off();

    UpdateResult again = apply_capsule(p, pending.capsule, inject);
    if (!again.failed_stage) {
        again.recovered_via = RecoveredVia::recovery_fv;
        again.log.insert(again.log.begin(), r.log.begin(), r.log.end());
        return again;
    }
    r.log.insert(r.log.end(), again.log.begin(), again.log.end());

    // Persistent failure: original BIOS and original key.
    p.flash() = pending.original_flash;
    bool restored = false;
    std::string why;
    sim::BootOptions rollback;
    rollback.before_end_of_dxe = [&](Platform& q) {
        const auto key = sim::agent_key(q);
        const auto& cfg = q.description().tpm;
        if (!key || !q.unseal_pcr0) {
            why = "no key resident";
            return;
        }
        try {
            if (q.tpm().nv_defined(cfg.nv_index)) q.tpm().nv_undefine_space(cfg.nv_index);
            seal_key(q.tpm(), cfg.nv_index, *key, *q.unseal_pcr0);
            if (q.tpm().nv_defined(cfg.backup_nv_index)) q.tpm().nv_undefine_space(cfg.backup_nv_index);
            restored = true;
        } catch (const Error& e) {
            why = e.what();
        }
    };
    sim::BootResult b = sim::boot(p, rollback);
    r.recovered_via = RecoveredVia::rollback;
    r.flashed = true;
    if (!b.succeeded() || !restored) {
        r.failed_stage = again.failed_stage;
        r.log.push_back("rollback failed: " + b.halted_reason.value_or(why));
        r.final_key_index_state = describe_key_slots(p);
        return r;
    }
    r.sealed = true;
    r.log.push_back("original BIOS written back, original key restored to the primary slot");
    p.pending_update.reset();
    r.final_key_index_state = describe_key_slots(p);
    return r;
}

// -- persistence across CLI invocations ---------------------------------------

namespace detail {

inline nlohmann::ordered_json flash_to_json(const std::vector<FirmwareVolume>& fvs)
{
    auto out = nlohmann::ordered_json::array();
    for (const auto& fv : fvs)
        for (const auto& m : fv.modules) out.push_back({{"guid", m.guid.str()}, {"pe", to_hex(m.pe_bytes)}});
    return out;
}

inline void flash_from_json(std::vector<FirmwareVolume>& fvs, const nlohmann::json& j)
{
    for (const auto& e : j) {
        const Guid g = Guid::parse(e.at("guid").get<std::string>());
        UefiModule* target = nullptr;
        for (auto& fv : fvs)
            if ((target = fv.find(g))) break;
        if (!target) fail(ErrorCode::MalformedState, "update state names unknown module " + g.str());
        target->pe_bytes = from_hex(e.at("pe").get<std::string>());
    }
}

} // namespace detail

/// Writes the current flash contents and any pending update next to the
/// platform description, so later invocations see the updated machine.
inline void save_update_state(const Platform& p, const std::filesystem::path& path)
{
    nlohmann::ordered_json j;
    j["format"] = "smmpack-update-state";
    j["version"] = 1;
    j["flash"] = detail::flash_to_json(p.flash());
    if (p.pending_update) {
        nlohmann::ordered_json pend;
        pend["capsule"] = to_hex(p.pending_update->capsule);
        pend["failed_stage"] = p.pending_update->failed_stage
                                   ? nlohmann::ordered_json(sim::to_string(*p.pending_update->failed_stage))
                                   : nlohmann::ordered_json(nullptr);
        pend["original_flash"] = detail::flash_to_json(p.pending_update->original_flash);
        j["pending"] = std::move(pend);
    } else {
        j["pending"] = nullptr;
    }
    write_text_file(path, j.dump(1) + "\n");
}

inline void save_update_state(const Platform& p) { save_update_state(p, p.description().update_state_path()); }

/// Applies a saved update state, if the file exists.
inline void load_update_state(Platform& p, const std::filesystem::path& path)
{
    if (!std::filesystem::exists(path)) return;
    try {
        nlohmann::json j = nlohmann::json::parse(read_text_file(path));
        if (j.at("format") != "smmpack-update-state" || j.at("version") != 1)
            fail(ErrorCode::MalformedState, "unexpected update state format");
        const std::vector<FirmwareVolume> described = p.flash();
        detail::flash_from_json(p.flash(), j.at("flash"));
        p.pending_update.reset();
        if (const auto& pend = j.at("pending"); !pend.is_null()) {
            sim::PendingUpdate u;
            u.capsule = from_hex(pend.at("capsule").get<std::string>());
            if (!pend.at("failed_stage").is_null())
                u.failed_stage = sim::parse_update_stage(pend.at("failed_stage").get<std::string>());
            u.original_flash = described;
            detail::flash_from_json(u.original_flash, pend.at("original_flash"));
            p.pending_update = std::move(u);
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::MalformedState, e.what());
    }
}

/// Description + TPM snapshot + update state: the machine as last left.
inline Platform load_machine(const std::filesystem::path& description)
{
    Platform p = sim::load_platform_instance(description);
    load_update_state(p, p.description().update_state_path());
    return p;
}

inline void save_machine(const Platform& p)
{
    p.save_tpm();
    save_update_state(p);
}

} // namespace smmpack::update
