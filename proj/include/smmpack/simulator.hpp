#pragma once

// Deterministic boot-chain model: power-on, PEI measurement of every volume
// into PCR0, DXE dispatch (apriori first), the agent's unseal and protocol
// install, stub-driven unpacking into SMRAM, SMRAM lock at end of DXE, and
// the OS hand-off.

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "smmpack/bytes.hpp"
#include "smmpack/cipher.hpp"
#include "smmpack/packer.hpp"
#include "smmpack/pe_image.hpp"
#include "smmpack/platform.hpp"
#include "smmpack/tpm.hpp"

namespace smmpack::sim {

enum class BootPhase { off, sec, pei, dxe, bds, rt };

inline std::string to_string(BootPhase p)
{
    switch (p) {
    case BootPhase::off: return "off";
    case BootPhase::sec: return "sec";
    case BootPhase::pei: return "pei";
    case BootPhase::dxe: return "dxe";
    case BootPhase::bds: return "bds";
    case BootPhase::rt: return "rt";
    }
    return "off";
}

/// Extended into PCR0 by the agent after unsealing when cap-extend is on.
inline Digest cap_constant() { return sha256("SMMPACK-CAP"); }

/// Separator measured into PCR0 when firmware hands off to the OS loader.
inline Digest os_separator() { return sha256(Bytes(4, 0)); }

inline constexpr std::uint64_t kSmramPage = 0x1000;
inline const std::string kSealHandlerId = "smmpack-seal";

struct LoadedImage {
    Guid guid;
    std::string name;
    std::uint64_t base = 0;
    std::uint32_t size = 0;
    std::optional<StubDescriptor> stub;
    bool unpacked = false;
};

/// SMRAM as a flat byte array with a bump allocator.
class Smram {
public:
    Smram() = default;
    explicit Smram(const SmramConfig& cfg) : base_(cfg.base), bytes_(cfg.size, 0) {}

    std::uint64_t base() const { return base_; }
    std::uint64_t size() const { return bytes_.size(); }
    bool locked() const { return locked_; }
    void lock() { locked_ = true; }

    bool contains(std::uint64_t addr, std::uint64_t len) const
    {
        return addr >= base_ && len <= bytes_.size() && addr - base_ <= bytes_.size() - len;
    }

    std::optional<std::uint64_t> allocate(std::uint64_t len)
    {
        const std::uint64_t at = align_up(next_, kSmramPage);
        if (at + len > bytes_.size()) return std::nullopt;
        next_ = at + len;
        return base_ + at;
    }

    std::span<std::uint8_t> view(std::uint64_t addr, std::uint64_t len)
    {
        if (!contains(addr, len)) fail(ErrorCode::AccessDenied, "address range is outside SMRAM");
        return std::span(bytes_).subspan(addr - base_, len);
    }

    ByteView contents() const { return bytes_; }
    Bytes& raw() { return bytes_; }

    std::map<Guid, LoadedImage> images;
    std::optional<std::uint64_t> key_address;

private:
    std::uint64_t base_ = 0;
    Bytes bytes_;
    std::uint64_t next_ = kSmramPage; // first page is reserved
    bool locked_ = false;
};

struct CommBuffer {
    std::uint64_t address = 0;
    Bytes data;
};

struct SmiResult {
    std::string status; // "ok", "invalid_comm_buffer", or a handler-specific failure
    Bytes output;
};

class Platform;
using SmiHandlerFn = std::function<SmiResult(Platform&, const CommBuffer&)>;

struct SmiHandlerRecord {
    std::string id;
    Guid owner;
    SmiHandlerFn run;
};

struct ProtocolRecord {
    Guid guid;
    Guid owner;
};

enum class Accessor { smm, os_software, dma };

struct DispatchRecord {
    Guid guid;
    std::string name;
    std::string fv;
    bool packed = false;
    std::string status; // ok | load_failed | halted
};

struct UnpackEvent {
    Guid guid;
    std::string name;
    std::uint64_t base = 0;
    std::uint32_t size = 0;
    bool sentinel_verified = false;
};

struct BootResult {
    Digest pcr0_final{};
    std::vector<DispatchRecord> dispatched;
    std::vector<UnpackEvent> unpack_events;
    std::optional<std::string> halted_reason;
    std::string halted_detail;
    BootPhase reached = BootPhase::off;
    bool smram_locked = false;
    std::vector<std::string> smi_handlers;
    std::vector<std::string> protocols;

    bool succeeded() const { return !halted_reason && reached == BootPhase::rt; }

    nlohmann::ordered_json to_json() const
    {
        nlohmann::ordered_json j;
        j["format"] = "smmpack-boot-result";
        j["version"] = 1;
        j["pcr0_final"] = to_hex(pcr0_final);
        j["reached_phase"] = to_string(reached);
        j["halted_reason"] = halted_reason ? nlohmann::ordered_json(*halted_reason) : nlohmann::ordered_json(nullptr);
        j["halted_detail"] = halted_detail;
        j["smram_locked"] = smram_locked;
        auto& d = j["dispatched"] = nlohmann::ordered_json::array();
        for (const auto& r : dispatched)
            d.push_back({{"guid", r.guid.str()}, {"name", r.name}, {"fv", r.fv}, {"packed", r.packed}, {"status", r.status}});
        auto& u = j["unpack_events"] = nlohmann::ordered_json::array();
        for (const auto& e : unpack_events)
            u.push_back({{"guid", e.guid.str()},
                         {"name", e.name},
                         {"base", detail::hex_u64(e.base)},
                         {"size", e.size},
                         {"sentinel_verified", e.sentinel_verified}});
        j["protocols"] = protocols;
        j["smi_handlers"] = smi_handlers;
        return j;
    }
};

/// Hook points used by the scenario engine and the update flow.
struct BootOptions {
    std::function<void(Platform&, const UefiModule&)> after_dispatch;
    std::function<void(Platform&)> before_end_of_dxe;
    bool stop_before_end_of_dxe = false;
};

/// Capsule-update stages at which a failure can be injected.
enum class UpdateStage { coalesce, flash, decrypt_key, backup_key, undefine_old, seal_new, verify_boot, delete_backup };

inline constexpr UpdateStage kAllUpdateStages[] = {UpdateStage::coalesce,     UpdateStage::flash,
                                                   UpdateStage::decrypt_key,  UpdateStage::backup_key,
                                                   UpdateStage::undefine_old, UpdateStage::seal_new,
                                                   UpdateStage::verify_boot,  UpdateStage::delete_backup};

inline std::string to_string(UpdateStage s)
{
    switch (s) {
    case UpdateStage::coalesce: return "coalesce";
    case UpdateStage::flash: return "flash";
    case UpdateStage::decrypt_key: return "decrypt_key";
    case UpdateStage::backup_key: return "backup_key";
    case UpdateStage::undefine_old: return "undefine_old";
    case UpdateStage::seal_new: return "seal_new";
    case UpdateStage::verify_boot: return "verify_boot";
    case UpdateStage::delete_backup: return "delete_backup";
    }
    return "coalesce";
}

inline UpdateStage parse_update_stage(std::string_view name)
{
    for (UpdateStage s : kAllUpdateStages)
        if (to_string(s) == name) return s;
    // Accept dashed spellings too ("seal-new").
    std::string underscored(name);
    std::replace(underscored.begin(), underscored.end(), '-', '_');
    for (UpdateStage s : kAllUpdateStages)
        if (to_string(s) == underscored) return s;
    fail(ErrorCode::InvalidArgument, "unknown update stage '" + std::string(name) + "'");
}

/// An update that has not completed: the capsule, the flash contents before
/// it was applied, and where it stopped.
struct PendingUpdate {
    Bytes capsule;
    std::vector<FirmwareVolume> original_flash;
    std::optional<UpdateStage> failed_stage;
};

/// A platform instance: flash contents, TPM and all runtime state.
class Platform {
public:
    explicit Platform(PlatformDescription desc, tpm::Tpm tpm = {})
        : desc_(std::move(desc)), tpm_(std::move(tpm)), smram_(desc_.smram)
    {
        validate(desc_);
    }

    const PlatformDescription& description() const { return desc_; }
    PlatformDescription& description() { return desc_; }
    std::vector<FirmwareVolume>& flash() { return desc_.fvs; }
    const std::vector<FirmwareVolume>& flash() const { return desc_.fvs; }
    const SecurityFlags& security() const { return desc_.security; }
    SecurityFlags& security() { return desc_.security; }

    tpm::Tpm& tpm() { return tpm_; }
    const tpm::Tpm& tpm() const { return tpm_; }
    Smram& smram() { return smram_; }
    const Smram& smram() const { return smram_; }

    BootPhase phase() const { return phase_; }
    void set_phase(BootPhase p) { phase_ = p; }

    std::map<Guid, ProtocolRecord>& protocol_db() { return protocols_; }
    const std::map<Guid, ProtocolRecord>& protocol_db() const { return protocols_; }
    std::map<std::string, SmiHandlerRecord>& smi_handlers() { return handlers_; }
    const std::map<std::string, SmiHandlerRecord>& smi_handlers() const { return handlers_; }
    std::vector<std::string>& violations() { return violations_; }

    bool cap_applied() const { return cap_applied_; }
    void set_cap_applied(bool v) { cap_applied_ = v; }

    /// Simulator callbacks standing in for attacker-written module code.
    std::map<Guid, std::function<void(Platform&)>> injected_code;

    /// Fault injection for the sealing SMI handler (update tests).
    std::optional<UpdateStage> injected_failure;

    /// PCR0 at the moment the agent unsealed the key in this boot.
    std::optional<Digest> unseal_pcr0;

    /// Survives power cycles (kept with the capsule on the ESP in practice).
    std::optional<PendingUpdate> pending_update;

    /// Clears all volatile state, as at power-on.
    void power_on()
    {
        tpm_.reset();
        smram_ = Smram(desc_.smram);
        protocols_.clear();
        handlers_.clear();
        violations_.clear();
        cap_applied_ = false;
        unseal_pcr0.reset();
        phase_ = BootPhase::sec;
    }

    void power_off() { phase_ = BootPhase::off; }

    /// Persists the TPM NV to the configured state file.
    void save_tpm() const { tpm_.save(desc_.tpm_state_path()); }

private:
    PlatformDescription desc_;
    tpm::Tpm tpm_;
    Smram smram_;
    BootPhase phase_ = BootPhase::off;
    std::map<Guid, ProtocolRecord> protocols_;
    std::map<std::string, SmiHandlerRecord> handlers_;
    std::vector<std::string> violations_;
    bool cap_applied_ = false;
};

/// Loads a description plus the TPM snapshot it names (fresh TPM if absent).
inline Platform load_platform_instance(const std::filesystem::path& description)
{
    PlatformDescription desc = load_platform(description);
    tpm::Tpm t = tpm::Tpm::load_or_fresh(desc.tpm_state_path());
    return Platform(std::move(desc), std::move(t));
}

// -- primitive operations -----------------------------------------------------

/// PEI: extend PCR0 with SHA-256 of each volume's raw bytes in SPI order.
inline Digest measure_fvs(Platform& p)
{
    if (p.phase() != BootPhase::pei) fail(ErrorCode::WrongPhase, "volumes are measured in PEI");
    Digest pcr0{};
    for (const auto& fv : p.flash()) pcr0 = p.tpm().pcr_extend(0, fv.measurement());
    return pcr0;
}

/// True iff [addr, addr+size) does not intersect SMRAM. Empty ranges pass.
inline bool validate_comm_buffer(const Platform& p, std::uint64_t addr, std::uint64_t size)
{
    if (size == 0) return true;
    const std::uint64_t smram_begin = p.smram().base();
    const std::uint64_t smram_end = smram_begin + p.smram().size();
    if (addr > UINT64_MAX - size) return false;
    const std::uint64_t end = addr + size;
    return end <= smram_begin || addr >= smram_end;
}

/// Reads all of SMRAM on behalf of `who`. Non-SMM actors get through only
/// while SMRAM is unlocked during DXE, and only by DMA outside a DPR.
inline Bytes read_smram(const Platform& p, Accessor who)
{
    if (who != Accessor::smm) {
        const bool window_open = !p.smram().locked() && p.phase() == BootPhase::dxe;
        const bool allowed = window_open && who == Accessor::dma && !p.security().dpr_enabled;
        if (!allowed) fail(ErrorCode::AccessDenied, "SMRAM is not readable from outside SMM");
    }
    ByteView c = p.smram().contents();
    return Bytes(c.begin(), c.end());
}

inline std::optional<SymmetricKey> agent_key(Platform& p)
{
    if (!p.smram().key_address) return std::nullopt;
    auto span = p.smram().view(*p.smram().key_address, 16);
    return SymmetricKey::from_bytes(span);
}

/// The unpack protocol: decrypts a packed module's text in SMRAM.
inline void unpack(Platform& p, const Guid& module, std::uint64_t base, std::uint32_t size)
{
    auto proto = p.protocol_db().find(kSmmPackProtocolGuid);
    if (proto == p.protocol_db().end()) fail(ErrorCode::ProtocolNotInstalled);
    if (p.phase() != BootPhase::dxe) fail(ErrorCode::WrongPhase, "unpack runs during DXE dispatch");
    auto it = p.smram().images.find(module);
    if (it == p.smram().images.end() || !it->second.stub) fail(ErrorCode::DescriptorMismatch, "module is not a loaded packed image");
    LoadedImage& img = it->second;
    const StubDescriptor& stub = *img.stub;
    if (base != img.base + stub.text_rva || size != stub.text_cipher_len)
        fail(ErrorCode::DescriptorMismatch, "base/size do not match the stub descriptor");
    auto key = agent_key(p);
    if (!key) fail(ErrorCode::ProtocolNotInstalled, "no key resident");
    auto text = p.smram().view(base, size);
    decrypt_cbc_in_place(*key, stub.iv, text);
    std::fill(text.begin() + stub.text_plain_len, text.end(), 0);
    img.unpacked = true;
}

/// Extends PCR0 with the cap constant once per boot when enabled. Returns
/// whether an extend happened.
inline bool cap_extend_pcr0(Platform& p)
{
    if (!p.description().tpm.cap_extend || p.cap_applied()) return false;
    if (!p.smram().key_address) fail(ErrorCode::WrongPhase, "cap extend follows a successful unseal");
    p.tpm().pcr_extend(0, cap_constant());
    p.set_cap_applied(true);
    return true;
}

inline SmiResult smi_invoke(Platform& p, const std::string& handler_id, const CommBuffer& buffer)
{
    if (p.phase() != BootPhase::dxe && p.phase() != BootPhase::rt)
        fail(ErrorCode::WrongPhase, "SMIs are serviced in DXE or at runtime");
    auto it = p.smi_handlers().find(handler_id);
    if (it == p.smi_handlers().end()) fail(ErrorCode::UnknownHandler, handler_id);
    if (!validate_comm_buffer(p, buffer.address, buffer.data.size())) {
        p.violations().push_back(handler_id + ": comm buffer overlaps SMRAM");
        return {"invalid_comm_buffer", {}};
    }
    return it->second.run(p, buffer);
}

// -- dispatch -----------------------------------------------------------------

namespace detail {

struct BootHalt {
    std::string reason;
    std::string detail;
};

inline LoadedImage load_into_smram(Platform& p, const UefiModule& m, const pe::PeImage& img)
{
    auto base = p.smram().allocate(img.size_of_image());
    if (!base) fail(ErrorCode::InvalidArgument, "SMRAM exhausted");
    auto dst = p.smram().view(*base, img.size_of_image());
    ByteView headers = img.raw_headers();
    const std::size_t header_len = std::min<std::size_t>({headers.size(), img.size_of_headers(), dst.size()});
    std::copy_n(headers.begin(), header_len, dst.begin());
    for (const auto& s : img.sections()) {
        if (s.raw_size == 0) continue;
        const std::size_t len = std::min<std::uint64_t>(s.raw_size, img.size_of_image() - s.virtual_address);
        std::copy_n(s.data.begin(), len, dst.begin() + s.virtual_address);
    }
    LoadedImage li;
    li.guid = m.guid;
    li.name = m.name;
    li.base = *base;
    li.size = img.size_of_image();
    li.stub = ::smmpack::detail::stub_of(img);
    p.smram().images[m.guid] = li;
    return li;
}

inline bool sentinel_matches(Platform& p, const LoadedImage& li, const UefiModule& m, const pe::PeImage& img)
{
    if (!m.behavior.sentinel) return true;
    const pe::Section* text = img.find_section(kTextSectionName);
    if (!text) return false;
    auto bytes = p.smram().view(li.base + text->virtual_address + m.behavior.sentinel_offset, kSentinelSize);
    return std::equal(bytes.begin(), bytes.end(), m.behavior.sentinel->begin());
}

inline SmiHandlerFn echo_handler(Guid owner)
{
    return [owner](Platform& p, const CommBuffer&) -> SmiResult {
        const UefiModule* m = p.description().find_module(owner);
        auto it = p.smram().images.find(owner);
        if (!m || !m->behavior.sentinel || it == p.smram().images.end()) return {"no_sentinel", {}};
        const pe::PeImage img = pe::PeImage::parse(m->pe_bytes);
        const pe::Section* text = img.find_section(kTextSectionName);
        if (!text) return {"no_sentinel", {}};
        auto bytes = p.smram().view(it->second.base + text->virtual_address + m->behavior.sentinel_offset, kSentinelSize);
        return {"ok", Bytes(bytes.begin(), bytes.end())};
    };
}

inline void register_behavior(Platform& p, const UefiModule& m)
{
    for (const auto& g : m.behavior.protocols) p.protocol_db()[g] = ProtocolRecord{g, m.guid};
    if (m.kind == ModuleKind::smm)
        for (const auto& id : m.behavior.smi_handlers) p.smi_handlers()[id] = SmiHandlerRecord{id, m.guid, echo_handler(m.guid)};
}

} // namespace detail

/// The agent's key-sealing SMI handler; defined below.
inline SmiHandlerFn make_seal_handler(Guid owner);

namespace detail {

inline void dispatch_agent(Platform& p, const UefiModule& m, BootResult& result, DispatchRecord& rec)
{
    std::optional<pe::PeImage> img;
    try {
        img = pe::PeImage::parse(m.pe_bytes);
        load_into_smram(p, m, *img);
    } catch (const Error& e) {
        throw BootHalt{"UnsealFailed", std::string("agent image failed to load: ") + e.what()};
    }

    const auto& cfg = p.description().tpm;
    const Digest pcr0_now = p.tpm().pcr(0);
    std::optional<SymmetricKey> key;
    std::string why;
    for (std::uint32_t index : {cfg.nv_index, cfg.backup_nv_index}) {
        try {
            key = unseal_key(p.tpm(), index);
            break;
        } catch (const Error& e) {
            if (why.empty()) why = e.what();
        }
    }
    if (!key) throw BootHalt{"UnsealFailed", why};

    auto key_at = p.smram().allocate(kSmramPage);
    if (!key_at) throw BootHalt{"UnsealFailed", "SMRAM exhausted"};
    auto slot = p.smram().view(*key_at, 16);
    std::copy(key->bytes.begin(), key->bytes.end(), slot.begin());
    p.smram().key_address = *key_at;
    p.unseal_pcr0 = pcr0_now;

    p.protocol_db()[kSmmPackProtocolGuid] = ProtocolRecord{kSmmPackProtocolGuid, m.guid};
    p.smi_handlers()[kSealHandlerId] = SmiHandlerRecord{kSealHandlerId, m.guid, make_seal_handler(m.guid)};
    register_behavior(p, m);
    cap_extend_pcr0(p);
    rec.status = "ok";
    (void)result;
}

inline void dispatch_module(Platform& p, const UefiModule& m, BootResult& result, DispatchRecord& rec)
{
    if (m.role == ModuleRole::injected) {
        if (auto it = p.injected_code.find(m.guid); it != p.injected_code.end()) it->second(p);
        rec.status = "ok";
        return;
    }
    if (m.role == ModuleRole::agent) return dispatch_agent(p, m, result, rec);

    std::optional<pe::PeImage> img;
    try {
        img = pe::PeImage::parse(m.pe_bytes);
    } catch (const Error&) {
        rec.status = "load_failed"; // the dispatcher skips images it cannot load
        return;
    }
    std::optional<StubDescriptor> stub = ::smmpack::detail::stub_of(*img);
    rec.packed = stub.has_value();

    if (m.kind == ModuleKind::dxe) {
        if (stub) throw BootHalt{"ProtocolNotInstalled", m.name + ": the unpack protocol is only reachable from SMM"};
        register_behavior(p, m);
        rec.status = "ok";
        return;
    }

    LoadedImage li;
    try {
        li = load_into_smram(p, m, *img);
    } catch (const Error&) {
        rec.status = "load_failed";
        return;
    }

    if (stub) {
        // Decrypt stub: find the protocol by GUID, Unpack(text base, size).
        if (!p.protocol_db().contains(stub->protocol_guid))
            throw BootHalt{"ProtocolNotInstalled", m.name + " dispatched before the unpack protocol was installed"};
        const std::uint64_t base = li.base + stub->text_rva;
        try {
            unpack(p, m.guid, base, stub->text_cipher_len);
        } catch (const Error& e) {
            throw BootHalt{std::string(to_string(e.code())), m.name + ": " + e.what()};
        }
        const bool ok = sentinel_matches(p, li, m, *img);
        result.unpack_events.push_back(UnpackEvent{m.guid, m.name, base, stub->text_cipher_len, ok});
        // Wrong plaintext means the chained entry point runs garbage.
        if (!ok) throw BootHalt{"ModuleFault", m.name + ": decrypted text does not carry the expected sentinel"};
    } else if (!sentinel_matches(p, li, m, *img)) {
        throw BootHalt{"ModuleFault", m.name + ": sentinel missing from text"};
    }
    register_behavior(p, m);
    rec.status = "ok";
}

} // namespace detail

/// Power-on through PEI measurement and DXE dispatch. Returns false when the
/// boot halted (details in `result`).
inline bool run_to_dxe_end(Platform& p, BootResult& result, const BootOptions& opts = {})
{
    p.power_on();
    p.set_phase(BootPhase::pei);
    measure_fvs(p);
    p.set_phase(BootPhase::dxe);
    try {
        for (const auto& fv : p.flash()) {
            if (fv.phase != FvPhase::dxe) continue;
            for (const UefiModule* m : fv.dispatch_order()) {
                DispatchRecord rec{m->guid, m->name, fv.name, false, "halted"};
                try {
                    detail::dispatch_module(p, *m, result, rec);
                } catch (...) {
                    result.dispatched.push_back(rec);
                    throw;
                }
                result.dispatched.push_back(rec);
                if (opts.after_dispatch) opts.after_dispatch(p, *m);
            }
        }
    } catch (const detail::BootHalt& halt) {
        result.halted_reason = halt.reason;
        result.halted_detail = halt.detail;
        result.reached = BootPhase::dxe;
        result.pcr0_final = p.tpm().pcr(0);
        return false;
    }
    return true;
}

/// SMRAM lock and provisioning lock-down, then BDS and runtime.
inline void finish_boot(Platform& p, BootResult& result, const BootOptions& opts = {})
{
    if (opts.before_end_of_dxe) opts.before_end_of_dxe(p);
    p.smram().lock();
    p.tpm().disable_platform_hierarchy();
    p.set_phase(BootPhase::bds);
    p.set_phase(BootPhase::rt);
    result.reached = BootPhase::rt;
    result.smram_locked = true;
    result.pcr0_final = p.tpm().pcr(0);
    for (const auto& [id, h] : p.smi_handlers()) result.smi_handlers.push_back(id);
    for (const auto& [g, rec] : p.protocol_db()) result.protocols.push_back(g.str());
}

inline BootResult boot(Platform& p, const BootOptions& opts = {})
{
    BootResult result;
    if (!run_to_dxe_end(p, result, opts)) {
        for (const auto& [id, h] : p.smi_handlers()) result.smi_handlers.push_back(id);
        for (const auto& [g, rec] : p.protocol_db()) result.protocols.push_back(g.str());
        return result;
    }
    if (opts.stop_before_end_of_dxe) {
        result.reached = BootPhase::dxe;
        result.pcr0_final = p.tpm().pcr(0);
        return result;
    }
    finish_boot(p, result, opts);
    return result;
}

/// OS loader hand-off: the firmware measures a separator into PCR0.
inline void launch_os(Platform& p)
{
    if (p.phase() != BootPhase::rt) fail(ErrorCode::WrongPhase, "the OS starts after BDS");
    p.tpm().pcr_extend(0, os_separator());
}

// -- in-SMM key sealing ---------------------------------------------------------

inline constexpr std::size_t kSealRequestSize = 16 + 32 + 32;

/// Payload handed to the sealing handler through the comm buffer:
/// wrap IV (16) | wrapped new key (32) | new enrolled PCR0 (32).
inline Bytes encode_seal_request(const Iv& wrap_iv, ByteView wrapped_key, const Digest& new_pcr0)
{
    if (wrapped_key.size() != 32) fail(ErrorCode::InvalidArgument, "wrapped key must be 32 bytes");
    Bytes out(wrap_iv.bytes.begin(), wrap_iv.bytes.end());
    append(out, wrapped_key);
    append(out, new_pcr0);
    return out;
}

/// Key wrapping for transport: AES-CBC over key || 16 bytes of 0x10.
inline Bytes wrap_key(const SymmetricKey& wrapping_key, const Iv& iv, const SymmetricKey& key)
{
    Bytes plain(key.bytes.begin(), key.bytes.end());
    plain.resize(32, 0x10);
    return encrypt_cbc(wrapping_key, iv, plain);
}

inline std::optional<SymmetricKey> unwrap_key(const SymmetricKey& wrapping_key, const Iv& iv, ByteView wrapped)
{
    if (wrapped.size() != 32) return std::nullopt;
    Bytes plain = decrypt_cbc(wrapping_key, iv, wrapped);
    if (!std::all_of(plain.begin() + 16, plain.end(), [](std::uint8_t b) { return b == 0x10; })) return std::nullopt;
    return SymmetricKey::from_bytes(ByteView(plain).first(16));
}

/// Runs inside SMM with the current key resident. Stages: unwrap the new
/// key, copy the current key to the backup slot, undefine the primary slot,
/// seal the new key to the new PCR0. Output is the name of the last stage
/// completed; a failed stage leaves everything before it in place.
inline SmiHandlerFn make_seal_handler(Guid owner)
{
    return [owner](Platform& p, const CommBuffer& buffer) -> SmiResult {
        (void)owner;
        auto failed = [](UpdateStage s) { return SmiResult{"failed:" + to_string(s), {}}; };
        auto injected = [&](UpdateStage s) { return p.injected_failure && *p.injected_failure == s; };
        if (buffer.data.size() != kSealRequestSize) return {"bad_request", {}};

        const auto current = agent_key(p);
        if (!current || !p.unseal_pcr0) return {"no_key", {}};
        const Iv iv = Iv::from_bytes(ByteView(buffer.data).first(16));
        const ByteView wrapped = ByteView(buffer.data).subspan(16, 32);
        Digest new_pcr0{};
        std::copy_n(buffer.data.begin() + 48, 32, new_pcr0.begin());
        const auto& cfg = p.description().tpm;
        tpm::Tpm& t = p.tpm();

        if (injected(UpdateStage::decrypt_key)) return failed(UpdateStage::decrypt_key);
        const auto new_key = unwrap_key(*current, iv, wrapped);
        if (!new_key) return failed(UpdateStage::decrypt_key);

        try {
            if (injected(UpdateStage::backup_key)) return failed(UpdateStage::backup_key);
            if (t.nv_defined(cfg.backup_nv_index)) t.nv_undefine_space(cfg.backup_nv_index);
            seal_key(t, cfg.backup_nv_index, *current, *p.unseal_pcr0);
        } catch (const Error&) {
            return failed(UpdateStage::backup_key);
        }

        try {
            if (injected(UpdateStage::undefine_old)) return failed(UpdateStage::undefine_old);
            if (t.nv_defined(cfg.nv_index)) t.nv_undefine_space(cfg.nv_index);
        } catch (const Error&) {
            return failed(UpdateStage::undefine_old);
        }

        try {
            const Digest policy = trial_policy_for_pcr0(t, new_pcr0);
            t.nv_define_space(cfg.nv_index, kSealedKeySize, policy);
            // An injected failure here leaves a defined but empty slot.
            if (injected(UpdateStage::seal_new)) return failed(UpdateStage::seal_new);
            t.nv_write(cfg.nv_index, new_key->bytes);
        } catch (const Error&) {
            return failed(UpdateStage::seal_new);
        }
        return {"ok", {}};
    };
}

} // namespace smmpack::sim
