// smmpack: pack SMM modules, provision the sealed key, and drive the boot,
// attack and update simulations. Results go to stdout as JSON; failures go
// to stderr as "error: <ErrorName>: <detail>" with exit status 1.

#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "smmpack/smmpack.hpp"

using namespace smmpack;
using nlohmann::ordered_json;

namespace {

void emit(const ordered_json& j) { std::cout << j.dump(2) << "\n"; }

ordered_json report_json(const PackReport& r)
{
    ordered_json j;
    j["module_name"] = r.module_name;
    j["text_size_bytes"] = r.text_size_bytes;
    j["stub_section_raw_size"] = r.stub_section_raw_size;
    j["size_overhead_bytes"] = r.size_overhead_bytes;
    j["packed"] = r.packed;
    return j;
}

ordered_json stub_json(const StubDescriptor& d)
{
    ordered_json j;
    j["version"] = d.version;
    j["original_entry_rva"] = sim::detail::hex_u64(d.original_entry_rva);
    j["text_rva"] = sim::detail::hex_u64(d.text_rva);
    j["text_cipher_len"] = d.text_cipher_len;
    j["text_plain_len"] = d.text_plain_len;
    j["iv"] = to_hex(d.iv.bytes);
    j["protocol_guid"] = d.protocol_guid.str();
    return j;
}

std::vector<std::size_t> parse_sizes(const std::string& csv)
{
    std::vector<std::size_t> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        unsigned long long v = 0;
        try {
            v = std::stoull(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != item.size()) fail(ErrorCode::InvalidArgument, "bad size '" + item + "'");
        out.push_back(static_cast<std::size_t>(v));
    }
    return out;
}

std::optional<sim::UpdateStage> stage_arg(const std::string& s)
{
    if (s.empty()) return std::nullopt;
    return sim::parse_update_stage(s);
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Encrypt SMM module text sections and simulate their sealed-key boot flow"};
    app.require_subcommand(1);

    // -- module tooling -----------------------------------------------------------

    std::string in_path, out_path, key_hex, platform_path;
    std::optional<std::uint64_t> seed;

    auto* pack = app.add_subcommand("pack", "Encrypt .text and append the .ext stub section");
    pack->add_option("--in", in_path, "input PE32+ image")->required();
    pack->add_option("--out", out_path, "packed output image")->required();
    pack->add_option("--key", key_hex, "AES-128 key, 32 hex characters")->required();
    pack->add_option("--seed", seed, "deterministic IV seed");

    auto* insp = app.add_subcommand("inspect", "Report whether an image is packed and its stub");
    insp->add_option("--in", in_path, "PE32+ image")->required();

    std::string tpm_path, index_text;
    auto* seal = app.add_subcommand("seal-key", "Seal a key to a platform's enrolled PCR0");
    seal->add_option("--tpm", tpm_path, "TPM state file (created if missing)")->required();
    seal->add_option("--index", index_text, "NV index, hex")->required();
    seal->add_option("--key", key_hex, "AES-128 key, 32 hex characters")->required();
    seal->add_option("--platform", platform_path, "platform description")->required();

    auto* enrolled = app.add_subcommand("enrolled-pcr", "PCR0 the agent sees on an unmodified boot");
    enrolled->add_option("--platform", platform_path, "platform description")->required();

    std::uint32_t text_size = 4096, data_size = 512, file_alignment = 512, sentinel_offset = 16;
    std::string sentinel_hex;
    auto* synth = app.add_subcommand("synth-module", "Write a synthetic PE32+ module carrying a sentinel");
    synth->add_option("--out", out_path, "output image")->required();
    synth->add_option("--text-size", text_size, "bytes of .text");
    synth->add_option("--data-size", data_size, "bytes of .data, 0 for none");
    synth->add_option("--file-alignment", file_alignment, "file alignment");
    synth->add_option("--sentinel", sentinel_hex, "16-byte sentinel, hex");
    synth->add_option("--sentinel-offset", sentinel_offset, "sentinel offset inside .text");
    synth->add_option("--seed", seed, "content seed");

    std::string dir;
    std::size_t module_count = 4;
    bool no_cap = false;
    auto* demo = app.add_subcommand("demo", "Write a demo platform with packed modules and a sealed key");
    demo->add_option("--dir", dir, "output directory")->required();
    demo->add_option("--modules", module_count, "number of packed test modules");
    demo->add_option("--seed", seed, "generation seed");
    demo->add_option("--key", key_hex, "platform key, hex (random if omitted)");
    demo->add_flag("--no-cap-extend", no_cap, "disable the post-unseal PCR0 extend");

    // -- simulation --------------------------------------------------------------

    auto* bootc = app.add_subcommand("boot", "Boot the platform and print the result");
    bootc->add_option("--platform", platform_path, "platform description")->required();

    std::string scenario_name;
    bool all = false, dpr = false, tme = false;
    auto* scen = app.add_subcommand("scenario", "Run attacker scenarios against the platform");
    scen->add_option("--platform", platform_path, "platform description")->required();
    auto* name_opt = scen->add_option("--name", scenario_name, "scenario name");
    auto* all_opt = scen->add_flag("--all", all, "run every scenario");
    name_opt->excludes(all_opt);
    scen->add_flag("--dpr", dpr, "force the DMA protected range on");
    scen->add_flag("--tme", tme, "force total memory encryption on");

    std::string sizes_csv = "3000,20000,50000";
    int reps = 5;
    auto* bench = app.add_subcommand("bench", "Time the unpack decrypt for several text sizes");
    bench->add_option("--sizes", sizes_csv, "comma-separated byte counts");
    bench->add_option("--reps", reps, "timed repetitions per size (>= 5)");
    bench->add_option("--seed", seed, "data seed");

    // -- capsule update ----------------------------------------------------------

    auto* cap = app.add_subcommand("capsule", "Build, apply and recover BIOS update capsules");
    cap->require_subcommand(1);

    std::vector<std::string> module_args;
    std::string new_key_hex, current_key_hex, new_pcr_hex;
    auto* build = cap->add_subcommand("build", "Build a capsule from packed modules");
    build->add_option("--platform", platform_path, "current platform description")->required();
    build->add_option("--module", module_args, "GUID=packed-image, repeatable")->required();
    build->add_option("--new-key", new_key_hex, "key the modules are packed with")->required();
    build->add_option("--current-key", current_key_hex, "platform key the new key is wrapped under")->required();
    build->add_option("--new-pcr0", new_pcr_hex, "expected PCR0 after the update (computed if omitted)");
    build->add_option("--seed", seed, "wrap IV seed");
    build->add_option("--out", out_path, "capsule file")->required();

    std::string capsule_path, fail_at, recovery_path;
    auto* apply = cap->add_subcommand("apply", "Apply a capsule to the platform");
    apply->add_option("--platform", platform_path, "platform description")->required();
    apply->add_option("--capsule", capsule_path, "capsule file")->required();
    apply->add_option("--fail-at", fail_at, "inject a failure at this stage");

    auto* recov = cap->add_subcommand("recover", "Recover from a failed update");
    recov->add_option("--platform", platform_path, "platform description")->required();
    recov->add_option("--recovery-fv", recovery_path, "recovery volume file")->required();
    recov->add_option("--fail-at", fail_at, "make the retried update fail at this stage");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (*pack) {
            const Bytes input = read_file(in_path);
            const PackResult r = pack_module(input, SymmetricKey::from_hex(key_hex), seed,
                                             std::filesystem::path(in_path).stem().string());
            write_file(out_path, r.packed);
            ordered_json j = report_json(r.report);
            j["stub"] = stub_json(r.descriptor);
            emit(j);
        } else if (*insp) {
            const Bytes input = read_file(in_path);
            ordered_json j = report_json(inspect(input, std::filesystem::path(in_path).stem().string()));
            if (auto stub = read_stub(input)) j["stub"] = stub_json(*stub);
            emit(j);
        } else if (*seal) {
            const sim::PlatformDescription desc = sim::load_platform(platform_path);
            const Digest pcr0 = sim::compute_enrolled_pcr0(desc);
            tpm::Tpm t = tpm::Tpm::load_or_fresh(tpm_path);
            const std::uint32_t index = tpm::Tpm::parse_index(index_text);
            seal_key(t, index, SymmetricKey::from_hex(key_hex), pcr0);
            t.save(tpm_path);
            emit({{"index", tpm::Tpm::hex_index(index)}, {"enrolled_pcr0", to_hex(pcr0)}, {"tpm", tpm_path}});
        } else if (*enrolled) {
            const sim::PlatformDescription desc = sim::load_platform(platform_path);
            emit({{"enrolled_pcr0", to_hex(sim::compute_enrolled_pcr0(desc))}});
        } else if (*synth) {
            ModuleSpec spec;
            spec.text_size = text_size;
            spec.data_size = data_size;
            spec.file_alignment = file_alignment;
            spec.sentinel_offset = sentinel_offset;
            spec.seed = seed.value_or(0);
            if (!sentinel_hex.empty()) spec.sentinel = array_from_hex<kSentinelSize>(sentinel_hex);
            write_file(out_path, build_module(spec));
            emit({{"out", out_path}, {"sentinel", to_hex(spec.sentinel)}, {"sentinel_offset", spec.sentinel_offset}});
        } else if (*demo) {
            sim::DemoOptions opt;
            opt.module_count = module_count;
            opt.seed = seed.value_or(1);
            opt.cap_extend = !no_cap;
            if (!key_hex.empty()) opt.key = SymmetricKey::from_hex(key_hex);
            sim::Demo d = sim::make_demo(opt);
            const auto path = sim::write_demo(d, dir);
            std::filesystem::remove(d.desc.update_state_path());
            ordered_json j;
            j["platform"] = path.string();
            j["recovery_fv"] = (std::filesystem::path(dir) / "recovery_fv.json").string();
            j["key"] = to_hex(d.key.bytes);
            j["enrolled_pcr0"] = to_hex(d.enrolled_pcr0);
            auto& mods = j["test_modules"] = ordered_json::array();
            for (const Guid& g : d.test_modules) {
                const sim::UefiModule* m = d.desc.find_module(g);
                mods.push_back({{"guid", g.str()}, {"name", m->name}, {"pe", m->pe_path},
                                {"sentinel", to_hex(*m->behavior.sentinel)},
                                {"sentinel_offset", m->behavior.sentinel_offset}});
            }
            emit(j);
        } else if (*bootc) {
            sim::Platform p = update::load_machine(platform_path);
            emit(sim::boot(p).to_json());
        } else if (*scen) {
            sim::Platform p = update::load_machine(platform_path);
            if (dpr) p.security().dpr_enabled = true;
            if (tme) p.security().tme_enabled = true;
            if (all) {
                ordered_json arr = ordered_json::array();
                for (const auto& o : sim::run_all_scenarios(p)) arr.push_back(o.to_json());
                emit(arr);
            } else if (!scenario_name.empty()) {
                emit(sim::run_scenario(p, scenario_name).to_json());
            } else {
                fail(ErrorCode::InvalidArgument, "give --name or --all");
            }
        } else if (*bench) {
            const auto samples = bench_unpack(parse_sizes(sizes_csv), reps, seed.value_or(1));
            ordered_json j;
            auto& arr = j["samples"] = ordered_json::array();
            double lo = 0, hi = 0;
            for (const auto& s : samples) {
                arr.push_back(s.to_json());
                if (!s.per_byte_ns) continue;
                lo = lo == 0 ? *s.per_byte_ns : std::min(lo, *s.per_byte_ns);
                hi = std::max(hi, *s.per_byte_ns);
            }
            j["per_byte_spread"] = lo > 0 ? hi / lo - 1.0 : 0.0;
            emit(j);
        } else if (*build) {
            const sim::PlatformDescription desc = sim::load_platform(platform_path);
            std::vector<update::CapsuleModule> modules;
            for (const auto& arg : module_args) {
                const auto eq = arg.find('=');
                if (eq == std::string::npos) fail(ErrorCode::InvalidArgument, "expected GUID=path, got '" + arg + "'");
                modules.push_back({Guid::parse(arg.substr(0, eq)), read_file(arg.substr(eq + 1))});
            }
            const Digest pcr0 = new_pcr_hex.empty()
                                    ? sim::compute_enrolled_pcr0(update::flash_after(desc.fvs, modules))
                                    : array_from_hex<32>(new_pcr_hex);
            const Bytes capsule = update::build_capsule(desc, modules, SymmetricKey::from_hex(new_key_hex),
                                                        SymmetricKey::from_hex(current_key_hex), pcr0, seed.value_or(1));
            write_file(out_path, capsule);
            emit({{"capsule", out_path}, {"modules", modules.size()}, {"new_enrolled_pcr0", to_hex(pcr0)},
                  {"size", capsule.size()}});
        } else if (*apply) {
            sim::Platform p = update::load_machine(platform_path);
            const update::UpdateResult r = update::apply_capsule(p, read_file(capsule_path), stage_arg(fail_at));
            update::save_machine(p);
            emit(r.to_json());
        } else if (*recov) {
            sim::Platform p = update::load_machine(platform_path);
            const update::UpdateResult r = update::recover(p, sim::load_fv(recovery_path), stage_arg(fail_at));
            update::save_machine(p);
            emit(r.to_json());
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: IoError: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
