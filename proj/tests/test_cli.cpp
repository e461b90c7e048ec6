#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "support.hpp"

using namespace smmpack;
using nlohmann::json;

namespace {

struct CliRun {
    int status = -1;
    std::string out;
    std::string err;
    json doc() const { return json::parse(out); }
};

CliRun run(const testsupport::TempDir& dir, const std::string& args)
{
    const auto err_path = dir / "stderr.txt";
    const std::string cmd = std::string(SMMPACK_CLI) + " " + args + " 2>" + err_path.string();
    CliRun r;
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (!pipe) return r;
    char buf[4096];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
    const int raw = ::pclose(pipe);
    r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    std::ifstream e(err_path);
    std::stringstream ss;
    ss << e.rdbuf();
    r.err = ss.str();
    return r;
}

std::string q(const std::filesystem::path& p) { return "'" + p.string() + "'"; }

constexpr const char* kKey = "000102030405060708090a0b0c0d0e0f";

} // namespace

TEST(Cli, PackThenInspect)
{
    testsupport::TempDir dir;
    ASSERT_EQ(run(dir, "synth-module --out " + q(dir / "m.efi") + " --text-size 3000 --seed 4").status, 0);

    CliRun plain = run(dir, "inspect --in " + q(dir / "m.efi"));
    ASSERT_EQ(plain.status, 0) << plain.err;
    EXPECT_FALSE(plain.doc()["packed"].get<bool>());

    CliRun packed = run(dir, "pack --in " + q(dir / "m.efi") + " --out " + q(dir / "p.efi") + " --key " + kKey + " --seed 7");
    ASSERT_EQ(packed.status, 0) << packed.err;
    EXPECT_EQ(packed.doc()["text_size_bytes"], 3000);
    EXPECT_EQ(packed.doc()["stub_section_raw_size"], 512);

    CliRun again = run(dir, "inspect --in " + q(dir / "p.efi"));
    ASSERT_EQ(again.status, 0);
    EXPECT_TRUE(again.doc()["packed"].get<bool>());
    EXPECT_EQ(again.doc()["stub"], packed.doc()["stub"]);
}

TEST(Cli, ErrorsGoToStderrWithName)
{
    testsupport::TempDir dir;
    run(dir, "synth-module --out " + q(dir / "m.efi"));

    CliRun bad_key = run(dir, "pack --in " + q(dir / "m.efi") + " --out " + q(dir / "p.efi") + " --key abcd");
    EXPECT_NE(bad_key.status, 0);
    EXPECT_TRUE(bad_key.out.empty());
    EXPECT_EQ(bad_key.err.rfind("error: InvalidArgument:", 0), 0u) << bad_key.err;

    write_file(dir / "junk.efi", Bytes(100, 0x41));
    CliRun junk = run(dir, "inspect --in " + q(dir / "junk.efi"));
    EXPECT_NE(junk.status, 0);
    EXPECT_EQ(junk.err.rfind("error: NotAPe:", 0), 0u) << junk.err;

    run(dir, "pack --in " + q(dir / "m.efi") + " --out " + q(dir / "p.efi") + " --key " + kKey);
    CliRun twice = run(dir, "pack --in " + q(dir / "p.efi") + " --out " + q(dir / "pp.efi") + " --key " + kKey);
    EXPECT_NE(twice.status, 0);
    EXPECT_EQ(twice.err.rfind("error: AlreadyPacked", 0), 0u) << twice.err;
}

TEST(Cli, DemoBootAndScenarios)
{
    testsupport::TempDir dir;
    CliRun demo = run(dir, "demo --dir " + q(dir / "plat") + " --modules 3 --seed 2");
    ASSERT_EQ(demo.status, 0) << demo.err;
    const std::string plat = q(dir / "plat" / "platform.json");

    CliRun pcr = run(dir, "enrolled-pcr --platform " + plat);
    ASSERT_EQ(pcr.status, 0);
    EXPECT_EQ(pcr.doc()["enrolled_pcr0"], demo.doc()["enrolled_pcr0"]);

    CliRun b = run(dir, "boot --platform " + plat);
    ASSERT_EQ(b.status, 0) << b.err;
    EXPECT_EQ(b.doc()["reached_phase"], "rt");
    EXPECT_EQ(b.doc()["unpack_events"].size(), 3u);
    for (const auto& ev : b.doc()["unpack_events"]) EXPECT_TRUE(ev["sentinel_verified"].get<bool>());

    CliRun one = run(dir, "scenario --platform " + plat + " --name dma");
    ASSERT_EQ(one.status, 0) << one.err;
    EXPECT_FALSE(one.doc()["prevented"].get<bool>());

    CliRun all = run(dir, "scenario --platform " + plat + " --all --dpr --tme");
    ASSERT_EQ(all.status, 0) << all.err;
    ASSERT_EQ(all.doc().size(), 10u);
    for (const auto& o : all.doc()) EXPECT_TRUE(o["prevented"].get<bool>()) << o["scenario"];

    CliRun unknown = run(dir, "scenario --platform " + plat + " --name warp_drive");
    EXPECT_NE(unknown.status, 0);
    EXPECT_EQ(unknown.err.rfind("error: UnknownScenario:", 0), 0u);
}

TEST(Cli, SealKeyMatchesDemoProvisioning)
{
    testsupport::TempDir dir;
    CliRun demo = run(dir, "demo --dir " + q(dir / "plat") + " --modules 2 --seed 3");
    ASSERT_EQ(demo.status, 0) << demo.err;
    const std::string plat = q(dir / "plat" / "platform.json");
    const std::string key = demo.doc()["key"];

    // Re-provision a fresh TPM through the CLI and boot against it.
    std::filesystem::remove(dir / "plat" / "tpm_state.json");
    CliRun seal = run(dir, "seal-key --tpm " + q(dir / "plat" / "tpm_state.json") + " --index 0x01500000 --key " + key +
                            " --platform " + plat);
    ASSERT_EQ(seal.status, 0) << seal.err;
    EXPECT_EQ(seal.doc()["enrolled_pcr0"], demo.doc()["enrolled_pcr0"]);

    CliRun b = run(dir, "boot --platform " + plat);
    EXPECT_EQ(b.doc()["reached_phase"], "rt");

    CliRun dup = run(dir, "seal-key --tpm " + q(dir / "plat" / "tpm_state.json") + " --index 0x01500000 --key " + key +
                           " --platform " + plat);
    EXPECT_NE(dup.status, 0);
    EXPECT_EQ(dup.err.rfind("error: IndexInUse", 0), 0u) << dup.err;
}

TEST(Cli, CapsuleApplyFailureThenRecover)
{
    testsupport::TempDir dir;
    CliRun demo = run(dir, "demo --dir " + q(dir / "plat") + " --modules 2 --seed 5");
    ASSERT_EQ(demo.status, 0) << demo.err;
    const std::string plat = q(dir / "plat" / "platform.json");
    const std::string new_key = "f0e1d2c3b4a5968778695a4b3c2d1e0f";

    const json modules = demo.doc()["test_modules"];
    std::string module_args;
    int i = 0;
    for (const auto& m : modules) {
        const auto raw = dir / ("m" + std::to_string(i) + ".efi");
        const auto packed = dir / ("p" + std::to_string(i) + ".efi");
        const std::string sentinel = m["sentinel"];
        ASSERT_EQ(run(dir, "synth-module --out " + q(raw) + " --text-size 5000 --sentinel " + sentinel +
                               " --seed " + std::to_string(40 + i))
                      .status,
                  0);
        ASSERT_EQ(run(dir, "pack --in " + q(raw) + " --out " + q(packed) + " --key " + new_key).status, 0);
        module_args += " --module " + m["guid"].get<std::string>() + "=" + q(packed);
        ++i;
    }

    CliRun partial = run(dir, "capsule build --platform " + plat + " --module " +
                               demo.doc()["test_modules"][0]["guid"].get<std::string>() + "=" + q(dir / "p0.efi") +
                               " --new-key " + new_key + " --current-key " + demo.doc()["key"].get<std::string>() +
                               " --out " + q(dir / "c.bin"));
    EXPECT_NE(partial.status, 0);
    EXPECT_EQ(partial.err.rfind("error: IncompleteCapsule:", 0), 0u) << partial.err;

    CliRun build = run(dir, "capsule build --platform " + plat + module_args + " --new-key " + new_key +
                             " --current-key " + demo.doc()["key"].get<std::string>() + " --out " + q(dir / "c.bin"));
    ASSERT_EQ(build.status, 0) << build.err;

    CliRun apply = run(dir, "capsule apply --platform " + plat + " --capsule " + q(dir / "c.bin") + " --fail-at seal_new");
    ASSERT_EQ(apply.status, 0) << apply.err;
    EXPECT_EQ(apply.doc()["failed_stage"], "seal_new");
    EXPECT_FALSE(apply.doc()["sealed"].get<bool>());

    CliRun recover = run(dir, "capsule recover --platform " + plat + " --recovery-fv " +
                               q(dir / "plat" / "recovery_fv.json"));
    ASSERT_EQ(recover.status, 0) << recover.err;
    EXPECT_EQ(recover.doc()["recovered_via"], "recovery_fv");
    EXPECT_TRUE(recover.doc()["sealed"].get<bool>());

    CliRun b = run(dir, "boot --platform " + plat);
    EXPECT_EQ(b.doc()["reached_phase"], "rt");
    for (const auto& ev : b.doc()["unpack_events"]) EXPECT_TRUE(ev["sentinel_verified"].get<bool>());

    CliRun noop = run(dir, "capsule recover --platform " + plat + " --recovery-fv " +
                            q(dir / "plat" / "recovery_fv.json"));
    ASSERT_EQ(noop.status, 0);
    EXPECT_EQ(noop.doc()["recovered_via"], "none");

    CliRun bad_stage = run(dir, "capsule apply --platform " + plat + " --capsule " + q(dir / "c.bin") + " --fail-at lunch");
    EXPECT_NE(bad_stage.status, 0);
}

TEST(Cli, BenchReportsEverySize)
{
    testsupport::TempDir dir;
    CliRun b = run(dir, "bench --sizes 64,4096 --reps 5");
    ASSERT_EQ(b.status, 0) << b.err;
    ASSERT_EQ(b.doc()["samples"].size(), 2u);
    EXPECT_EQ(b.doc()["samples"][1]["size"], 4096);

    CliRun few = run(dir, "bench --sizes 64 --reps 2");
    EXPECT_NE(few.status, 0);
    EXPECT_EQ(few.err.rfind("error: InvalidArgument:", 0), 0u);
}
