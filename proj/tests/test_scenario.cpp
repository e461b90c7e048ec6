#include <map>

#include "support.hpp"

using namespace smmpack;
using namespace smmpack::sim;

namespace {

std::map<std::string, bool> prevented_column(const Platform& p)
{
    std::map<std::string, bool> out;
    for (const auto& o : run_all_scenarios(p)) out[o.scenario_name] = o.prevented;
    return out;
}

} // namespace

TEST(Scenario, DefaultFlagsMatchThreatMatrix)
{
    Demo d = make_demo({.module_count = 4});
    const Platform p = demo_platform(d);
    const auto col = prevented_column(p);
    ASSERT_EQ(col.size(), 10u);
    for (const auto& [name, prevented] : col) {
        const bool expect = name != "dma" && name != "coldboot_memory_transplant";
        EXPECT_EQ(prevented, expect) << name;
    }
}

TEST(Scenario, HardwareMitigationsCloseTheGaps)
{
    Demo d = make_demo({.module_count = 4});
    d.desc.security.dpr_enabled = true;
    d.desc.security.tme_enabled = true;
    for (const auto& o : run_all_scenarios(demo_platform(d))) EXPECT_TRUE(o.prevented) << o.scenario_name << ": " << o.detail;
}

TEST(Scenario, EachMitigationOnlyAffectsItsRow)
{
    Demo d = make_demo({.module_count = 2});
    d.desc.security.dpr_enabled = true;
    Platform dpr = demo_platform(d);
    EXPECT_TRUE(run_scenario(dpr, "dma").prevented);
    EXPECT_FALSE(run_scenario(dpr, "coldboot_memory_transplant").prevented);
    d.desc.security.dpr_enabled = false;
    d.desc.security.tme_enabled = true;
    Platform tme = demo_platform(d);
    EXPECT_FALSE(run_scenario(tme, "dma").prevented);
    EXPECT_TRUE(run_scenario(tme, "coldboot_memory_transplant").prevented);
}

TEST(Scenario, OutcomeInvariantAndClasses)
{
    Demo d = make_demo({.module_count = 3});
    for (const auto& o : run_all_scenarios(demo_platform(d))) {
        EXPECT_EQ(o.prevented, !(o.obtained_key || o.obtained_plaintext_module)) << o.scenario_name;
        EXPECT_GE(o.attacker_class, 1);
        EXPECT_LE(o.attacker_class, 3);
    }
    EXPECT_EQ(run_scenario(demo_platform(d), "bios_update_file").attacker_class, 1);
    EXPECT_EQ(run_scenario(demo_platform(d), "memory_dump_from_os").attacker_class, 2);
    EXPECT_EQ(run_scenario(demo_platform(d), "dma").attacker_class, 3);
}

TEST(Scenario, DmaGetsBothKeyAndPlaintext)
{
    Demo d = make_demo({.module_count = 3});
    const ScenarioOutcome o = run_scenario(demo_platform(d), "dma");
    EXPECT_TRUE(o.obtained_key);
    EXPECT_TRUE(o.obtained_plaintext_module);
}

TEST(Scenario, TpmSoftwareReadPreventedWithoutCap)
{
    // The OS hand-off separator alone already moves PCR0.
    Demo d = make_demo({.module_count = 2, .cap_extend = false});
    EXPECT_TRUE(run_scenario(demo_platform(d), "tpm_key_read_software").prevented);
}

TEST(Scenario, MorOffStillPreventedSameDevice)
{
    Demo d = make_demo({.module_count = 2});
    d.desc.security.mor_bit = false;
    d.desc.security.memory_scrambling = true;
    EXPECT_TRUE(run_scenario(demo_platform(d), "coldboot_same_device").prevented);
}

TEST(Scenario, PeiVolumesAreImmutable)
{
    Demo d = make_demo({.module_count = 1});
    UefiModule m;
    m.guid.bytes[0] = 0x42;
    try {
        inject_module(d.desc, 0, m, true);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ImmutableFirmwareVolume);
    }
}

TEST(Scenario, UnknownName)
{
    Demo d = make_demo({.module_count = 1});
    try {
        run_scenario(demo_platform(d), "rowhammer");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::UnknownScenario);
    }
}

TEST(Scenario, PlatformUntouchedByScenarios)
{
    Demo d = make_demo({.module_count = 2});
    const Platform p = demo_platform(d);
    run_all_scenarios(p);
    EXPECT_EQ(p.tpm().nv_slots(), d.tpm.nv_slots());
    EXPECT_EQ(compute_enrolled_pcr0(p.flash()), d.enrolled_pcr0);
}
