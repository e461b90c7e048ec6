#include <random>

#include "oracle/vectors.hpp"
#include "support.hpp"

using namespace smmpack;
using tpm::SessionKind;
using tpm::Tpm;

namespace {

ErrorCode code_of(const std::function<void()>& f)
{
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no error thrown";
    return ErrorCode::InvalidArgument;
}

Digest random_digest(std::mt19937_64& rng)
{
    Digest d;
    for (auto& b : d) b = static_cast<std::uint8_t>(rng());
    return d;
}

oracle::Digest od(const Digest& d) { return d; }

} // namespace

TEST(Tpm, ExtendKnownAnswer)
{
    Tpm t;
    t.pcr_extend(0, sha256("fv-a"));
    EXPECT_EQ(to_hex(t.pcr(0)), vectors::kPcr0AfterFvA);
}

TEST(Tpm, ExtendMatchesOracleChain)
{
    std::mt19937_64 rng(5);
    Tpm t;
    oracle::Digest expect{};
    for (int i = 0; i < 20; ++i) {
        const Digest m = random_digest(rng);
        t.pcr_extend(3, m);
        expect = oracle::extend(expect, od(m));
        EXPECT_EQ(t.pcr(3), expect);
    }
    EXPECT_EQ(t.pcr(0), Digest{});
}

// Extends do not commute.
TEST(Tpm, ExtendOrderMatters)
{
    std::mt19937_64 rng(9);
    for (int i = 0; i < 25; ++i) {
        const Digest a = random_digest(rng);
        const Digest b = random_digest(rng);
        Tpm x;
        Tpm y;
        x.pcr_extend(0, a);
        x.pcr_extend(0, b);
        y.pcr_extend(0, b);
        y.pcr_extend(0, a);
        EXPECT_NE(x.pcr(0), y.pcr(0));
    }
}

TEST(Tpm, PcrIndexRange)
{
    Tpm t;
    EXPECT_EQ(code_of([&] { t.pcr_extend(24, Digest{}); }), ErrorCode::IndexOutOfRange);
    EXPECT_EQ(code_of([&] { t.pcr(99); }), ErrorCode::IndexOutOfRange);
    EXPECT_EQ(code_of([&] { tpm::PcrSelection{30}; }), ErrorCode::IndexOutOfRange);
}

TEST(Tpm, PolicyDigestKnownAnswers)
{
    Tpm t;
    auto s = t.start_auth_session(SessionKind::policy);
    t.policy_pcr(s, {0});
    EXPECT_EQ(to_hex(t.policy_get_digest(s)), vectors::kPolicyPcr0Zero);

    t.pcr_extend(0, sha256("fv-a"));
    auto s2 = t.start_auth_session(SessionKind::trial);
    EXPECT_EQ(to_hex(t.policy_pcr(s2, {0})), vectors::kPolicyPcr0AfterFvA);
}

TEST(Tpm, SelectionEncoding)
{
    EXPECT_EQ(to_hex(tpm::PcrSelection{0}.encode()), "00000001000b03010000");
    EXPECT_EQ(to_hex(tpm::PcrSelection({0, 7, 8, 23}).encode()), "00000001000b03810180");
}

TEST(Tpm, TrialSessionBindsExpectedDigest)
{
    Tpm t;
    Digest future{};
    future[0] = 1;
    auto trial = t.start_auth_session(SessionKind::trial);
    const Digest policy = t.policy_pcr(trial, {0}, sha256(future));
    EXPECT_EQ(policy, oracle::policy_pcr0(oracle::Digest{}, od(future)));

    auto live = t.start_auth_session(SessionKind::policy);
    EXPECT_EQ(code_of([&] { t.policy_pcr(live, {0}, sha256(future)); }), ErrorCode::PolicyMismatch);
}

TEST(Tpm, SessionTableLimits)
{
    Tpm t;
    std::vector<tpm::SessionHandle> hs;
    for (std::size_t i = 0; i < tpm::kMaxSessions; ++i) hs.push_back(t.start_auth_session(SessionKind::policy));
    EXPECT_EQ(hs.front().value, tpm::kFirstSessionHandle);
    EXPECT_EQ(code_of([&] { t.start_auth_session(SessionKind::policy); }), ErrorCode::SessionTableFull);
    t.flush_context(hs[3]);
    EXPECT_NO_THROW(t.start_auth_session(SessionKind::trial));
    EXPECT_EQ(code_of([&] { t.flush_context(hs[3]); }), ErrorCode::UnknownSession);
    EXPECT_EQ(code_of([&] { t.policy_get_digest(tpm::SessionHandle{1}); }), ErrorCode::UnknownSession);
}

TEST(Tpm, SealAndUnseal)
{
    Tpm t;
    t.pcr_extend(0, sha256("fv-a"));
    const Digest enrolled = t.pcr(0);
    const SymmetricKey key = SymmetricKey::from_hex("000102030405060708090a0b0c0d0e0f");
    seal_key(t, 0x01500000, key, enrolled);
    EXPECT_EQ(unseal_key(t, 0x01500000), key);
    EXPECT_EQ(t.active_sessions(), 0u);

    t.pcr_extend(0, sha256("other"));
    EXPECT_EQ(code_of([&] { unseal_key(t, 0x01500000); }), ErrorCode::PolicyMismatch);
    t.reset();
    t.pcr_extend(0, sha256("fv-a"));
    EXPECT_EQ(unseal_key(t, 0x01500000), key);
}

TEST(Tpm, NvErrors)
{
    Tpm t;
    t.nv_define_space(1, 4, Digest{});
    EXPECT_EQ(code_of([&] { t.nv_define_space(1, 4, Digest{}); }), ErrorCode::IndexInUse);
    EXPECT_EQ(code_of([&] { t.nv_write(1, Bytes(5)); }), ErrorCode::DataTooLarge);
    EXPECT_EQ(code_of([&] { t.nv_write(2, Bytes(1)); }), ErrorCode::UnknownIndex);

    auto trial = t.start_auth_session(SessionKind::trial);
    auto pol = t.start_auth_session(SessionKind::policy);
    EXPECT_EQ(code_of([&] { t.nv_read(1, trial); }), ErrorCode::TrialSessionNotAllowed);
    EXPECT_EQ(code_of([&] { t.nv_read(1, pol); }), ErrorCode::NotWritten);
    t.nv_write(1, Bytes{1, 2});
    // Empty policy digest on a fresh session matches a zero auth policy.
    EXPECT_EQ(t.nv_read(1, pol), (Bytes{1, 2}));
    t.policy_pcr(pol, {0});
    EXPECT_EQ(code_of([&] { t.nv_read(1, pol); }), ErrorCode::PolicyMismatch);

    t.disable_platform_hierarchy();
    EXPECT_EQ(code_of([&] { t.nv_define_space(5, 4, Digest{}); }), ErrorCode::HierarchyDisabled);
    EXPECT_EQ(code_of([&] { t.nv_write(1, Bytes(1)); }), ErrorCode::HierarchyDisabled);
    EXPECT_EQ(code_of([&] { t.nv_undefine_space(1); }), ErrorCode::HierarchyDisabled);
    t.reset();
    EXPECT_NO_THROW(t.nv_undefine_space(1));
    EXPECT_EQ(code_of([&] { t.nv_undefine_space(1); }), ErrorCode::UnknownIndex);
}

TEST(Tpm, SnapshotRoundTrip)
{
    testsupport::TempDir dir;
    Tpm t;
    t.pcr_extend(0, sha256("x"));
    seal_key(t, 0x01500000, SymmetricKey::from_hex("ffeeddccbbaa99887766554433221100"), t.pcr(0));
    t.nv_define_space(0x01500002, 8, Digest{});
    t.save(dir / "tpm.json");
    const Tpm back = Tpm::load(dir / "tpm.json");
    EXPECT_EQ(back.nv_slots(), t.nv_slots());
    EXPECT_EQ(back.pcrs(), t.pcrs());
    EXPECT_EQ(back.snapshot().dump(), t.snapshot().dump());

    write_text_file(dir / "bad.json", "{\"format\": \"something\"}");
    EXPECT_EQ(code_of([&] { Tpm::load(dir / "bad.json"); }), ErrorCode::MalformedState);
    EXPECT_EQ(Tpm::load_or_fresh(dir / "missing.json").nv_slots().size(), 0u);
}
