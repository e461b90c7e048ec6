#include "support.hpp"

using namespace smmpack;

TEST(Bench, ReportsEachSize)
{
    const auto samples = bench_unpack({0, 3000, 20000}, 5, 1, std::chrono::microseconds(200));
    ASSERT_EQ(samples.size(), 3u);
    EXPECT_FALSE(samples[0].per_byte_ns);
    EXPECT_LT(samples[0].mean_ns, samples[1].mean_ns);
    EXPECT_LT(samples[1].mean_ns, samples[2].mean_ns);
    for (std::size_t i = 1; i < 3; ++i) {
        ASSERT_TRUE(samples[i].per_byte_ns);
        EXPECT_GT(*samples[i].per_byte_ns, 0.0);
        EXPECT_EQ(samples[i].repetitions, 5);
    }
}

TEST(Bench, RejectsBadArguments)
{
    EXPECT_THROW(bench_unpack({3000}, 4), Error);
    EXPECT_THROW(bench_unpack({}, 5), Error);
}
