#pragma once

// Wall-clock timing of the Unpack decrypt over synthetic text sections.

#include <chrono>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include <json.hpp>

#include "smmpack/bytes.hpp"
#include "smmpack/cipher.hpp"
#include "smmpack/error.hpp"

namespace smmpack {

inline constexpr int kMinBenchRepetitions = 5;

struct BenchSample {
    std::size_t size = 0;
    int repetitions = 0;
    std::size_t batch = 0;          // decrypts per timed repetition
    double mean_ns = 0;             // per decrypt
    std::optional<double> per_byte_ns; // absent for size 0

    nlohmann::ordered_json to_json() const
    {
        nlohmann::ordered_json j;
        j["size"] = size;
        j["repetitions"] = repetitions;
        j["batch"] = batch;
        j["mean_ns"] = mean_ns;
        j["per_byte_ns"] = per_byte_ns ? nlohmann::ordered_json(*per_byte_ns) : nlohmann::ordered_json(nullptr);
        return j;
    }
};

/// Times CBC decryption of a `size`-byte text (padded to a block multiple)
/// `repetitions` times and reports the mean. Short decrypts are batched so
/// each timed repetition spans about `target` of wall time.
inline std::vector<BenchSample> bench_unpack(const std::vector<std::size_t>& sizes, int repetitions,
                                             std::uint64_t seed = 1,
                                             std::chrono::nanoseconds target = std::chrono::milliseconds(2))
{
    using Clock = std::chrono::steady_clock;
    if (sizes.empty()) fail(ErrorCode::InvalidArgument, "no sizes given");
    if (repetitions < kMinBenchRepetitions)
        fail(ErrorCode::InvalidArgument, "at least " + std::to_string(kMinBenchRepetitions) + " repetitions");

    std::mt19937_64 rng(seed);
    SymmetricKey key;
    key.bytes = random_block(rng);
    Iv iv;
    iv.bytes = random_block(rng);

    std::vector<BenchSample> out;
    for (std::size_t size : sizes) {
        Bytes text(align_up(size, kAesBlockSize));
        for (auto& b : text) b = static_cast<std::uint8_t>(rng() & 0xff);

        // Warm up and size the batch.
        decrypt_cbc_in_place(key, iv, text);
        std::size_t batch = 1;
        for (;;) {
            const auto t0 = Clock::now();
            for (std::size_t i = 0; i < batch; ++i) decrypt_cbc_in_place(key, iv, text);
            const auto dt = Clock::now() - t0;
            if (dt >= target / 2 || batch >= (std::size_t{1} << 24)) break;
            batch *= 2;
        }

        double total = 0;
        for (int r = 0; r < repetitions; ++r) {
            const auto t0 = Clock::now();
            for (std::size_t i = 0; i < batch; ++i) decrypt_cbc_in_place(key, iv, text);
            const auto dt = std::chrono::duration<double, std::nano>(Clock::now() - t0).count();
            total += dt / static_cast<double>(batch);
        }
        BenchSample s;
        s.size = size;
        s.repetitions = repetitions;
        s.batch = batch;
        s.mean_ns = total / repetitions;
        if (size > 0) s.per_byte_ns = s.mean_ns / static_cast<double>(size);
        out.push_back(s);
    }
    return out;
}

} // namespace smmpack
