#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include <gtest/gtest.h>

#include "oracle/openssl.hpp"
#include "smmpack/smmpack.hpp"

namespace testsupport {

/// A scratch directory removed on destruction.
class TempDir {
public:
    TempDir()
    {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("smmpack-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline oracle::Bytes to_oracle(smmpack::ByteView v) { return oracle::Bytes(v.begin(), v.end()); }

inline smmpack::Sentinel sentinel_from(std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    smmpack::Sentinel s;
    for (auto& b : s) b = static_cast<std::uint8_t>(rng());
    return s;
}

} // namespace testsupport
