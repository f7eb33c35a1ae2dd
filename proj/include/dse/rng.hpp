#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace dse::rng {

// splitmix64, used to derive well-separated child seeds from one master seed.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d4a32dc032e242ULL;
    return z ^ (z >> 31);
}

// Deterministic child seed for a named consumer. Every random consumer in a
// run pulls its seed through this, so one master seed fixes the whole run.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view consumer, std::uint64_t index = 0) {
    std::uint64_t h = master ^ 0x51'7c'c1'b7'27'22'0a'95ULL;
    for (char c : consumer) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    h ^= index + 0x9e3779b97f4a7c15ULL;
    std::uint64_t s = h;
    return splitmix64(s);
}

class Stream {
public:
    explicit Stream(std::uint64_t seed) : engine_(seed) {}

    double uniform(double lo = 0.0, double hi = 1.0) {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }
    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }
    // Uniform integer in [lo, hi], inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
    }
    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

} // namespace dse::rng
