#pragma once

#include <cstdint>
#include <random>

namespace ffkv {

/// Seeded generator with distributions defined here rather than by the standard
/// library, so sampled values are identical across toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Derive an independent stream from a base seed and any number of salts.
    static Rng derive(std::uint64_t seed, std::uint64_t salt_a, std::uint64_t salt_b = 0);

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform();

    /// Uniform integer in [0, n). n must be positive.
    std::uint64_t below(std::uint64_t n);

    /// Standard normal via Box-Muller; caches the second draw.
    double normal();

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace ffkv
