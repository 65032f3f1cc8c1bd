#pragma once

#include <cstdint>
#include <random>

namespace renege {

// Per-replication random stream. Uniforms are built from the raw 64-bit
// engine output so draws are identical across standard library vendors.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const { return seed_; }

    // Uniform on the open interval (0, 1).
    double uniform() {
        for (;;) {
            const double u = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
            if (u > 0.0) return u;
        }
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Seed of replication `rep` of the N-server system, derived from the base seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t n_servers, std::uint64_t rep) {
    return splitmix64(splitmix64(splitmix64(base) ^ n_servers) ^ rep);
}

}  // namespace renege
