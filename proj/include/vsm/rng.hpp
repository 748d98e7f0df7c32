#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace vsm {

// SplitMix64 finalizer; the core mixing function for both hashing and RNG.
inline uint64_t mix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t hash_str(std::string_view s, uint64_t seed = 0) {
    uint64_t h = 0xcbf29ce484222325ull ^ seed;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;  // FNV-1a prime
    }
    return h;
}

// Counter-based splittable generator. Every stochastic call site derives its
// own stream via split(), so adding a consumer never shifts another one.
class Rng {
public:
    explicit Rng(uint64_t seed) : key_(mix64(seed ^ 0x243f6a8885a308d3ull)) {}

    Rng split(uint64_t tag) const { return Rng(from_key_tag{}, mix64(key_ ^ mix64(tag))); }
    Rng split(std::string_view label) const { return split(hash_str(label)); }

    uint64_t next_u64() { return mix64(key_ + 0x9e3779b97f4a7c15ull * (++ctr_)); }

    // Uniform in [0, 1).
    double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }
    float next_float() { return float(next_u64() >> 40) * 0x1.0p-24f; }

    // Uniform integer in [0, n). Lemire multiply-shift; n must be > 0.
    uint64_t next_below(uint64_t n) {
        return uint64_t((__uint128_t(next_u64()) * n) >> 64);
    }

    bool bernoulli(double p) { return next_double() < p; }

    // Standard normal via Box-Muller; one value per call, deterministic.
    double normal() {
        double u1 = next_double(), u2 = next_double();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    uint64_t key() const { return key_; }

private:
    struct from_key_tag {};
    Rng(from_key_tag, uint64_t key) : key_(key) {}
    uint64_t key_;
    uint64_t ctr_ = 0;
};

}  // namespace vsm
