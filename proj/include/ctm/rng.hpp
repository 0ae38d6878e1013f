#pragma once

#include <array>
#include <cstdint>
#include <cmath>

namespace ctm {

// xoshiro256** with splitmix64 seeding. Self-contained so that episode
// sampling is bit-reproducible across platforms and the full generator
// state (4 words) can be checkpointed.
struct Rng {
    std::array<std::uint64_t, 4> s{};

    Rng() : Rng(0x9E3779B97F4A7C15ull) {}

    explicit Rng(std::uint64_t seed) {
        std::uint64_t x = seed;
        for (auto& w : s) w = splitmix64(x);
    }

    static std::uint64_t splitmix64(std::uint64_t& x) {
        x += 0x9E3779B97F4A7C15ull;
        std::uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    static std::uint64_t rotl(std::uint64_t v, int k) {
        return (v << k) | (v >> (64 - k));
    }

    std::uint64_t next() {
        const std::uint64_t result = rotl(s[1] * 5, 7) * 9;
        const std::uint64_t t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = rotl(s[3], 45);
        return result;
    }

    // Uniform in [0,1).
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0,n). Modulo bias is < 2^-53 for any n we use.
    std::int64_t uniform_int(std::int64_t n) {
        return static_cast<std::int64_t>(uniform() * static_cast<double>(n));
    }

    // Box-Muller, no cached second value (keeps the state trajectory simple).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // Fisher-Yates; with take>0 only the first `take` slots are finalized.
    template <class V>
    void partial_shuffle(V& v, std::int64_t take) {
        const std::int64_t n = static_cast<std::int64_t>(v.size());
        if (take < 0 || take > n) take = n;
        for (std::int64_t i = 0; i < take; ++i) {
            std::int64_t j = i + uniform_int(n - i);
            std::swap(v[i], v[j]);
        }
    }
};

// Deterministic seed composition for independent sub-streams.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a ^ (0x9E3779B97F4A7C15ull + (b << 6) + (b >> 2));
    return Rng::splitmix64(x);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return mix_seed(mix_seed(a, b), c);
}

}  // namespace ctm
