#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>

#include "pmse/special.hpp"

namespace pmse {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// Mixes an arbitrary list of 64-bit words into one key. Used to derive
// independent streams from (master seed, n, replication index) and to hash
// quadrature queries to quasi-Monte Carlo seeds.
inline std::uint64_t mix_key(std::initializer_list<std::uint64_t> words) {
    std::uint64_t h = 0x2545F4914F6CDD1Dull;
    for (std::uint64_t w : words) {
        h ^= w + 0x9E3779B97F4A7C15ull + (h << 6) + (h >> 2);
        std::uint64_t s = h;
        h = splitmix64(s);
    }
    return h;
}

// xoshiro256** with splitmix64 seeding. Normal variates use the inverse-cdf
// method so sequences are reproducible independent of the standard library.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t s = seed;
        for (auto& word : state_) word = splitmix64(s);
    }

    static Rng from_key(std::uint64_t master, std::uint64_t a, std::uint64_t b) {
        return Rng(mix_key({master, a, b}));
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // uniform on (0,1), never returns an endpoint
    double uniform01() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    double normal() { return normal_quantile(uniform01()); }

    // Marsaglia-Tsang squeeze; shape < 1 boosted via the power trick
    double gamma(double shape) {
        if (shape < 1.0) {
            double u = uniform01();
            return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
        }
        const double d = shape - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x, v;
            do {
                x = normal();
                v = 1.0 + c * x;
            } while (v <= 0.0);
            v = v * v * v;
            const double u = uniform01();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    double chi_square(double df) { return 2.0 * gamma(0.5 * df); }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }
    std::array<std::uint64_t, 4> state_;
};

} // namespace pmse
