// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

namespace moedge {

// splitmix64; used for seeding and for hashing tuples into stream seeds.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t s = a ^ (0x632be59bd9b4e019ULL + (b << 1));
    std::uint64_t r = splitmix64(s);
    s ^= b;
    return r ^ splitmix64(s);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return mix_seed(mix_seed(a, b), c);
}

// xoshiro256++ with portable helpers. std::<random> distributions are
// implementation-defined, so all sampling goes through this class to keep
// traces bit-identical for a fixed seed.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64(sm);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 bits of entropy.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n); n > 0.
    std::uint64_t uniform_int(std::uint64_t n) {
        // Lemire-style rejection-free enough for simulation purposes; keep the
        // simple modulo-free multiply-shift for portability.
        __uint128_t m = static_cast<__uint128_t>(next_u64()) * n;
        return static_cast<std::uint64_t>(m >> 64);
    }

    // Standard normal via Box-Muller. One value per call (the pair's second
    // half is cached).
    double gaussian() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform01();
        double u2 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        cached_ = r * std::sin(theta);
        has_cached_ = true;
        return r * std::cos(theta);
    }

    // Index sampled from unnormalized non-negative weights. Returns the last
    // index with positive weight when rounding pushes past the total.
    std::size_t pick_weighted(std::span<const double> weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        double u = uniform01() * total;
        std::size_t last_positive = 0;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            if (weights[i] > 0.0) last_positive = i;
            u -= weights[i];
            if (u < 0.0 && weights[i] > 0.0) return i;
        }
        return last_positive;
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t s_[4];
    double cached_ = 0.0;
    bool has_cached_ = false;
};

// Zipf(s) probability masses over n ranks; rank r (0-based) gets
// weight 1/(r+1)^s. s = 0 degenerates to uniform.
inline std::vector<double> zipf_weights(std::size_t n, double s) {
    std::vector<double> w(n);
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        w[r] = 1.0 / std::pow(static_cast<double>(r + 1), s);
        total += w[r];
    }
    for (auto& x : w) x /= total;
    return w;
}

// FNV-1a over bytes; stable across platforms, used for spec/trace hashes.
inline std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a_u64(std::uint64_t v, std::uint64_t h) { return fnv1a(&v, sizeof(v), h); }

}  // namespace moedge
