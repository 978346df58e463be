#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace dfssm {

// PCG32 with explicit distribution code so that streams are bitwise
// reproducible across platforms and standard-library versions.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) {
        state_ = 0;
        inc_ = (stream << 1u) | 1u;
        next_u32();
        state_ += seed;
        next_u32();
    }

    std::uint32_t next_u32() {
        std::uint64_t old = state_;
        state_ = old * 6364136223846793005ULL + inc_;
        std::uint32_t xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
        std::uint32_t rot = static_cast<std::uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
    }

    std::uint64_t next_u64() {
        return (static_cast<std::uint64_t>(next_u32()) << 32) | next_u32();
    }

    // Uniform in [0, 1) with 32-bit resolution.
    double uniform() { return next_u32() * (1.0 / 4294967296.0); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi] inclusive.
    std::int64_t range(std::int64_t lo, std::int64_t hi) {
        std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(next_u64() % span);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller; caches the second variate.
    double normal() {
        if (cached_) {
            cached_ = false;
            return cache_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double th = 6.283185307179586476925286766559 * u2;
        cache_ = r * std::sin(th);
        cached_ = true;
        return r * std::cos(th);
    }

private:
    std::uint64_t state_ = 0, inc_ = 1;
    double cache_ = 0.0;
    bool cached_ = false;
};

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Named sub-stream: all randomness in the project flows from one seed
// through streams keyed by purpose ("init", "data", "augment", ...), so a
// component's stream can be reproduced in isolation.
inline Rng named_stream(std::uint64_t seed, std::string_view name) {
    std::uint64_t h = fnv1a(name);
    return Rng(splitmix64(seed ^ h), splitmix64(h));
}

}  // namespace dfssm
