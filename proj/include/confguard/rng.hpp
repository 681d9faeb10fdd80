#pragma once

#include <array>
#include <cstdint>

namespace confguard {

/// SplitMix64; used for seed expansion and per-stream seed derivation.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

private:
    std::uint64_t state_;
};

/// xoshiro256**. Fixed, named generator so identical seeds give byte-identical
/// streams on every platform; never swap in std::uniform_real_distribution,
/// whose output is implementation-defined.
class Xoshiro256StarStar {
public:
    explicit Xoshiro256StarStar(std::uint64_t seed) {
        SplitMix64 sm(seed);
        for (auto& word : state_) {
            word = sm.next();
        }
    }

    std::uint64_t next() {
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

    /// Uniform double in [0, 1), 53 bits.
    double next_double() {
        return static_cast<double>(next() >> 11) * 0x1.0p-53;
    }

    /// Uniform double in the half-open interval (lo, hi]: maps u in [0,1) to
    /// hi - (hi-lo)*u, so the upper bound is attainable and the lower is not.
    double uniform_in(double lo, double hi) {
        return hi - (hi - lo) * next_double();
    }

    /// Bernoulli draw; consumes one value even when rate is 0 or 1 so draw
    /// sequences stay aligned across parameter settings.
    bool bernoulli(double rate) {
        return next_double() < rate;
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    std::array<std::uint64_t, 4> state_{};
};

/// Splittable per-stream seeding: independent sub-seed for stream `index`
/// under a corpus-level base seed.
inline std::uint64_t derive_stream_seed(std::uint64_t base_seed, std::uint64_t index) {
    SplitMix64 sm(base_seed ^ (0x9E3779B97F4A7C15ULL * (index + 1)));
    sm.next();
    return sm.next();
}

} // namespace confguard
