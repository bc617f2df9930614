#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "seqctl/common.hpp"

namespace seqctl {

// Seeded RNG stream. All randomness in the library flows through this wrapper
// so that a (seed, call sequence) pair reproduces bit-identical numbers on one
// machine. Gaussian sampling is Box-Muller on raw 53-bit uniforms rather than
// std::normal_distribution, whose output is implementation-defined.
class Rng {
public:
    explicit Rng(u64 seed) : engine_(seed) {}

    // Uniform in [0, 1) with 53 random bits.
    double uniform01() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform01();
    }

    double gaussian(double mean = 0.0, double stddev = 1.0) {
        // Box-Muller; the second variate of the pair is discarded.
        double u1 = uniform01();
        while (u1 <= 0.0) {
            u1 = uniform01();
        }
        const double u2 = uniform01();
        const double mag = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * mag * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Uniform integer in [0, n).
    u64 below(u64 n) {
        check(n > 0, "Rng::below: n must be positive");
        // Rejection sampling keeps the draw unbiased.
        const u64 limit = UINT64_MAX - UINT64_MAX % n;
        u64 x = engine_();
        while (x >= limit) {
            x = engine_();
        }
        return x % n;
    }

    u64 raw() { return engine_(); }

private:
    std::mt19937_64 engine_;
};

}  // namespace seqctl
