#pragma once

// Seedable, splittable random streams.
//
// Generator: splitmix64 (Steele, Lea & Flood 2014; public-domain reference
// sequence). Substreams are derived by running the finalizer over
// (seed, stream_index), so per-individual draws do not depend on the order
// individuals are visited. All samplers below are implemented here rather
// than taken from <random> because libstdc++/libc++ distributions are not
// bit-identical across platforms, and simulated datasets must be.
//
// Pinned sampling algorithms:
//   uniform double  : 53-bit mantissa, (k + 0.5) * 2^-53, strictly in (0,1)
//   normal          : Box-Muller, cosine branch only
//   exponential     : inversion, -log(u)/rate
//   uniform integer : floor(u * span), clamped to span-1
//   poisson         : inversion by sequential search for mean <= 500; larger
//                     means use the rounded normal approximation
//                     max(0, floor(mean + sqrt(mean) z + 0.5)) — at that size
//                     the relative moment error is below 1e-3, and the cost
//                     stays O(1) for the huge means a heavy-tailed trajectory
//                     can produce

#include <cmath>
#include <cstdint>

#include "errors.hpp"

namespace lgmcr {

inline std::uint64_t splitmix64_next(std::uint64_t& state) {
    state += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

class RngStream {
  public:
    explicit RngStream(std::uint64_t seed) : state_(seed) {}

    // Independent substream; mixing twice decorrelates consecutive indices.
    RngStream split(std::uint64_t stream_index) const {
        std::uint64_t s = state_;
        std::uint64_t a = splitmix64_next(s);
        s = a ^ (stream_index * 0x9E3779B97F4A7C15ULL + 0xD1B54A32D192ED03ULL);
        std::uint64_t b = splitmix64_next(s);
        return RngStream(b);
    }

    std::uint64_t next_u64() { return splitmix64_next(state_); }

    // strictly inside (0,1)
    double next_double() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    // inclusive range [lo, hi]
    long next_int(long lo, long hi) {
        if (hi < lo) throw numeric_error("next_int: empty range");
        const double span = static_cast<double>(hi - lo + 1);
        long k = static_cast<long>(next_double() * span);
        if (k > hi - lo) k = hi - lo;
        return lo + k;
    }

    double next_normal(double mean = 0.0, double sd = 1.0) {
        const double u1 = next_double();
        const double u2 = next_double();
        const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
        return mean + sd * z;
    }

    double next_exponential(double rate) {
        if (!(rate > 0.0)) throw numeric_error("next_exponential: rate must be positive");
        return -std::log(next_double()) / rate;
    }

    long next_poisson(double mean) {
        if (!(mean >= 0.0)) throw numeric_error("next_poisson: mean must be nonnegative");
        if (mean > 1e15) throw numeric_error("next_poisson: mean too large for exact counts");
        if (mean > 500.0) {
            const double k = std::floor(mean + std::sqrt(mean) * next_normal() + 0.5);
            return k > 0.0 ? static_cast<long>(k) : 0;
        }
        return poisson_inversion(mean);
    }

    long next_bernoulli(double p) { return next_double() < p ? 1 : 0; }

  private:
    long poisson_inversion(double mean) {
        if (mean == 0.0) return 0;
        const double u = next_double();
        double p = std::exp(-mean);
        double cum = p;
        long k = 0;
        // mean <= 500 so p0 > 7e-218: no underflow; bounded by mean + 40*sqrt(mean)
        const long cap = static_cast<long>(mean + 40.0 * std::sqrt(mean) + 20.0);
        while (u > cum && k < cap) {
            ++k;
            p *= mean / static_cast<double>(k);
            cum += p;
        }
        return k;
    }

    std::uint64_t state_;
};

}  // namespace lgmcr
