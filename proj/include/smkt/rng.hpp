#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace smkt {

/// Identifies one reproducible random stream: replica i of a batch uses
/// (base_seed, i). Identical (seed, stream) pairs reproduce identical
/// paths bit for bit, independent of thread scheduling.
struct RngStream {
    std::uint64_t seed = 0;
    std::uint64_t stream = 0;
};

namespace detail {
// splitmix64 finalizer; decorrelates the xor-derived per-replica seeds
// before they reach the engine.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}
}  // namespace detail

/// mt19937_64 with hand-rolled inversion sampling. The std::*_distribution
/// wrappers are implementation-defined, which would break bit-for-bit
/// reproducibility across standard libraries.
class Rng {
public:
    explicit Rng(RngStream s) : eng_(detail::mix64(s.seed ^ s.stream)) {}

    /// Uniform on (0,1); never returns 0 or 1.
    double uniform() {
        const std::uint64_t r = eng_() >> 11;  // 53 bits
        return (static_cast<double>(r) + 0.5) * 0x1.0p-53;
    }

    double exponential(double rate) { return -std::log(uniform()) / rate; }

    /// Standard normal via Box-Muller; the spare draw is cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u = uniform();
        const double v = uniform();
        const double r = std::sqrt(-2.0 * std::log(u));
        const double a = 6.283185307179586476925286766559 * v;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    /// Uniform integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n) {
        // Rejection from the top to keep the draw exactly uniform.
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t r;
        do {
            r = eng_();
        } while (r >= limit);
        return r % n;
    }

private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace smkt
