#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace loopmem {

/// SplitMix64 generator. Integer-only state transitions and explicit float
/// construction keep sequences identical across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) noexcept : state_(seed) {}

    std::uint64_t next_u64() noexcept {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, bound) by rejection, no modulo bias.
    std::uint64_t below(std::uint64_t bound) noexcept {
        const std::uint64_t limit = bound == 0 ? 0 : (~std::uint64_t{0} - bound + 1) % bound;
        for (;;) {
            const std::uint64_t r = next_u64();
            if (r >= limit) {
                return r % bound;
            }
        }
    }

    /// Standard normal via Box-Muller (one variate per call, the partner is discarded).
    double normal() noexcept {
        double u1 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Normal(0, stddev) resampled until it lies within two standard deviations.
    double truncated_normal(double stddev) noexcept {
        for (;;) {
            const double z = normal();
            if (std::abs(z) <= 2.0) {
                return z * stddev;
            }
        }
    }

    std::vector<double> normal_vector(std::size_t n, double stddev = 1.0) {
        std::vector<double> out(n);
        for (double& v : out) {
            v = normal() * stddev;
        }
        return out;
    }

    template <class T>
    void shuffle(std::vector<T>& items) noexcept {
        for (std::size_t i = items.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    std::uint64_t state() const noexcept { return state_; }

private:
    std::uint64_t state_;
};

/// Mixes two 64-bit values into a seed.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) noexcept {
    Rng r(a ^ (b * 0xD1B54A32D192ED03ull + 0x8CB92BA72F3D8DD7ull));
    r.next_u64();
    return r.next_u64();
}

}  // namespace loopmem
