#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace patchwork {

// splitmix64 step; used to derive independent stream seeds from one master
// seed so parallel episode generation stays reproducible.
inline std::uint64_t mix_seed(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    return mix_seed(seed ^ mix_seed(stream));
}

// Deterministic RNG. All sampling goes through hand-rolled mappings of the
// raw mt19937_64 output so generated values do not depend on the standard
// library's distribution implementations.
class Rng {
  public:
    explicit Rng(std::uint64_t seed = 0) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n); n must be positive. Rejection sampling
    // keeps the map unbiased.
    int uniform_int(int n) {
        const std::uint64_t un = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        std::uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return static_cast<int>(v % un);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal via Box-Muller; caches the second draw.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double sigma) { return mean + sigma * normal(); }

    // Normal truncated to +/- 3 sigma.
    double normal_truncated(double mean, double sigma) {
        double v = normal();
        while (v < -3.0 || v > 3.0) v = normal();
        return mean + sigma * v;
    }

    Rng split(std::uint64_t stream) { return Rng(mix_seed(next_u64(), stream)); }

  private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace patchwork
