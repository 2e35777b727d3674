#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace mutr {

// Deterministic random source. std::mt19937 output is pinned by the standard,
// but the standard *distributions* are not, so all transforms are hand-rolled
// here to make streams reproducible across compilers and platforms.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(static_cast<std::uint32_t>(seed ^ (seed >> 32))) {}

    // Derive an independent deterministic stream, e.g. per (seed, sample index).
    static Rng derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
        return Rng(mix(mix(mix(0x9e3779b97f4a7c15ull ^ seed, a), b), seed));
    }

    std::uint32_t next_u32() { return engine_(); }

    // Uniform in [0, 1) with 24 bits of mantissa.
    double uniform() { return static_cast<double>(engine_() >> 8) * (1.0 / 16777216.0); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Unbiased rejection sampling.
    std::uint32_t uniform_int(std::uint32_t n) {
        const std::uint32_t limit = UINT32_MAX - UINT32_MAX % n;
        std::uint32_t v = engine_();
        while (v >= limit) v = engine_();
        return v % n;
    }

    // Box-Muller; one value per call, the pair partner is cached.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        while (u1 <= 1e-12) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    // Normal(0, sigma) truncated to +/- 2 sigma by resampling.
    double truncated_normal(double sigma) {
        double z = normal();
        while (std::abs(z) > 2.0) z = normal();
        return z * sigma;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {  // Fisher-Yates
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[uniform_int(static_cast<std::uint32_t>(i))]);
        }
    }

private:
    static std::uint64_t mix(std::uint64_t h, std::uint64_t k) {
        h ^= k + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
        h *= 0xff51afd7ed558ccdull;
        h ^= h >> 33;
        return h;
    }

    std::mt19937 engine_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

}  // namespace mutr
