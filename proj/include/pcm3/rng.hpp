#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <string_view>

namespace pcm3 {

// Counter-based RNG: every draw is a pure function of (key, counter), so
// streams keyed by (seed, purpose, indices...) are reproducible regardless
// of draw order or threading. Mixing is the splitmix64 finalizer.
class CounterRng {
public:
    explicit CounterRng(std::uint64_t key) : key_(key) {}

    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Fold a purpose tag and indices into a derived key.
    static std::uint64_t derive_key(std::uint64_t seed, std::string_view tag,
                                    std::initializer_list<std::uint64_t> ids = {}) {
        std::uint64_t k = mix(seed);
        for (char c : tag) k = mix(k ^ static_cast<std::uint64_t>(static_cast<unsigned char>(c)));
        for (std::uint64_t id : ids) k = mix(k ^ mix(id));
        return k;
    }

    static CounterRng keyed(std::uint64_t seed, std::string_view tag,
                            std::initializer_list<std::uint64_t> ids = {}) {
        return CounterRng(derive_key(seed, tag, ids));
    }

    std::uint64_t next_u64() { return mix(key_ ^ mix(counter_++)); }

    // Uniform in [0, 1), 53-bit resolution.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Uniform integer in [0, n). n must be > 0.
    std::uint64_t next_below(std::uint64_t n) {
        // Rejection-free modulo is biased for huge n; all n here are tiny.
        return next_u64() % n;
    }

    int uniform_int(int lo, int hi_inclusive) {
        return lo + static_cast<int>(next_below(static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
    }

    bool bernoulli(double p) { return next_double() < p; }

    // Box-Muller; consumes two uniforms per pair, caches the second.
    double normal(double mu = 0.0, double sigma = 1.0) {
        if (has_spare_) {
            has_spare_ = false;
            return mu + sigma * spare_;
        }
        double u1 = next_double();
        double u2 = next_double();
        if (u1 < 1e-300) u1 = 1e-300;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return mu + sigma * r * std::cos(theta);
    }

    std::uint64_t key() const { return key_; }
    std::uint64_t counter() const { return counter_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace pcm3
