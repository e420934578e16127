#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "ealm/errors.hpp"

namespace ealm {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Deterministic RNG with explicit seed derivation. All stochastic choices in
// the repo flow through this type so that a run is a pure function of its
// seeds. Gaussian sampling is hand-rolled (Box-Muller) instead of
// std::normal_distribution, whose sequence is implementation-defined.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), state_(splitmix64(seed ^ 0x5bf0343db6a3c1ULL)) {
        if (state_ == 0) state_ = 0x9e3779b97f4a7c15ULL;
    }

    // xorshift64* core
    uint64_t next_u64() {
        uint64_t x = state_;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        state_ = x;
        return x * 0x2545f4914f6cdd1dULL;
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n)
    uint64_t uniform_below(uint64_t n) {
        if (n == 0) throw UsageError("uniform_below: n must be positive");
        // rejection sampling to avoid modulo bias
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    double gaussian(double mean = 0.0, double stddev = 1.0) {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(6.283185307179586 * u2);
    }

    // index drawn with probability w[i] / sum(w); weights must be finite,
    // non-negative, at least one strictly positive
    size_t weighted_index(const std::vector<double>& w) {
        double total = 0.0;
        for (double x : w) {
            if (!(x >= 0.0) || !std::isfinite(x)) throw ConfigError("weighted_index: bad weight");
            total += x;
        }
        if (total <= 0.0) throw ConfigError("weighted_index: all weights are zero");
        double r = uniform() * total;
        double cum = 0.0;
        for (size_t i = 0; i < w.size(); i++) {
            cum += w[i];
            if (r < cum) return i;
        }
        return w.size() - 1;
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; i--) {
            size_t j = uniform_below(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    // independent stream keyed by (construction seed, tag)
    Rng derive(uint64_t tag) const { return Rng(splitmix64(seed_ ^ splitmix64(tag + 0x1234abcdULL))); }

    uint64_t seed() const { return seed_; }

private:
    uint64_t seed_;
    uint64_t state_;
};

}  // namespace ealm
