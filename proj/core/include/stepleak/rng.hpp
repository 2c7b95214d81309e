#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

// Deterministic seeded randomness.  Every consumer derives a named substream
// from one manifest seed, so model generation, locked search values, and
// trace corruption are independently reproducible regardless of evaluation
// order.  std::normal_distribution is implementation-defined, so the normal
// draw is a fixed Box-Muller over splitmix64 output.

namespace stepleak {

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(seed ^ 0x9e3779b97f4a7c15ull) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform in [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

    double normal(double mean, double stddev) {
        if (have_spare_) {
            have_spare_ = false;
            return mean + stddev * spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * next_double() - 1.0;
            v = 2.0 * next_double() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double m = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * m;
        have_spare_ = true;
        return mean + stddev * u * m;
    }

  private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// FNV-1a over the stream name mixed with the seed and an index.  Substreams
// with distinct (name, index) never collide in practice and are stable across
// platforms.
inline std::uint64_t substream_seed(std::uint64_t seed, std::string_view name, std::uint64_t index = 0) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](std::uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (8 * i)) & 0xffu;
            h *= 1099511628211ull;
        }
    };
    for (char c : name) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    mix(seed);
    mix(index);
    return h;
}

inline Rng substream(std::uint64_t seed, std::string_view name, std::uint64_t index = 0) {
    return Rng(substream_seed(seed, name, index));
}

}  // namespace stepleak
