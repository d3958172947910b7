#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace fedgrid::rng {

// SplitMix64 step function. Used both as the core generator and as the
// seed-derivation hash, so every stream in the project is reproducible from
// a single 64-bit root seed regardless of platform or standard library.
inline std::uint64_t splitmix64(std::uint64_t& state) noexcept {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Derives a child seed from a root seed and an ordered list of tags
// (microgrid index, prosumer index, field tag, ...). Disjoint tag tuples give
// statistically independent substreams.
inline std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> tags) noexcept {
    std::uint64_t s = root;
    std::uint64_t h = splitmix64(s);
    for (std::uint64_t t : tags) {
        s ^= t + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
        h = splitmix64(s);
    }
    return h;
}

// Deterministic 64-bit PRNG stream.
class Stream {
public:
    Stream() = default;
    explicit Stream(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() noexcept { return splitmix64(state_); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform01() noexcept {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform in (0, 1], safe to pass to log().
    double uniform01_open_left() noexcept {
        return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) noexcept {
        return lo + (hi - lo) * uniform01();
    }

    // Standard normal via Box-Muller. Consumes exactly two draws per call;
    // the spare is discarded so consumption is position-independent.
    double normal() noexcept {
        const double u1 = uniform01_open_left();
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return r * std::cos(6.283185307179586476925286766559 * u2);
    }

    double normal(double mean, double stddev) noexcept {
        return mean + stddev * normal();
    }

    // Uniform integer in [0, n). n must be > 0.
    std::uint64_t next_below(std::uint64_t n) noexcept {
        // modulo bias is negligible for the small n used here
        return next_u64() % n;
    }

private:
    std::uint64_t state_ = 0x853c49e6748fea9bull;
};

} // namespace fedgrid::rng
