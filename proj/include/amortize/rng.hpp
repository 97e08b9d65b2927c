#pragma once

// Seeded, splittable random streams. Child streams are derived from
// (seed, stream id), never from consumed state, so any evaluation order
// over examples/epochs/iterations reproduces bit-identically. The
// generator is SplitMix64; normal draws use Box-Muller. We do not use
// <random> distributions because their output is implementation-defined.

#include <cmath>
#include <cstdint>
#include <numbers>

#include "core.hpp"

namespace amortize {

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t s = a ^ (0x9e3779b97f4a7c15ULL + (b << 6) + (b >> 2));
    return splitmix64(s);
}
}  // namespace detail

class Rng {
  public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), state_(detail::mix(seed, 0x517cc1b727220a95ULL)) {}

    // Stream derived from the original seed and an id; independent of how
    // much this generator has been consumed.
    Rng child(std::uint64_t stream_id) const { return Rng(detail::mix(seed_, stream_id)); }
    Rng child(std::uint64_t a, std::uint64_t b) const { return child(detail::mix(a, b)); }
    Rng child(std::uint64_t a, std::uint64_t b, std::uint64_t c) const {
        return child(detail::mix(a, detail::mix(b, c)));
    }

    std::uint64_t next_u64() { return detail::splitmix64(state_); }

    // Uniform in (0, 1]: never returns 0, safe under log().
    double next_uniform() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

    double next_normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = next_uniform();
        double u2 = next_uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double t = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(t);
        have_spare_ = true;
        return r * std::cos(t);
    }

    // n in [0, bound)
    std::uint64_t next_below(std::uint64_t bound) {
        // Modulo bias is negligible for desk-scale bounds (< 2^32).
        return next_u64() % bound;
    }

    Vec normal_vec(std::size_t n) {
        Vec v(n);
        for (auto& x : v) x = next_normal();
        return v;
    }

    std::uint64_t seed() const { return seed_; }

  private:
    std::uint64_t seed_;
    std::uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Fixed stream-id tags, so call sites don't invent colliding constants.
namespace stream {
constexpr std::uint64_t kWeightInit = 0x5749ULL;
constexpr std::uint64_t kNoise = 0x4e4fULL;
constexpr std::uint64_t kBinarize = 0x4249ULL;
constexpr std::uint64_t kShuffle = 0x5348ULL;
constexpr std::uint64_t kData = 0x4441ULL;
constexpr std::uint64_t kEval = 0x4556ULL;
}  // namespace stream

}  // namespace amortize
