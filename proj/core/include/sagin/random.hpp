#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <random>

namespace sagin {

using Rng = std::mt19937_64;

// splitmix64 finalizer; decorrelates nearby seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Independent stream `stream` of the experiment seeded with `seed`.
inline Rng make_stream(std::uint64_t seed, std::uint64_t stream) {
    return Rng(mix_seed(mix_seed(seed) ^ mix_seed(stream + 0x51ed2701ULL)));
}

inline double standard_normal(Rng& rng) {
    return std::normal_distribution<double>(0.0, 1.0)(rng);
}

inline double uniform(Rng& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

/// Circularly symmetric complex Gaussian with E|g|^2 = variance.
inline std::complex<double> complex_normal(Rng& rng, double variance = 1.0) {
    const double s = std::sqrt(variance / 2.0);
    const double re = standard_normal(rng);
    const double im = standard_normal(rng);
    return {s * re, s * im};
}

}  // namespace sagin
