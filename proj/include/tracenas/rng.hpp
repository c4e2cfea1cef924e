#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace tracenas {

// splitmix64; used to derive independent stream seeds from (seed, tag...) tuples.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) { return mix64(mix64(a) ^ b); }
inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return mix64(mix64(a, b) ^ c);
}
inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t d) {
    return mix64(mix64(a, b, c) ^ d);
}

// Deterministic RNG. The engine is mt19937_64 (algorithm fixed by the standard);
// the distributions are hand-rolled so that streams are bit-identical across
// standard-library implementations, which the golden-file tests rely on.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    // uniform in (0, 1]; safe as a log() argument
    double uniform_pos() { return (static_cast<double>(eng_() >> 11) + 1.0) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller (one value per pair kept; stream stays simple)
    double normal() {
        const double u1 = uniform_pos();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // standard Gumbel(0, 1)
    double gumbel() { return -std::log(-std::log(uniform_pos())); }

    // integer in [0, n)
    std::uint64_t below(std::uint64_t n) {
        // modulo bias is irrelevant at the magnitudes used here (n << 2^64)
        return eng_() % n;
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace tracenas
