#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace sparta {

// All randomness in the project flows through Rng. The generator is
// std::mt19937_64, whose output sequence is pinned by the C++ standard, and
// the uniform/Gaussian transforms below are spelled out explicitly instead
// of going through std::*_distribution (whose algorithms are
// implementation-defined). Fixed seed therefore means fixed byte stream.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    /// Uniform integer in [0, n). Modulo reduction: the bias for n << 2^64
    /// is far below anything the statistical tests can see.
    std::uint64_t below(std::uint64_t n) {
        return gen_() % n;
    }

    /// Standard normal via Box-Muller; one value per call, no caching, so
    /// the stream position is a pure function of the call count.
    double gaussian() {
        double u1 = uniform();
        while (u1 == 0.0) u1 = uniform();
        const double u2 = uniform();
        constexpr double two_pi = 6.283185307179586476925286766559;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
    }

    double gaussian(double mean, double stddev) {
        return mean + stddev * gaussian();
    }

private:
    std::mt19937_64 gen_;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace detail

/// Derives an independent child seed from a master seed and a stream tag.
/// Consumers (init, shuffle, attack targets, ...) each get their own tag so
/// adding draws to one stream never shifts another.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag) {
    return detail::splitmix64(master ^ detail::fnv1a64(tag));
}

inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag,
                                 std::uint64_t index) {
    return detail::splitmix64(derive_seed(master, tag) + index);
}

} // namespace sparta
