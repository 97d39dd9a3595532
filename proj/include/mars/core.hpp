#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mars {

using Vec = std::vector<double>;

enum class Geometry { kEuclidean, kSpherical };
enum class Variant { kCml, kMar, kMars };

inline Geometry geometry_of(Variant v) {
    return v == Variant::kMars ? Geometry::kSpherical : Geometry::kEuclidean;
}

inline std::string to_string(Geometry g) {
    return g == Geometry::kEuclidean ? "euclidean" : "spherical";
}

inline std::string to_string(Variant v) {
    switch (v) {
        case Variant::kCml: return "cml";
        case Variant::kMar: return "mar";
        default: return "mars";
    }
}

inline Variant parse_variant(std::string_view s) {
    if (s == "cml") return Variant::kCml;
    if (s == "mar") return Variant::kMar;
    if (s == "mars") return Variant::kMars;
    throw std::invalid_argument("unknown variant: " + std::string(s));
}

// ---------------------------------------------------------------------------
// Small dense-vector helpers. All hot loops in the library reduce to these.
// ---------------------------------------------------------------------------

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double squared_norm(std::span<const double> a) {
    return dot(a, a);
}

inline double norm(std::span<const double> a) {
    return std::sqrt(squared_norm(a));
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

// y += a * x
inline void axpy(double a, std::span<const double> x, std::span<double> y) {
    for (size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

inline void scale(std::span<double> x, double s) {
    for (double& v : x) v *= s;
}

inline void fill_zero(std::span<double> x) {
    for (double& v : x) v = 0.0;
}

// ---------------------------------------------------------------------------
// Seeded randomness. Every source of randomness in the library is an
// mt19937_64 derived from (root seed, stream name[, index]), so each pipeline
// stage replays independently of the others. Draw helpers avoid std
// distributions, whose output sequences differ across standard libraries.
// ---------------------------------------------------------------------------

using Rng = std::mt19937_64;

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 1469598103934665603ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t mix_seed(uint64_t root, std::string_view stream, uint64_t index = 0) {
    // splitmix64 finalizer over the combined words
    uint64_t z = root + 0x9e3779b97f4a7c15ull * (fnv1a64(stream) ^ (index + 1));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline Rng make_rng(uint64_t root, std::string_view stream, uint64_t index = 0) {
    return Rng(mix_seed(root, stream, index));
}

// uniform in [0, n) via 128-bit multiply-shift
inline size_t rand_index(Rng& rng, size_t n) {
    return static_cast<size_t>(
        (static_cast<unsigned __int128>(rng()) * static_cast<unsigned __int128>(n)) >> 64);
}

// uniform in [0, 1) with 53-bit mantissa
inline double rand_unit(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// standard normal via Box-Muller; two uniforms per draw keeps it stateless
inline double rand_normal(Rng& rng) {
    double u1 = rand_unit(rng);
    while (u1 <= 0.0) u1 = rand_unit(rng);
    const double u2 = rand_unit(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

template <typename T>
inline void shuffle_in_place(std::vector<T>& v, Rng& rng) {
    for (size_t i = v.size(); i > 1; --i) {
        std::swap(v[i - 1], v[rand_index(rng, i)]);
    }
}

}  // namespace mars
