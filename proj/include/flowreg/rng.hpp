#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace flowreg {

// Seeded draws built directly on mt19937_64 output so results are
// bit-identical across standard libraries (std::*_distribution is
// implementation-defined).
inline double uniform01(std::mt19937_64& gen) {
    return static_cast<double>(gen() >> 11) * 0x1.0p-53;
}

inline double uniform_pm(std::mt19937_64& gen, double bound) {
    return (2.0 * uniform01(gen) - 1.0) * bound;
}

// Box-Muller; discards the paired draw for simplicity.
inline double gaussian(std::mt19937_64& gen) {
    double u1 = uniform01(gen);
    while (u1 <= 0.0) u1 = uniform01(gen);
    const double u2 = uniform01(gen);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
}

}  // namespace flowreg
