#ifndef TOPOFUSE_TYPES_HPP
#define TOPOFUSE_TYPES_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace topofuse {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

using Labels = std::vector<int>;

/**
 * Random engine used throughout. `std::mt19937_64` output is specified by the standard,
 * but the distributions are not, so all draws go through the helpers below.
 */
using Rng = std::mt19937_64;

/** Uniform draw in [0, 1) with 53 random bits. */
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi) {
    return lo + (hi - lo) * uniform01(rng);
}

/** Uniform integer in [0, n), rejection-sampled. */
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
    const std::uint64_t range = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % range;
    std::uint64_t draw;
    do {
        draw = rng();
    } while (draw >= limit);
    return static_cast<std::size_t>(draw % range);
}

/** Standard normal via Box-Muller, one draw per call. */
inline double standard_normal(Rng& rng) {
    double u1 = uniform01(rng);
    while (u1 <= 0.0) {
        u1 = uniform01(rng);
    }
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

inline int count_distinct(const Labels& labels) {
    int top = -1;
    for (int l : labels) {
        top = std::max(top, l);
    }
    std::vector<char> seen(static_cast<std::size_t>(top + 1), 0);
    int n = 0;
    for (int l : labels) {
        if (l >= 0 && !seen[l]) {
            seen[l] = 1;
            ++n;
        }
    }
    return n;
}

}

#endif
