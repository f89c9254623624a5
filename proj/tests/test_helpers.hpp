#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "portrl/tensor.hpp"

namespace portrl::testing {

// Central finite difference of a scalar function w.r.t. one coordinate of a
// flat value vector.
inline double central_diff(std::vector<double>& values, std::size_t i,
                           const std::function<double()>& f, double eps = 1e-5) {
    const double saved = values[i];
    values[i] = saved + eps;
    const double hi = f();
    values[i] = saved - eps;
    const double lo = f();
    values[i] = saved;
    return (hi - lo) / (2.0 * eps);
}

// Relative error with an absolute floor so near-zero pairs compare sanely.
inline double rel_err(double a, double b, double floor_ = 1e-8) {
    const double denom = std::max({std::abs(a), std::abs(b), floor_});
    return std::abs(a - b) / denom;
}

}  // namespace portrl::testing
