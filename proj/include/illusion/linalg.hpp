#pragma once

#include <Eigen/Dense>

namespace illusion {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Elementwise clamp into the pixel range [0, 1].
inline Vec clip01(const Vec& x) { return x.cwiseMax(0.0).cwiseMin(1.0); }

inline bool all_finite(const Vec& x) { return x.allFinite(); }

}  // namespace illusion
