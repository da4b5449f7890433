#pragma once

#include "doctest.h"
#include "etdmpc/common.hpp"

#include <functional>

namespace etdmpc::testutil {

inline double rel_err(double a, double b, double guard = 1e-3) {
  return std::abs(a - b) / std::max({guard, std::abs(a), std::abs(b)});
}

/// Central finite difference of `loss` w.r.t. one in-place perturbed scalar.
inline double fd_scalar(double& x, const std::function<double()>& loss, double eps = 1e-6) {
  const double saved = x;
  x = saved + eps;
  const double up = loss();
  x = saved - eps;
  const double down = loss();
  x = saved;
  return (up - down) / (2.0 * eps);
}

}  // namespace etdmpc::testutil
