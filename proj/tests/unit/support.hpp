#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>

#include "conec/numkit.hpp"

namespace conec::testing {

// Agreement between an analytic and a numeric derivative.
inline bool grad_close(double analytic, double numeric, double rel = 1e-4, double abs_floor = 1e-5) {
  return std::abs(analytic - numeric) <= std::max(abs_floor, rel * std::max(std::abs(analytic), std::abs(numeric)));
}

// Largest violation of grad_close across two vectors, as a ratio (<= 1 passes).
inline double grad_mismatch(const Vector& analytic, const Vector& numeric, double rel = 1e-4,
                            double abs_floor = 1e-5) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double tol = std::max(abs_floor, rel * std::max(std::abs(analytic[i]), std::abs(numeric[i])));
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / tol);
  }
  return worst;
}

inline Vector flatten(const Matrix& m) { return Vector(m.values().begin(), m.values().end()); }

inline Matrix unflatten(const Vector& v, std::size_t rows, std::size_t cols) { return Matrix(rows, cols, v); }

inline Vector random_vector(std::size_t n, Rng& rng, double scale = 1.0) {
  Vector v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

}  // namespace conec::testing
