#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "conec/numkit.hpp"

namespace conec {

/// Classical momentum: v <- momentum * v + g; p <- p - lr * v.
void sgd_step(std::span<double> params, std::span<const double> grads, std::span<double> velocity,
              double lr, double momentum);

/// Momentum SGD over parameter buffers addressed by a caller-chosen slot.
class MomentumSgd {
 public:
  explicit MomentumSgd(double momentum) : momentum_(momentum) {}

  void step(std::size_t slot, std::span<double> params, std::span<const double> grads, double lr);
  void step(std::size_t slot, Matrix& params, const Matrix& grads, double lr) {
    step(slot, params.values(), grads.values(), lr);
  }
  void step(std::size_t slot, Vector& params, const Vector& grads, double lr) {
    step(slot, std::span<double>(params), std::span<const double>(grads), lr);
  }

  double momentum() const noexcept { return momentum_; }

 private:
  double momentum_;
  std::vector<Vector> velocity_;
};

}  // namespace conec
