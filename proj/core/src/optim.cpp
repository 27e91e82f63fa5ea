#include "conec/optim.hpp"

#include "conec/errors.hpp"

namespace conec {

void sgd_step(std::span<double> params, std::span<const double> grads, std::span<double> velocity,
              double lr, double momentum) {
  if (params.size() != grads.size() || params.size() != velocity.size())
    throw InvalidShape("sgd_step: parameter, gradient and velocity lengths differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grads[i];
    params[i] -= lr * velocity[i];
  }
}

void MomentumSgd::step(std::size_t slot, std::span<double> params, std::span<const double> grads,
                       double lr) {
  if (slot >= velocity_.size()) velocity_.resize(slot + 1);
  Vector& v = velocity_[slot];
  if (v.empty()) v.assign(params.size(), 0.0);
  if (v.size() != params.size()) throw InvalidShape("MomentumSgd: slot reused with another shape");
  sgd_step(params, grads, v, lr, momentum_);
}

}  // namespace conec
