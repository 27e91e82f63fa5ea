#include "conec/losses.hpp"

#include <cmath>
#include <string>

#include "conec/errors.hpp"

namespace conec {

LossGrad cross_entropy(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size()) {
    throw InvalidInput("cross_entropy: label " + std::to_string(label) + " out of range for " +
                       std::to_string(logits.size()) + " logits");
  }
  const Vector logp = log_softmax(logits);
  LossGrad out;
  out.loss = -logp[label];
  out.grad.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out.grad[i] = std::exp(logp[i]);
  out.grad[label] -= 1.0;
  return out;
}

LossGrad kd_loss(std::span<const double> student_logits, std::span<const double> teacher_logits,
                 double tau) {
  if (student_logits.size() != teacher_logits.size())
    throw InvalidShape("kd_loss: student and teacher logit counts differ");
  if (!(tau > 0.0)) throw InvalidInput("kd_loss: temperature must be > 0");
  const Vector teacher = softmax(teacher_logits, tau);
  const Vector logs = log_softmax(student_logits, tau);
  LossGrad out;
  out.grad.resize(logs.size());
  for (std::size_t i = 0; i < logs.size(); ++i) {
    out.loss -= teacher[i] * logs[i];
    out.grad[i] = (std::exp(logs[i]) - teacher[i]) / tau;
  }
  return out;
}

BallLossResult ball_loss(const Matrix& embeddings, const std::vector<std::size_t>& domains,
                         const Matrix& centers, double margin) {
  if (domains.size() != embeddings.rows())
    throw InvalidShape("ball_loss: one domain label per embedding required");
  if (margin < 0.0) throw InvalidInput("ball_loss: margin must be >= 0");
  BallLossResult out{0.0, Matrix(embeddings.rows(), embeddings.cols())};
  if (centers.rows() < 2) return out;
  if (centers.cols() != embeddings.cols()) throw InvalidShape("ball_loss: center width mismatch");

  const std::size_t d = embeddings.cols();
  std::vector<double> dist(centers.rows());
  for (std::size_t n = 0; n < embeddings.rows(); ++n) {
    const std::size_t own = domains[n];
    if (own >= centers.rows()) throw InvalidInput("ball_loss: domain label without a center");
    auto z = embeddings.row(n);
    for (std::size_t c = 0; c < centers.rows(); ++c) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = z[k] - centers(c, k);
        s += diff * diff;
      }
      dist[c] = std::sqrt(s);
    }
    auto g = out.grad.row(n);
    for (std::size_t c = 0; c < centers.rows(); ++c) {
      if (c == own) continue;
      const double term = dist[own] + margin - dist[c];
      if (!(term > 0.0)) continue;
      out.loss += term;
      // d|z - c|/dz = (z - c) / |z - c|, zero at coincidence.
      if (dist[own] > 0.0)
        for (std::size_t k = 0; k < d; ++k) g[k] += (z[k] - centers(own, k)) / dist[own];
      if (dist[c] > 0.0)
        for (std::size_t k = 0; k < d; ++k) g[k] -= (z[k] - centers(c, k)) / dist[c];
    }
  }
  return out;
}

LossReport joint_dil_loss(double ce, double kd, double lambda_kd) {
  if (lambda_kd < 0.0) throw InvalidInput("joint_dil_loss: lambda must be >= 0");
  return LossReport{ce + lambda_kd * kd, ce, kd, 0.0};
}

LossReport joint_aux_loss(double ce, double ball, double lambda_ball) {
  if (lambda_ball < 0.0) throw InvalidInput("joint_aux_loss: lambda must be >= 0");
  return LossReport{ce + lambda_ball * ball, ce, 0.0, ball};
}

}  // namespace conec
