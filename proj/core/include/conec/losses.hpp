#pragma once

// Training objectives with their analytic gradients.

#include <cstddef>
#include <span>
#include <vector>

#include "conec/numkit.hpp"

namespace conec {

struct LossGrad {
  double loss = 0.0;
  Vector grad;  // d loss / d logits
};

/// -log softmax(logits)[label]; gradient softmax(logits) - onehot(label).
LossGrad cross_entropy(std::span<const double> logits, std::size_t label);

/// Soft cross-entropy -sum_i s_teacher,i log s_student,i with both
/// distributions at temperature tau. The teacher is treated as a constant.
LossGrad kd_loss(std::span<const double> student_logits, std::span<const double> teacher_logits,
                 double tau);

struct BallLossResult {
  double loss = 0.0;
  Matrix grad;  // d loss / d embeddings
};

/// Sum over samples n (domain i) and every other center j of
/// max(0, |z_n - c_i| + margin - |z_n - c_j|). `centers` has one row per
/// domain id. Fewer than two centers gives zero loss. The hinge kink and
/// coincident points contribute a zero subgradient.
BallLossResult ball_loss(const Matrix& embeddings, const std::vector<std::size_t>& domains,
                         const Matrix& centers, double margin);

struct LossReport {
  double total = 0.0;
  double ce = 0.0;
  double kd = 0.0;
  double ball = 0.0;
};

/// ce + lambda_kd * kd
LossReport joint_dil_loss(double ce, double kd, double lambda_kd);
/// ce + lambda_ball * ball
LossReport joint_aux_loss(double ce, double ball, double lambda_ball);

}  // namespace conec
