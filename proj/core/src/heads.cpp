#include "conec/heads.hpp"

#include <algorithm>
#include <cmath>

#include "conec/errors.hpp"
#include "conec/serialize.hpp"

namespace conec {

std::string to_string(HeadKind kind) {
  switch (kind) {
    case HeadKind::Stochastic: return "stochastic";
    case HeadKind::Cosine: return "cosine";
    case HeadKind::Linear: return "linear";
  }
  return "?";
}

HeadKind parse_head_kind(const std::string& name) {
  if (name == "stochastic") return HeadKind::Stochastic;
  if (name == "cosine") return HeadKind::Cosine;
  if (name == "linear") return HeadKind::Linear;
  throw ConfigError("unknown head type '" + name + "' (expected stochastic, cosine or linear)");
}

HeadGrad HeadGrad::zeros_like(const ClassifierHead& head) {
  return HeadGrad{Matrix(head.mu.rows(), head.mu.cols()),
                  Matrix(head.sigma.rows(), head.sigma.cols()), Vector(head.bias.size(), 0.0)};
}

void HeadGrad::add(const HeadGrad& other, double scale) {
  add_inplace(mu, other.mu, scale);
  add_inplace(sigma, other.sigma, scale);
  add_inplace(bias, other.bias, scale);
}

ClassifierHead make_head(HeadKind kind, std::size_t num_classes, std::size_t dim, double eta,
                         double sigma_init, Rng& rng) {
  if (num_classes == 0 || dim == 0) throw InvalidShape("make_head: empty head");
  ClassifierHead head;
  head.kind = kind;
  head.eta = eta;
  head.mu = random_normal(num_classes, dim, rng, 1.0 / std::sqrt(static_cast<double>(dim)));
  head.sigma = Matrix(num_classes, dim, kind == HeadKind::Stochastic ? sigma_init : 0.0);
  head.bias = Vector(num_classes, 0.0);
  return head;
}

namespace {

void require_nonzero(std::span<const double> z, std::size_t dim) {
  if (z.size() != dim) throw InvalidShape("head: embedding width does not match head");
  if (!(norm2(z) > 0.0)) throw InvalidInput("head: zero embedding");
}

// Class weight actually used for class m: mu_m (+ eps_m * sigma_m).
Vector class_weight(const ClassifierHead& head, const Matrix* eps, std::size_t m) {
  Vector phi = head.mu.row_vector(m);
  if (eps) {
    auto e = eps->row(m);
    auto s = head.sigma.row(m);
    for (std::size_t j = 0; j < phi.size(); ++j) phi[j] += e[j] * s[j];
  }
  return phi;
}

}  // namespace

HeadPass forward_train(const ClassifierHead& head, std::span<const double> z, Rng& rng) {
  if (head.kind != HeadKind::Stochastic) return forward_with_noise(head, z, Matrix());
  require_nonzero(z, head.dim());
  return forward_with_noise(head, z, random_normal(head.num_classes(), head.dim(), rng));
}

HeadPass forward_with_noise(const ClassifierHead& head, std::span<const double> z, Matrix eps) {
  require_nonzero(z, head.dim());
  HeadPass pass;
  if (head.kind != HeadKind::Stochastic || eps.empty()) {
    pass.logits = forward_infer(head, z);
    return pass;
  }
  if (eps.rows() != head.num_classes() || eps.cols() != head.dim())
    throw InvalidShape("forward_with_noise: noise shape does not match head");
  pass.eps = std::move(eps);
  pass.logits.resize(head.num_classes());
  for (std::size_t m = 0; m < head.num_classes(); ++m) {
    const Vector phi = class_weight(head, &pass.eps, m);
    pass.logits[m] = head.eta * cosine_similarity(phi, z);
  }
  return pass;
}

Vector forward_infer(const ClassifierHead& head, std::span<const double> z) {
  require_nonzero(z, head.dim());
  Vector logits(head.num_classes());
  for (std::size_t m = 0; m < head.num_classes(); ++m) {
    if (head.kind == HeadKind::Linear) {
      logits[m] = dot(head.mu.row(m), z) + head.bias[m];
    } else {
      logits[m] = head.eta * cosine_similarity(head.mu.row(m), z);
    }
  }
  return logits;
}

Vector head_backward(const ClassifierHead& head, std::span<const double> z, const HeadPass& pass,
                     std::span<const double> dlogits, HeadGrad& grad) {
  const std::size_t d = head.dim();
  if (dlogits.size() != head.num_classes()) throw InvalidShape("head_backward: logit count");
  Vector dz(d, 0.0);

  if (head.kind == HeadKind::Linear) {
    for (std::size_t m = 0; m < head.num_classes(); ++m) {
      const double g = dlogits[m];
      add_inplace(grad.mu.row(m), z, g);
      grad.bias[m] += g;
      add_inplace(dz, head.mu.row(m), g);
    }
    return dz;
  }

  const bool sampled = !pass.eps.empty();
  const double znorm = norm2(z);
  for (std::size_t m = 0; m < head.num_classes(); ++m) {
    const double g = dlogits[m] * head.eta;
    if (g == 0.0) continue;
    const Vector phi = class_weight(head, sampled ? &pass.eps : nullptr, m);
    const double pnorm = norm2(phi);
    if (!(pnorm > 0.0)) throw NumericError("head_backward: zero class weight");
    const double cos = dot(phi, z) / (pnorm * znorm);
    // d cos / d phi = z / (|phi||z|) - cos * phi / |phi|^2, and symmetrically for z.
    for (std::size_t j = 0; j < d; ++j) {
      const double dphi = g * (z[j] / (pnorm * znorm) - cos * phi[j] / (pnorm * pnorm));
      grad.mu(m, j) += dphi;
      if (sampled && head.kind == HeadKind::Stochastic) grad.sigma(m, j) += dphi * pass.eps(m, j);
      dz[j] += g * (phi[j] / (pnorm * znorm) - cos * z[j] / (znorm * znorm));
    }
  }
  return dz;
}

void clamp_sigma(ClassifierHead& head) {
  for (double& s : head.sigma.values()) s = std::max(s, 0.0);
}

PrototypeSet compute_prototypes(const Matrix& embeddings, const std::vector<std::size_t>& labels,
                                std::size_t num_classes) {
  if (labels.size() != embeddings.rows())
    throw InvalidShape("compute_prototypes: label count does not match embeddings");
  PrototypeSet protos{Matrix(num_classes, embeddings.cols()), std::vector<std::size_t>(num_classes)};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) throw InvalidInput("compute_prototypes: label out of range");
    add_inplace(protos.means.row(labels[i]), embeddings.row(i));
    ++protos.counts[labels[i]];
  }
  for (std::size_t m = 0; m < num_classes; ++m) {
    if (protos.counts[m] == 0)
      throw InvalidInput("compute_prototypes: missing class " + std::to_string(m));
    for (double& v : protos.means.row(m)) v /= static_cast<double>(protos.counts[m]);
  }
  return protos;
}

ClassifierHead replace_means(const ClassifierHead& head, const PrototypeSet& protos) {
  if (protos.means.rows() != head.mu.rows() || protos.means.cols() != head.mu.cols())
    throw InvalidShape("replace_means: prototype classes do not match the head");
  ClassifierHead out = head;
  out.mu = protos.means;
  return out;
}

void write_head(BinaryWriter& out, const ClassifierHead& head) {
  out.u64(static_cast<std::uint64_t>(head.kind));
  out.f64(head.eta);
  out.matrix(head.mu);
  out.matrix(head.sigma);
  out.vector(head.bias);
}

ClassifierHead read_head(BinaryReader& in) {
  ClassifierHead head;
  const std::uint64_t kind = in.u64();
  if (kind > 2) throw FormatError("head: bad kind");
  head.kind = static_cast<HeadKind>(kind);
  head.eta = in.f64();
  head.mu = in.matrix();
  head.sigma = in.matrix();
  head.bias = in.vector();
  return head;
}

}  // namespace conec
