#include "conec/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "conec/errors.hpp"

namespace conec {

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw InvalidShape(std::string(op) + ": " + std::to_string(a.rows()) + "x" +
                       std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                       std::to_string(b.cols()));
  }
}

std::uint64_t splitmix64(std::uint64_t& x) noexcept {
  std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
  return (x << k) | (x >> (64 - k));
}

}  // namespace

// --- Matrix ----------------------------------------------------------------

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw InvalidShape("Matrix: data length " + std::to_string(data_.size()) + " != " +
                       std::to_string(rows) + "*" + std::to_string(cols));
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw InvalidShape("Matrix: ragged initializer");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Vector Matrix::row_vector(std::size_t r) const {
  auto s = row(r);
  return Vector(s.begin(), s.end());
}

Matrix Matrix::transpose() const {
  Matrix t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
  return t;
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Matrix::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

// --- products --------------------------------------------------------------

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw InvalidShape("matmul: inner dimensions differ");
  Matrix c(a.rows(), b.cols());
  const std::size_t n = a.cols(), p = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* ci = c.data() + i * p;
    const double* ai = a.data() + i * n;
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = ai[k];
      if (aik == 0.0) continue;
      const double* bk = b.data() + k * p;
      for (std::size_t j = 0; j < p; ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw InvalidShape("matmul_nt: inner dimensions differ");
  Matrix c(a.rows(), b.rows());
  const std::size_t n = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ai = a.data() + i * n;
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* bj = b.data() + j * n;
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += ai[k] * bj[k];
      c(i, j) = s;
    }
  }
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw InvalidShape("matmul_tn: inner dimensions differ");
  Matrix c(a.cols(), b.cols());
  const std::size_t p = b.cols();
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* ak = a.data() + k * a.cols();
    const double* bk = b.data() + k * p;
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = ak[i];
      if (aki == 0.0) continue;
      double* ci = c.data() + i * p;
      for (std::size_t j = 0; j < p; ++j) ci[j] += aki * bk[j];
    }
  }
  return c;
}

Vector matvec(const Matrix& a, std::span<const double> x) {
  if (a.cols() != x.size()) throw InvalidShape("matvec: dimension mismatch");
  Vector y(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) y[i] = dot(a.row(i), x);
  return y;
}

Vector matvec_t(const Matrix& a, std::span<const double> x) {
  if (a.rows() != x.size()) throw InvalidShape("matvec_t: dimension mismatch");
  Vector y(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) add_inplace(y, a.row(i), x[i]);
  return y;
}

// --- elementwise -----------------------------------------------------------

Matrix operator+(const Matrix& a, const Matrix& b) {
  Matrix c = a;
  add_inplace(c, b);
  return c;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
  Matrix c = a;
  add_inplace(c, b, -1.0);
  return c;
}

Matrix operator*(double s, const Matrix& a) {
  Matrix c = a;
  for (double& v : c.values()) v *= s;
  return c;
}

void add_inplace(Matrix& a, const Matrix& b, double scale) {
  require_same_shape(a, b, "add_inplace");
  add_inplace(a.values(), b.values(), scale);
}

void add_inplace(std::span<double> a, std::span<const double> b, double scale) {
  if (a.size() != b.size()) throw InvalidShape("add_inplace: length mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += scale * b[i];
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InvalidShape("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double frobenius_norm(const Matrix& a) { return norm2(a.values()); }

double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double v : a.values()) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

// --- Rng -------------------------------------------------------------------

Rng::Rng(std::uint64_t seed) : seed_(seed) {
  std::uint64_t x = seed;
  for (auto& s : s_) s = splitmix64(x);
}

std::uint64_t Rng::next_u64() noexcept {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() noexcept {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() noexcept {
  if (has_cached_) {
    has_cached_ = false;
    return cached_normal_;
  }
  // u1 in (0, 1] keeps the log finite.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  cached_normal_ = radius * std::sin(angle);
  has_cached_ = true;
  return radius * std::cos(angle);
}

std::size_t Rng::uniform_index(std::size_t n) noexcept {
  if (n <= 1) return 0;
  // Rejection sampling for an unbiased index.
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return static_cast<std::size_t>(v % bound);
}

Rng Rng::fork(std::uint64_t stream) const noexcept {
  std::uint64_t x = seed_ ^ (0xd1b54a32d192ed03ULL * (stream + 1));
  return Rng(splitmix64(x));
}

Matrix random_normal(std::size_t rows, std::size_t cols, Rng& rng, double stddev) {
  Matrix m(rows, cols);
  for (double& v : m.values()) v = stddev * rng.normal();
  return m;
}

// --- SVD -------------------------------------------------------------------

namespace {

constexpr int kMaxJacobiSweeps = 100;

// One-sided Jacobi for a tall (rows >= cols) matrix.
SvdResult svd_tall(const Matrix& m) {
  const std::size_t rows = m.rows(), n = m.cols();
  Matrix a = m;
  Matrix v = Matrix::identity(n);
  const double eps = 1e-15;
  // Columns below this squared norm are numerically zero and need no rotation.
  double frob2 = 0.0;
  for (double x : m.values()) frob2 += x * x;
  const double negligible = 1e-30 * frob2;

  bool converged = false;
  for (int sweep = 0; sweep < kMaxJacobiSweeps && !converged; ++sweep) {
    converged = true;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < rows; ++i) {
          const double ap = a(i, p), aq = a(i, q);
          alpha += ap * ap;
          beta += aq * aq;
          gamma += ap * aq;
        }
        if (gamma == 0.0 || std::abs(gamma) <= eps * std::sqrt(alpha * beta)) continue;
        if (alpha <= negligible || beta <= negligible) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < rows; ++i) {
          const double ap = a(i, p), aq = a(i, q);
          a(i, p) = c * ap - s * aq;
          a(i, q) = s * ap + c * aq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = v(i, p), vq = v(i, q);
          v(i, p) = c * vp - s * vq;
          v(i, q) = s * vp + c * vq;
        }
      }
    }
  }
  if (!converged) throw NumericError("svd: Jacobi sweeps did not converge");

  Vector sigma(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < rows; ++i) s += a(i, j) * a(i, j);
    sigma[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  SvdResult out{Matrix(rows, n), Vector(n), Matrix(n, n)};
  const double tiny = (sigma.empty() ? 0.0 : sigma[order[0]]) * 1e-300 + 1e-300;
  std::vector<bool> filled(n, false);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    out.s[k] = sigma[j];
    for (std::size_t i = 0; i < n; ++i) out.v(i, k) = v(i, j);
    if (sigma[j] > tiny) {
      for (std::size_t i = 0; i < rows; ++i) out.u(i, k) = a(i, j) / sigma[j];
      filled[k] = true;
    }
  }
  // Complete U for zero singular values with Gram-Schmidt over the standard basis.
  std::size_t basis = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (filled[k]) continue;
    while (basis < rows) {
      Vector cand(rows, 0.0);
      cand[basis++] = 1.0;
      for (std::size_t other = 0; other < n; ++other) {
        if (!filled[other]) continue;
        double proj = 0.0;
        for (std::size_t i = 0; i < rows; ++i) proj += out.u(i, other) * cand[i];
        for (std::size_t i = 0; i < rows; ++i) cand[i] -= proj * out.u(i, other);
      }
      const double nrm = norm2(cand);
      if (nrm > 1e-8) {
        for (std::size_t i = 0; i < rows; ++i) out.u(i, k) = cand[i] / nrm;
        filled[k] = true;
        break;
      }
    }
  }
  return out;
}

}  // namespace

SvdResult svd(const Matrix& m) {
  if (m.rows() == 0 || m.cols() == 0) throw InvalidShape("svd: empty matrix");
  if (!m.all_finite()) throw InvalidInput("svd: non-finite input");
  if (m.rows() >= m.cols()) return svd_tall(m);
  SvdResult t = svd_tall(m.transpose());
  return SvdResult{std::move(t.v), std::move(t.s), std::move(t.u)};
}

Matrix random_orthogonal_rows(std::size_t r, std::size_t k, Rng& rng) {
  if (r == 0 || r > k) {
    throw InvalidShape("random_orthogonal_rows: need 0 < r <= k, got r=" + std::to_string(r) +
                       " k=" + std::to_string(k));
  }
  const Matrix draw = random_normal(r, k, rng);
  const SvdResult d = svd(draw);  // u: r x r, v: k x r
  return matmul_nt(d.u, d.v);
}

// --- Cholesky --------------------------------------------------------------

namespace {

bool try_cholesky(const Matrix& k, double jitter, Matrix& l) {
  const std::size_t n = k.rows();
  l = Matrix(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double diag = k(j, j) + jitter;
    for (std::size_t p = 0; p < j; ++p) diag -= l(j, p) * l(j, p);
    if (!(diag > 0.0) || !std::isfinite(diag)) return false;
    const double ljj = std::sqrt(diag);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = k(i, j);
      for (std::size_t p = 0; p < j; ++p) s -= l(i, p) * l(j, p);
      l(i, j) = s / ljj;
    }
  }
  return true;
}

}  // namespace

Matrix cholesky(const Matrix& k, std::string_view context) {
  const std::string where = context.empty() ? std::string("cholesky")
                                            : "cholesky (" + std::string(context) + ")";
  if (k.rows() != k.cols() || k.rows() == 0) throw InvalidShape(where + ": matrix not square");
  if (!k.all_finite()) throw InvalidInput(where + ": non-finite input");
  const std::size_t n = k.rows();
  double scale = 0.0;
  for (std::size_t i = 0; i < n; ++i) scale = std::max(scale, std::abs(k(i, i)));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(k(i, j) - k(j, i)) > 1e-10 * std::max(scale, 1.0))
        throw InvalidInput(where + ": matrix not symmetric");

  Matrix l;
  if (try_cholesky(k, 0.0, l)) return l;
  for (double eps = 1e-9; eps <= 1e-3 * (1.0 + 1e-12); eps *= 10.0) {
    if (try_cholesky(k, eps, l)) return l;
  }
  throw NumericError(where + ": not positive definite after jitter 1e-3");
}

// --- vector functions ------------------------------------------------------

Vector log_softmax(std::span<const double> v, double temperature) {
  if (!(temperature > 0.0)) throw InvalidInput("softmax: temperature must be > 0");
  if (v.empty()) throw InvalidInput("softmax: empty input");
  const double mx = *std::max_element(v.begin(), v.end());
  Vector out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = (v[i] - mx) / temperature;
    sum += std::exp(out[i]);
  }
  const double lse = std::log(sum);
  for (double& o : out) o -= lse;
  return out;
}

Vector softmax(std::span<const double> v, double temperature) {
  if (!(temperature > 0.0)) throw InvalidInput("softmax: temperature must be > 0");
  if (v.empty()) throw InvalidInput("softmax: empty input");
  const double mx = *std::max_element(v.begin(), v.end());
  Vector out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp((v[i] - mx) / temperature);
    sum += out[i];
  }
  for (double& o : out) o /= sum;
  return out;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  const double na = norm2(a), nb = norm2(b);
  if (!(na > 0.0) || !(nb > 0.0)) throw InvalidInput("cosine_similarity: zero vector");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

Vector finite_diff_grad(const std::function<double(const Vector&)>& f, const Vector& x,
                        double h) {
  if (!(h > 0.0)) throw InvalidInput("finite_diff_grad: h must be > 0");
  Vector g(x.size());
  Vector probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double fp = f(probe);
    probe[i] = x[i] - h;
    const double fm = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("finite_diff_grad: non-finite evaluation at coordinate " +
                         std::to_string(i));
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace conec
