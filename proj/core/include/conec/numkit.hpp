#pragma once

// Dense float64 linear algebra, a portable seeded RNG, and the central
// finite-difference gradient oracle used across the test suites.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

namespace conec {

using Vector = std::vector<double>;

/// Row-major dense matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }
  Vector row_vector(std::size_t r) const;

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }

  Matrix transpose() const;
  void fill(double v);
  bool all_finite() const noexcept;

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// --- products -----------------------------------------------------------

Matrix matmul(const Matrix& a, const Matrix& b);     // a * b
Matrix matmul_nt(const Matrix& a, const Matrix& b);  // a * b^T
Matrix matmul_tn(const Matrix& a, const Matrix& b);  // a^T * b
Vector matvec(const Matrix& a, std::span<const double> x);     // a * x
Vector matvec_t(const Matrix& a, std::span<const double> x);   // a^T * x

// --- elementwise helpers -------------------------------------------------

Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator*(double s, const Matrix& a);
void add_inplace(Matrix& a, const Matrix& b, double scale = 1.0);
void add_inplace(std::span<double> a, std::span<const double> b, double scale = 1.0);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
double frobenius_norm(const Matrix& a);
double max_abs(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);

// --- randomness ----------------------------------------------------------

/// xoshiro256** seeded through splitmix64. Identical seeds give identical
/// streams on every platform; normals come from an in-house Box-Muller so
/// the sequence does not depend on the standard library's distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64() noexcept;
  double uniform() noexcept;  // [0, 1)
  double normal() noexcept;   // N(0, 1)
  std::size_t uniform_index(std::size_t n) noexcept;

  /// Independent child stream derived from (seed, stream). Does not consume
  /// or depend on this generator's position.
  Rng fork(std::uint64_t stream) const noexcept;

  std::uint64_t seed() const noexcept { return seed_; }

  template <typename T>
  void shuffle(std::vector<T>& items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = uniform_index(i);
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
  double cached_normal_ = 0.0;
  bool has_cached_ = false;
};

Matrix random_normal(std::size_t rows, std::size_t cols, Rng& rng, double stddev = 1.0);

// --- decompositions ------------------------------------------------------

struct SvdResult {
  Matrix u;  // rows x k, orthonormal columns
  Vector s;  // k, nonincreasing
  Matrix v;  // cols x k, orthonormal columns
};

/// Thin SVD via one-sided Jacobi rotations (k = min(rows, cols)).
SvdResult svd(const Matrix& m);

/// r x k matrix with orthonormal rows: B = U V^T from the SVD of an r x k
/// standard-normal draw.
Matrix random_orthogonal_rows(std::size_t r, std::size_t k, Rng& rng);

/// Lower-triangular factor of a symmetric positive-definite matrix. If the
/// plain factorization fails, eps*I is added with eps = 1e-9, 1e-8, ...,
/// 1e-3 before giving up. `context` names the caller in error messages.
Matrix cholesky(const Matrix& k, std::string_view context = {});

// --- small vector functions ---------------------------------------------

Vector softmax(std::span<const double> v, double temperature = 1.0);
Vector log_softmax(std::span<const double> v, double temperature = 1.0);
double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h.
Vector finite_diff_grad(const std::function<double(const Vector&)>& f, const Vector& x,
                        double h = 1e-5);

}  // namespace conec
