#include <doctest.h>

#include <sstream>

#include "conec/adapters.hpp"
#include "conec/errors.hpp"
#include "conec/serialize.hpp"
#include "support.hpp"

using namespace conec;

TEST_CASE("new shared adapter") {
  Rng rng(1);
  const LoraAdapter a = new_shared(8, 32, 32, Projection::Value, rng);
  CHECK(a.rank() == 8);
  CHECK(a.a.rows() == 32);
  CHECK(a.a.cols() == 8);
  CHECK(a.b.rows() == 8);
  CHECK(a.b.cols() == 32);
  CHECK_FALSE(a.b_trainable);
  CHECK(max_abs(a.a) == 0.0);
  CHECK(max_abs(matmul(a.a, a.b)) == 0.0);
  CHECK(max_abs_diff(matmul_nt(a.b, a.b), Matrix::identity(8)) < 1e-8);
  CHECK_THROWS_AS(new_shared(9, 8, 8, Projection::Query, rng), InvalidShape);
  CHECK_THROWS_AS(new_shared(4, 3, 8, Projection::Query, rng), InvalidShape);
}

TEST_CASE("delta") {
  Rng rng(2);
  SUBCASE("zero A") {
    const LoraAdapter a = new_shared(3, 6, 6, Projection::Query, rng);
    CHECK(max_abs(delta(a, random_normal(4, 6, rng))) == 0.0);
  }
  SUBCASE("identity factors") {
    LoraAdapter a;
    a.a = Matrix::identity(5);
    a.b = Matrix::identity(5);
    const Matrix z = random_normal(3, 5, rng);
    CHECK(max_abs_diff(delta(a, z), z) == 0.0);
  }
  SUBCASE("dense product oracle") {
    for (int t = 0; t < 20; ++t) {
      LoraAdapter a;
      a.a = random_normal(7, 3, rng);
      a.b = random_normal(3, 6, rng);
      const Matrix z = random_normal(4, 6, rng);
      // Oracle: form W = A B explicitly, then out[t][i] = sum_j W[i][j] z[t][j].
      Matrix w(7, 6);
      for (std::size_t i = 0; i < 7; ++i)
        for (std::size_t j = 0; j < 6; ++j)
          for (std::size_t k = 0; k < 3; ++k) w(i, j) += a.a(i, k) * a.b(k, j);
      Matrix expect(4, 7);
      for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t i = 0; i < 7; ++i)
          for (std::size_t j = 0; j < 6; ++j) expect(r, i) += w(i, j) * z(r, j);
      REQUIRE(max_abs_diff(delta(a, z), expect) < 1e-12);
    }
  }
  SUBCASE("shape mismatch") {
    const LoraAdapter a = new_shared(2, 6, 6, Projection::Query, rng);
    CHECK_THROWS_AS(delta(a, Matrix(2, 5)), InvalidShape);
  }
}

TEST_CASE("property: delta is linear in A and in z") {
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    LoraAdapter a;
    a.a = random_normal(6, 2, rng);
    a.b = random_orthogonal_rows(2, 6, rng);
    const Matrix z = random_normal(3, 6, rng);
    const double alpha = 5.0 * rng.normal();
    LoraAdapter scaled = a;
    scaled.a = alpha * a.a;
    const Matrix base = delta(a, z);
    REQUIRE(max_abs_diff(delta(scaled, z), alpha * base) < 1e-12 * std::max(1.0, std::abs(alpha)) * 10);
    REQUIRE(max_abs_diff(delta(a, alpha * z), alpha * base) < 1e-12 * std::max(1.0, std::abs(alpha)) * 10);
  }
}

TEST_CASE("redistribution mask examples") {
  CHECK(redistribution_mask(Vector{1, 1, 1, 1}) == Vector{1, 1, 1, 1});
  CHECK(redistribution_mask(Vector{2, 0, 0, 0}) == Vector{4, 0, 0, 0});
  CHECK(redistribution_mask(Vector{0, 0, 0}) == Vector{1, 1, 1});
  CHECK_THROWS_AS(redistribution_mask(Vector{1, -1}), InvalidInput);
}

TEST_CASE("property: redistribution mask sums to d and has mean one") {
  Rng rng(4);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t d = 1 + rng.uniform_index(64);
    Vector w(d);
    for (double& v : w) v = std::abs(rng.normal()) * std::exp(3.0 * rng.normal());
    const Vector m = redistribution_mask(w);
    double s = 0.0;
    for (double v : m) s += v;
    REQUIRE(std::abs(s - static_cast<double>(d)) < 1e-12 * static_cast<double>(d));
    REQUIRE(std::abs(s / static_cast<double>(d) - 1.0) < 1e-12);

    const Vector uniform(d, 0.1 + rng.uniform());
    const Vector mu = redistribution_mask(uniform);
    for (double v : mu) REQUIRE(std::abs(v - 1.0) < 1e-12);
  }
}

TEST_CASE("apply redistribution") {
  Rng rng(5);
  const Matrix g = random_normal(6, 3, rng);
  CHECK(apply_redistribution(g, Vector(6, 1.0)) == g);

  Vector zero_row(6, 1.0);
  zero_row[2] = 0.0;
  const Matrix z = apply_redistribution(g, zero_row);
  for (double v : z.row(2)) CHECK(v == 0.0);

  for (int t = 0; t < 20; ++t) {
    const Matrix grad = random_normal(6, 3, rng);
    Vector mask(6);
    for (double& v : mask) v = 2.0 * rng.uniform();
    const Matrix out = apply_redistribution(grad, mask);
    for (std::size_t j = 0; j < 6; ++j)
      for (std::size_t k = 0; k < 3; ++k) REQUIRE(out(j, k) == grad(j, k) * mask[j]);
  }
  CHECK_THROWS_AS(apply_redistribution(g, Vector(5, 1.0)), InvalidShape);
}

TEST_CASE("row norms") {
  const Matrix a{{3, 4}, {0, 0}, {1, 0}};
  CHECK(row_norms(a) == Vector{5, 0, 1});
}

TEST_CASE("adapter bank layout") {
  Rng rng(6);
  AdapterBankConfig cfg;
  cfg.num_layers = 6;
  cfg.shared_blocks = 3;
  cfg.rank = 4;
  cfg.dim = 16;
  AdapterBank bank(cfg, rng);
  CHECK(bank.split() == 3);
  CHECK(bank.shared().size() == 3);
  for (const auto& blk : bank.shared()) {
    REQUIRE(blk.loras.size() == 2);
    CHECK(blk.find(Projection::Query) != nullptr);
    CHECK(blk.find(Projection::Value) != nullptr);
    CHECK(blk.find(Projection::Key) == nullptr);
    for (const auto& l : blk.loras) {
      CHECK_FALSE(l.b_trainable);
      CHECK(max_abs_diff(matmul_nt(l.b, l.b), Matrix::identity(4)) < 1e-8);
    }
  }
  bank.add_domain(0, rng);
  bank.add_domain(1, rng);
  CHECK(bank.num_domains() == 2);
  CHECK(bank.specific(1).size() == 3);
  CHECK_THROWS_AS(bank.add_domain(1, rng), ConfigError);
  CHECK_THROWS_AS(bank.specific(7), ConfigError);

  const AdapterStack s = bank.stack_for(1);
  REQUIRE(s.size() == 6);
  CHECK(s[0] == &bank.shared()[0]);
  CHECK(s[3] == &bank.specific(1)[0]);
  const AdapterStack sh = bank.shared_stack();
  REQUIRE(sh.size() == 6);
  CHECK(sh[2] == &bank.shared()[2]);
  CHECK(sh[3] == nullptr);

  cfg.shared_blocks = 6;
  CHECK_THROWS_AS(AdapterBank(cfg, rng), ConfigError);
}

TEST_CASE("snapshot copies shared adapters and their row norms") {
  Rng rng(7);
  AdapterBankConfig cfg;
  cfg.num_layers = 4;
  cfg.shared_blocks = 2;
  cfg.rank = 2;
  cfg.dim = 5;
  AdapterBank bank(cfg, rng);
  bank.shared()[1].loras[0].a = random_normal(5, 2, rng);
  const SharedSnapshot snap = bank.snapshot();
  CHECK(snap.adapters == bank.shared());
  REQUIRE(snap.norms.size() == 2);
  CHECK(snap.norms[1][0] == row_norms(bank.shared()[1].loras[0].a));
  CHECK(snap.norms[0][0] == Vector(5, 0.0));

  bank.shared()[1].loras[0].a.fill(1.0);
  CHECK(snap.adapters[1].loras[0].a != bank.shared()[1].loras[0].a);
}

TEST_CASE("adapter bank serialization round trip") {
  Rng rng(8);
  AdapterBankConfig cfg;
  cfg.num_layers = 3;
  cfg.shared_blocks = 1;
  cfg.rank = 2;
  cfg.dim = 4;
  cfg.trainable_specific_b = true;
  cfg.targets = {Projection::Key};
  AdapterBank bank(cfg, rng);
  bank.add_domain(0, rng);
  bank.add_domain(3, rng);
  bank.specific(3)[1].loras[0].a = random_normal(4, 2, rng);
  std::stringstream buf;
  BinaryWriter w(buf);
  bank.write(w);
  BinaryReader r(buf);
  CHECK(AdapterBank::read(r) == bank);
}

TEST_CASE("projection names") {
  CHECK(parse_projection(to_string(Projection::Query)) == Projection::Query);
  CHECK(parse_projection(to_string(Projection::Key)) == Projection::Key);
  CHECK(parse_projection(to_string(Projection::Value)) == Projection::Value);
  CHECK_THROWS_AS(parse_projection("w"), ConfigError);
}
