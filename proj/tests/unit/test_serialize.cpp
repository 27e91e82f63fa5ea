#include <doctest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "conec/errors.hpp"
#include "conec/optim.hpp"
#include "conec/serialize.hpp"

using namespace conec;

TEST_CASE("binary round trip preserves every bit") {
  std::stringstream buf;
  BinaryWriter w(buf);
  Rng rng(5);
  const Matrix m = random_normal(3, 7, rng);
  const Vector v{0.1, -0.0, std::numeric_limits<double>::denorm_min(), 1e308};
  w.magic("TEST1");
  w.u64(0xdeadbeefcafef00dULL);
  w.f64(-1.0 / 3.0);
  w.boolean(true);
  w.string("hello, world");
  w.vector(v);
  w.matrix(m);
  w.matrix(Matrix());

  BinaryReader r(buf);
  r.expect_magic("TEST1");
  CHECK(r.u64() == 0xdeadbeefcafef00dULL);
  CHECK(r.f64() == -1.0 / 3.0);
  CHECK(r.boolean());
  CHECK(r.string() == "hello, world");
  const Vector v2 = r.vector();
  REQUIRE(v2.size() == v.size());
  CHECK(std::signbit(v2[1]));
  CHECK(v2 == v);
  CHECK(r.matrix() == m);
  CHECK(r.matrix().empty());
}

TEST_CASE("bytes are little-endian") {
  std::stringstream buf;
  BinaryWriter w(buf);
  w.u64(0x0102030405060708ULL);
  const std::string s = buf.str();
  REQUIRE(s.size() == 8);
  CHECK(static_cast<unsigned char>(s[0]) == 0x08);
  CHECK(static_cast<unsigned char>(s[7]) == 0x01);
}

TEST_CASE("decoding errors") {
  {
    std::stringstream buf;
    BinaryWriter(buf).magic("AAAA");
    BinaryReader r(buf);
    CHECK_THROWS_AS(r.expect_magic("BBBB"), FormatError);
  }
  {
    std::stringstream buf("abc");
    BinaryReader r(buf);
    CHECK_THROWS_AS(r.u64(), FormatError);
  }
  {
    std::stringstream buf;
    BinaryWriter(buf).u64(std::numeric_limits<std::uint64_t>::max());
    BinaryReader r(buf);
    CHECK_THROWS_AS(r.vector(), FormatError);
  }
}

TEST_CASE("sgd step examples") {
  SUBCASE("plain step") {
    Vector p{0.0, 0.0}, g{1.0, 2.0}, v{0.0, 0.0};
    sgd_step(p, g, v, 1.0, 0.0);
    CHECK(p == Vector{-1.0, -2.0});
  }
  SUBCASE("zero gradient leaves parameters unchanged") {
    Vector p{0.3, -4.0}, g{0.0, 0.0}, v{0.0, 0.0};
    sgd_step(p, g, v, 0.5, 0.9);
    CHECK(p == Vector{0.3, -4.0});
  }
  SUBCASE("momentum accumulates") {
    Vector p{0.0}, g{1.0}, v{0.0};
    sgd_step(p, g, v, 0.1, 0.5);
    sgd_step(p, g, v, 0.1, 0.5);
    // v: 1 then 1.5; p: -0.1 then -0.25
    CHECK(p[0] == doctest::Approx(-0.25).epsilon(1e-15));
    CHECK(v[0] == doctest::Approx(1.5).epsilon(1e-15));
  }
  SUBCASE("shape mismatch") {
    Vector p{0.0, 1.0}, g{1.0}, v{0.0, 0.0};
    CHECK_THROWS_AS(sgd_step(p, g, v, 0.1, 0.0), InvalidShape);
  }
}

TEST_CASE("sgd on a quadratic bowl approaches the optimum monotonically") {
  // f(p) = 0.5 sum_i c_i (p_i - t_i)^2; gradient descent without momentum is
  // stable and monotone for lr < 1 / max(c).
  const Vector c{1.0, 4.0, 9.0};
  const Vector t{1.0, -2.0, 0.5};
  const double lr = 0.9 / 9.0;
  Vector p{5.0, 5.0, -5.0}, v(3, 0.0);
  double prev = std::numeric_limits<double>::infinity();
  for (int step = 0; step < 100; ++step) {
    Vector g(3);
    for (int i = 0; i < 3; ++i) g[i] = c[i] * (p[i] - t[i]);
    sgd_step(p, g, v, lr, 0.0);
    double dist = 0.0;
    for (int i = 0; i < 3; ++i) dist += (p[i] - t[i]) * (p[i] - t[i]);
    dist = std::sqrt(dist);
    REQUIRE(dist < prev);
    prev = dist;
  }
  // Closed form: each coordinate contracts by |1 - lr c_i| per step.
  double expect = 0.0;
  const Vector p0{5.0, 5.0, -5.0};
  for (int i = 0; i < 3; ++i) {
    const double e = (p0[i] - t[i]) * std::pow(1.0 - lr * c[i], 100);
    expect += e * e;
  }
  CHECK(prev == doctest::Approx(std::sqrt(expect)).epsilon(1e-9));
}

TEST_CASE("momentum optimizer keeps one velocity per slot") {
  MomentumSgd opt(0.9);
  Vector a{0.0}, b{0.0};
  const Vector g{1.0};
  opt.step(0, a, g, 0.1);
  opt.step(0, a, g, 0.1);
  opt.step(1, b, g, 0.1);
  CHECK(a[0] == doctest::Approx(-0.1 - 0.19));
  CHECK(b[0] == doctest::Approx(-0.1));
  Vector wrong{0.0, 0.0};
  CHECK_THROWS_AS(opt.step(0, wrong, Vector{1.0, 1.0}, 0.1), InvalidShape);
}
