#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <random>

#include "bilevel/operators.hpp"
#include "support/oracles.hpp"

using namespace bilevel;
using Catch::Approx;

TEST_CASE("grid spacing and coordinates") {
  auto g = build_grid(3, 4, 1.0, 1.0);
  REQUIRE(g.hx == Approx(0.25).margin(1e-15));
  REQUIRE(g.ht == Approx(0.25).margin(1e-15));
  REQUIRE(g.node(0) == Approx(0.25));
  REQUIRE(g.node(2) == Approx(0.75));
  REQUIRE(g.time(0) == 0.0);
  REQUIRE(g.time(4) == Approx(1.0));

  REQUIRE_THROWS_AS(build_grid(1, 4, 1.0, 1.0), std::invalid_argument);
  REQUIRE_THROWS_AS(build_grid(3, 0, 1.0, 1.0), std::invalid_argument);
  REQUIRE_THROWS_AS(build_grid(3, 4, -1.0, 1.0), std::invalid_argument);
  REQUIRE_THROWS_AS(build_grid(3, 4, 1.0, 0.0), std::invalid_argument);
}

TEST_CASE("stiffness entries, unit coefficient") {
  auto g = build_grid(3, 4, 1.0, 1.0);
  auto K = assemble_stiffness(g, Vec(3, 1.0));
  for (int i = 0; i < 3; ++i) REQUIRE(K.diag[i] == Approx(8.0).margin(1e-13));
  for (int i = 0; i < 2; ++i) REQUIRE(K.off[i] == Approx(-4.0).margin(1e-13));
}

TEST_CASE("stiffness entries, variable coefficient") {
  // hx = 0.25, a = (1,2,3): edge values 1, 1.5, 2.5, 3
  auto g = build_grid(3, 4, 1.0, 1.0);
  auto K = assemble_stiffness(g, Vec{1.0, 2.0, 3.0});
  REQUIRE(K.diag[0] == Approx(10.0).margin(1e-13));
  REQUIRE(K.diag[1] == Approx(16.0).margin(1e-13));
  REQUIRE(K.diag[2] == Approx(22.0).margin(1e-13));
  REQUIRE(K.off[0] == Approx(-6.0).margin(1e-13));
  REQUIRE(K.off[1] == Approx(-10.0).margin(1e-13));

  REQUIRE_THROWS_AS(assemble_stiffness(g, Vec(5, 1.0)), std::invalid_argument);
}

TEST_CASE("lumped mass") {
  auto g = build_grid(7, 4, 1.0, 1.0);
  auto m = assemble_mass(g);
  REQUIRE(m.size() == 7);
  for (double v : m) REQUIRE(v == Approx(g.hx).margin(1e-16));
}

TEST_CASE("unit stiffness eigenvalues match the sine-mode law") {
  // eigenvalues of M^{-1} K are (4/hx^2) sin^2(k pi hx / 2), k = 1..nx
  const int nx = 7;
  auto g = build_grid(nx, 4, 1.0, 1.0);
  auto K = assemble_stiffness(g, Vec(nx, 1.0));
  auto dense = oracles::dense_from_tridiag(K);
  auto eigs = oracles::jacobi_eigenvalues(dense);
  REQUIRE(static_cast<int>(eigs.size()) == nx);
  for (int k = 1; k <= nx; ++k) {
    double s = std::sin(0.5 * k * std::numbers::pi * g.hx);
    double expected = (4.0 / (g.hx * g.hx)) * s * s;
    REQUIRE(eigs[k - 1] / g.hx == Approx(expected).epsilon(1e-9));
  }
}

TEST_CASE("tridiagonal solve agrees with a dense factorization") {
  const int n = 17;
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  SymTridiag A;
  A.diag.resize(n);
  A.off.resize(n - 1);
  for (int i = 0; i < n; ++i) A.diag[i] = 4.0 + unif(rng);
  for (int i = 0; i + 1 < n; ++i) A.off[i] = -1.0 + 0.5 * unif(rng);
  Vec b(n);
  for (auto& v : b) v = unif(rng) - 0.5;

  auto x = A.solve(b);
  auto x_ref = oracles::dense_solve(oracles::dense_from_tridiag(A), b);
  for (int i = 0; i < n; ++i) REQUIRE(x[i] == Approx(x_ref[i]).margin(1e-11));

  // apply then solve is the identity
  auto y = A.solve(A.apply(b));
  for (int i = 0; i < n; ++i) REQUIRE(y[i] == Approx(b[i]).margin(1e-12));
}

TEST_CASE("tridiagonal solve reports singular pivots") {
  SymTridiag A;
  A.diag = {1.0, 1.0};
  A.off = {1.0};
  Vec b{1.0, 2.0};
  REQUIRE_THROWS_AS(A.solve(b), std::runtime_error);
  Vec wrong(3, 0.0);
  Vec x(2);
  REQUIRE_THROWS_AS(A.solve(std::span<const double>(wrong), std::span<double>(x)),
                    std::invalid_argument);
}

TEST_CASE("tridiagonal sum") {
  SymTridiag A{{1.0, 2.0}, {3.0}};
  SymTridiag B{{10.0, 20.0}, {30.0}};
  auto C = A + B;
  REQUIRE(C.diag[0] == Approx(11.0));
  REQUIRE(C.diag[1] == Approx(22.0));
  REQUIRE(C.off[0] == Approx(33.0));
  SymTridiag D{{1.0}, {}};
  REQUIRE_THROWS_AS(A + D, std::invalid_argument);
}

TEST_CASE("operator set enforces the diffusion floor") {
  auto g = build_grid(5, 4, 1.0, 1.0);
  REQUIRE_THROWS_AS(assemble_operators(g, Vec{1.0, 1.0, 1e-12, 1.0, 1.0}, 1e-8),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(assemble_operators(g, Vec(5, 1.0), 0.0), std::invalid_argument);

  auto ops = assemble_operators(g, Vec(5, 2.0), 1e-8);
  // riesz operator = mass + unit stiffness, independent of a
  for (int i = 0; i < 5; ++i)
    REQUIRE(ops.riesz_DU.diag[i] == Approx(g.hx + 2.0 / g.hx).margin(1e-13));
  for (int i = 0; i < 4; ++i) REQUIRE(ops.riesz_DU.off[i] == Approx(-1.0 / g.hx).margin(1e-13));
  REQUIRE(ops.stiffness.diag[0] == Approx(4.0 / g.hx).margin(1e-12));
}

TEST_CASE("dot and axpy") {
  Vec x{1.0, 2.0, 3.0};
  Vec y{4.0, 5.0, 6.0};
  REQUIRE(dot(x, y) == Approx(32.0));
  axpy(2.0, x, y);
  REQUIRE(y[0] == Approx(6.0));
  REQUIRE(y[2] == Approx(12.0));
}
