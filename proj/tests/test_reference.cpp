#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <random>

#include "bilevel/reference.hpp"
#include "support/oracles.hpp"

using namespace bilevel;
using Catch::Approx;

namespace {

constexpr double kPi = std::numbers::pi;

System make_sys(int nx, int nt, double T, Nonlinearity kind) {
  auto g = build_grid(nx, nt, 1.0, T);
  NonlinearitySpec nl;
  nl.kind = kind;
  return make_system(g, Vec(nx, 1.0), 1e-8, nl);
}

}  // namespace

TEST_CASE("forward march reproduces the exact discrete heat kernel") {
  // a = 1, c = 0, phi = 0, u0 = sin(pi x): each implicit Euler step divides the
  // first sine mode by (1 + ht * lam1) with lam1 the discrete eigenvalue.
  auto sys = make_sys(31, 40, 0.5, Nonlinearity::zero);
  const auto& g = sys.grid();
  Parameter theta(g);
  for (int i = 0; i < g.nx; ++i) theta.u0[i] = std::sin(kPi * g.node(i));

  auto u = solve_forward(sys, theta);
  double s = std::sin(0.5 * kPi * g.hx);
  double lam1 = 4.0 / (g.hx * g.hx) * s * s;
  double err = 0.0;
  for (int n = 0; n <= g.nt; ++n) {
    double factor = std::pow(1.0 + g.ht * lam1, -n);
    for (int i = 0; i < g.nx; ++i)
      err = std::max(err, std::abs(u.v.at(n, i) - factor * std::sin(kPi * g.node(i))));
  }
  REQUIRE(err < 1e-10);

  // initial slice is the supplied u0, untouched
  for (int i = 0; i < g.nx; ++i) REQUIRE(u.v.at(0, i) == theta.u0[i]);
}

TEST_CASE("forward march converges to the analytic heat solution") {
  auto run = [](int nx, int nt) {
    auto sys = make_sys(nx, nt, 0.5, Nonlinearity::zero);
    const auto& g = sys.grid();
    Parameter theta(g);
    for (int i = 0; i < g.nx; ++i) theta.u0[i] = std::sin(kPi * g.node(i));
    auto u = solve_forward(sys, theta);
    double err = 0.0;
    for (int n = 0; n <= g.nt; ++n)
      for (int i = 0; i < g.nx; ++i) {
        double exact = std::exp(-kPi * kPi * g.time(n)) * std::sin(kPi * g.node(i));
        err = std::max(err, std::abs(u.v.at(n, i) - exact));
      }
    return err;
  };
  double coarse = run(31, 40);
  double fine = run(63, 160);
  REQUIRE(coarse < 0.03);
  REQUIRE(fine < coarse / 3.0);  // first order in ht dominates
}

TEST_CASE("newton inner solve copes with the cubic reaction") {
  auto sys = make_sys(15, 12, 0.3, Nonlinearity::monotone_cubic);
  const auto& g = sys.grid();
  Parameter theta(g);
  for (int i = 0; i < g.nx; ++i) theta.u0[i] = 2.0 * std::sin(kPi * g.node(i));
  auto u = solve_forward(sys, theta);
  // solution satisfies the residual rows to the newton tolerance
  auto r = pde_residual(sys, theta, u);
  REQUIRE(sys.sp.residual_norm(r) < 1e-9);
}

TEST_CASE("newton reports breakdown instead of looping") {
  auto sys = make_sys(9, 6, 0.3, Nonlinearity::monotone_cubic);
  const auto& g = sys.grid();
  Parameter theta(g);
  for (int i = 0; i < g.nx; ++i) theta.u0[i] = 1e9 * std::sin(kPi * g.node(i));
  REQUIRE_THROWS_AS(solve_forward(sys, theta), std::runtime_error);

  Parameter huge(g);
  for (int i = 0; i < g.nx; ++i) huge.u0[i] = 1e120;
  REQUIRE_THROWS_AS(solve_forward(sys, huge), std::runtime_error);
}

TEST_CASE("sensitivity solve matches finite differences of the flow") {
  auto sys = make_sys(13, 10, 0.4, Nonlinearity::monotone_cubic);
  const auto& g = sys.grid();
  std::mt19937_64 rng(43);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);

  Parameter theta(g);
  theta.active.phi = theta.active.u0 = true;
  for (int i = 0; i < g.nx; ++i) theta.u0[i] = 0.8 * std::sin(kPi * g.node(i));
  for (auto& v : theta.phi.data) v = 0.2 * unif(rng);

  Parameter xi(g);
  xi.active = theta.active;
  xi.a = Vec(g.nx, 0.0);
  for (auto& v : xi.phi.data) v = unif(rng);
  for (auto& v : xi.u0) v = unif(rng);

  auto u = solve_forward(sys, theta);
  auto p = solve_sensitivity(sys, theta, u, xi);

  const double eps = 1e-4;
  Parameter tp = theta, tm = theta;
  param_axpy(eps, xi, tp);
  param_axpy(-eps, xi, tm);
  auto up = solve_forward(sys, tp);
  auto um = solve_forward(sys, tm);
  StateField fd(g);
  for (std::size_t i = 0; i < fd.v.data.size(); ++i)
    fd.v.data[i] = (up.v.data[i] - um.v.data[i]) / (2.0 * eps) - p.v.data[i];
  REQUIRE(sys.sp.norm_calU(fd) < 1e-5 * sys.sp.norm_calU(p));

  // initial slice of the sensitivity is the u0 direction
  for (int i = 0; i < g.nx; ++i) REQUIRE(p.v.at(0, i) == Approx(xi.u0[i]).margin(1e-14));
}

TEST_CASE("sensitivity is exactly linear for the linear model") {
  auto sys = make_sys(9, 8, 0.3, Nonlinearity::zero);
  const auto& g = sys.grid();
  std::mt19937_64 rng(47);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);

  Parameter theta(g);
  theta.active.phi = theta.active.u0 = true;
  for (int i = 0; i < g.nx; ++i) theta.u0[i] = std::sin(kPi * g.node(i));
  auto u = solve_forward(sys, theta);

  Parameter xi(g);
  xi.active = theta.active;
  xi.a = Vec(g.nx, 0.0);
  for (auto& v : xi.phi.data) v = unif(rng);
  for (auto& v : xi.u0) v = unif(rng);

  Parameter xi2 = xi;
  for (auto& v : xi2.phi.data) v *= 2.0;
  for (auto& v : xi2.u0) v *= 2.0;

  auto p1 = solve_sensitivity(sys, theta, u, xi);
  auto p2 = solve_sensitivity(sys, theta, u, xi2);
  for (std::size_t i = 0; i < p1.v.data.size(); ++i)
    REQUIRE(p2.v.data[i] == Approx(2.0 * p1.v.data[i]).margin(1e-13));

  // for the linear model the finite difference is exact
  auto tp = theta;
  param_axpy(1.0, xi, tp);
  auto up = solve_forward(sys, tp);
  for (std::size_t i = 0; i < p1.v.data.size(); ++i)
    REQUIRE(up.v.data[i] - u.v.data[i] == Approx(p1.v.data[i]).margin(1e-10));
}
