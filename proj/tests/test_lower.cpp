#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <random>

#include "bilevel/lower.hpp"
#include "bilevel/reference.hpp"
#include "support/oracles.hpp"

using namespace bilevel;
using Catch::Approx;

namespace {

constexpr double kPi = std::numbers::pi;

struct Setup {
  System sys;
  Parameter theta;
  StateField u_star;
  StateField u_init;
};

Setup linear_setup(int nx, int nt) {
  auto g = build_grid(nx, nt, 1.0, 0.5);
  Setup s{make_system(g, Vec(nx, 1.0), 1e-8, {}), Parameter(g), StateField(g), StateField(g)};
  for (int i = 0; i < g.nx; ++i) s.theta.u0[i] = std::sin(kPi * g.node(i));
  s.u_star = solve_forward(s.sys, s.theta);
  // start from the time-constant lift of the initial profile
  for (int n = 0; n <= g.nt; ++n)
    for (int i = 0; i < g.nx; ++i) s.u_init.v.at(n, i) = s.theta.u0[i];
  return s;
}

}  // namespace

TEST_CASE("inner iteration contracts residual and error on the linear model") {
  auto s = linear_setup(15, 12);
  LowerConfig cfg;
  // 30 steps keep the final residual near 1e-11 relative; longer runs park it
  // on the rounding floor where monotonicity checks see pure noise
  cfg.K = 30;
  auto rep = lower_landweber(s.sys, s.theta, s.u_init, cfg, &s.u_star);

  REQUIRE(rep.steps == 30);
  REQUIRE(rep.residual_history.size() == 31);
  REQUIRE(rep.error_history.size() == 31);
  REQUIRE(rep.error_history_V.size() == 31);

  REQUIRE(check_residual_monotone(rep.residual_history).empty());
  REQUIRE(check_fejer(rep.error_history_V).empty());
  REQUIRE(rep.residual_history.back() < 0.2 * rep.residual_history.front());
  REQUIRE(rep.eps_estimate == Approx(cfg.C_coe * rep.residual_history.back()));
  REQUIRE(rep.mu_used > 0.0);
  REQUIRE(cfg.resolved_mu == rep.mu_used);
}

TEST_CASE("epsilon target halts the iteration early") {
  auto s = linear_setup(11, 10);
  LowerConfig probe;
  probe.K = 200;
  auto full = lower_landweber(s.sys, s.theta, s.u_init, probe, nullptr);
  double mid = full.residual_history[40];

  LowerConfig cfg;
  cfg.mode = LowerStopMode::epsilon_target;
  cfg.K = 200;
  cfg.C_coe = 2.0;
  cfg.eps_target = 2.0 * mid;
  auto rep = lower_landweber(s.sys, s.theta, s.u_init, cfg, nullptr);
  REQUIRE(rep.steps <= 41);
  REQUIRE(rep.eps_estimate <= cfg.eps_target);

  // unreachable target runs to the cap
  LowerConfig hard = cfg;
  hard.resolved_mu = 0.0;
  hard.eps_target = 0.0;
  hard.K = 10;
  auto capped = lower_landweber(s.sys, s.theta, s.u_init, hard, nullptr);
  REQUIRE(capped.steps == 10);
}

TEST_CASE("oversized steps are reported as blow-up") {
  auto s = linear_setup(9, 8);
  LowerConfig cfg;
  cfg.auto_scale = true;
  cfg.step_scale = 8.0;  // 8 * 1.5 / |F'|^2 leaves the stability interval
  cfg.K = 400;
  REQUIRE_THROWS_AS(lower_landweber(s.sys, s.theta, s.u_init, cfg, nullptr), std::runtime_error);
}

TEST_CASE("scheduled step counts follow the configured growth") {
  LowerConfig cfg;
  cfg.q = 1.1;
  cfg.gamma0 = 1.0;
  cfg.rate_const = 1.0;
  cfg.alpha = 1.0;
  cfg.K = 77;
  REQUIRE(lower_stop_index(0, 0.1, cfg) == 100);
  REQUIRE(lower_stop_index(2, 0.1, cfg) == 147);  // ceil((1.21/0.1)^2)
  REQUIRE(lower_stop_index(3, 0.0, cfg) == 77);   // clean data falls back to the cap
  REQUIRE_THROWS_AS(lower_stop_index(0, -0.1, cfg), std::invalid_argument);
  REQUIRE_THROWS_AS(lower_stop_index(-1, 0.1, cfg), std::invalid_argument);
  // schedule never overflows int
  REQUIRE(lower_stop_index(500, 1e-12, cfg) > 0);
}

TEST_CASE("step resolution caches and scales") {
  auto s = linear_setup(9, 6);
  LowerConfig c1;
  c1.power_iters = 30;
  double mu1 = resolve_lower_step(s.sys, s.theta, s.u_init, c1);
  REQUIRE(mu1 > 0.0);
  REQUIRE(c1.resolved_mu == mu1);
  // cached value wins over a changed scale
  c1.step_scale = 100.0;
  REQUIRE(resolve_lower_step(s.sys, s.theta, s.u_init, c1) == mu1);

  LowerConfig c2 = c1;
  c2.resolved_mu = 0.0;
  c2.step_scale = 0.5;
  double mu2 = resolve_lower_step(s.sys, s.theta, s.u_init, c2);
  REQUIRE(mu2 == Approx(0.5 * mu1).epsilon(1e-12));

  LowerConfig c3;
  c3.auto_scale = false;
  c3.step_scale = 0.125;
  REQUIRE(resolve_lower_step(s.sys, s.theta, s.u_init, c3) == 0.125);
  LowerConfig c4;
  c4.auto_scale = false;
  c4.step_scale = 0.0;
  REQUIRE_THROWS_AS(resolve_lower_step(s.sys, s.theta, s.u_init, c4), std::invalid_argument);
}
