#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <random>

#include "bilevel/observe.hpp"
#include "support/oracles.hpp"

using namespace bilevel;
using Catch::Approx;

namespace {

Spaces make_sp(int nx, int nt, double length, double T) {
  auto g = build_grid(nx, nt, length, T);
  return Spaces(g, assemble_operators(g, Vec(nx, 1.0), 1e-8));
}

StateField ones(const SpaceTimeGrid& g) {
  StateField u(g);
  for (auto& v : u.v.data) v = 1.0;
  return u;
}

}  // namespace

TEST_CASE("full observation norm on the constant field") {
  auto sp = make_sp(19, 8, 1.0, 0.4);
  auto g = sp.grid();
  auto spec = make_full_spec();
  auto y = observe(sp, spec, ones(g));
  // ht sum over nt+1 slices of the mass-weighted norm of 1
  double expected = std::sqrt((0.4 + g.ht) * g.nx * g.hx);
  REQUIRE(norm_Y(sp, spec, y.values) == Approx(expected).epsilon(1e-12));
}

TEST_CASE("snapshot observation selects slices, no time weight") {
  auto sp = make_sp(9, 10, 1.0, 1.0);
  auto g = sp.grid();
  auto spec = make_snapshot_spec(g, {0.2, 0.5, 1.0});
  REQUIRE(spec.snap_slices == std::vector<int>{2, 5, 10});

  std::mt19937_64 rng(67);
  auto u = oracles::random_state(g, rng);
  auto y = observe(sp, spec, u);
  REQUIRE(y.values.rows == 3);
  for (int s = 0; s < 3; ++s)
    for (int i = 0; i < g.nx; ++i)
      REQUIRE(y.values.at(s, i) == u.v.at(spec.snap_slices[s], i));

  double expected2 = 0.0;
  for (int s = 0; s < 3; ++s) expected2 += sp.inner_H(y.values.row(s), y.values.row(s));
  REQUIRE(norm_Y(sp, spec, y.values) == Approx(std::sqrt(expected2)).epsilon(1e-12));

  REQUIRE_THROWS_AS(make_snapshot_spec(g, {0.25}), std::invalid_argument);   // off-grid
  REQUIRE_THROWS_AS(make_snapshot_spec(g, {0.5, 0.2}), std::invalid_argument);
  REQUIRE_THROWS_AS(make_snapshot_spec(g, {}), std::invalid_argument);
  REQUIRE_THROWS_AS(make_snapshot_spec(g, {1.5}), std::invalid_argument);
}

TEST_CASE("window averages are exact means") {
  auto sp = make_sp(19, 6, 1.0, 0.3);
  auto g = sp.grid();
  auto spec = make_average_spec(g, {{0.0, 0.5}, {0.5, 1.0}});

  // of the constant-1 field every window mean is 1
  auto y = observe(sp, spec, ones(g));
  for (auto v : y.values.data) REQUIRE(v == Approx(1.0).epsilon(1e-12));

  // of u(x) = x the window mean is the discrete node average
  StateField ux(g);
  for (int n = 0; n <= g.nt; ++n)
    for (int i = 0; i < g.nx; ++i) ux.v.at(n, i) = g.node(i);
  auto yx = observe(sp, spec, ux);
  double s = 0.0;
  int cnt = 0;
  for (int i = 0; i < g.nx; ++i)
    if (g.node(i) <= 0.5) {
      s += g.node(i);
      ++cnt;
    }
  REQUIRE(yx.values.at(0, 0) == Approx(s / cnt).epsilon(1e-12));

  REQUIRE_THROWS_AS(make_average_spec(g, {{0.7, 0.2}}), std::invalid_argument);
  REQUIRE_THROWS_AS(make_average_spec(g, {{-0.1, 0.5}}), std::invalid_argument);
  REQUIRE_THROWS_AS(make_average_spec(g, {}), std::invalid_argument);
  // window narrower than the mesh captures no node
  auto sp3 = make_sp(3, 4, 1.0, 1.0);
  REQUIRE_THROWS_AS(make_average_spec(sp3.grid(), {{0.05, 0.1}}), std::invalid_argument);
}

TEST_CASE("observation adjoints satisfy the duality identity") {
  auto sp = make_sp(13, 9, 1.0, 0.5);
  auto g = sp.grid();
  std::mt19937_64 rng(71);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);

  std::vector<ObservationSpec> specs;
  specs.push_back(make_full_spec());
  specs.push_back(make_snapshot_spec(g, {g.ht, 4 * g.ht, 9 * g.ht}));
  specs.push_back(make_average_spec(g, {{0.0, 0.4}, {0.3, 0.9}}));

  for (const auto& spec : specs) {
    for (int trial = 0; trial < 4; ++trial) {
      auto w = oracles::random_state(g, rng);
      Array2 r(spec.data_rows(g), spec.data_cols(g));
      for (auto& v : r.data) v = unif(rng);
      double lhs = inner_Y(sp, spec, r, observe(sp, spec, w).values);
      double rhs = sp.inner_calU(observe_adjoint(sp, spec, r), w);
      REQUIRE(lhs == Approx(rhs).epsilon(1e-10));
    }
  }

  Array2 bad(2, 2);
  REQUIRE_THROWS_AS(observe_adjoint(sp, specs[0], bad), std::invalid_argument);
  REQUIRE_THROWS_AS(inner_Y(sp, specs[0], bad, bad), std::invalid_argument);
}

TEST_CASE("noise realizations hit the requested level exactly") {
  auto sp = make_sp(11, 7, 1.0, 0.4);
  auto g = sp.grid();
  std::mt19937_64 rng(73);
  auto u = oracles::random_state(g, rng);
  auto spec = make_snapshot_spec(g, {2 * g.ht, 6 * g.ht});
  auto clean = observe(sp, spec, u);

  for (double delta : {1e-1, 1e-3}) {
    auto noisy = add_noise(sp, spec, clean, delta, 99);
    auto diff = data_diff(noisy.values, clean.values);
    REQUIRE(norm_Y(sp, spec, diff) == Approx(delta).epsilon(1e-12));
    REQUIRE(noisy.delta == delta);

    // deterministic in the seed
    auto again = add_noise(sp, spec, clean, delta, 99);
    for (std::size_t i = 0; i < noisy.values.data.size(); ++i)
      REQUIRE(again.values.data[i] == noisy.values.data[i]);
    auto other = add_noise(sp, spec, clean, delta, 100);
    bool same = true;
    for (std::size_t i = 0; i < other.values.data.size(); ++i)
      same = same && other.values.data[i] == noisy.values.data[i];
    REQUIRE_FALSE(same);
  }

  auto zero = add_noise(sp, spec, clean, 0.0, 5);
  for (std::size_t i = 0; i < zero.values.data.size(); ++i)
    REQUIRE(zero.values.data[i] == clean.values.data[i]);
  REQUIRE_THROWS_AS(add_noise(sp, spec, clean, -1.0, 5), std::invalid_argument);
}
