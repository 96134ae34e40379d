#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bilevel/grid.hpp"
#include "bilevel/operators.hpp"

namespace bilevel {

/// Dense row-major (rows x cols) array of doubles.
struct Array2 {
  int rows = 0;
  int cols = 0;
  Vec data;

  Array2() = default;
  Array2(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}

  std::span<double> row(int i) { return {data.data() + static_cast<std::size_t>(i) * cols, static_cast<std::size_t>(cols)}; }
  std::span<const double> row(int i) const { return {data.data() + static_cast<std::size_t>(i) * cols, static_cast<std::size_t>(cols)}; }
  double& at(int i, int j) { return data[static_cast<std::size_t>(i) * cols + j]; }
  double at(int i, int j) const { return data[static_cast<std::size_t>(i) * cols + j]; }

  bool same_shape(const Array2& o) const { return rows == o.rows && cols == o.cols; }
};

inline void check_shape(const Array2& x, int rows, int cols, const std::string& who) {
  if (x.rows != rows || x.cols != cols)
    throw std::invalid_argument(who + ": expected " + std::to_string(rows) + "x" + std::to_string(cols) +
                                " array, got " + std::to_string(x.rows) + "x" + std::to_string(x.cols));
}

/// Space-time state trajectory: nt+1 slices of nx nodal values.
struct StateField {
  SpaceTimeGrid grid;
  Array2 v;  // (nt+1) x nx

  StateField() = default;
  explicit StateField(const SpaceTimeGrid& g) : grid(g), v(g.nt + 1, g.nx) {}

  std::span<double> slice(int n) { return v.row(n); }
  std::span<const double> slice(int n) const { return v.row(n); }
};

inline StateField zero_state(const SpaceTimeGrid& g) { return StateField(g); }

/// Residual of the flow map: pde_part holds nt assembled dual slices
/// (rows align with the forward difference from slice n to n+1),
/// init_part holds the nodal values of u0 - u|_{t=0}.
struct ResidualPair {
  Array2 pde;  // nt x nx, assembled functionals
  Vec init;    // nx

  ResidualPair() = default;
  explicit ResidualPair(const SpaceTimeGrid& g) : pde(g.nt, g.nx), init(g.nx, 0.0) {}
};

/// Generic functional on discrete trajectories: one assembled dual vector per
/// slice, acting through the plain Euclidean pairing sum_n l^n . h^n.
struct DualField {
  Array2 v;  // (nt+1) x nx

  DualField() = default;
  explicit DualField(const SpaceTimeGrid& g) : v(g.nt + 1, g.nx) {}
};

struct ActiveSet {
  bool a = false;
  bool c = false;
  bool phi = true;
  bool u0 = true;

  bool any() const { return a || c || phi || u0; }
  bool operator==(const ActiveSet&) const = default;
};

/// Unknown tuple theta = (a, c, phi, u0). All components are always stored;
/// the active set marks which ones the upper-level iteration may move.
/// phi rows align with the residual rows: row n sources the step to t_{n+1}.
struct Parameter {
  Vec a;       // nx
  Vec c;       // nx
  Array2 phi;  // nt x nx
  Vec u0;      // nx
  ActiveSet active;

  Parameter() = default;
  explicit Parameter(const SpaceTimeGrid& g)
      : a(g.nx, 1.0), c(g.nx, 0.0), phi(g.nt, g.nx), u0(g.nx, 0.0) {}
};

inline void check_conforming(const Parameter& p, const SpaceTimeGrid& g, const std::string& who) {
  if (static_cast<int>(p.a.size()) != g.nx || static_cast<int>(p.c.size()) != g.nx ||
      static_cast<int>(p.u0.size()) != g.nx || p.phi.rows != g.nt || p.phi.cols != g.nx)
    throw std::invalid_argument(who + ": parameter shapes do not match the grid");
}

/// y += alpha * x on the components active in x. Inactive components of x are
/// required to be untouched carriers (they are ignored).
inline void param_axpy(double alpha, const Parameter& x, Parameter& y) {
  if (!(x.active == y.active))
    throw std::invalid_argument("param_axpy: active sets differ");
  if (x.active.a)
    for (std::size_t i = 0; i < y.a.size(); ++i) y.a[i] += alpha * x.a[i];
  if (x.active.c)
    for (std::size_t i = 0; i < y.c.size(); ++i) y.c[i] += alpha * x.c[i];
  if (x.active.phi)
    for (std::size_t i = 0; i < y.phi.data.size(); ++i) y.phi.data[i] += alpha * x.phi.data[i];
  if (x.active.u0)
    for (std::size_t i = 0; i < y.u0.size(); ++i) y.u0[i] += alpha * x.u0[i];
}

/// Difference restricted to active components (inactive slots zeroed).
inline Parameter param_diff_active(const Parameter& x, const Parameter& y) {
  if (!(x.active == y.active))
    throw std::invalid_argument("param_diff_active: active sets differ");
  Parameter d = x;
  for (auto& t : d.a) t = 0.0;
  for (auto& t : d.c) t = 0.0;
  for (auto& t : d.phi.data) t = 0.0;
  for (auto& t : d.u0) t = 0.0;
  if (x.active.a)
    for (std::size_t i = 0; i < d.a.size(); ++i) d.a[i] = x.a[i] - y.a[i];
  if (x.active.c)
    for (std::size_t i = 0; i < d.c.size(); ++i) d.c[i] = x.c[i] - y.c[i];
  if (x.active.phi)
    for (std::size_t i = 0; i < d.phi.data.size(); ++i) d.phi.data[i] = x.phi.data[i] - y.phi.data[i];
  if (x.active.u0)
    for (std::size_t i = 0; i < d.u0.size(); ++i) d.u0[i] = x.u0[i] - y.u0[i];
  return d;
}

/// Dual vector against Parameter directions (same shapes, assembled slots).
struct XDual {
  Vec a;
  Vec c;
  Array2 phi;
  Vec u0;
  ActiveSet active;

  XDual() = default;
  explicit XDual(const SpaceTimeGrid& g)
      : a(g.nx, 0.0), c(g.nx, 0.0), phi(g.nt, g.nx), u0(g.nx, 0.0) {}
};

}  // namespace bilevel
