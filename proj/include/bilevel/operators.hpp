#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bilevel/grid.hpp"

namespace bilevel {

using Vec = std::vector<double>;

inline double dot(std::span<const double> x, std::span<const double> y) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

/// Symmetric tridiagonal matrix: diag has n entries, off has n-1 (sub = super).
struct SymTridiag {
  Vec diag;
  Vec off;

  int n() const { return static_cast<int>(diag.size()); }

  void apply(std::span<const double> x, std::span<double> y) const {
    const int m = n();
    for (int i = 0; i < m; ++i) {
      double s = diag[i] * x[i];
      if (i > 0) s += off[i - 1] * x[i - 1];
      if (i + 1 < m) s += off[i] * x[i + 1];
      y[i] = s;
    }
  }

  Vec apply(std::span<const double> x) const {
    Vec y(x.size());
    apply(x, y);
    return y;
  }

  /// Thomas algorithm; valid without pivoting for the SPD systems used here.
  void solve(std::span<const double> b, std::span<double> x) const {
    const int m = n();
    if (static_cast<int>(b.size()) != m || static_cast<int>(x.size()) != m)
      throw std::invalid_argument("SymTridiag::solve: size mismatch");
    thread_local Vec c, d;
    c.assign(m, 0.0);
    d.assign(m, 0.0);
    double piv = diag[0];
    if (piv == 0.0) throw std::runtime_error("SymTridiag::solve: zero pivot at row 0");
    c[0] = (m > 1) ? off[0] / piv : 0.0;
    d[0] = b[0] / piv;
    for (int i = 1; i < m; ++i) {
      piv = diag[i] - off[i - 1] * c[i - 1];
      if (piv == 0.0)
        throw std::runtime_error("SymTridiag::solve: zero pivot at row " + std::to_string(i));
      if (i + 1 < m) c[i] = off[i] / piv;
      d[i] = (b[i] - off[i - 1] * d[i - 1]) / piv;
    }
    x[m - 1] = d[m - 1];
    for (int i = m - 2; i >= 0; --i) x[i] = d[i] - c[i] * x[i + 1];
  }

  Vec solve(std::span<const double> b) const {
    Vec x(b.size());
    solve(b, x);
    return x;
  }
};

inline SymTridiag operator+(const SymTridiag& A, const SymTridiag& B) {
  if (A.n() != B.n()) throw std::invalid_argument("SymTridiag operator+: size mismatch");
  SymTridiag C = A;
  for (int i = 0; i < B.n(); ++i) C.diag[i] += B.diag[i];
  for (std::size_t i = 0; i < B.off.size(); ++i) C.off[i] += B.off[i];
  return C;
}

/// Second-order finite-difference stiffness for -d/dx(a du/dx) with Dirichlet BC.
/// Edge coefficients are midpoint averages of nodal a, replicated at the boundary.
inline SymTridiag assemble_stiffness(const SpaceTimeGrid& g, const Vec& a) {
  if (static_cast<int>(a.size()) != g.nx)
    throw std::invalid_argument("assemble_stiffness: a has " + std::to_string(a.size()) +
                                " entries, grid expects " + std::to_string(g.nx));
  const int n = g.nx;
  // edge e = i connects node i-1 and node i; edges 0 and n touch the boundary.
  Vec ae(n + 1);
  ae[0] = a[0];
  ae[n] = a[n - 1];
  for (int e = 1; e < n; ++e) ae[e] = 0.5 * (a[e - 1] + a[e]);
  SymTridiag K;
  K.diag.resize(n);
  K.off.resize(n - 1);
  for (int i = 0; i < n; ++i) K.diag[i] = (ae[i] + ae[i + 1]) / g.hx;
  for (int i = 0; i + 1 < n; ++i) K.off[i] = -ae[i + 1] / g.hx;
  return K;
}

/// Lumped diagonal mass: entries hx (trapezoid rule with Dirichlet boundary).
inline Vec assemble_mass(const SpaceTimeGrid& g) { return Vec(g.nx, g.hx); }

/// Discrete spatial operators bound to one grid.
/// riesz_DU = mass + unit-coefficient stiffness (discrete Id - Laplacian); it is
/// fixed independently of the diffusion unknown.
struct DiscreteOperators {
  SpaceTimeGrid grid;
  Vec mass;                // diagonal entries
  SymTridiag stiffness;    // for the a this set was assembled with
  SymTridiag stiffness_1;  // unit coefficient
  SymTridiag riesz_DU;     // mass + stiffness_1

  Vec apply_mass(std::span<const double> x) const {
    Vec y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = mass[i] * x[i];
    return y;
  }
  Vec solve_mass(std::span<const double> x) const {
    Vec y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] / mass[i];
    return y;
  }
};

inline DiscreteOperators assemble_operators(const SpaceTimeGrid& g, const Vec& a, double a_min) {
  if (!(a_min > 0.0))
    throw std::invalid_argument("assemble_operators: a_min must be positive");
  for (int i = 0; i < static_cast<int>(a.size()); ++i)
    if (!(a[i] >= a_min))
      throw std::invalid_argument("assemble_operators: a[" + std::to_string(i) +
                                  "] = " + std::to_string(a[i]) +
                                  " violates a >= a_min = " + std::to_string(a_min));
  DiscreteOperators ops;
  ops.grid = g;
  ops.mass = assemble_mass(g);
  ops.stiffness = assemble_stiffness(g, a);
  ops.stiffness_1 = assemble_stiffness(g, Vec(g.nx, 1.0));
  ops.riesz_DU = ops.stiffness_1;
  for (int i = 0; i < g.nx; ++i) ops.riesz_DU.diag[i] += ops.mass[i];
  return ops;
}

}  // namespace bilevel
