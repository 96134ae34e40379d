#pragma once

#include <stdexcept>

#include "bilevel/model.hpp"

namespace bilevel {

/// Final-value trajectory of the linearized backward equation; z(T) = 0.
struct AdjointField {
  SpaceTimeGrid grid;
  Array2 v;  // (nt+1) x nx

  AdjointField() = default;
  explicit AdjointField(const SpaceTimeGrid& g) : grid(g), v(g.nt + 1, g.nx) {}
  std::span<const double> slice(int n) const { return v.row(n); }
};

/// Reversed-time backward Euler for
///   -dz/dt + f'_u(theta, u_base)* z = D_U v,   z(T) = 0:
/// row n solves (M/ht + K_a + M diag(c + Phi'(u^{n+1}))) z^n = M z^{n+1}/ht + D_U v^n.
/// The spatial operator is symmetric, so the transpose is itself.
inline AdjointField solve_adjoint(const System& sys, const Parameter& theta, const StateField& u_base,
                                  const StateField& v) {
  const auto& g = sys.grid();
  check_conforming(theta, g, "solve_adjoint");
  if (u_base.v.rows != g.nt + 1 || v.v.rows != g.nt + 1)
    throw std::invalid_argument("solve_adjoint: state and source must be (nt+1) x nx");
  const auto& ops = sys.sp.ops();
  SymTridiag Ka = assemble_stiffness(g, theta.a);

  AdjointField z(g);
  SymTridiag J;
  J.diag.resize(g.nx);
  J.off = Ka.off;
  Vec rhs(g.nx), sol(g.nx);
  for (int n = g.nt - 1; n >= 0; --n) {
    auto zn1 = z.v.row(n + 1);
    auto un1 = u_base.slice(n + 1);
    Vec src = ops.riesz_DU.apply(v.slice(n));
    for (int i = 0; i < g.nx; ++i) {
      J.diag[i] = ops.mass[i] * (1.0 / g.ht + theta.c[i] + sys.nl.dphi(un1[i])) + Ka.diag[i];
      rhs[i] = ops.mass[i] * zn1[i] / g.ht + src[i];
    }
    J.solve(rhs, sol);
    auto zn = z.v.row(n);
    for (int i = 0; i < g.nx; ++i) zn[i] = sol[i];
  }
  return z;
}

/// Adjoint-state gradient: S'(theta)* v = I_X ( -int_0^T f'_theta(theta,u)(t)* z(t) dt
/// + A* z(0) ), with left-endpoint time quadrature on the adjoint slices and the
/// initial-value injection A mapping u0 to u(0). Only active components are
/// produced; inactive slots stay zero.
inline Parameter s_prime_adjoint(const System& sys, const Parameter& theta, const StateField& u_base,
                                 const StateField& v) {
  const auto& g = sys.grid();
  AdjointField z = solve_adjoint(sys, theta, u_base, v);
  const auto& ops = sys.sp.ops();

  XDual d(g);
  d.active = theta.active;
  if (theta.active.u0) {
    auto z0 = z.slice(0);
    for (int i = 0; i < g.nx; ++i) d.u0[i] = ops.mass[i] * z0[i];
  }
  if (theta.active.phi) {
    for (int n = 0; n < g.nt; ++n) {
      auto zn = z.slice(n);
      auto r = d.phi.row(n);
      for (int i = 0; i < g.nx; ++i) r[i] = g.ht * ops.mass[i] * zn[i];
    }
  }
  if (theta.active.c) {
    for (int n = 0; n < g.nt; ++n) {
      auto zn = z.slice(n);
      auto un1 = u_base.slice(n + 1);
      for (int i = 0; i < g.nx; ++i) d.c[i] -= g.ht * ops.mass[i] * un1[i] * zn[i];
    }
  }
  if (theta.active.a) {
    // d(K_xi u . z)/d(xi at node): midpoint edge coefficients spread each edge
    // term onto its two nodes; boundary edges load their single interior node.
    for (int n = 0; n < g.nt; ++n) {
      auto zn = z.slice(n);
      auto un1 = u_base.slice(n + 1);
      for (int e = 0; e <= g.nx; ++e) {
        double du = (e == 0 ? un1[0] : (e == g.nx ? -un1[g.nx - 1] : un1[e] - un1[e - 1]));
        double dz = (e == 0 ? zn[0] : (e == g.nx ? -zn[g.nx - 1] : zn[e] - zn[e - 1]));
        double w = -g.ht * du * dz / g.hx;
        if (e == 0)
          d.a[0] += w;
        else if (e == g.nx)
          d.a[g.nx - 1] += w;
        else {
          d.a[e - 1] += 0.5 * w;
          d.a[e] += 0.5 * w;
        }
      }
    }
  }
  return sys.sp.apply_I_X(d);
}

}  // namespace bilevel
