#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "bilevel/model.hpp"

namespace bilevel {

struct SolverConfig {
  double newton_tol = 1e-12;  // H-norm of the strong-form step residual
  int newton_max = 25;
};

/// Implicit Euler marching with a Newton solve per step. The discrete solution
/// zeroes the same residual rows pde_residual evaluates, so the pair of
/// solvers agrees to the Newton tolerance.
inline StateField solve_forward(const System& sys, const Parameter& theta,
                                const SolverConfig& cfg = {}) {
  const auto& g = sys.grid();
  check_conforming(theta, g, "solve_forward");
  for (int i = 0; i < g.nx; ++i)
    if (!(theta.a[i] >= sys.a_min))
      throw std::invalid_argument("solve_forward: a[" + std::to_string(i) + "] violates a >= a_min");
  const auto& ops = sys.sp.ops();
  SymTridiag Ka = assemble_stiffness(g, theta.a);

  StateField u(g);
  for (int i = 0; i < g.nx; ++i) u.v.at(0, i) = theta.u0[i];

  Vec w(g.nx), res(g.nx), step(g.nx), tmp(g.nx);
  SymTridiag J;
  J.diag.resize(g.nx);
  J.off = Ka.off;
  for (int n = 0; n < g.nt; ++n) {
    auto lo = u.slice(n);
    auto phi_row = theta.phi.row(n);
    for (int i = 0; i < g.nx; ++i) w[i] = lo[i];
    bool converged = false;
    for (int it = 0; it <= cfg.newton_max; ++it) {
      Ka.apply(w, tmp);
      double rnorm2 = 0.0;
      for (int i = 0; i < g.nx; ++i) {
        double strong = (w[i] - lo[i]) / g.ht + tmp[i] / ops.mass[i] + theta.c[i] * w[i] +
                        sys.nl.phi(w[i]) - phi_row[i];
        res[i] = strong;
        rnorm2 += ops.mass[i] * strong * strong;
      }
      if (!std::isfinite(rnorm2))
        throw std::runtime_error("solve_forward: non-finite residual at step " + std::to_string(n));
      if (std::sqrt(rnorm2) <= cfg.newton_tol) {
        converged = true;
        break;
      }
      if (it == cfg.newton_max) break;
      // Assembled Newton system: (M/ht + Ka + M diag(c + Phi'(w))) dw = -M res.
      for (int i = 0; i < g.nx; ++i)
        J.diag[i] = ops.mass[i] * (1.0 / g.ht + theta.c[i] + sys.nl.dphi(w[i])) + Ka.diag[i];
      for (int i = 0; i < g.nx; ++i) res[i] *= -ops.mass[i];
      J.solve(res, step);
      for (int i = 0; i < g.nx; ++i) w[i] += step[i];
    }
    if (!converged)
      throw std::runtime_error("solve_forward: Newton failed to converge at step " +
                               std::to_string(n) + " within " + std::to_string(cfg.newton_max) +
                               " iterations");
    auto hi = u.slice(n + 1);
    for (int i = 0; i < g.nx; ++i) hi[i] = w[i];
  }
  return u;
}

/// Linearized flow: dp/dt + f'_u(theta,u) p = -f'_theta(theta,u) xi, p(0) = xi_u0.
/// Backward Euler on the same grid; one tridiagonal solve per step.
inline StateField solve_sensitivity(const System& sys, const Parameter& theta, const StateField& u,
                                    const Parameter& xi) {
  const auto& g = sys.grid();
  check_conforming(theta, g, "solve_sensitivity");
  check_conforming(xi, g, "solve_sensitivity");
  if (u.v.rows != g.nt + 1 || u.v.cols != g.nx)
    throw std::invalid_argument("solve_sensitivity: state must be (nt+1) x nx");
  const auto& ops = sys.sp.ops();
  SymTridiag Ka = assemble_stiffness(g, theta.a);
  Array2 g_theta = apply_fprime_theta(sys, theta, u, xi);  // assembled, nt rows

  StateField p(g);
  if (xi.active.u0)
    for (int i = 0; i < g.nx; ++i) p.v.at(0, i) = xi.u0[i];

  SymTridiag J;
  J.diag.resize(g.nx);
  J.off = Ka.off;
  Vec rhs(g.nx), sol(g.nx);
  for (int n = 0; n < g.nt; ++n) {
    auto lo = p.slice(n);
    auto un1 = u.slice(n + 1);
    auto gt = g_theta.row(n);
    for (int i = 0; i < g.nx; ++i) {
      J.diag[i] = ops.mass[i] * (1.0 / g.ht + theta.c[i] + sys.nl.dphi(un1[i])) + Ka.diag[i];
      rhs[i] = ops.mass[i] * lo[i] / g.ht - gt[i];
    }
    J.solve(rhs, sol);
    auto hi = p.slice(n + 1);
    for (int i = 0; i < g.nx; ++i) hi[i] = sol[i];
  }
  return p;
}

}  // namespace bilevel
