#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "bilevel/spaces.hpp"
#include "bilevel/types.hpp"

namespace bilevel {

enum class Nonlinearity { zero, lipschitz_sin, monotone_cubic };

inline Nonlinearity nonlinearity_from_string(const std::string& s) {
  if (s == "zero") return Nonlinearity::zero;
  if (s == "lipschitz_sin") return Nonlinearity::lipschitz_sin;
  if (s == "monotone_cubic") return Nonlinearity::monotone_cubic;
  throw std::invalid_argument("unknown nonlinearity '" + s + "'");
}

inline std::string to_string(Nonlinearity k) {
  switch (k) {
    case Nonlinearity::zero: return "zero";
    case Nonlinearity::lipschitz_sin: return "lipschitz_sin";
    case Nonlinearity::monotone_cubic: return "monotone_cubic";
  }
  return "?";
}

/// Pointwise reaction term Phi and its derivative.
struct NonlinearitySpec {
  Nonlinearity kind = Nonlinearity::zero;
  double L_phi = 1.0;  // Lipschitz bound for the sin variant

  double phi(double u) const {
    switch (kind) {
      case Nonlinearity::zero: return 0.0;
      case Nonlinearity::lipschitz_sin: return L_phi * std::sin(u);
      case Nonlinearity::monotone_cubic: return u * u * u;
    }
    return 0.0;
  }
  double dphi(double u) const {
    switch (kind) {
      case Nonlinearity::zero: return 0.0;
      case Nonlinearity::lipschitz_sin: return L_phi * std::cos(u);
      case Nonlinearity::monotone_cubic: return 3.0 * u * u;
    }
    return 0.0;
  }
};

/// Everything an evaluation needs: the function-space package plus the model.
struct System {
  Spaces sp;
  NonlinearitySpec nl;
  double a_min = 1e-8;

  const SpaceTimeGrid& grid() const { return sp.grid(); }
};

inline System make_system(const SpaceTimeGrid& g, const Vec& a_fixture, double a_min,
                          NonlinearitySpec nl) {
  System sys;
  sys.sp = Spaces(g, assemble_operators(g, a_fixture, a_min));
  sys.nl = nl;
  sys.a_min = a_min;
  return sys;
}

/// Residual of the implicit flow map at trajectory u:
/// row n = M (u^{n+1}-u^n)/ht + K_a u^{n+1} + M (c u^{n+1} + Phi(u^{n+1}) - phi_row_n),
/// init = u0 - u|_{t=0}. All pde rows are assembled duals.
inline ResidualPair pde_residual(const System& sys, const Parameter& theta, const StateField& u) {
  const auto& g = sys.grid();
  check_conforming(theta, g, "pde_residual");
  if (u.v.rows != g.nt + 1 || u.v.cols != g.nx)
    throw std::invalid_argument("pde_residual: state must be (nt+1) x nx");
  for (int i = 0; i < g.nx; ++i)
    if (!(theta.a[i] >= sys.a_min))
      throw std::invalid_argument("pde_residual: a[" + std::to_string(i) + "] violates a >= a_min");

  const auto& ops = sys.sp.ops();
  SymTridiag Ka = assemble_stiffness(g, theta.a);
  ResidualPair r(g);
  Vec tmp(g.nx);
  for (int n = 0; n < g.nt; ++n) {
    auto lo = u.slice(n);
    auto hi = u.slice(n + 1);
    auto phi_row = theta.phi.row(n);
    auto out = r.pde.row(n);
    Ka.apply(hi, tmp);
    for (int i = 0; i < g.nx; ++i) {
      double strong = theta.c[i] * hi[i] + sys.nl.phi(hi[i]) - phi_row[i];
      out[i] = ops.mass[i] * ((hi[i] - lo[i]) / g.ht + strong) + tmp[i];
    }
  }
  for (int i = 0; i < g.nx; ++i) r.init[i] = theta.u0[i] - u.v.at(0, i);
  return r;
}

/// Slicewise derivative of f in u: row m = K_a h^m + M (c + Phi'(u^m)) h^m,
/// one assembled row per state slice.
inline Array2 apply_fprime_u(const System& sys, const Parameter& theta, const StateField& u,
                             const StateField& h) {
  const auto& g = sys.grid();
  check_conforming(theta, g, "apply_fprime_u");
  if (h.v.rows != g.nt + 1 || h.v.cols != g.nx)
    throw std::invalid_argument("apply_fprime_u: direction must be (nt+1) x nx");
  const auto& ops = sys.sp.ops();
  SymTridiag Ka = assemble_stiffness(g, theta.a);
  Array2 out(g.nt + 1, g.nx);
  Vec tmp(g.nx);
  for (int m = 0; m <= g.nt; ++m) {
    auto um = u.slice(m);
    auto hm = h.slice(m);
    auto r = out.row(m);
    Ka.apply(hm, tmp);
    for (int i = 0; i < g.nx; ++i)
      r[i] = tmp[i] + ops.mass[i] * (theta.c[i] + sys.nl.dphi(um[i])) * hm[i];
  }
  return out;
}

/// Derivative of f in theta, aligned with the residual rows: row n pairs the
/// state slice n+1 and the phi row n. Inactive components of xi are ignored.
inline Array2 apply_fprime_theta(const System& sys, const Parameter& theta, const StateField& u,
                                 const Parameter& xi) {
  const auto& g = sys.grid();
  check_conforming(theta, g, "apply_fprime_theta");
  check_conforming(xi, g, "apply_fprime_theta");
  const auto& ops = sys.sp.ops();
  Array2 out(g.nt, g.nx);
  Vec tmp(g.nx);
  SymTridiag Kxi;
  if (xi.active.a) Kxi = assemble_stiffness(g, xi.a);
  for (int n = 0; n < g.nt; ++n) {
    auto hi = u.slice(n + 1);
    auto r = out.row(n);
    if (xi.active.a) {
      Kxi.apply(hi, tmp);
      for (int i = 0; i < g.nx; ++i) r[i] += tmp[i];
    }
    if (xi.active.c)
      for (int i = 0; i < g.nx; ++i) r[i] += ops.mass[i] * xi.c[i] * hi[i];
    if (xi.active.phi) {
      auto xin = xi.phi.row(n);
      for (int i = 0; i < g.nx; ++i) r[i] -= ops.mass[i] * xin[i];
    }
  }
  return out;
}

/// Forward differential of the flow map: (dh/dt + f'_u h ; -h|_{t=0}).
inline ResidualPair apply_Fprime(const System& sys, const Parameter& theta, const StateField& u,
                                 const StateField& h) {
  const auto& g = sys.grid();
  Array2 fu = apply_fprime_u(sys, theta, u, h);
  ResidualPair out(g);
  for (int n = 0; n < g.nt; ++n) {
    auto lo = h.slice(n);
    auto hi = h.slice(n + 1);
    auto fr = fu.row(n + 1);
    auto r = out.pde.row(n);
    const auto& mass = sys.sp.ops().mass;
    for (int i = 0; i < g.nx; ++i) r[i] = mass[i] * (hi[i] - lo[i]) / g.ht + fr[i];
  }
  for (int i = 0; i < g.nx; ++i) out.init[i] = -h.v.at(0, i);
  return out;
}

/// Hilbert adjoint of apply_Fprime with respect to the calV and calUstar x H
/// inner products: assembles the dual of h -> (rho, F'(u) h) and solves the
/// calV Gram system. Exact up to the representer tolerance.
inline StateField apply_Fprime_adjoint(const System& sys, const Parameter& theta,
                                       const StateField& u, const ResidualPair& rho,
                                       const VReprConfig& vcfg = {}) {
  const auto& g = sys.grid();
  check_shape(rho.pde, g.nt, g.nx, "apply_Fprime_adjoint");
  const auto& ops = sys.sp.ops();
  SymTridiag Ka = assemble_stiffness(g, theta.a);

  // s^n = D_U^{-1} rho_pde^n turns the calUstar pairing into a Euclidean one.
  Array2 s(g.nt, g.nx);
  for (int n = 0; n < g.nt; ++n) {
    Vec t = ops.riesz_DU.solve(rho.pde.row(n));
    auto r = s.row(n);
    for (int i = 0; i < g.nx; ++i) r[i] = t[i];
  }

  DualField ell(g);
  Vec tmp(g.nx);
  for (int m = 0; m <= g.nt; ++m) {
    auto out = ell.v.row(m);
    // time-derivative part: ht cancels against the 1/ht in the quotient.
    if (m > 0)
      for (int i = 0; i < g.nx; ++i) out[i] += ops.mass[i] * s.at(m - 1, i);
    if (m < g.nt)
      for (int i = 0; i < g.nx; ++i) out[i] -= ops.mass[i] * s.at(m, i);
    // reaction-diffusion part at slice m, paired with s^{m-1}.
    if (m > 0) {
      auto um = u.slice(m);
      auto sm = s.row(m - 1);
      Ka.apply(sm, tmp);
      for (int i = 0; i < g.nx; ++i)
        out[i] += g.ht * (tmp[i] + ops.mass[i] * (theta.c[i] + sys.nl.dphi(um[i])) * sm[i]);
    }
  }
  for (int i = 0; i < g.nx; ++i) ell.v.at(0, i) -= ops.mass[i] * rho.init[i];

  return sys.sp.v_representer(ell, vcfg);
}

}  // namespace bilevel
