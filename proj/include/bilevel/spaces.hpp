#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

#include "bilevel/grid.hpp"
#include "bilevel/operators.hpp"
#include "bilevel/types.hpp"

namespace bilevel {

enum class SpaceTag { H, U, Ustar, calU, calUstar, calV, X, Y };

struct VReprConfig {
  double rel_tol = 1e-10;
  int max_iter_mult = 10;  // cap = mult * unknown count
};

struct VReprStats {
  int iterations = 0;
  double rel_residual = 0.0;
};

/// Discrete function-space package on one grid.
///
/// Conventions: primal slice vectors pair with assembled duals through the
/// plain Euclidean dot product. H carries the lumped mass Gram, U the
/// riesz_DU Gram (mass + unit stiffness, the discrete Id - Laplacian), so
/// riesz_DU is exactly the U -> U* Riesz isomorphism and U* carries the
/// riesz_DU^{-1} weighting. Space-time products integrate slices with uniform
/// weight ht: calU over all nt+1 slices, calUstar over the nt difference
/// slices. calV = calU-part + calUstar-part of the time derivative embedded
/// through the mass matrix.
class Spaces {
 public:
  Spaces() = default;
  Spaces(const SpaceTimeGrid& g, const DiscreteOperators& ops) : g_(g), ops_(ops) {}

  const SpaceTimeGrid& grid() const { return g_; }
  const DiscreteOperators& ops() const { return ops_; }

  // --- slice-level products -------------------------------------------------

  double inner_H(std::span<const double> x, std::span<const double> y) const {
    require_nx(x, "inner_H");
    require_nx(y, "inner_H");
    double s = 0.0;
    for (int i = 0; i < g_.nx; ++i) s += x[i] * ops_.mass[i] * y[i];
    return s;
  }

  double inner_U(std::span<const double> x, std::span<const double> y) const {
    require_nx(x, "inner_U");
    require_nx(y, "inner_U");
    return dot(x, ops_.riesz_DU.apply(y));
  }

  double inner_Ustar(std::span<const double> w1, std::span<const double> w2) const {
    require_nx(w1, "inner_Ustar");
    require_nx(w2, "inner_Ustar");
    return dot(w1, ops_.riesz_DU.solve(w2));
  }

  double norm_H(std::span<const double> x) const { return std::sqrt(inner_H(x, x)); }
  double norm_U(std::span<const double> x) const { return std::sqrt(inner_U(x, x)); }
  double norm_Ustar(std::span<const double> w) const { return std::sqrt(inner_Ustar(w, w)); }

  Vec apply_riesz_DU(std::span<const double> x) const { return ops_.riesz_DU.apply(x); }
  Vec solve_riesz_DU(std::span<const double> w) const { return ops_.riesz_DU.solve(w); }

  // --- space-time products --------------------------------------------------

  /// Forward difference quotients: nt rows, row n = (u^{n+1} - u^n)/ht.
  Array2 time_derivative(const StateField& u) const {
    Array2 du(g_.nt, g_.nx);
    for (int n = 0; n < g_.nt; ++n) {
      auto lo = u.slice(n);
      auto hi = u.slice(n + 1);
      auto r = du.row(n);
      for (int i = 0; i < g_.nx; ++i) r[i] = (hi[i] - lo[i]) / g_.ht;
    }
    return du;
  }

  double inner_calU(const StateField& u, const StateField& v) const {
    require_state(u, "inner_calU");
    require_state(v, "inner_calU");
    double s = 0.0;
    for (int n = 0; n <= g_.nt; ++n) s += inner_U(u.slice(n), v.slice(n));
    return g_.ht * s;
  }

  /// Inner product of two assembled dual trajectories (nt x nx rows).
  double inner_calUstar(const Array2& w1, const Array2& w2) const {
    if (w1.rows != g_.nt || w1.cols != g_.nx || !w1.same_shape(w2))
      throw std::invalid_argument("inner_calUstar: expected nt x nx dual arrays");
    double s = 0.0;
    for (int n = 0; n < g_.nt; ++n) s += inner_Ustar(w1.row(n), w2.row(n));
    return g_.ht * s;
  }

  double inner_calV(const StateField& u, const StateField& v) const {
    Array2 du = time_derivative(u);
    Array2 dv = time_derivative(v);
    embed_H_rows(du);
    embed_H_rows(dv);
    return inner_calU(u, v) + inner_calUstar(du, dv);
  }

  double norm_calU(const StateField& u) const { return std::sqrt(inner_calU(u, u)); }
  double norm_calUstar(const Array2& w) const { return std::sqrt(inner_calUstar(w, w)); }
  double norm_calV(const StateField& u) const { return std::sqrt(inner_calV(u, u)); }

  /// sqrt(|pde|_{calUstar}^2 + |init|_H^2).
  double residual_norm(const ResidualPair& r) const {
    double s = inner_calUstar(r.pde, r.pde);
    s += inner_H(r.init, r.init);
    return std::sqrt(s);
  }

  double inner_residual(const ResidualPair& r1, const ResidualPair& r2) const {
    return inner_calUstar(r1.pde, r2.pde) + inner_H(r1.init, r2.init);
  }

  // --- tag dispatch ---------------------------------------------------------

  double inner(SpaceTag tag, std::span<const double> x, std::span<const double> y) const {
    switch (tag) {
      case SpaceTag::H: return inner_H(x, y);
      case SpaceTag::U: return inner_U(x, y);
      case SpaceTag::Ustar: return inner_Ustar(x, y);
      default:
        throw std::invalid_argument("inner: tag does not name a slice-level space");
    }
  }

  double inner(SpaceTag tag, const StateField& u, const StateField& v) const {
    switch (tag) {
      case SpaceTag::calU: return inner_calU(u, v);
      case SpaceTag::calV: return inner_calV(u, v);
      default:
        throw std::invalid_argument("inner: tag does not name a trajectory space");
    }
  }

  // --- parameter space ------------------------------------------------------

  /// Component Grams: a carries the discrete (Id-Lap)^2 (riesz_DU mass^{-1}
  /// riesz_DU), c and u0 the mass, phi the ht-weighted per-slice H^{-1} pullback
  /// mass riesz_DU^{-1} mass. Only active components contribute.
  double inner_X(const Parameter& p, const Parameter& q) const {
    if (!(p.active == q.active))
      throw std::invalid_argument("inner_X: active sets differ");
    check_conforming(p, g_, "inner_X");
    check_conforming(q, g_, "inner_X");
    double s = 0.0;
    if (p.active.a) {
      Vec t = ops_.riesz_DU.apply(q.a);
      t = ops_.solve_mass(t);
      t = ops_.riesz_DU.apply(t);
      s += dot(p.a, t);
    }
    if (p.active.c) s += inner_H(p.c, q.c);
    if (p.active.phi) {
      for (int n = 0; n < g_.nt; ++n) {
        Vec t = ops_.apply_mass(q.phi.row(n));
        t = ops_.riesz_DU.solve(t);
        t = ops_.apply_mass(t);
        s += g_.ht * dot(p.phi.row(n), t);
      }
    }
    if (p.active.u0) s += inner_H(p.u0, q.u0);
    return s;
  }

  double norm_X(const Parameter& p) const { return std::sqrt(inner_X(p, p)); }

  /// Riesz map X* -> X, componentwise on the active set. Nonzero data in an
  /// inactive slot is rejected to surface bookkeeping slips early.
  Parameter apply_I_X(const XDual& d) const {
    auto reject_inactive = [](bool active, const Vec& v, const char* name) {
      if (active) return;
      for (double t : v)
        if (t != 0.0)
          throw std::invalid_argument(std::string("apply_I_X: inactive component '") + name +
                                      "' carries nonzero dual data");
    };
    reject_inactive(d.active.a, d.a, "a");
    reject_inactive(d.active.c, d.c, "c");
    reject_inactive(d.active.phi, d.phi.data, "phi");
    reject_inactive(d.active.u0, d.u0, "u0");

    Parameter xi(g_);
    for (auto& t : xi.a) t = 0.0;
    xi.active = d.active;
    if (d.active.a) {
      Vec t = ops_.riesz_DU.solve(d.a);
      t = ops_.apply_mass(t);
      xi.a = ops_.riesz_DU.solve(t);
    }
    if (d.active.c) xi.c = ops_.solve_mass(d.c);
    if (d.active.phi) {
      for (int n = 0; n < g_.nt; ++n) {
        Vec t = ops_.solve_mass(d.phi.row(n));
        t = ops_.riesz_DU.apply(t);
        t = ops_.solve_mass(t);
        auto r = xi.phi.row(n);
        for (int i = 0; i < g_.nx; ++i) r[i] = t[i] / g_.ht;
      }
    }
    if (d.active.u0) xi.u0 = ops_.solve_mass(d.u0);
    return xi;
  }

  // --- V-Gram representer ---------------------------------------------------

  /// Apply the calV Gram to a trajectory, returning per-slice assembled duals:
  /// (Gv u) . h = inner_calV(u, h) for every h.
  DualField gram_V_apply(const StateField& u) const {
    require_state(u, "gram_V_apply");
    DualField out(g_);
    // calU part: ht * D_U u^n per slice.
    for (int n = 0; n <= g_.nt; ++n) {
      Vec t = ops_.riesz_DU.apply(u.slice(n));
      auto r = out.v.row(n);
      for (int i = 0; i < g_.nx; ++i) r[i] = g_.ht * t[i];
    }
    // calUstar part of the time derivative: ht * B^T M D_U^{-1} M B u,
    // with the 1/ht quadrature weights cancelling one ht factor.
    Array2 du = time_derivative(u);
    for (int n = 0; n < g_.nt; ++n) {
      Vec t = ops_.apply_mass(du.row(n));
      t = ops_.riesz_DU.solve(t);
      t = ops_.apply_mass(t);
      auto lo = out.v.row(n);
      auto hi = out.v.row(n + 1);
      for (int i = 0; i < g_.nx; ++i) {
        lo[i] -= t[i];
        hi[i] += t[i];
      }
    }
    return out;
  }

  /// Riesz representer in calV: returns p with inner_calV(p, h) = <rhs, h> for
  /// all trajectories h. Solved by CG on the SPD space-time Gram; the initial
  /// guess comes from the exact solve in the sine eigenbasis of the unit
  /// stiffness, so the CG loop typically only certifies the residual.
  StateField v_representer(const DualField& rhs, const VReprConfig& cfg = {},
                           VReprStats* stats = nullptr) const {
    if (rhs.v.rows != g_.nt + 1 || rhs.v.cols != g_.nx)
      throw std::invalid_argument("v_representer: rhs must be (nt+1) x nx");
    StateField x = spectral_gram_solve(rhs);

    const std::size_t N = rhs.v.data.size();
    const double bnorm = std::sqrt(dot(rhs.v.data, rhs.v.data));
    if (bnorm == 0.0) {
      if (stats) *stats = {0, 0.0};
      return zero_state(g_);
    }
    const long max_iter = static_cast<long>(cfg.max_iter_mult) * static_cast<long>(N);

    DualField Ax = gram_V_apply(x);
    Vec r(N), p(N), Ap;
    for (std::size_t i = 0; i < N; ++i) r[i] = rhs.v.data[i] - Ax.v.data[i];
    p = r;
    double rr = dot(r, r);
    int it = 0;
    while (std::sqrt(rr) > cfg.rel_tol * bnorm) {
      if (it >= max_iter)
        throw std::runtime_error("v_representer: CG failed to reach tolerance within " +
                                 std::to_string(max_iter) + " iterations (rel residual " +
                                 std::to_string(std::sqrt(rr) / bnorm) + ")");
      StateField pf(g_);
      pf.v.data = p;
      DualField Apf = gram_V_apply(pf);
      Ap = std::move(Apf.v.data);
      double pAp = dot(p, Ap);
      if (!(pAp > 0.0))
        throw std::runtime_error("v_representer: Gram lost positive definiteness in CG");
      double alpha = rr / pAp;
      for (std::size_t i = 0; i < N; ++i) {
        x.v.data[i] += alpha * p[i];
        r[i] -= alpha * Ap[i];
      }
      double rr_new = dot(r, r);
      double beta = rr_new / rr;
      rr = rr_new;
      for (std::size_t i = 0; i < N; ++i) p[i] = r[i] + beta * p[i];
      ++it;
    }
    if (stats) *stats = {it, std::sqrt(rr) / bnorm};
    return x;
  }

 private:
  SpaceTimeGrid g_;
  DiscreteOperators ops_;
  mutable std::vector<Vec> sine_;      // sine_[k][i] = sin((k+1)(i+1)pi/(nx+1))
  mutable Vec stiff_eigs_;             // eigenvalues of stiffness_1

  void require_nx(std::span<const double> x, const char* who) const {
    if (static_cast<int>(x.size()) != g_.nx)
      throw std::invalid_argument(std::string(who) + ": vector length " + std::to_string(x.size()) +
                                  " does not match nx = " + std::to_string(g_.nx));
  }
  void require_state(const StateField& u, const char* who) const {
    if (u.v.rows != g_.nt + 1 || u.v.cols != g_.nx)
      throw std::invalid_argument(std::string(who) + ": state must be (nt+1) x nx");
  }

  void embed_H_rows(Array2& w) const {
    for (int n = 0; n < w.rows; ++n) {
      auto r = w.row(n);
      for (int i = 0; i < g_.nx; ++i) r[i] *= ops_.mass[i];
    }
  }

  void build_sine_basis() const {
    if (!sine_.empty()) return;
    const int n = g_.nx;
    sine_.resize(n);
    stiff_eigs_.resize(n);
    for (int k = 0; k < n; ++k) {
      sine_[k].resize(n);
      const double theta = (k + 1) * std::numbers::pi / (n + 1);
      for (int i = 0; i < n; ++i)
        sine_[k][i] = std::sin((k + 1) * (i + 1) * std::numbers::pi / (n + 1));
      stiff_eigs_[k] = (2.0 - 2.0 * std::cos(theta)) / g_.hx;
    }
  }

  /// Exact Gram solve: the sine basis diagonalizes mass, unit stiffness and
  /// riesz_DU simultaneously, leaving one tridiagonal time system per mode.
  StateField spectral_gram_solve(const DualField& rhs) const {
    build_sine_basis();
    const int n = g_.nx, m = g_.nt + 1;
    const double scale = 2.0 / (n + 1);
    StateField out(g_);
    Vec coeff(m), sol(m);
    SymTridiag A;
    A.diag.resize(m);
    A.off.assign(m - 1, 0.0);
    for (int k = 0; k < n; ++k) {
      const double dk = g_.hx + stiff_eigs_[k];          // riesz_DU eigenvalue
      const double w = g_.hx * g_.hx / dk;               // M D_U^{-1} M eigenvalue
      for (int nn = 0; nn < m; ++nn) coeff[nn] = scale * dot(rhs.v.row(nn), sine_[k]);
      const double td = w / g_.ht;                       // ht * (1/ht^2) * w
      for (int nn = 0; nn < m; ++nn) {
        double interior = (nn == 0 || nn == m - 1) ? 1.0 : 2.0;
        A.diag[nn] = g_.ht * dk + interior * td;
      }
      for (int nn = 0; nn + 1 < m; ++nn) A.off[nn] = -td;
      A.solve(coeff, sol);
      for (int nn = 0; nn < m; ++nn) {
        auto r = out.v.row(nn);
        const double s = sol[nn];
        for (int i = 0; i < n; ++i) r[i] += s * sine_[k][i];
      }
    }
    return out;
  }
};

}  // namespace bilevel
