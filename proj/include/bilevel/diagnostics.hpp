#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "bilevel/adjoint.hpp"
#include "bilevel/model.hpp"
#include "bilevel/observe.hpp"
#include "bilevel/reference.hpp"

namespace bilevel {

// --- operator norms ---------------------------------------------------------

/// Power iteration on a self-adjoint PSD "normal" operator op* op (or op op*),
/// returning the square root of the dominant eigenvalue.
inline double power_iteration(const std::function<Vec(const Vec&)>& normal_apply,
                              const std::function<double(const Vec&, const Vec&)>& inner, Vec x,
                              int n_iters) {
  if (n_iters < 1) throw std::invalid_argument("power_iteration: n_iters must be >= 1");
  double nx = std::sqrt(inner(x, x));
  if (nx == 0.0) throw std::invalid_argument("power_iteration: zero start vector");
  for (auto& t : x) t /= nx;
  double lambda = 0.0;
  for (int it = 0; it < n_iters; ++it) {
    Vec y = normal_apply(x);
    lambda = inner(x, y);
    double ny = std::sqrt(inner(y, y));
    if (ny == 0.0) return 0.0;
    for (auto& t : y) t /= ny;
    x = std::move(y);
  }
  return std::sqrt(std::max(lambda, 0.0));
}

inline Vec gaussian_vec(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vec v(n);
  for (auto& t : v) t = normal(rng);
  return v;
}

inline double estimate_opnorm_identity_H(const Spaces& sp, int n_iters, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Vec x0 = gaussian_vec(sp.grid().nx, rng);
  return power_iteration([](const Vec& v) { return v; },
                         [&](const Vec& a, const Vec& b) { return sp.inner_H(a, b); }, x0, n_iters);
}

/// riesz_DU as U -> U* with the matching norms; isometry by construction.
inline double estimate_opnorm_riesz(const Spaces& sp, int n_iters, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Vec x0 = gaussian_vec(sp.grid().nx, rng);
  auto normal = [&](const Vec& v) {
    Vec w = sp.apply_riesz_DU(v);   // into U*
    return sp.solve_riesz_DU(w);    // Hilbert adjoint back into U
  };
  return power_iteration(normal, [&](const Vec& a, const Vec& b) { return sp.inner_U(a, b); }, x0,
                         n_iters);
}

inline double estimate_opnorm_L(const Spaces& sp, const ObservationSpec& spec, int n_iters,
                                std::uint64_t seed) {
  const auto& g = sp.grid();
  std::mt19937_64 rng(seed);
  Vec x0 = gaussian_vec(static_cast<std::size_t>(g.nt + 1) * g.nx, rng);
  auto normal = [&](const Vec& v) {
    StateField u(g);
    u.v.data = v;
    ObservationData y = observe(sp, spec, u);
    StateField back = observe_adjoint(sp, spec, y.values);
    return back.v.data;
  };
  auto inner = [&](const Vec& a, const Vec& b) {
    StateField ua(g), ub(g);
    ua.v.data = a;
    ub.v.data = b;
    return sp.inner_calU(ua, ub);
  };
  return power_iteration(normal, inner, x0, n_iters);
}

inline Vec pack_residual(const ResidualPair& r) {
  Vec v = r.pde.data;
  v.insert(v.end(), r.init.begin(), r.init.end());
  return v;
}

inline ResidualPair unpack_residual(const SpaceTimeGrid& g, const Vec& v) {
  ResidualPair r(g);
  std::copy(v.begin(), v.begin() + r.pde.data.size(), r.pde.data.begin());
  std::copy(v.begin() + r.pde.data.size(), v.end(), r.init.begin());
  return r;
}

inline double estimate_opnorm_Fprime(const System& sys, const Parameter& theta, const StateField& u,
                                     int n_iters, std::uint64_t seed, const VReprConfig& vcfg = {}) {
  const auto& g = sys.grid();
  std::mt19937_64 rng(seed);
  Vec x0 = gaussian_vec(static_cast<std::size_t>(g.nt) * g.nx + g.nx, rng);
  auto normal = [&](const Vec& v) {
    ResidualPair rho = unpack_residual(g, v);
    StateField h = apply_Fprime_adjoint(sys, theta, u, rho, vcfg);
    return pack_residual(apply_Fprime(sys, theta, u, h));
  };
  auto inner = [&](const Vec& a, const Vec& b) {
    return sys.sp.inner_residual(unpack_residual(g, a), unpack_residual(g, b));
  };
  return power_iteration(normal, inner, x0, n_iters);
}

inline Vec pack_parameter(const Parameter& p) {
  Vec v;
  if (p.active.a) v.insert(v.end(), p.a.begin(), p.a.end());
  if (p.active.c) v.insert(v.end(), p.c.begin(), p.c.end());
  if (p.active.phi) v.insert(v.end(), p.phi.data.begin(), p.phi.data.end());
  if (p.active.u0) v.insert(v.end(), p.u0.begin(), p.u0.end());
  return v;
}

inline Parameter unpack_parameter(const SpaceTimeGrid& g, const ActiveSet& act, const Vec& v) {
  Parameter p(g);
  for (auto& t : p.a) t = 0.0;
  p.active = act;
  std::size_t at = 0;
  auto take = [&](auto& dst) {
    std::copy(v.begin() + at, v.begin() + at + dst.size(), dst.begin());
    at += dst.size();
  };
  if (act.a) take(p.a);
  if (act.c) take(p.c);
  if (act.phi) take(p.phi.data);
  if (act.u0) take(p.u0);
  return p;
}

/// Norm of G'(theta) = L S'(theta) via power iteration on G' G'* over data space.
inline double estimate_opnorm_Gprime(const System& sys, const ObservationSpec& spec,
                                     const Parameter& theta, const StateField& u, int n_iters,
                                     std::uint64_t seed) {
  const auto& g = sys.grid();
  std::mt19937_64 rng(seed);
  Vec x0 = gaussian_vec(static_cast<std::size_t>(spec.data_rows(g)) * spec.data_cols(g), rng);
  auto normal = [&](const Vec& r) {
    Array2 data(spec.data_rows(g), spec.data_cols(g));
    data.data = r;
    StateField v = observe_adjoint(sys.sp, spec, data);
    Parameter grad = s_prime_adjoint(sys, theta, u, v);
    StateField p = solve_sensitivity(sys, theta, u, grad);
    return observe(sys.sp, spec, p).values.data;
  };
  auto inner = [&](const Vec& a, const Vec& b) {
    Array2 pa(spec.data_rows(g), spec.data_cols(g)), pb = pa;
    pa.data = a;
    pb.data = b;
    return inner_Y(sys.sp, spec, pa, pb);
  };
  return power_iteration(normal, inner, x0, n_iters);
}

/// Norm of S'(theta): X -> calU via power iteration over the state side.
inline double estimate_opnorm_Sprime(const System& sys, const Parameter& theta, const StateField& u,
                                     int n_iters, std::uint64_t seed) {
  const auto& g = sys.grid();
  std::mt19937_64 rng(seed);
  Vec x0 = gaussian_vec(static_cast<std::size_t>(g.nt + 1) * g.nx, rng);
  auto normal = [&](const Vec& vv) {
    StateField v(g);
    v.v.data = vv;
    Parameter grad = s_prime_adjoint(sys, theta, u, v);
    StateField p = solve_sensitivity(sys, theta, u, grad);
    return p.v.data;
  };
  auto inner = [&](const Vec& a, const Vec& b) {
    StateField ua(g), ub(g);
    ua.v.data = a;
    ub.v.data = b;
    return sys.sp.inner_calU(ua, ub);
  };
  return power_iteration(normal, inner, x0, n_iters);
}

// --- probes -----------------------------------------------------------------

struct ProbeReport {
  std::string constant_name;
  double estimate = 0.0;
  int sample_count = 0;
  double min_ratio = 0.0;
  double max_ratio = 0.0;
  bool pass = false;
  std::string note;
};

/// Random trajectory in the calV ball of the given radius around center.
inline StateField random_state_in_ball(const Spaces& sp, const StateField& center, double radius,
                                       std::mt19937_64& rng) {
  const auto& g = sp.grid();
  StateField d(g);
  d.v.data = gaussian_vec(d.v.data.size(), rng);
  double n = sp.norm_calV(d);
  std::uniform_real_distribution<double> unif(0.1, 1.0);
  double r = radius * unif(rng) / n;
  StateField out = center;
  for (std::size_t i = 0; i < out.v.data.size(); ++i) out.v.data[i] += r * d.v.data[i];
  return out;
}

/// Empirical coercivity constant: max |u - v|_calU / |F(u) - F(v)| over random
/// pairs near a reference solve.
inline ProbeReport probe_coercivity(const System& sys, const Parameter& theta,
                                    const StateField& center, double radius, int n_pairs,
                                    std::uint64_t seed) {
  if (n_pairs < 1) throw std::invalid_argument("probe_coercivity: n_pairs must be >= 1");
  std::mt19937_64 rng(seed);
  ProbeReport rep;
  rep.constant_name = "C_coe";
  rep.min_ratio = 1e300;
  for (int s = 0; s < n_pairs; ++s) {
    StateField u = random_state_in_ball(sys.sp, center, radius, rng);
    StateField v = random_state_in_ball(sys.sp, center, radius, rng);
    StateField diff(sys.grid());
    for (std::size_t i = 0; i < diff.v.data.size(); ++i) diff.v.data[i] = u.v.data[i] - v.v.data[i];
    double num = sys.sp.norm_calU(diff);
    ResidualPair Fu = pde_residual(sys, theta, u);
    ResidualPair Fv = pde_residual(sys, theta, v);
    Array2 dp = Fu.pde;
    for (std::size_t i = 0; i < dp.data.size(); ++i) dp.data[i] -= Fv.pde.data[i];
    Vec di = Fu.init;
    for (std::size_t i = 0; i < di.size(); ++i) di[i] -= Fv.init[i];
    ResidualPair dF;
    dF.pde = std::move(dp);
    dF.init = std::move(di);
    double den = sys.sp.residual_norm(dF);
    if (den < 1e-14 * (num + 1e-300)) continue;
    double ratio = num / den;
    rep.max_ratio = std::max(rep.max_ratio, ratio);
    rep.min_ratio = std::min(rep.min_ratio, ratio);
    ++rep.sample_count;
  }
  rep.estimate = rep.max_ratio;
  rep.pass = rep.sample_count > 0 && std::isfinite(rep.estimate);
  return rep;
}

/// Tangential-cone ratio of the lower-level map around a reference solve.
inline ProbeReport probe_tangential_cone_lower(const System& sys, const Parameter& theta,
                                               const StateField& center, double radius, int n_pairs,
                                               std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ProbeReport rep;
  rep.constant_name = "c_tc_lower";
  rep.min_ratio = 1e300;
  for (int s = 0; s < n_pairs; ++s) {
    StateField u = random_state_in_ball(sys.sp, center, radius, rng);
    StateField v = random_state_in_ball(sys.sp, center, radius, rng);
    StateField diff(sys.grid());
    for (std::size_t i = 0; i < diff.v.data.size(); ++i) diff.v.data[i] = u.v.data[i] - v.v.data[i];
    ResidualPair Fu = pde_residual(sys, theta, u);
    ResidualPair Fv = pde_residual(sys, theta, v);
    ResidualPair lin = apply_Fprime(sys, theta, u, diff);
    ResidualPair dF(sys.grid()), rem(sys.grid());
    for (std::size_t i = 0; i < dF.pde.data.size(); ++i) {
      dF.pde.data[i] = Fu.pde.data[i] - Fv.pde.data[i];
      rem.pde.data[i] = dF.pde.data[i] - lin.pde.data[i];
    }
    for (std::size_t i = 0; i < dF.init.size(); ++i) {
      dF.init[i] = Fu.init[i] - Fv.init[i];
      rem.init[i] = dF.init[i] - lin.init[i];
    }
    double den = sys.sp.residual_norm(dF);
    if (den < 1e-300) continue;
    double ratio = sys.sp.residual_norm(rem) / den;
    rep.max_ratio = std::max(rep.max_ratio, ratio);
    rep.min_ratio = std::min(rep.min_ratio, ratio);
    ++rep.sample_count;
  }
  rep.estimate = rep.max_ratio;
  rep.pass = rep.sample_count > 0 && rep.estimate < 1.0;
  return rep;
}

/// Random parameter direction supported on the active set, unit X norm.
inline Parameter random_parameter_direction(const System& sys, const ActiveSet& act,
                                            std::mt19937_64& rng) {
  const auto& g = sys.grid();
  Parameter d(g);
  for (auto& t : d.a) t = 0.0;
  d.active = act;
  if (act.a) d.a = gaussian_vec(g.nx, rng);
  if (act.c) d.c = gaussian_vec(g.nx, rng);
  if (act.phi) d.phi.data = gaussian_vec(d.phi.data.size(), rng);
  if (act.u0) d.u0 = gaussian_vec(g.nx, rng);
  double n = sys.sp.norm_X(d);
  if (n == 0.0) throw std::runtime_error("random_parameter_direction: empty active set");
  Parameter z(g);
  for (auto& t : z.a) t = 0.0;
  z.active = act;
  param_axpy(1.0 / n, d, z);
  return z;
}

/// Keeps a perturbed diffusion admissible by shrinking toward the center.
inline Parameter perturbed_parameter(const System& sys, const Parameter& center, double radius,
                                     std::mt19937_64& rng) {
  Parameter dir = random_parameter_direction(sys, center.active, rng);
  std::uniform_real_distribution<double> unif(0.1, 1.0);
  double r = radius * unif(rng);
  Parameter out = center;
  param_axpy(r, dir, out);
  if (center.active.a) {
    for (int tries = 0; tries < 40; ++tries) {
      bool ok = true;
      for (double t : out.a)
        if (!(t >= sys.a_min * 1.01)) ok = false;
      if (ok) break;
      r *= 0.5;
      out = center;
      param_axpy(r, dir, out);
    }
  }
  return out;
}

/// Tangential-cone ratio of the reduced map G = L o S over parameter pairs.
inline ProbeReport probe_tangential_cone_upper(const System& sys, const ObservationSpec& spec,
                                               const Parameter& center, double radius, int n_pairs,
                                               std::uint64_t seed, const SolverConfig& scfg = {}) {
  std::mt19937_64 rng(seed);
  ProbeReport rep;
  rep.constant_name = "C_tc";
  rep.min_ratio = 1e300;
  for (int s = 0; s < n_pairs; ++s) {
    Parameter t1 = perturbed_parameter(sys, center, radius, rng);
    Parameter t2 = perturbed_parameter(sys, center, radius, rng);
    StateField u1 = solve_forward(sys, t1, scfg);
    StateField u2 = solve_forward(sys, t2, scfg);
    ObservationData y1 = observe(sys.sp, spec, u1);
    ObservationData y2 = observe(sys.sp, spec, u2);
    Parameter d = param_diff_active(t1, t2);
    StateField p = solve_sensitivity(sys, t1, u1, d);
    ObservationData lp = observe(sys.sp, spec, p);
    Array2 dG = data_diff(y1.values, y2.values);
    Array2 rem = data_diff(dG, lp.values);
    double den = norm_Y(sys.sp, spec, dG);
    if (den < 1e-300) continue;
    double ratio = norm_Y(sys.sp, spec, rem) / den;
    rep.max_ratio = std::max(rep.max_ratio, ratio);
    rep.min_ratio = std::min(rep.min_ratio, ratio);
    ++rep.sample_count;
  }
  rep.estimate = rep.max_ratio;
  rep.pass = rep.sample_count > 0 && rep.estimate < 1.0;
  return rep;
}

/// Gradient-dominance constant of J(u) = |F(u) - target|^2 near a reference
/// solve: min |J'(u)|^2 / J(u), with the dual norm realized through the calV
/// representer already built into the adjoint.
inline ProbeReport probe_PL(const System& sys, const Parameter& theta, const StateField& center,
                            double radius, int n_points, std::uint64_t seed,
                            const VReprConfig& vcfg = {}) {
  std::mt19937_64 rng(seed);
  ProbeReport rep;
  rep.constant_name = "mu_PL";
  rep.min_ratio = 1e300;
  for (int s = 0; s < n_points; ++s) {
    StateField u = random_state_in_ball(sys.sp, center, radius, rng);
    ResidualPair rho = pde_residual(sys, theta, u);
    double J = sys.sp.residual_norm(rho);
    J *= J;
    if (J < 1e-24) continue;
    StateField gradient = apply_Fprime_adjoint(sys, theta, u, rho, vcfg);
    double gn = sys.sp.norm_calV(gradient);
    double ratio = 4.0 * gn * gn / J;  // J' = 2 F'* rho
    rep.max_ratio = std::max(rep.max_ratio, ratio);
    rep.min_ratio = std::min(rep.min_ratio, ratio);
    ++rep.sample_count;
  }
  rep.estimate = rep.min_ratio;
  rep.pass = rep.sample_count > 0 && rep.estimate > 0.0;
  return rep;
}

// --- sequence checks --------------------------------------------------------

/// Indices k with v[k+1] > v[k] beyond the relative tolerance.
inline std::vector<std::size_t> check_fejer(const std::vector<double>& hist,
                                            double rel_tol = 1e-12) {
  if (hist.size() < 3) throw std::invalid_argument("check_fejer: need at least 3 entries");
  std::vector<std::size_t> bad;
  for (std::size_t k = 0; k + 1 < hist.size(); ++k)
    if (hist[k + 1] > hist[k] * (1.0 + rel_tol)) bad.push_back(k);
  return bad;
}

inline std::vector<std::size_t> check_residual_monotone(const std::vector<double>& hist,
                                                        double rel_tol = 1e-12) {
  return check_fejer(hist, rel_tol);
}

/// Least-squares slope of log(value) against log(k) over [k_lo, k_hi).
inline double fit_rate_window(const std::vector<double>& hist, std::size_t k_lo, std::size_t k_hi) {
  k_lo = std::max<std::size_t>(k_lo, 1);
  k_hi = std::min(k_hi, hist.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int n = 0;
  for (std::size_t k = k_lo; k < k_hi; ++k) {
    if (!(hist[k] > 0.0)) continue;
    double x = std::log(static_cast<double>(k));
    double y = std::log(hist[k]);
    sx += x; sy += y; sxx += x * x; sxy += x * y;
    ++n;
  }
  if (n < 3) throw std::invalid_argument("fit_rate: fewer than 3 usable points");
  double denom = n * sxx - sx * sx;
  if (denom == 0.0) throw std::invalid_argument("fit_rate: degenerate abscissa");
  return (n * sxy - sx * sy) / denom;
}

/// Tail-half convention: fit over [len/2, len).
inline double fit_rate(const std::vector<double>& hist) {
  if (hist.size() < 20) throw std::invalid_argument("fit_rate: need at least 20 entries");
  return fit_rate_window(hist, hist.size() / 2, hist.size());
}

// --- error-transport sweep --------------------------------------------------

struct LemmaSweepPoint {
  double dtheta_norm = 0.0;
  double eps = 0.0;
  double output_err = 0.0;
  double adjoint_err = 0.0;
};

struct LemmaSweepResult {
  std::vector<LemmaSweepPoint> points;
  double alpha_out = 0.0, beta_out = 0.0, r2_out = 0.0;
  double alpha_adj = 0.0, beta_adj = 0.0, r2_adj = 0.0;
};

inline void fit_bilinear(const std::vector<LemmaSweepPoint>& pts, bool adjoint, double& alpha,
                         double& beta, double& r2) {
  // least squares for e ~ alpha*t + beta*s through the origin
  double att = 0, ass = 0, ats = 0, bt = 0, bs = 0;
  for (const auto& p : pts) {
    double e = adjoint ? p.adjoint_err : p.output_err;
    att += p.dtheta_norm * p.dtheta_norm;
    ass += p.eps * p.eps;
    ats += p.dtheta_norm * p.eps;
    bt += p.dtheta_norm * e;
    bs += p.eps * e;
  }
  double det = att * ass - ats * ats;
  if (std::abs(det) < 1e-300) throw std::runtime_error("fit_bilinear: degenerate sweep design");
  alpha = (ass * bt - ats * bs) / det;
  beta = (att * bs - ats * bt) / det;
  double mean = 0;
  for (const auto& p : pts) mean += adjoint ? p.adjoint_err : p.output_err;
  mean /= pts.size();
  double ss_res = 0, ss_tot = 0;
  for (const auto& p : pts) {
    double e = adjoint ? p.adjoint_err : p.output_err;
    double f = alpha * p.dtheta_norm + beta * p.eps;
    ss_res += (e - f) * (e - f);
    ss_tot += (e - mean) * (e - mean);
  }
  r2 = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 1.0;
}

/// Lowest spatial mode, constant in time, unit calU norm: the extremal
/// direction of the embedding into the data space.
inline StateField smooth_unit_direction(const Spaces& sp) {
  const auto& g = sp.grid();
  StateField d(g);
  for (int n = 0; n <= g.nt; ++n) {
    auto r = d.slice(n);
    for (int i = 0; i < g.nx; ++i)
      r[i] = std::sin(std::numbers::pi * g.node(i) / g.length);
  }
  double n0 = sp.norm_calU(d);
  for (auto& t : d.v.data) t /= n0;
  return d;
}

/// Measures how parameter error and state error transport to output and
/// adjoint errors, then fits the additive model alpha*|dtheta| + beta*eps.
inline LemmaSweepResult verify_error_lemmas(const System& sys, const ObservationSpec& spec,
                                            const Parameter& base,
                                            const std::vector<double>& dtheta_scales,
                                            const std::vector<double>& eps_scales,
                                            std::uint64_t seed, const SolverConfig& scfg = {}) {
  std::mt19937_64 rng(seed);
  Parameter dir = random_parameter_direction(sys, base.active, rng);
  StateField u1 = solve_forward(sys, base, scfg);
  ObservationData y1 = observe(sys.sp, spec, u1);
  StateField sdir = smooth_unit_direction(sys.sp);
  StateField vfix = smooth_unit_direction(sys.sp);  // fixed probe direction for the adjoint

  LemmaSweepResult res;
  Parameter g1 = s_prime_adjoint(sys, base, u1, vfix);
  for (double t : dtheta_scales) {
    for (double e : eps_scales) {
      if (t == 0.0 && e == 0.0) continue;
      Parameter theta2 = base;
      param_axpy(t, dir, theta2);
      StateField u2 = solve_forward(sys, theta2, scfg);
      for (std::size_t i = 0; i < u2.v.data.size(); ++i) u2.v.data[i] += e * sdir.v.data[i];
      ObservationData y2 = observe(sys.sp, spec, u2);
      LemmaSweepPoint p;
      p.dtheta_norm = t;
      p.eps = e;
      p.output_err = norm_Y(sys.sp, spec, data_diff(y2.values, y1.values));
      Parameter g2 = s_prime_adjoint(sys, theta2, u2, vfix);
      Parameter dg = param_diff_active(g2, g1);
      p.adjoint_err = sys.sp.norm_X(dg);
      res.points.push_back(p);
    }
  }
  fit_bilinear(res.points, false, res.alpha_out, res.beta_out, res.r2_out);
  fit_bilinear(res.points, true, res.alpha_adj, res.beta_adj, res.r2_adj);
  return res;
}

}  // namespace bilevel
