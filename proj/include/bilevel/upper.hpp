#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "bilevel/lower.hpp"
#include "bilevel/observe.hpp"
#include "bilevel/reference.hpp"

namespace bilevel {

/// Constants feeding the stopping rules. Scaled quantities refer to the
/// scheme operator sqrt(mu) G', so the step size is already folded in.
struct ConstantsLedger {
  double M_R = 0.8;       // scaled norm of the scheme operator
  double M_S = 1.0;       // solution-map Lipschitz bound
  double L_norm = 1.0;    // observation operator norm
  double C_tc = 0.05;     // tangential-cone constant of the reduced map
  double K_R = 1.05;      // 1 + C_tc
  double mu_R = 1.26;     // 2 (1 - C_tc) - M_R^2
  double C_coe = 1.0;     // lower-level residual-to-error surrogate
  double D_bound = 0.0;   // drift amplification fed by C_grad_fA
  double C_fu = 0.0;      // state-direction derivative bound (reported only)
  double L_grad_f = 0.0;  // derivative Lipschitz bound (reported only)
  double C_grad_fA = 0.0; // parameter-direction derivative bound
  double tau = 0.0;       // discrepancy factor; derive_tau fills when zero
  double R = 1.0;         // admissible drift radius
  double R0 = 0.0;        // initial-error radius
  double rho = 1.0;       // drift budget for the scheduled rule
  double q = 1.1;         // inner accuracy decay ratio
  double gamma0 = 1.0;    // inner accuracy scale, gamma(j) = gamma0 / q^j
  double alpha = 1.0;     // inner convergence-rate exponent
  double delta_bar = 0.0; // largest noise level the run is calibrated for
  double gamma_bar = 0.0; // largest inner accuracy factor, usually gamma0
  double eps_split = 0.41421356237309515;  // sqrt(2) - 1
};

inline void derive_dependent(ConstantsLedger& c) {
  c.K_R = 1.0 + c.C_tc;
  c.mu_R = 2.0 * (1.0 - c.C_tc) - c.M_R * c.M_R;
  c.D_bound = c.C_grad_fA * c.L_norm *
              (c.delta_bar + c.M_R * c.R + c.L_norm * c.delta_bar * c.gamma_bar);
}

inline std::vector<std::string> validate(const ConstantsLedger& c) {
  std::vector<std::string> bad;
  auto req = [&](bool ok, const std::string& msg) {
    if (!ok) bad.push_back(msg);
  };
  req(c.M_R > 0.0, "M_R must be positive");
  req(c.M_S >= 0.0, "M_S must be nonnegative");
  req(c.L_norm > 0.0, "L_norm must be positive");
  req(c.C_tc >= 0.0 && c.C_tc < 1.0, "C_tc must lie in [0, 1)");
  req(c.C_coe > 0.0, "C_coe must be positive");
  req(c.q > 1.0, "q must exceed 1");
  req(c.gamma0 >= 0.0, "gamma0 must be nonnegative");
  req(c.alpha > 0.0, "alpha must be positive");
  req(c.eps_split > 0.0, "eps_split must be positive");
  req(c.R >= c.R0 && c.R0 >= 0.0, "need R >= R0 >= 0");
  req(c.rho > 0.0, "rho must be positive");
  req(c.mu_R > 0.0, "mu_R = 2(1 - C_tc) - M_R^2 must be positive");
  req(c.tau == 0.0 || c.tau > 1.0, "tau must exceed 1 when set");
  req(c.delta_bar >= 0.0, "delta_bar must be nonnegative");
  req(c.gamma_bar >= 0.0, "gamma_bar must be nonnegative");
  return bad;
}

inline void validate_or_throw(const ConstantsLedger& c) {
  auto bad = validate(c);
  if (bad.empty()) return;
  std::string msg = "constants ledger invalid:";
  for (const auto& b : bad) msg += "\n  - " + b;
  throw std::invalid_argument(msg);
}

/// Discrepancy factor for the data-driven rule at inner accuracy gamma.
/// The gamma-free part of the denominator must stay positive; at gamma = 0
/// the splitting parameter drops out entirely.
inline double gamma_posterior(const ConstantsLedger& c, double gamma) {
  if (gamma < 0.0) throw std::invalid_argument("gamma_posterior: negative gamma");
  double num = 2.0 * (1.0 + c.C_tc + c.L_norm * c.K_R * gamma);
  double gamma_term = c.L_norm * (2.0 * c.K_R * gamma + c.M_R * c.M_R * c.L_norm * gamma * gamma);
  double den = 2.0 - (1.0 + c.eps_split) * c.M_R * c.M_R - 2.0 * c.C_tc;
  if (gamma_term > 0.0) {
    if (!(c.eps_split > 0.0))
      throw std::invalid_argument("gamma_posterior: eps_split must be positive when gamma > 0");
    den -= gamma_term * (1.0 + 1.0 / c.eps_split);
  }
  if (!(den > 0.0))
    throw std::runtime_error("gamma_posterior: infeasible constants, denominator " +
                             std::to_string(den));
  return num / den;
}

inline double derive_tau(const ConstantsLedger& c) {
  if (c.tau > 0.0) return c.tau;
  return 1.2 * gamma_posterior(c, c.gamma0);
}

inline bool posterior_stop_check(double residual, double tau, double delta) {
  if (tau <= 1.0) throw std::invalid_argument("posterior_stop_check: tau must exceed 1");
  if (delta < 0.0) throw std::invalid_argument("posterior_stop_check: negative delta");
  return residual <= tau * delta;
}

/// Worst-case drift amplification after j outer steps under the scheduled
/// rule. B collects the per-step growth; the geometric sums are evaluated
/// with explicit limit branches at B = 1 and B = 1/q.
inline double gamma_hat_prior(const ConstantsLedger& c, int j) {
  if (j < 0) throw std::invalid_argument("gamma_hat_prior: negative index");
  if (j == 0) return 0.0;
  const double B = 1.0 + c.M_R * c.M_R + (1.0 + c.M_S) * c.D_bound;
  const double coeff = (c.M_R * c.L_norm + c.D_bound) / c.q;
  const double tiny = 1e-12;
  double term1;
  if (std::abs(B - 1.0) < tiny)
    term1 = c.M_R * j;
  else
    term1 = c.M_R * (std::pow(B, j) - 1.0) / (B - 1.0);
  double term2;
  if (std::abs(B - 1.0 / c.q) < tiny)
    term2 = coeff * j * std::pow(B, j - 1);
  else
    term2 = coeff * (std::pow(B, j) - std::pow(c.q, -j)) / (B - 1.0 / c.q);
  return term1 + term2;
}

struct PriorStopInfo {
  long long j_budget = 0;
  long long j_drift = 0;
  long long j_star = 0;
};

/// Scheduled stopping index: the iteration budget from the descent estimate,
/// capped by the largest index whose worst-case drift stays inside rho.
inline PriorStopInfo prior_stop_index(const ConstantsLedger& c, double delta) {
  if (delta < 0.0) throw std::invalid_argument("prior_stop_index: negative delta");
  const long long huge = std::numeric_limits<long long>::max() / 4;
  PriorStopInfo info;
  if (delta == 0.0) {
    info.j_budget = info.j_drift = info.j_star = huge;
    return info;
  }
  if (!(c.mu_R > 0.0)) throw std::runtime_error("prior_stop_index: mu_R must be positive");
  double kk = c.K_R * c.K_R / c.mu_R;
  double lg = c.L_norm * c.gamma_bar;
  double denom = kk + 5.0 * c.M_R * c.M_R + 2.0 * kk * lg * lg + 3.5 * c.M_R * c.M_R * lg * lg;
  if (!(denom > 0.0)) throw std::runtime_error("prior_stop_index: degenerate budget denominator");
  double budget = (c.R * c.R - c.R0 * c.R0) / (delta * delta * denom);
  info.j_budget = budget >= static_cast<double>(huge) ? huge
                                                      : static_cast<long long>(std::floor(budget));
  if (info.j_budget < 0) info.j_budget = 0;

  // incremental scan of gamma_hat: hat(j+1) = B hat(j) + M_R + coeff q^{-j}
  const double B = 1.0 + c.M_R * c.M_R + (1.0 + c.M_S) * c.D_bound;
  const double coeff = (c.M_R * c.L_norm + c.D_bound) / c.q;
  const double bound = c.rho / delta;
  const long long scan_cap = 1000000;
  double hat = 0.0, qpow = 1.0;
  long long j = 0;
  while (j < scan_cap) {
    double next = B * hat + c.M_R + coeff * qpow;
    if (!(next <= bound)) break;
    hat = next;
    qpow /= c.q;
    ++j;
  }
  info.j_drift = (j >= scan_cap) ? huge : j;
  info.j_star = std::min(info.j_budget, info.j_drift);
  return info;
}

enum class UpperStopRule { posterior, prior, max_iter_only };

inline UpperStopRule upper_stop_rule_from_string(const std::string& s) {
  if (s == "posterior") return UpperStopRule::posterior;
  if (s == "prior") return UpperStopRule::prior;
  if (s == "max_iter") return UpperStopRule::max_iter_only;
  throw std::invalid_argument("unknown stop rule: " + s);
}

enum class StopReason { posterior_discrepancy, prior_index, max_iter, divergence };

inline std::string to_string(StopReason r) {
  switch (r) {
    case StopReason::posterior_discrepancy: return "posterior_discrepancy";
    case StopReason::prior_index: return "prior_index";
    case StopReason::max_iter: return "max_iter";
    case StopReason::divergence: return "divergence";
  }
  return "unknown";
}

struct UpperConfig {
  UpperStopRule rule = UpperStopRule::posterior;
  int max_iter = 100;
  double tau = 2.0;         // posterior rule threshold factor
  double delta = 0.0;       // noise level of the supplied data
  double step_scale = 1.0;  // multiplies the auto step, or is the step itself
  bool auto_scale = true;
  double target_M_R = 0.8;  // scaled operator norm the auto step aims for
  int power_iters = 20;
  std::uint64_t power_seed = 777;
  bool warm_start = true;
  bool trace_thetas = false;  // keep a copy of every evaluated outer iterate
  LowerConfig lower;
  ConstantsLedger constants;
  SolverConfig newton;
  VReprConfig vrepr;
};

struct UpperReport {
  Parameter theta;
  std::vector<double> residual_history;     // data misfit per evaluated outer iterate
  std::vector<double> drift_history;        // |theta_j - theta_0|_X
  std::vector<double> error_history;        // |theta_j - truth|_X when truth is given
  std::vector<int> K_used;                  // inner step caps (outer-driven runs)
  std::vector<int> lower_steps;             // inner steps actually taken
  std::vector<double> lower_exit_residual;  // strong residual of the inner exit state
  std::vector<Parameter> theta_trace;       // evaluated iterates, only when traced
  int iterations = 0;
  StopReason reason = StopReason::max_iter;
  double mu_used = 0.0;
  long long j_budget = -1;
  long long j_drift = -1;
  std::string note;
};

namespace detail {

inline StateField cold_start(const SpaceTimeGrid& g, const Parameter& theta) {
  StateField u(g);
  for (int n = 0; n <= g.nt; ++n) {
    auto r = u.slice(n);
    for (int i = 0; i < g.nx; ++i) r[i] = theta.u0[i];
  }
  return u;
}

inline double resolve_upper_step(const System& sys, const ObservationSpec& spec,
                                 const Parameter& theta0, UpperConfig& cfg) {
  if (!cfg.auto_scale) {
    if (!(cfg.step_scale > 0.0))
      throw std::invalid_argument("upper step: explicit step must be positive");
    return cfg.step_scale;
  }
  StateField u0 = solve_forward(sys, theta0, cfg.newton);
  double M = estimate_opnorm_Gprime(sys, spec, theta0, u0, cfg.power_iters, cfg.power_seed);
  if (!(M > 0.0)) throw std::runtime_error("upper step: operator norm estimate is zero");
  return cfg.step_scale * cfg.target_M_R * cfg.target_M_R / (M * M);
}

inline UpperReport outer_loop(const System& sys, const ObservationSpec& spec,
                              const ObservationData& data, const Parameter& theta0,
                              const Parameter* truth, UpperConfig cfg, bool exact_inner) {
  check_conforming(theta0, sys.grid(), "outer driver");
  if (!theta0.active.any()) throw std::invalid_argument("outer driver: empty active set");
  if (cfg.max_iter < 0) throw std::invalid_argument("outer driver: negative max_iter");
  check_shape(data.values, spec.data_rows(sys.grid()), spec.data_cols(sys.grid()), "outer data");
  if (truth) check_conforming(*truth, sys.grid(), "outer truth");
  if (cfg.rule == UpperStopRule::posterior && cfg.delta > 0.0 && cfg.tau <= 1.0)
    throw std::invalid_argument("outer driver: posterior rule needs tau > 1");

  UpperReport rep;
  rep.theta = theta0;
  rep.mu_used = resolve_upper_step(sys, spec, theta0, cfg);

  long long j_star = std::numeric_limits<long long>::max() / 4;
  if (cfg.rule == UpperStopRule::prior) {
    PriorStopInfo info = prior_stop_index(cfg.constants, cfg.delta);
    rep.j_budget = info.j_budget;
    rep.j_drift = info.j_drift;
    j_star = info.j_star;
    if (j_star == 0) rep.note = "scheduled stop index is zero, no update performed";
  }

  const double guard_radius = cfg.constants.R > 0.0 ? 10.0 * cfg.constants.R
                                                    : std::numeric_limits<double>::infinity();
  StateField u_prev;
  bool have_prev = false;
  bool clamped_a = false;

  for (int j = 0;; ++j) {
    if (cfg.rule == UpperStopRule::prior && j >= j_star) {
      rep.reason = StopReason::prior_index;
      break;
    }
    if (j >= cfg.max_iter) {
      rep.reason = StopReason::max_iter;
      break;
    }

    Parameter drift = param_diff_active(rep.theta, theta0);
    double drift_norm = sys.sp.norm_X(drift);
    rep.drift_history.push_back(drift_norm);
    if (cfg.trace_thetas) rep.theta_trace.push_back(rep.theta);
    if (truth) {
      Parameter err = param_diff_active(rep.theta, *truth);
      rep.error_history.push_back(sys.sp.norm_X(err));
    }
    if (drift_norm > guard_radius) {
      rep.reason = StopReason::divergence;
      rep.note = "drift exceeded 10 R after " + std::to_string(j) + " updates";
      break;
    }

    StateField u;
    if (exact_inner) {
      u = solve_forward(sys, rep.theta, cfg.newton);
      rep.K_used.push_back(0);
      rep.lower_steps.push_back(0);
    } else {
      int K_cap = std::min(lower_stop_index(j, cfg.delta, cfg.lower), cfg.lower.K);
      LowerConfig lc = cfg.lower;
      lc.K = K_cap;
      if (lc.mode == LowerStopMode::epsilon_target && cfg.delta > 0.0)
        lc.eps_target = cfg.delta * lc.gamma0 / std::pow(lc.q, j);
      StateField u_init = (cfg.warm_start && have_prev) ? u_prev
                                                        : cold_start(sys.grid(), rep.theta);
      LowerReport lrep = lower_landweber(sys, rep.theta, u_init, lc, nullptr);
      cfg.lower.resolved_mu = lc.resolved_mu;
      u = std::move(lrep.u);
      rep.K_used.push_back(K_cap);
      rep.lower_steps.push_back(lrep.steps);
    }
    u_prev = u;
    have_prev = true;
    rep.lower_exit_residual.push_back(sys.sp.residual_norm(pde_residual(sys, rep.theta, u)));

    ObservationData pred = observe(sys.sp, spec, u);
    Array2 r = data_diff(pred.values, data.values);
    double res = norm_Y(sys.sp, spec, r);
    if (!std::isfinite(res))
      throw std::runtime_error("outer driver: non-finite data residual at step " +
                               std::to_string(j));
    rep.residual_history.push_back(res);

    if (cfg.rule == UpperStopRule::posterior && cfg.delta > 0.0 &&
        posterior_stop_check(res, cfg.tau, cfg.delta)) {
      rep.reason = StopReason::posterior_discrepancy;
      break;
    }

    StateField v = observe_adjoint(sys.sp, spec, r);
    Parameter grad = s_prime_adjoint(sys, rep.theta, u, v);
    param_axpy(-rep.mu_used, grad, rep.theta);
    if (rep.theta.active.a) {
      for (auto& t : rep.theta.a)
        if (t < sys.a_min) {
          t = sys.a_min;
          clamped_a = true;
        }
    }
    rep.iterations = j + 1;
  }

  if (clamped_a) {
    if (!rep.note.empty()) rep.note += "; ";
    rep.note += "diffusion iterate clamped at its lower bound";
  }
  return rep;
}

}  // namespace detail

/// Outer iteration with the inner problem solved to machine accuracy.
inline UpperReport single_level_landweber(const System& sys, const ObservationSpec& spec,
                                          const ObservationData& data, const Parameter& theta0,
                                          const Parameter* truth, const UpperConfig& cfg) {
  return detail::outer_loop(sys, spec, data, theta0, truth, cfg, true);
}

/// Outer iteration over inexact inner states produced by the inner Landweber
/// iteration under the configured accuracy schedule.
inline UpperReport bilevel_landweber(const System& sys, const ObservationSpec& spec,
                                     const ObservationData& data, const Parameter& theta0,
                                     const Parameter* truth, const UpperConfig& cfg) {
  return detail::outer_loop(sys, spec, data, theta0, truth, cfg, false);
}

}  // namespace bilevel
