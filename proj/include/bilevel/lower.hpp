#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "bilevel/diagnostics.hpp"
#include "bilevel/model.hpp"

namespace bilevel {

enum class LowerStopMode { fixed_count, epsilon_target };

inline LowerStopMode lower_stop_mode_from_string(const std::string& s) {
  if (s == "fixed_count") return LowerStopMode::fixed_count;
  if (s == "epsilon_target") return LowerStopMode::epsilon_target;
  throw std::invalid_argument("unknown lower stop mode: " + s);
}

/// Inner Landweber controls. The step is resolved once per outer driver:
/// with auto_scale the raw step 1.5 / |F'|^2 comes from a power iteration at
/// the entry iterate and step_scale multiplies it, otherwise step_scale is
/// taken verbatim.
struct LowerConfig {
  LowerStopMode mode = LowerStopMode::fixed_count;
  int K = 100;               // step cap (exact count in fixed_count mode)
  double eps_target = 0.0;   // epsilon_target mode: stop once C_coe * residual <= this
  double step_scale = 1.0;
  bool auto_scale = true;
  double C_coe = 1.0;        // residual-to-error surrogate constant
  double resolved_mu = 0.0;  // set after the first resolve, reused afterwards

  // schedule K(j) = ceil((rate_const q^j / (gamma0 delta))^(2 alpha))
  double q = 1.1;
  double gamma0 = 1.0;
  double rate_const = 1.0;
  double alpha = 1.0;

  VReprConfig vrepr;
  int power_iters = 20;
  std::uint64_t power_seed = 12345;
};

struct LowerReport {
  StateField u;
  std::vector<double> residual_history;  // one entry per iterate, steps + 1 total
  std::vector<double> error_history;     // |u_k - oracle|_calU, only with an oracle
  std::vector<double> error_history_V;   // |u_k - oracle|_calV, only with an oracle
  int steps = 0;
  double eps_estimate = 0.0;  // C_coe * final residual
  double mu_used = 0.0;
};

inline double resolve_lower_step(const System& sys, const Parameter& theta, const StateField& u_ref,
                                 LowerConfig& cfg) {
  if (cfg.resolved_mu > 0.0) return cfg.resolved_mu;
  if (cfg.auto_scale) {
    double M = estimate_opnorm_Fprime(sys, theta, u_ref, cfg.power_iters, cfg.power_seed, cfg.vrepr);
    if (!(M > 0.0)) throw std::runtime_error("resolve_lower_step: operator norm estimate is zero");
    cfg.resolved_mu = cfg.step_scale * 1.5 / (M * M);
  } else {
    if (!(cfg.step_scale > 0.0))
      throw std::invalid_argument("resolve_lower_step: explicit step must be positive");
    cfg.resolved_mu = cfg.step_scale;
  }
  return cfg.resolved_mu;
}

/// Scheduled inner step count for outer index j at noise level delta.
/// delta = 0 falls back to the configured cap.
inline int lower_stop_index(int j, double delta, const LowerConfig& cfg) {
  if (delta < 0.0) throw std::invalid_argument("lower_stop_index: negative delta");
  if (j < 0) throw std::invalid_argument("lower_stop_index: negative outer index");
  if (delta == 0.0) return cfg.K;
  double base = cfg.rate_const * std::pow(cfg.q, j) / (cfg.gamma0 * delta);
  if (!(base > 0.0)) throw std::invalid_argument("lower_stop_index: schedule constants must be positive");
  double k = std::ceil(std::pow(base, 2.0 * cfg.alpha));
  double cap = static_cast<double>(std::numeric_limits<int>::max() / 2);
  return static_cast<int>(std::min(k, cap));
}

inline double eps_surrogate(const LowerConfig& cfg, double residual) {
  return cfg.C_coe * residual;
}

/// Landweber iteration on the flow-map residual at frozen parameters.
/// Stops after the configured count, or in epsilon_target mode as soon as the
/// error surrogate C_coe * residual drops below the target (the count still
/// caps the work). Throws on non-finite values and on residual blow-up.
inline LowerReport lower_landweber(const System& sys, const Parameter& theta,
                                   const StateField& u_init, LowerConfig& cfg,
                                   const StateField* oracle = nullptr) {
  check_conforming(theta, sys.grid(), "lower_landweber");
  if (cfg.K < 0) throw std::invalid_argument("lower_landweber: negative step cap");

  LowerReport rep;
  rep.u = u_init;
  rep.mu_used = resolve_lower_step(sys, theta, u_init, cfg);

  auto record = [&](const StateField& u, double res) {
    rep.residual_history.push_back(res);
    if (oracle) {
      StateField d(sys.grid());
      for (std::size_t i = 0; i < d.v.data.size(); ++i)
        d.v.data[i] = u.v.data[i] - oracle->v.data[i];
      rep.error_history.push_back(sys.sp.norm_calU(d));
      rep.error_history_V.push_back(sys.sp.norm_calV(d));
    }
  };

  ResidualPair rho = pde_residual(sys, theta, rep.u);
  double res = sys.sp.residual_norm(rho);
  if (!std::isfinite(res)) throw std::runtime_error("lower_landweber: non-finite initial residual");
  const double res0 = res;
  record(rep.u, res);

  while (rep.steps < cfg.K) {
    if (cfg.mode == LowerStopMode::epsilon_target && eps_surrogate(cfg, res) <= cfg.eps_target)
      break;
    StateField dir = apply_Fprime_adjoint(sys, theta, rep.u, rho, cfg.vrepr);
    for (std::size_t i = 0; i < rep.u.v.data.size(); ++i)
      rep.u.v.data[i] -= rep.mu_used * dir.v.data[i];
    ++rep.steps;
    rho = pde_residual(sys, theta, rep.u);
    res = sys.sp.residual_norm(rho);
    if (!std::isfinite(res))
      throw std::runtime_error("lower_landweber: non-finite residual at step " +
                               std::to_string(rep.steps));
    if (res > 10.0 * res0 && res0 > 0.0)
      throw std::runtime_error("lower_landweber: residual blow-up at step " +
                               std::to_string(rep.steps) + " (check the step scale)");
    record(rep.u, res);
  }

  rep.eps_estimate = eps_surrogate(cfg, res);
  return rep;
}

}  // namespace bilevel
