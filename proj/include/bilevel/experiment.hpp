#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

#include "bilevel/upper.hpp"

namespace bilevel {

using nlohmann::json;

// --- configuration ----------------------------------------------------------

/// Materialized run description. Every field has a default so a config file
/// only names what it changes.
struct ExperimentConfig {
  int nx = 49;
  int nt = 100;
  double length = 1.0;
  double T = 0.5;

  Nonlinearity nl = Nonlinearity::zero;
  double L_phi = 1.0;
  double a_min = 1e-8;

  double truth_amplitude = 1.0;
  ActiveSet active;  // defaults to source + initial value

  ObservationKind obs_kind = ObservationKind::snapshots;
  std::vector<double> obs_times;                         // empty: equispaced interior default
  std::vector<std::pair<double, double>> obs_intervals;  // averages only

  double delta = 0.0;
  std::uint64_t noise_seed = 1;

  bool bilevel_mode = true;
  bool calibrate = true;
  UpperConfig upper;

  std::string out_dir = "out";
  bool write_histories = true;
};

inline void check_keys(const json& j, std::initializer_list<const char*> allowed,
                       const std::string& where, std::vector<std::string>& issues) {
  if (!j.is_object()) {
    issues.push_back(where + ": expected an object");
    return;
  }
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) ok = true;
    if (!ok) issues.push_back(where + ": unknown key '" + it.key() + "'");
  }
}

namespace detail {

template <class T>
T get_or(const json& j, const char* key, T dflt, const std::string& where,
         std::vector<std::string>& issues) {
  if (!j.is_object() || !j.contains(key)) return dflt;
  try {
    return j.at(key).get<T>();
  } catch (const std::exception&) {
    issues.push_back(where + ": key '" + std::string(key) + "' has the wrong type");
    return dflt;
  }
}

}  // namespace detail

/// Parses and cross-checks a run description. All problems are collected and
/// reported together; nothing is silently corrected.
inline ExperimentConfig parse_config(const json& j) {
  std::vector<std::string> issues;
  ExperimentConfig cfg;

  check_keys(j, {"grid", "model", "truth", "unknowns", "observation", "noise", "scheme", "output"},
             "config", issues);
  using detail::get_or;

  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    check_keys(g, {"nx", "nt", "length", "T"}, "grid", issues);
    cfg.nx = get_or(g, "nx", cfg.nx, "grid", issues);
    cfg.nt = get_or(g, "nt", cfg.nt, "grid", issues);
    cfg.length = get_or(g, "length", cfg.length, "grid", issues);
    cfg.T = get_or(g, "T", cfg.T, "grid", issues);
  }
  if (cfg.nx < 2) issues.push_back("grid: nx must be at least 2");
  if (cfg.nt < 1) issues.push_back("grid: nt must be at least 1");
  if (!(cfg.length > 0.0)) issues.push_back("grid: length must be positive");
  if (!(cfg.T > 0.0)) issues.push_back("grid: T must be positive");

  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m, {"nonlinearity", "L_phi", "a_min"}, "model", issues);
    std::string nl = get_or<std::string>(m, "nonlinearity", to_string(cfg.nl), "model", issues);
    try {
      cfg.nl = nonlinearity_from_string(nl);
    } catch (const std::exception& e) {
      issues.push_back(std::string("model: ") + e.what());
    }
    cfg.L_phi = get_or(m, "L_phi", cfg.L_phi, "model", issues);
    cfg.a_min = get_or(m, "a_min", cfg.a_min, "model", issues);
  }
  if (cfg.L_phi < 0.0) issues.push_back("model: L_phi must be nonnegative");
  if (!(cfg.a_min > 0.0)) issues.push_back("model: a_min must be positive");

  if (j.contains("truth")) {
    const auto& t = j.at("truth");
    check_keys(t, {"amplitude"}, "truth", issues);
    cfg.truth_amplitude = get_or(t, "amplitude", cfg.truth_amplitude, "truth", issues);
  }
  if (cfg.truth_amplitude == 0.0) issues.push_back("truth: amplitude must be nonzero");

  if (j.contains("unknowns")) {
    const auto& u = j.at("unknowns");
    check_keys(u, {"a", "c", "phi", "u0"}, "unknowns", issues);
    cfg.active.a = get_or(u, "a", cfg.active.a, "unknowns", issues);
    cfg.active.c = get_or(u, "c", cfg.active.c, "unknowns", issues);
    cfg.active.phi = get_or(u, "phi", cfg.active.phi, "unknowns", issues);
    cfg.active.u0 = get_or(u, "u0", cfg.active.u0, "unknowns", issues);
  }
  if (!cfg.active.any()) issues.push_back("unknowns: at least one component must be active");

  if (j.contains("observation")) {
    const auto& o = j.at("observation");
    check_keys(o, {"kind", "times", "intervals"}, "observation", issues);
    std::string k = get_or<std::string>(o, "kind", to_string(cfg.obs_kind), "observation", issues);
    try {
      cfg.obs_kind = observation_kind_from_string(k);
    } catch (const std::exception& e) {
      issues.push_back(std::string("observation: ") + e.what());
    }
    cfg.obs_times = get_or(o, "times", cfg.obs_times, "observation", issues);
    auto pairs = get_or<std::vector<std::vector<double>>>(o, "intervals", {}, "observation", issues);
    for (const auto& p : pairs) {
      if (p.size() != 2) {
        issues.push_back("observation: each interval needs exactly two endpoints");
        continue;
      }
      cfg.obs_intervals.emplace_back(p[0], p[1]);
    }
    if (cfg.obs_kind != ObservationKind::snapshots && !cfg.obs_times.empty())
      issues.push_back("observation: 'times' only applies to snapshots");
    if (cfg.obs_kind != ObservationKind::averages && !cfg.obs_intervals.empty())
      issues.push_back("observation: 'intervals' only applies to averages");
  }

  if (j.contains("noise")) {
    const auto& n = j.at("noise");
    check_keys(n, {"delta", "seed"}, "noise", issues);
    cfg.delta = get_or(n, "delta", cfg.delta, "noise", issues);
    cfg.noise_seed = get_or(n, "seed", cfg.noise_seed, "noise", issues);
  }
  if (cfg.delta < 0.0) issues.push_back("noise: delta must be nonnegative");

  if (j.contains("scheme")) {
    const auto& s = j.at("scheme");
    check_keys(s,
               {"mode", "rule", "max_iter", "tau", "step_scale", "auto_scale", "target_M_R",
                "warm_start", "calibrate", "power_iters", "lower", "constants"},
               "scheme", issues);
    std::string mode = get_or<std::string>(s, "mode", "bilevel", "scheme", issues);
    if (mode == "bilevel")
      cfg.bilevel_mode = true;
    else if (mode == "single_level")
      cfg.bilevel_mode = false;
    else
      issues.push_back("scheme: mode must be 'bilevel' or 'single_level'");
    std::string rule = get_or<std::string>(s, "rule", "posterior", "scheme", issues);
    try {
      cfg.upper.rule = upper_stop_rule_from_string(rule);
    } catch (const std::exception& e) {
      issues.push_back(std::string("scheme: ") + e.what());
    }
    cfg.upper.max_iter = get_or(s, "max_iter", cfg.upper.max_iter, "scheme", issues);
    cfg.upper.tau = get_or(s, "tau", 0.0, "scheme", issues);
    cfg.upper.step_scale = get_or(s, "step_scale", cfg.upper.step_scale, "scheme", issues);
    cfg.upper.auto_scale = get_or(s, "auto_scale", cfg.upper.auto_scale, "scheme", issues);
    cfg.upper.target_M_R = get_or(s, "target_M_R", cfg.upper.target_M_R, "scheme", issues);
    cfg.upper.warm_start = get_or(s, "warm_start", cfg.upper.warm_start, "scheme", issues);
    cfg.upper.power_iters = get_or(s, "power_iters", cfg.upper.power_iters, "scheme", issues);
    cfg.calibrate = get_or(s, "calibrate", cfg.calibrate, "scheme", issues);

    if (s.contains("lower")) {
      const auto& l = s.at("lower");
      check_keys(l,
                 {"mode", "K", "eps_target", "step_scale", "auto_scale", "C_coe", "q", "gamma0",
                  "rate_const", "alpha", "power_iters"},
                 "scheme.lower", issues);
      auto& lc = cfg.upper.lower;
      std::string lmode = get_or<std::string>(l, "mode", "epsilon_target", "scheme.lower", issues);
      try {
        lc.mode = lower_stop_mode_from_string(lmode);
      } catch (const std::exception& e) {
        issues.push_back(std::string("scheme.lower: ") + e.what());
      }
      lc.K = get_or(l, "K", lc.K, "scheme.lower", issues);
      lc.eps_target = get_or(l, "eps_target", lc.eps_target, "scheme.lower", issues);
      lc.step_scale = get_or(l, "step_scale", lc.step_scale, "scheme.lower", issues);
      lc.auto_scale = get_or(l, "auto_scale", lc.auto_scale, "scheme.lower", issues);
      lc.C_coe = get_or(l, "C_coe", lc.C_coe, "scheme.lower", issues);
      lc.q = get_or(l, "q", lc.q, "scheme.lower", issues);
      lc.gamma0 = get_or(l, "gamma0", lc.gamma0, "scheme.lower", issues);
      lc.rate_const = get_or(l, "rate_const", lc.rate_const, "scheme.lower", issues);
      lc.alpha = get_or(l, "alpha", lc.alpha, "scheme.lower", issues);
      lc.power_iters = get_or(l, "power_iters", lc.power_iters, "scheme.lower", issues);
    } else {
      cfg.upper.lower.mode = LowerStopMode::epsilon_target;
    }

    if (s.contains("constants")) {
      const auto& c = s.at("constants");
      check_keys(c,
                 {"M_R", "M_S", "L_norm", "C_tc", "C_coe", "C_grad_fA", "R", "R0", "rho",
                  "eps_split", "delta_bar", "gamma_bar"},
                 "scheme.constants", issues);
      auto& cl = cfg.upper.constants;
      cl.M_R = get_or(c, "M_R", cl.M_R, "scheme.constants", issues);
      cl.M_S = get_or(c, "M_S", cl.M_S, "scheme.constants", issues);
      cl.L_norm = get_or(c, "L_norm", cl.L_norm, "scheme.constants", issues);
      cl.C_tc = get_or(c, "C_tc", cl.C_tc, "scheme.constants", issues);
      cl.C_coe = get_or(c, "C_coe", cl.C_coe, "scheme.constants", issues);
      cl.C_grad_fA = get_or(c, "C_grad_fA", cl.C_grad_fA, "scheme.constants", issues);
      cl.R = get_or(c, "R", cl.R, "scheme.constants", issues);
      cl.R0 = get_or(c, "R0", cl.R0, "scheme.constants", issues);
      cl.rho = get_or(c, "rho", cl.rho, "scheme.constants", issues);
      cl.eps_split = get_or(c, "eps_split", cl.eps_split, "scheme.constants", issues);
      cl.delta_bar = get_or(c, "delta_bar", cl.delta_bar, "scheme.constants", issues);
      cl.gamma_bar = get_or(c, "gamma_bar", cl.gamma_bar, "scheme.constants", issues);
    }
  } else {
    cfg.upper.lower.mode = LowerStopMode::epsilon_target;
  }
  if (cfg.upper.max_iter < 0) issues.push_back("scheme: max_iter must be nonnegative");
  if (cfg.upper.tau != 0.0 && cfg.upper.tau <= 1.0)
    issues.push_back("scheme: tau must exceed 1 (or be 0 to derive it)");
  if (!(cfg.upper.step_scale > 0.0)) issues.push_back("scheme: step_scale must be positive");
  if (!(cfg.upper.target_M_R > 0.0)) issues.push_back("scheme: target_M_R must be positive");
  if (cfg.upper.lower.K < 0) issues.push_back("scheme.lower: K must be nonnegative");
  if (!(cfg.upper.lower.step_scale > 0.0))
    issues.push_back("scheme.lower: step_scale must be positive");
  if (!(cfg.upper.lower.q > 1.0)) issues.push_back("scheme.lower: q must exceed 1");
  if (!(cfg.upper.lower.gamma0 > 0.0)) issues.push_back("scheme.lower: gamma0 must be positive");
  if (!(cfg.upper.lower.rate_const > 0.0))
    issues.push_back("scheme.lower: rate_const must be positive");
  if (!(cfg.upper.lower.alpha > 0.0)) issues.push_back("scheme.lower: alpha must be positive");
  if (cfg.upper.lower.C_coe <= 0.0) issues.push_back("scheme.lower: C_coe must be positive");
  if (cfg.upper.lower.eps_target < 0.0)
    issues.push_back("scheme.lower: eps_target must be nonnegative");

  if (j.contains("output")) {
    const auto& o = j.at("output");
    check_keys(o, {"dir", "write_histories"}, "output", issues);
    cfg.out_dir = get_or<std::string>(o, "dir", cfg.out_dir, "output", issues);
    cfg.write_histories = get_or(o, "write_histories", cfg.write_histories, "output", issues);
  }

  // grid-dependent observation checks join the same listing
  if (issues.empty()) {
    try {
      SpaceTimeGrid g = build_grid(cfg.nx, cfg.nt, cfg.length, cfg.T);
      if (cfg.obs_kind == ObservationKind::snapshots && !cfg.obs_times.empty())
        make_snapshot_spec(g, cfg.obs_times);
      if (cfg.obs_kind == ObservationKind::averages && !cfg.obs_intervals.empty())
        make_average_spec(g, cfg.obs_intervals);
    } catch (const std::exception& e) {
      issues.push_back(std::string("observation: ") + e.what());
    }
  }

  if (!issues.empty()) {
    std::string msg = "config invalid:";
    for (const auto& t : issues) msg += "\n  - " + t;
    throw std::invalid_argument(msg);
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const std::exception& e) {
    throw std::runtime_error("config parse error in " + path + ": " + e.what());
  }
  return parse_config(j);
}

// --- canonical dump and hash ------------------------------------------------

inline json canonical_json(const ExperimentConfig& c) {
  json j;
  j["grid"] = {{"nx", c.nx}, {"nt", c.nt}, {"length", c.length}, {"T", c.T}};
  j["model"] = {{"nonlinearity", to_string(c.nl)}, {"L_phi", c.L_phi}, {"a_min", c.a_min}};
  j["truth"] = {{"amplitude", c.truth_amplitude}};
  j["unknowns"] = {{"a", c.active.a}, {"c", c.active.c}, {"phi", c.active.phi}, {"u0", c.active.u0}};
  json obs = {{"kind", to_string(c.obs_kind)}};
  obs["times"] = c.obs_times;
  json iv = json::array();
  for (auto [lo, hi] : c.obs_intervals) iv.push_back({lo, hi});
  obs["intervals"] = iv;
  j["observation"] = obs;
  j["noise"] = {{"delta", c.delta}, {"seed", c.noise_seed}};
  const auto& u = c.upper;
  j["scheme"] = {{"mode", c.bilevel_mode ? "bilevel" : "single_level"},
                 {"rule", u.rule == UpperStopRule::posterior
                              ? "posterior"
                              : (u.rule == UpperStopRule::prior ? "prior" : "max_iter")},
                 {"max_iter", u.max_iter},
                 {"tau", u.tau},
                 {"step_scale", u.step_scale},
                 {"auto_scale", u.auto_scale},
                 {"target_M_R", u.target_M_R},
                 {"warm_start", u.warm_start},
                 {"power_iters", u.power_iters},
                 {"calibrate", c.calibrate},
                 {"lower",
                  {{"mode", u.lower.mode == LowerStopMode::fixed_count ? "fixed_count"
                                                                       : "epsilon_target"},
                   {"K", u.lower.K},
                   {"eps_target", u.lower.eps_target},
                   {"step_scale", u.lower.step_scale},
                   {"auto_scale", u.lower.auto_scale},
                   {"C_coe", u.lower.C_coe},
                   {"q", u.lower.q},
                   {"gamma0", u.lower.gamma0},
                   {"rate_const", u.lower.rate_const},
                   {"alpha", u.lower.alpha},
                   {"power_iters", u.lower.power_iters}}},
                 {"constants",
                  {{"M_R", u.constants.M_R},
                   {"M_S", u.constants.M_S},
                   {"L_norm", u.constants.L_norm},
                   {"C_tc", u.constants.C_tc},
                   {"C_coe", u.constants.C_coe},
                   {"C_grad_fA", u.constants.C_grad_fA},
                   {"R", u.constants.R},
                   {"R0", u.constants.R0},
                   {"rho", u.constants.rho},
                   {"eps_split", u.constants.eps_split},
                   {"delta_bar", u.constants.delta_bar},
                   {"gamma_bar", u.constants.gamma_bar}}}};
  // the output block stays out: where results land does not change the run
  return j;
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string config_hash(const ExperimentConfig& c) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(canonical_json(c).dump())));
  return buf;
}

// --- fixture ----------------------------------------------------------------

/// Separated product truth: state amp e^{-t} sin(pi x / length) under unit
/// diffusion and unit linear reaction; the source absorbs whatever the
/// nonlinearity adds, slice-aligned with the residual rows.
inline Parameter manufactured_truth(const System& sys, const ActiveSet& act, double amplitude) {
  const auto& g = sys.grid();
  Parameter t(g);
  t.active = act;
  const double om = std::numbers::pi / g.length;
  for (auto& v : t.c) v = 1.0;
  for (int i = 0; i < g.nx; ++i) t.u0[i] = amplitude * std::sin(om * g.node(i));
  for (int n = 0; n < g.nt; ++n) {
    auto row = t.phi.row(n);
    double decay = std::exp(-g.time(n + 1));
    for (int i = 0; i < g.nx; ++i) {
      double u = amplitude * decay * std::sin(om * g.node(i));
      row[i] = om * om * u + sys.nl.phi(u);
    }
  }
  return t;
}

/// Neutral start: inactive components pinned to the truth, active ones reset
/// (unit diffusion, zero reaction, zero source, zero initial value).
inline Parameter neutral_start(const Parameter& truth) {
  Parameter p = truth;
  if (p.active.a)
    for (auto& t : p.a) t = 1.0;
  if (p.active.c)
    for (auto& t : p.c) t = 0.0;
  if (p.active.phi)
    for (auto& t : p.phi.data) t = 0.0;
  if (p.active.u0)
    for (auto& t : p.u0) t = 0.0;
  return p;
}

/// Snapshot times when none are given: ten equispaced interior slices covering
/// (0, 0.9 T], chosen on the grid so they always align.
inline ObservationSpec default_snapshot_spec(const SpaceTimeGrid& g) {
  std::vector<double> times;
  int prev = 0;
  for (int i = 1; i <= 10; ++i) {
    int slice = static_cast<int>(std::llround(0.09 * i * g.nt));
    slice = std::clamp(slice, 1, g.nt);
    if (slice <= prev) continue;
    prev = slice;
    times.push_back(slice * g.ht);
  }
  return make_snapshot_spec(g, times);
}

inline ObservationSpec build_observation(const SpaceTimeGrid& g, const ExperimentConfig& cfg) {
  switch (cfg.obs_kind) {
    case ObservationKind::full:
      return make_full_spec();
    case ObservationKind::snapshots:
      return cfg.obs_times.empty() ? default_snapshot_spec(g)
                                   : make_snapshot_spec(g, cfg.obs_times);
    case ObservationKind::averages: {
      if (!cfg.obs_intervals.empty()) return make_average_spec(g, cfg.obs_intervals);
      std::vector<std::pair<double, double>> thirds = {{0.0, cfg.length / 3.0},
                                                       {cfg.length / 3.0, 2.0 * cfg.length / 3.0},
                                                       {2.0 * cfg.length / 3.0, cfg.length}};
      return make_average_spec(g, thirds);
    }
  }
  throw std::logic_error("build_observation: unreachable");
}

struct Fixture {
  SpaceTimeGrid grid;
  System sys;
  ObservationSpec spec;
  Parameter truth;
  Parameter theta0;
  StateField u_truth;
  ObservationData clean;
  ObservationData data;
};

inline Fixture build_fixture(const ExperimentConfig& cfg, const SolverConfig& scfg = {}) {
  Fixture fx;
  fx.grid = build_grid(cfg.nx, cfg.nt, cfg.length, cfg.T);
  NonlinearitySpec nl;
  nl.kind = cfg.nl;
  nl.L_phi = cfg.L_phi;
  fx.sys = make_system(fx.grid, Vec(fx.grid.nx, 1.0), cfg.a_min, nl);
  fx.spec = build_observation(fx.grid, cfg);
  fx.truth = manufactured_truth(fx.sys, cfg.active, cfg.truth_amplitude);
  fx.theta0 = neutral_start(fx.truth);
  fx.u_truth = solve_forward(fx.sys, fx.truth, scfg);
  fx.clean = observe(fx.sys.sp, fx.spec, fx.u_truth);
  fx.data = add_noise(fx.sys.sp, fx.spec, fx.clean, cfg.delta, cfg.noise_seed);
  return fx;
}

// --- calibration ------------------------------------------------------------

struct CalibrationReport {
  double norm_L = 0.0;
  double norm_Gprime = 0.0;
  double norm_Sprime = 0.0;
  double norm_Fprime = 0.0;
  double mu_upper = 0.0;
  double R0_empirical = 0.0;
  ProbeReport coercivity;
  ProbeReport tangential_cone;
  std::string tau_note;
};

/// Fills the constants ledger from measured operator norms and probe samples,
/// resolves the outer step, and derives the discrepancy factor when the config
/// left it open. Probe seeds are fixed so a given config always calibrates to
/// the same numbers.
inline CalibrationReport calibrate(const Fixture& fx, ExperimentConfig& cfg) {
  CalibrationReport cal;
  const System& sys = fx.sys;
  auto& cl = cfg.upper.constants;

  StateField u0 = solve_forward(sys, fx.theta0, cfg.upper.newton);
  cal.norm_L = estimate_opnorm_L(sys.sp, fx.spec, 40, 1001);
  cal.norm_Gprime =
      estimate_opnorm_Gprime(sys, fx.spec, fx.theta0, u0, cfg.upper.power_iters, 1002);
  cal.norm_Sprime = estimate_opnorm_Sprime(sys, fx.theta0, u0, cfg.upper.power_iters, 1003);
  cal.norm_Fprime =
      estimate_opnorm_Fprime(sys, fx.theta0, u0, cfg.upper.lower.power_iters, 1004, cfg.upper.vrepr);

  if (cfg.upper.auto_scale) {
    if (!(cal.norm_Gprime > 0.0))
      throw std::runtime_error("calibrate: reduced derivative norm estimate is zero");
    cal.mu_upper =
        cfg.upper.step_scale * cfg.upper.target_M_R * cfg.upper.target_M_R /
        (cal.norm_Gprime * cal.norm_Gprime);
  } else {
    cal.mu_upper = cfg.upper.step_scale;
  }
  double root_mu = std::sqrt(cal.mu_upper);
  cl.M_R = root_mu * cal.norm_Gprime;
  cl.M_S = root_mu * cal.norm_Sprime;
  cl.L_norm = cal.norm_L;
  cl.C_fu = cal.norm_Fprime;

  Parameter d0 = param_diff_active(fx.truth, fx.theta0);
  cal.R0_empirical = sys.sp.norm_X(d0);
  if (!(cl.R0 > 0.0)) cl.R0 = cal.R0_empirical;
  if (!(cl.R > cl.R0)) cl.R = std::max(1.0, 1.5 * cal.R0_empirical);
  if (!(cl.rho > 0.0)) cl.rho = cl.R;

  double probe_radius = std::max(0.1, 0.25 * cal.R0_empirical);
  cal.coercivity = probe_coercivity(sys, fx.theta0, u0, 0.25, 12, 1005);
  cl.C_coe = cal.coercivity.estimate;
  cfg.upper.lower.C_coe = cl.C_coe;
  cal.tangential_cone =
      probe_tangential_cone_upper(sys, fx.spec, fx.theta0, probe_radius, 8, 1006, cfg.upper.newton);
  cl.C_tc = std::max(0.01, cal.tangential_cone.estimate);

  // crude parameter-direction derivative sample, scaled into the scheme frame
  {
    std::mt19937_64 rng(1007);
    double worst = 0.0;
    for (int s = 0; s < 5; ++s) {
      Parameter xi = random_parameter_direction(sys, fx.theta0.active, rng);
      Array2 gt = apply_fprime_theta(sys, fx.theta0, u0, xi);
      worst = std::max(worst, std::sqrt(sys.sp.inner_calUstar(gt, gt)));
    }
    cl.C_grad_fA = root_mu * worst;
    cl.L_grad_f = 0.0;
    if (sys.nl.kind != Nonlinearity::zero) {
      // derivative Lipschitz sample over nearby trajectories
      StateField ua = random_state_in_ball(sys.sp, u0, 0.3, rng);
      StateField ub = random_state_in_ball(sys.sp, u0, 0.3, rng);
      StateField h = random_state_in_ball(sys.sp, zero_state(sys.grid()), 1.0, rng);
      Array2 fa = apply_fprime_u(sys, fx.theta0, ua, h);
      Array2 fb = apply_fprime_u(sys, fx.theta0, ub, h);
      Array2 diff = data_diff(fa, fb);
      StateField du(sys.grid());
      for (std::size_t i = 0; i < du.v.data.size(); ++i)
        du.v.data[i] = ua.v.data[i] - ub.v.data[i];
      double den = sys.sp.norm_calU(du) * sys.sp.norm_calU(h);
      Array2 rows(sys.grid().nt, sys.grid().nx);
      for (int n = 0; n < sys.grid().nt; ++n)
        for (int i = 0; i < sys.grid().nx; ++i) rows.at(n, i) = diff.at(n + 1, i);
      if (den > 0.0) cl.L_grad_f = std::sqrt(sys.sp.inner_calUstar(rows, rows)) / den;
    }
  }

  cl.delta_bar = cfg.delta;
  cl.gamma_bar = cfg.upper.lower.gamma0;
  derive_dependent(cl);

  if (cfg.upper.tau == 0.0) {
    double gamma = cfg.upper.lower.gamma0;
    for (int i = 0;; ++i) {
      try {
        cfg.upper.tau = 1.2 * gamma_posterior(cl, gamma);
        if (i > 0)
          cal.tau_note = "discrepancy factor derived at reduced gamma " + std::to_string(gamma);
        break;
      } catch (const std::runtime_error&) {
        if (i >= 40) throw;
        gamma *= 0.5;
      }
    }
  }
  validate_or_throw(cl);
  return cal;
}

// --- run driver -------------------------------------------------------------

struct RunOutcome {
  ExperimentConfig cfg;  // with resolved constants and step
  bool calibrated = false;
  CalibrationReport cal;
  UpperReport rep;
  std::string hash;
  double final_residual = std::numeric_limits<double>::quiet_NaN();
  double final_error = std::numeric_limits<double>::quiet_NaN();
  long long total_lower_steps = 0;
};

inline RunOutcome run_experiment(ExperimentConfig cfg) {
  RunOutcome out;
  Fixture fx = build_fixture(cfg, cfg.upper.newton);
  if (cfg.calibrate) {
    out.cal = calibrate(fx, cfg);
    out.calibrated = true;
    cfg.upper.auto_scale = false;
    cfg.upper.step_scale = out.cal.mu_upper;
  } else if (cfg.upper.tau == 0.0) {
    cfg.upper.tau = 1.2 * gamma_posterior(cfg.upper.constants, 0.0);
  }
  cfg.upper.delta = cfg.delta;
  out.cfg = cfg;
  out.hash = config_hash(cfg);

  out.rep = cfg.bilevel_mode
                ? bilevel_landweber(fx.sys, fx.spec, fx.data, fx.theta0, &fx.truth, cfg.upper)
                : single_level_landweber(fx.sys, fx.spec, fx.data, fx.theta0, &fx.truth, cfg.upper);
  if (!out.rep.residual_history.empty()) out.final_residual = out.rep.residual_history.back();
  if (!out.rep.error_history.empty()) out.final_error = out.rep.error_history.back();
  for (int s : out.rep.lower_steps) out.total_lower_steps += s;
  return out;
}

// --- writers ----------------------------------------------------------------

inline std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline json ledger_json(const ConstantsLedger& c) {
  return {{"M_R", c.M_R},           {"M_S", c.M_S},
          {"L_norm", c.L_norm},     {"C_tc", c.C_tc},
          {"K_R", c.K_R},           {"mu_R", c.mu_R},
          {"C_coe", c.C_coe},       {"D_bound", c.D_bound},
          {"C_fu", c.C_fu},         {"L_grad_f", c.L_grad_f},
          {"C_grad_fA", c.C_grad_fA}, {"tau", c.tau},
          {"R", c.R},               {"R0", c.R0},
          {"rho", c.rho},           {"q", c.q},
          {"gamma0", c.gamma0},     {"alpha", c.alpha},
          {"delta_bar", c.delta_bar}, {"gamma_bar", c.gamma_bar},
          {"eps_split", c.eps_split}};
}

inline json report_json(const RunOutcome& out) {
  json j;
  j["config_hash"] = out.hash;
  j["config"] = canonical_json(out.cfg);
  j["result"] = {{"iterations", out.rep.iterations},
                 {"stop_reason", to_string(out.rep.reason)},
                 {"mu_upper", out.rep.mu_used},
                 {"final_residual", out.final_residual},
                 {"final_error", out.final_error},
                 {"total_lower_steps", out.total_lower_steps},
                 {"j_budget", out.rep.j_budget},
                 {"j_drift", out.rep.j_drift},
                 {"note", out.rep.note}};
  json cl = ledger_json(out.cfg.upper.constants);
  cl["tau_used"] = out.cfg.upper.tau;
  j["constants"] = cl;
  if (out.calibrated) {
    j["calibration"] = {{"norm_L", out.cal.norm_L},
                        {"norm_Gprime", out.cal.norm_Gprime},
                        {"norm_Sprime", out.cal.norm_Sprime},
                        {"norm_Fprime", out.cal.norm_Fprime},
                        {"mu_upper", out.cal.mu_upper},
                        {"R0_empirical", out.cal.R0_empirical},
                        {"C_coe_probe", out.cal.coercivity.estimate},
                        {"C_tc_probe", out.cal.tangential_cone.estimate},
                        {"tau_note", out.cal.tau_note}};
  }
  return j;
}

inline void write_text(const std::string& path, const std::string& body) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << body;
}

/// report.json plus, when enabled, histories.csv with one row per evaluated
/// outer iterate.
inline void write_run_outputs(const RunOutcome& out) {
  namespace fs = std::filesystem;
  fs::create_directories(out.cfg.out_dir);
  write_text((fs::path(out.cfg.out_dir) / "report.json").string(),
             report_json(out).dump(2) + "\n");
  if (!out.cfg.write_histories) return;
  std::string csv = "j,residual,error_vs_truth,drift,K_j,lower_steps,lower_exit_residual\n";
  const auto& r = out.rep;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t j = 0; j < r.residual_history.size(); ++j) {
    auto at = [&](const std::vector<double>& v) { return j < v.size() ? v[j] : nan; };
    csv += std::to_string(j);
    csv += ",";
    csv += fmt_g(r.residual_history[j]);
    csv += ",";
    csv += fmt_g(at(r.error_history));
    csv += ",";
    csv += fmt_g(at(r.drift_history));
    csv += ",";
    csv += j < r.K_used.size() ? std::to_string(r.K_used[j]) : "0";
    csv += ",";
    csv += j < r.lower_steps.size() ? std::to_string(r.lower_steps[j]) : "0";
    csv += ",";
    csv += fmt_g(at(r.lower_exit_residual));
    csv += "\n";
  }
  write_text((fs::path(out.cfg.out_dir) / "histories.csv").string(), csv);
}

// --- sweep driver -----------------------------------------------------------

/// Runs the same experiment across noise levels and seeds, appending one CSV
/// row per run as it completes.
inline void run_sweep(const ExperimentConfig& base, const std::vector<double>& deltas,
                      const std::vector<std::uint64_t>& seeds, const std::string& out_path) {
  if (deltas.empty() || seeds.empty())
    throw std::invalid_argument("run_sweep: need at least one delta and one seed");
  namespace fs = std::filesystem;
  if (fs::path(out_path).has_parent_path()) fs::create_directories(fs::path(out_path).parent_path());
  std::ofstream f(out_path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + out_path);
  f << "delta,seed,j_stop,final_error,final_residual,total_lower_steps,stop_reason\n";
  f.flush();
  for (double d : deltas) {
    for (std::uint64_t s : seeds) {
      ExperimentConfig cfg = base;
      cfg.delta = d;
      cfg.noise_seed = s;
      cfg.write_histories = false;
      RunOutcome out = run_experiment(cfg);
      f << fmt_g(d) << "," << s << "," << out.rep.iterations << "," << fmt_g(out.final_error)
        << "," << fmt_g(out.final_residual) << "," << out.total_lower_steps << ","
        << to_string(out.rep.reason) << "\n";
      f.flush();
    }
  }
}

// --- probe driver -----------------------------------------------------------

inline json probe_report_json(const ProbeReport& p) {
  return {{"constant", p.constant_name}, {"estimate", p.estimate},
          {"samples", p.sample_count},   {"min_ratio", p.min_ratio},
          {"max_ratio", p.max_ratio},    {"pass", p.pass},
          {"note", p.note}};
}

/// Stand-alone diagnostics at the configured fixture: operator norms, the
/// nonlinearity probes, and the error-transport sweep.
inline json run_probes(const ExperimentConfig& cfg) {
  Fixture fx = build_fixture(cfg, cfg.upper.newton);
  const System& sys = fx.sys;
  StateField u0 = solve_forward(sys, fx.theta0, cfg.upper.newton);

  json j;
  j["config_hash"] = config_hash(cfg);
  j["norms"] = {{"L", estimate_opnorm_L(sys.sp, fx.spec, 40, 2001)},
                {"Gprime", estimate_opnorm_Gprime(sys, fx.spec, fx.theta0, u0,
                                                  cfg.upper.power_iters, 2002)},
                {"Sprime", estimate_opnorm_Sprime(sys, fx.theta0, u0, cfg.upper.power_iters, 2003)},
                {"Fprime", estimate_opnorm_Fprime(sys, fx.theta0, u0,
                                                  cfg.upper.lower.power_iters, 2004)}};
  j["coercivity"] = probe_report_json(probe_coercivity(sys, fx.theta0, u0, 0.25, 12, 2005));
  j["tangential_cone_lower"] =
      probe_report_json(probe_tangential_cone_lower(sys, fx.theta0, u0, 0.25, 12, 2006));
  j["tangential_cone_upper"] = probe_report_json(
      probe_tangential_cone_upper(sys, fx.spec, fx.theta0, 0.2, 8, 2007, cfg.upper.newton));
  j["gradient_dominance"] =
      probe_report_json(probe_PL(sys, fx.theta0, u0, 0.25, 12, 2008));

  LemmaSweepResult lem = verify_error_lemmas(sys, fx.spec, fx.theta0, {0.02, 0.05, 0.1},
                                             {0.0, 0.02, 0.05}, 2009, cfg.upper.newton);
  json pts = json::array();
  for (const auto& p : lem.points)
    pts.push_back({{"dtheta", p.dtheta_norm},
                   {"eps", p.eps},
                   {"output_err", p.output_err},
                   {"adjoint_err", p.adjoint_err}});
  j["error_transport"] = {{"points", pts},
                          {"alpha_out", lem.alpha_out},
                          {"beta_out", lem.beta_out},
                          {"r2_out", lem.r2_out},
                          {"alpha_adj", lem.alpha_adj},
                          {"beta_adj", lem.beta_adj},
                          {"r2_adj", lem.r2_adj}};
  return j;
}

}  // namespace bilevel
