#include <cstdint>
#include <cstdio>
#include <exception>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "bilevel/bilevel.hpp"

namespace {

using namespace bilevel;

ExperimentConfig load_or_default(const std::string& path) {
  if (path.empty()) return ExperimentConfig{};
  return load_config(path);
}

void apply_overrides(ExperimentConfig& cfg, const std::optional<std::string>& out,
                     const std::optional<std::uint64_t>& seed, const std::optional<int>& max_iter,
                     const std::optional<double>& delta) {
  if (out) cfg.out_dir = *out;
  if (seed) cfg.noise_seed = *seed;
  if (max_iter) {
    if (*max_iter < 0) throw std::invalid_argument("--max-iter must be nonnegative");
    cfg.upper.max_iter = *max_iter;
  }
  if (delta) {
    if (*delta < 0.0) throw std::invalid_argument("--delta must be nonnegative");
    cfg.delta = *delta;
  }
}

int cmd_run(const ExperimentConfig& cfg) {
  RunOutcome out = run_experiment(cfg);
  write_run_outputs(out);
  std::printf("config %s\n", out.hash.c_str());
  std::printf("stopped after %d outer updates: %s\n", out.rep.iterations,
              to_string(out.rep.reason).c_str());
  std::printf("final residual %.6g", out.final_residual);
  if (!out.rep.error_history.empty())
    std::printf(", final error vs truth %.6g", out.final_error);
  std::printf("\n");
  std::printf("wrote %s/report.json\n", out.cfg.out_dir.c_str());
  return 0;
}

int cmd_sweep(const ExperimentConfig& cfg, std::vector<double> deltas,
              std::vector<std::uint64_t> seeds, const std::string& out_path) {
  if (deltas.empty()) deltas = {1e-1, 3e-2, 1e-2};
  if (seeds.empty()) seeds = {1, 2, 3};
  run_sweep(cfg, deltas, seeds, out_path);
  std::printf("wrote %s (%zu rows)\n", out_path.c_str(), deltas.size() * seeds.size());
  return 0;
}

int cmd_probe(const ExperimentConfig& cfg, const std::string& out_path) {
  nlohmann::json j = run_probes(cfg);
  namespace fs = std::filesystem;
  if (fs::path(out_path).has_parent_path())
    fs::create_directories(fs::path(out_path).parent_path());
  write_text(out_path, j.dump(2) + "\n");
  std::printf("coercivity estimate %.6g over %d samples\n",
              j["coercivity"]["estimate"].get<double>(), j["coercivity"]["samples"].get<int>());
  std::printf("tangential cone (reduced map) %.6g\n",
              j["tangential_cone_upper"]["estimate"].get<double>());
  std::printf("wrote %s\n", out_path.c_str());
  return 0;
}

int cmd_check_adjoint(const ExperimentConfig& cfg) {
  Fixture fx = build_fixture(cfg, cfg.upper.newton);
  const System& sys = fx.sys;
  const auto& g = sys.grid();
  StateField u0 = solve_forward(sys, fx.theta0, cfg.upper.newton);
  std::mt19937_64 rng(42);

  auto rel_gap = [](double lhs, double rhs) {
    return std::abs(lhs - rhs) / (std::abs(lhs) + std::abs(rhs) + 1e-300);
  };
  bool ok = true;
  auto report = [&](const char* name, double lhs, double rhs, double tol) {
    double gap = rel_gap(lhs, rhs);
    bool pass = gap <= tol;
    ok = ok && pass;
    std::printf("%-28s lhs %+.12e  rhs %+.12e  rel gap %.3e  tol %.1e  %s\n", name, lhs, rhs, gap,
                tol, pass ? "ok" : "FAIL");
  };

  {
    StateField h(g);
    h.v.data = gaussian_vec(h.v.data.size(), rng);
    ResidualPair rho(g);
    rho.pde.data = gaussian_vec(rho.pde.data.size(), rng);
    rho.init = gaussian_vec(rho.init.size(), rng);
    VReprConfig tight;
    tight.rel_tol = 1e-13;
    double lhs = sys.sp.inner_residual(apply_Fprime(sys, fx.theta0, u0, h), rho);
    double rhs = sys.sp.inner_calV(h, apply_Fprime_adjoint(sys, fx.theta0, u0, rho, tight));
    report("inner derivative adjoint", lhs, rhs, 1e-8);
  }
  {
    StateField u(g);
    u.v.data = gaussian_vec(u.v.data.size(), rng);
    Array2 r(fx.spec.data_rows(g), fx.spec.data_cols(g));
    r.data = gaussian_vec(r.data.size(), rng);
    double lhs = inner_Y(sys.sp, fx.spec, observe(sys.sp, fx.spec, u).values, r);
    double rhs = sys.sp.inner_calU(u, observe_adjoint(sys.sp, fx.spec, r));
    report("observation adjoint", lhs, rhs, 1e-10);
  }
  {
    Parameter xi = random_parameter_direction(sys, fx.theta0.active, rng);
    // probe with the dual the scheme actually feeds the chain: the lifted
    // residual at the starting guess. A white-noise dual would mix its own
    // roughness into the slice pairing and hide the first-order behaviour.
    Array2 r = data_diff(observe(sys.sp, fx.spec, u0).values, fx.clean.values);
    StateField v = observe_adjoint(sys.sp, fx.spec, r);
    double lhs = sys.sp.inner_calU(solve_sensitivity(sys, fx.theta0, u0, xi), v);
    double rhs = sys.sp.inner_X(xi, s_prime_adjoint(sys, fx.theta0, u0, v));
    // consistent to first order in the time step, constant below ten
    report("solution-map adjoint", lhs, rhs, 12.0 * g.ht + 1e-8);
  }
  std::printf(ok ? "all adjoint identities hold\n" : "adjoint identity FAILURE\n");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bi-level Landweber identification of parabolic model parameters"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::string> out_override;
  std::optional<std::uint64_t> seed_override;
  std::optional<int> max_iter_override;
  std::optional<double> delta_override;
  std::vector<double> deltas;
  std::vector<std::uint64_t> seeds;
  std::string sweep_out = "out/sweep.csv";
  std::string probe_out = "out/probes.json";

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON run description")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed_override, "override the noise seed");
    sub->add_option("--max-iter", max_iter_override, "override the outer iteration cap");
    sub->add_option("--delta", delta_override, "override the noise level");
  };

  CLI::App* run = app.add_subcommand("run", "run one identification experiment");
  add_common(run);
  run->get_option("--config")->required();
  run->add_option("--out", out_override, "output directory");

  CLI::App* sweep = app.add_subcommand("sweep", "repeat a run over noise levels and seeds");
  add_common(sweep);
  sweep->get_option("--config")->required();
  sweep->add_option("--deltas", deltas, "noise levels")->delimiter(',');
  sweep->add_option("--seeds", seeds, "noise seeds")->delimiter(',');
  sweep->add_option("--out", sweep_out, "output CSV path");

  CLI::App* probe = app.add_subcommand("probe", "measure operator norms and model constants");
  add_common(probe);
  probe->add_option("--out", probe_out, "output JSON path");

  CLI::App* chk = app.add_subcommand("check-adjoint", "verify the discrete adjoint identities");
  add_common(chk);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    bilevel::ExperimentConfig cfg = load_or_default(config_path);
    apply_overrides(cfg, out_override, seed_override, max_iter_override, delta_override);
    if (run->parsed()) return cmd_run(cfg);
    if (sweep->parsed()) return cmd_sweep(cfg, deltas, seeds, sweep_out);
    if (probe->parsed()) return cmd_probe(cfg, probe_out);
    if (chk->parsed()) return cmd_check_adjoint(cfg);
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
