#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "fedcluster/al2sgd.hpp"
#include "fedcluster/experiments.hpp"

namespace {

using namespace fedcluster;

std::string fmt(double v) {
  char buffer[40];
  std::snprintf(buffer, sizeof(buffer), "%g", v);
  return buffer;
}

struct CommonFlags {
  std::string config_path;
  std::string out_dir;
  std::string method;
  std::vector<int> m_grid;
  std::uint64_t seed = 0;
  int replications = 0;
  bool seed_set = false, reps_set = false;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "experiment config (JSON)")
      ->required();
  cmd->add_option("--seed", flags.seed, "override the master seed")
      ->each([&](const std::string&) { flags.seed_set = true; });
  cmd->add_option("--out", flags.out_dir, "override the output directory");
  cmd->add_option("--replications", flags.replications, "override replication count")
      ->each([&](const std::string&) { flags.reps_set = true; });
  cmd->add_option("--method", flags.method, "run a single estimator only");
  cmd->add_option("--m-grid", flags.m_grid, "override the m grid")->delimiter(',');
}

ExperimentConfig resolve_config(const CommonFlags& flags) {
  ExperimentConfig config = load_config_file(flags.config_path);
  if (flags.seed_set) config.seed = flags.seed;
  if (flags.reps_set) config.replications = flags.replications;
  if (!flags.out_dir.empty()) config.out_dir = flags.out_dir;
  if (!flags.m_grid.empty()) config.m_grid = flags.m_grid;
  if (!flags.method.empty()) config.estimators = {flags.method};
  return config;
}

int run_simulate(const CommonFlags& flags) {
  const ExperimentConfig config = resolve_config(flags);
  switch (config.kind) {
    case ExperimentKind::sim_table: {
      const SimSummary summary = run_sim_table(config);
      std::cout << "wrote " << summary.csv_path << "\n" << format_table(summary);
      return 0;
    }
    case ExperimentKind::sim_curve: {
      const SimSummary summary = run_sim_curve(config);
      std::cout << "wrote " << summary.csv_path << "\n" << format_table(summary);
      return 0;
    }
    case ExperimentKind::hlm_estimators: {
      const SimSummary summary = run_hlm_estimators(config);
      std::cout << "wrote " << summary.csv_path << "\n" << format_table(summary);
      return 0;
    }
    case ExperimentKind::logistic_synthetic: {
      const LogisticSummary summary = run_logistic_synthetic(config);
      std::cout << "wrote " << summary.csv_path << "\n" << format_table(summary);
      return 0;
    }
    default:
      throw ConfigError("simulate: config kind belongs to the optimize subcommand");
  }
}

int run_optimize(const CommonFlags& flags) {
  const ExperimentConfig config = resolve_config(flags);
  if (config.kind != ExperimentKind::optimize_l2gd &&
      config.kind != ExperimentKind::optimize_al2sgd)
    throw ConfigError("optimize: config kind belongs to the simulate subcommand");
  const OptimizeSummary summary = run_optimizer_experiment(config);
  std::cout << "wrote " << summary.csv_path << '\n'
            << "p0=" << fmt(summary.p0) << " p_j=" << fmt(summary.p_cluster)
            << " tau=" << fmt(summary.tau) << " eta=" << fmt(summary.eta)
            << " scriptL=" << fmt(summary.script_l)
            << " sigma_sq=" << fmt(summary.sigma_sq) << '\n'
            << "between_rounds=" << summary.between_rounds
            << " final_dist_sq=" << fmt(summary.final_dist_sq)
            << " final_objective=" << fmt(summary.final_objective) << '\n';
  return 0;
}

int run_tune(double c1, double c2, double l, double l_tilde, double mu,
             double gamma_max, double rho) {
  SmoothnessProfile profile;
  profile.c1 = c1;
  profile.c2 = c2;
  profile.loss_smoothness = l;
  profile.component_smoothness = l_tilde > 0.0 ? l_tilde : l;
  profile.mu = mu;
  profile.gamma_max = gamma_max;

  const SchedulerConfig cor1 = tune_schedule(profile, 1);
  if (profile.c1 == 0.0 && profile.c2 == 0.0)
    std::cout << "note: no regularization, pure local training\n";
  std::cout << "cor1: p0=" << fmt(cor1.p0) << " p_j=" << fmt(cor1.p.front())
            << " tau=" << fmt(cor1.tau.front()) << " eta=" << fmt(cor1.eta)
            << '\n';

  const SchedulerConfig cor2 = tune_al2sgd_schedule(profile, 1);
  std::cout << "cor2: p0=" << fmt(cor2.p0) << " p_j=" << fmt(cor2.p.front())
            << " tau=" << fmt(cor2.tau.front()) << '\n';

  const double script_l = script_l_tilde(profile, cor2, SmoothnessKind::component);
  const KatyushaParams params = tune_katyusha(profile, script_l, rho);
  std::cout << "katyusha: eta=" << fmt(params.eta) << " a1=" << fmt(params.a1)
            << " a2=" << fmt(params.a2) << " b1=" << fmt(params.b1)
            << " b2=" << fmt(params.b2) << " (scriptL~=" << fmt(script_l)
            << ", rho=" << fmt(rho) << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-cluster personalized federated learning simulator"};
  app.require_subcommand(1);

  CommonFlags sim_flags, opt_flags;
  CLI::App* simulate = app.add_subcommand(
      "simulate", "run a simulation/estimator experiment from a config");
  add_common(simulate, sim_flags);
  CLI::App* optimize = app.add_subcommand(
      "optimize", "run an optimizer trajectory experiment from a config");
  add_common(optimize, opt_flags);

  double c1 = 0.0, c2 = 0.0, l = 1.0, l_tilde = 0.0, mu = 1.0, gamma_max = 1.0,
         rho = 0.5;
  CLI::App* tune = app.add_subcommand(
      "tune", "print the optimal schedule and step-size parameters");
  tune->add_option("--c1", c1, "max_j max_i alpha_j gamma_i")->required();
  tune->add_option("--c2", c2, "max_j max_i (1-alpha_j) gamma_i")->required();
  tune->add_option("--smoothness", l, "loss smoothness L")->required();
  tune->add_option("--component-smoothness", l_tilde,
                   "finite-sum smoothness L~ (defaults to L)");
  tune->add_option("--mu", mu, "strong convexity");
  tune->add_option("--gamma-max", gamma_max, "largest client weight");
  tune->add_option("--rho", rho, "anchor refresh probability");

  std::string report_input;
  CLI::App* report = app.add_subcommand("report", "aggregate a results CSV");
  report->add_option("--input", report_input, "CSV produced by simulate")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (simulate->parsed()) return run_simulate(sim_flags);
    if (optimize->parsed()) return run_optimize(opt_flags);
    if (tune->parsed()) return run_tune(c1, c2, l, l_tilde, mu, gamma_max, rho);
    if (report->parsed()) {
      std::cout << fedcluster::report_from_csv(report_input);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "fedcluster: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
