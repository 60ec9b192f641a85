#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedcluster/al2sgd.hpp"
#include "fedcluster/hlm.hpp"
#include "fedcluster/l2gd.hpp"

namespace fedcluster {

enum class ExperimentKind {
  sim_table,
  sim_curve,
  optimize_l2gd,
  optimize_al2sgd,
  hlm_estimators,
  logistic_synthetic,
};

ExperimentKind experiment_kind_from_string(const std::string& name);
const char* experiment_kind_name(ExperimentKind kind);

enum class OurSolver { optimize, closed_form };

struct PenaltySettings {
  double gamma = 1.0;
  double lambda = 1.0;
};

struct OptimizerSettings {
  std::string mode = "simple";  // "simple", "three-branch", or "auto"
  double p = 0.1;               // simple-mode communication probability
  double p0 = 0.1;              // three-branch probabilities (explicit mode)
  double p_cluster = 0.1;
  double eta = 1e-4;
  long iterations = 50000;
  double rho = 0.5;      // anchor-refresh probability (al2sgd)
  long log_stride = 100;
  OurSolver our_solver = OurSolver::optimize;
};

struct LogisticSettings {
  int clusters = 4;
  int clients_per_cluster = 10;
  int rows_per_client = 200;
  int dim = 3;  // first covariate is the intercept
  double center_spread_sq = 0.25;
  double cluster_spread_sq = 0.25;
  double ridge = 1e-4;
  double train_fraction = 0.8;
  Vector theta_star_bar;  // empty means zeros(dim)
};

/// One parsed experiment. Configs are JSON with a versioned schema; unknown
/// keys anywhere are errors.
struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::sim_table;
  std::uint64_t seed = 1;
  int replications = 5;
  std::string out_dir = "out";
  std::vector<int> m_grid = {1, 5, 10, 25, 50, 100, 200};

  int hlm_d = 20;
  int hlm_clusters = 20;
  int hlm_clients_per_cluster = 20;
  double hlm_sigma_bar_sq = 1.0;
  double hlm_sigma_cluster_sq = 1.0;
  double hlm_sigma_noise_sq = 1.0;
  Vector hlm_theta_star_bar;  // empty means zeros(d)
  HlmSpec::Design hlm_design = HlmSpec::Design::gaussian;

  PenaltySettings penalty;
  OptimizerSettings optimizer;
  LogisticSettings logistic;
  std::vector<std::string> estimators = {"lt", "sm", "sc", "our"};

  HlmSpec hlm_spec(int samples_per_client) const;
};

ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config_file(const std::string& path);

/// Per-(method, m) summary row: the mean and spread of the per-client l2
/// distance plus the per-replication maximum, with the mean squared distance
/// kept alongside.
struct SummaryRow {
  std::string method;
  int m = 0;
  double avg_dist = 0.0;
  double sd_dist = 0.0;
  double max_dist = 0.0;
  double avg_sq = 0.0;
};

struct SimSummary {
  std::vector<SummaryRow> rows;
  std::string csv_path;
};

/// The simulation-study table: for each m and replication, generate the
/// hierarchical sample, run {lt, sm, sc, our}, and write per-client squared
/// errors (CSV schema: method,m,rep,client,sq_error).
SimSummary run_sim_table(const ExperimentConfig& config);

/// Error-versus-m sweep over the full m grid; `our` defaults to the exact
/// closed form here.
SimSummary run_sim_curve(const ExperimentConfig& config);

/// Estimator comparison including gls / js where requested
/// (CSV schema: method,rep,client,sq_error).
SimSummary run_hlm_estimators(const ExperimentConfig& config);

struct OptimizeSummary {
  std::string csv_path;
  double p0 = 0.0;
  double p_cluster = 0.0;
  double tau = 0.0;
  double eta = 0.0;
  double script_l = 0.0;
  double sigma_sq = 0.0;
  long between_rounds = 0;
  std::vector<long> within_rounds;
  std::vector<long> local_steps;
  double final_dist_sq = 0.0;
  double final_objective = 0.0;
};

/// Runs the chosen optimizer on a quadratic instance drawn from the hlm
/// settings and logs the trajectory
/// (CSV schema: iter,dist_sq,objective,between_rounds,within_rounds_json).
OptimizeSummary run_optimizer_experiment(const ExperimentConfig& config);

struct LogisticSummaryRow {
  std::string method;
  double avg_ce = 0.0;
  double sd_ce = 0.0;
  double q25 = 0.0;
  double q50 = 0.0;
  double q75 = 0.0;
  double max_ce = 0.0;
  double avg_accuracy = 0.0;
};

struct LogisticSummary {
  std::vector<LogisticSummaryRow> rows;
  std::string csv_path;
};

/// Synthetic multi-cluster logistic study: hierarchical true logits,
/// Bernoulli rows, {lt, sm, our} fitted on a train split and scored on the
/// held-out rows (CSV schema: method,rep,client,cross_entropy,accuracy).
LogisticSummary run_logistic_synthetic(const ExperimentConfig& config);

/// Test cross-entropy of a fitted logistic parameter, clipped at 100; a
/// saturated prediction against the opposite label overflows and clips.
double clipped_cross_entropy(const Vector& theta, const Matrix& X, const Vector& y);
double logistic_accuracy(const Vector& theta, const Matrix& X, const Vector& y);

/// Ridge-regularized logistic fit by Newton iterations.
Vector fit_logistic_newton(const Matrix& X, const Vector& y, double ridge,
                           int iterations = 100);

/// Text table in the avg (+/- sd) / max layout, one column group per m.
std::string format_table(const SimSummary& summary);
std::string format_table(const LogisticSummary& summary);

/// Rebuilds the summary table from a sim CSV written by this harness.
std::string report_from_csv(const std::string& csv_path);

/// Worker cap: FEDCLUSTER_THREADS when set, hardware concurrency otherwise.
int max_worker_threads();

}  // namespace fedcluster
