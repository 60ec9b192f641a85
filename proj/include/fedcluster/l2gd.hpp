#pragma once

#include <cstdint>
#include <vector>

#include "fedcluster/objective.hpp"

namespace fedcluster {

/// three_branch is Async-L2GD proper: a global coin xi_0, then per-cluster
/// coins xi_j choosing between within-cluster averaging and local steps.
/// simple is the reduced schedule used by the simulation study: one coin per
/// iteration deciding between a combined regularizer step (both averages at
/// once) and a local step; only p0 is read.
enum class ScheduleMode { three_branch, simple };

struct SchedulerConfig {
  ScheduleMode mode = ScheduleMode::three_branch;
  double p0 = 0.0;
  std::vector<double> p;    // per-cluster p_j
  std::vector<double> tau;  // per-cluster tau_j
  double eta = 0.0;
  long iterations = 0;
  std::uint64_t seed = 0;
  /// When set, the runner refuses eta > 1/(2 script_L).
  bool safe_step = false;

  void validate(int n_clusters) const;
};

/// Per-branch event counts. The *_rounds/_steps counters are raw branch
/// frequencies (each iteration lands in exactly one branch per cluster).  The
/// *_switches counters follow the communication-round convention of the
/// expected-rounds proposition: a round is counted when a cluster enters the
/// communicate branch at t without having been in it at t-1, with all coins
/// treated as drawn every iteration and as 0 at t = 0.
struct CommLog {
  long iterations = 0;
  long between_cluster_rounds = 0;
  std::vector<long> within_cluster_rounds;
  std::vector<long> local_steps;
  long between_switches = 0;
  std::vector<long> within_switches;
  long anchor_refreshes = 0;  // used by the variance-reduced variant only
};

struct TrajectoryRecord {
  /// ||Theta^t - Theta_hat||^2 for t = 0..T; filled only when a reference
  /// stack is supplied.
  std::vector<double> dist_sq;
  /// Objective values sampled every `stride` iterations (plus t = 0 and T),
  /// together with the cumulative raw communication counts at those points.
  std::vector<long> objective_iters;
  std::vector<double> objective_values;
  std::vector<long> between_rounds_at;
  std::vector<std::vector<long>> within_rounds_at;
  long stride = 0;
};

/// tau_j = p0 / (p0 + 2 (1 - p0) p_j), the variance-balancing choice.
double optimal_tau(double p0, double pj);

/// The stochastic gradient oracle induced by the three-branch schedule,
/// evaluated for one concrete draw of the coins. xi is read only when
/// xi0 == 0. Requesting a branch whose probability is zero is a schedule
/// error.
void gradient_oracle(const ParameterStack& stack, const NetworkTopology& topo,
                     const PenaltyConfig& pen, const LossSet& losses,
                     const SchedulerConfig& sched, int xi0,
                     const std::vector<int>& xi, ParameterStack& out);
ParameterStack gradient_oracle(const ParameterStack& stack,
                               const NetworkTopology& topo,
                               const PenaltyConfig& pen, const LossSet& losses,
                               const SchedulerConfig& sched, int xi0,
                               const std::vector<int>& xi);

struct L2gdResult {
  ParameterStack theta;
  CommLog comm;
  TrajectoryRecord trajectory;
};

/// Runs the schedule from Theta^0 = 0 for sched.iterations rounds.
/// When theta_hat is given the squared distance to it is recorded every
/// iteration; objective values are recorded every objective_stride iterations
/// (0 disables them).
L2gdResult run_async_l2gd(const NetworkTopology& topo, const PenaltyConfig& pen,
                          const LossSet& losses, const SchedulerConfig& sched,
                          const ParameterStack* theta_hat = nullptr,
                          long objective_stride = 0);

enum class SmoothnessKind { full_gradient, component };

/// Expected-smoothness constant script_L of the oracle. The component kind
/// substitutes the finite-sum constant L~ for L in the local-branch term, as
/// the variance-reduced analysis requires. Preconditions: tau matches
/// optimal_tau wherever the cluster communicates, and no branch with positive
/// mass is starved (p0 = 1 or p_j = 1 leave no local steps).
double expected_smoothness(const NetworkTopology& topo, const PenaltyConfig& pen,
                           const LossSet& losses, const SchedulerConfig& sched,
                           SmoothnessKind kind = SmoothnessKind::full_gradient);

/// Residual variance sigma^2 of the oracle at the minimizer theta_hat.
double residual_variance(const ParameterStack& theta_hat,
                         const NetworkTopology& topo, const PenaltyConfig& pen,
                         const LossSet& losses, const SchedulerConfig& sched);

/// Upper bound script_L~ on script_L used by the tuner; depends only on the
/// profile once the tuned probabilities are plugged in.
double script_l_tilde(const SmoothnessProfile& profile, const SchedulerConfig& sched,
                      SmoothnessKind kind = SmoothnessKind::full_gradient);

/// Communication-optimal probabilities, fractions, and step size.
/// C2 > C1:  p0 = 2 C1/(C1 + C2 + L), p_j = (C2 - C1)/(C2 - C1 + L),
///           tau_j = C1/C2, script_L~ = C1 + C2 + L.
/// C2 <= C1: p0 = 2 C1/(2 C1 + L), p_j = 0, tau_j = 1, script_L~ = 2 C1 + L.
/// C1 = C2 = 0 means no regularization at all; the tuner returns the pure
/// local schedule p0 = p_j = 0.
SchedulerConfig tune_schedule(const SmoothnessProfile& profile, int n_clusters);

}  // namespace fedcluster
