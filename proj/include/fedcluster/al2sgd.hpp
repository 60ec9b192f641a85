#pragma once

#include "fedcluster/l2gd.hpp"

namespace fedcluster {

/// L-Katyusha parameters from the convergence theorem:
///   eta = 1/(4 max{L_F, script_L}),  a2 = script_L/(2 max{L_F, script_L}),
///   a1 = min{1/2, sqrt(eta mu max{1/2, a2/rho})},
///   b2 = 1/max{2 mu, 4 a1/eta},  b1 = 1 - b2 mu.
struct KatyushaParams {
  double eta = 0.0;
  double a1 = 0.0;
  double a2 = 0.0;
  double b1 = 0.0;
  double b2 = 0.0;
};

KatyushaParams tune_katyusha(const SmoothnessProfile& profile, double script_l,
                             double rho);
/// Convenience overload that evaluates script_L with the component constant
/// L~, as the variance bound for this oracle requires.
KatyushaParams tune_katyusha(const NetworkTopology& topo, const PenaltyConfig& pen,
                             const LossSet& losses, const SchedulerConfig& sched,
                             double rho);

/// Schedule probabilities for the accelerated variant; identical to the
/// plain tuner with L~ in place of L.
SchedulerConfig tune_al2sgd_schedule(const SmoothnessProfile& profile,
                                     int n_clusters);

/// Katyusha triple (x, y, z) per client plus the anchor side: stored full
/// gradients at x and the cached anchor averages x_bar, x_bar_j. The cache is
/// recomputed only on anchor refresh; the oracle refuses to run on a stale
/// cache.
struct KatyushaState {
  ParameterStack x;
  ParameterStack y;
  ParameterStack z;
  ParameterStack anchor_grad;
  std::vector<Vector> anchor_cluster_avg;
  Vector anchor_global_avg;
  bool anchor_has_global = false;
  bool anchors_fresh = false;

  KatyushaState() = default;
  KatyushaState(int n_clients, int dim);

  /// Stores grad f_i(x_i) for every client and recomputes the anchor averages.
  void refresh_anchors(const NetworkTopology& topo, const PenaltyConfig& pen,
                       const LossSet& losses);
};

/// Variance-reduced stochastic gradient for one concrete draw of the branch
/// coins and the per-client component indices. Always anchored at x:
/// full gradient of F at the anchor plus the scaled branch correction, which
/// keeps the estimate conditionally unbiased for grad F(Theta).
void vr_gradient_estimate(const KatyushaState& state, const ParameterStack& stack,
                          const NetworkTopology& topo, const PenaltyConfig& pen,
                          const LossSet& losses, const SchedulerConfig& sched,
                          int xi0, const std::vector<int>& xi,
                          const std::vector<int>& component,
                          ParameterStack& out);
ParameterStack vr_gradient_estimate(const KatyushaState& state,
                                    const ParameterStack& stack,
                                    const NetworkTopology& topo,
                                    const PenaltyConfig& pen,
                                    const LossSet& losses,
                                    const SchedulerConfig& sched, int xi0,
                                    const std::vector<int>& xi,
                                    const std::vector<int>& component);

struct Al2sgdResult {
  ParameterStack theta;  // final y iterate
  CommLog comm;
  TrajectoryRecord trajectory;
};

/// Runs Async-AL2SGD+ from the zero state. params defaults to the theorem
/// tuning when omitted. Trajectory distances and objective values are taken
/// at the y iterate.
Al2sgdResult run_async_al2sgd_plus(const NetworkTopology& topo,
                                   const PenaltyConfig& pen, const LossSet& losses,
                                   const SchedulerConfig& sched, double rho,
                                   const KatyushaParams* params = nullptr,
                                   const ParameterStack* theta_hat = nullptr,
                                   long objective_stride = 0);

}  // namespace fedcluster
