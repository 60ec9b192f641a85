#pragma once

#include <vector>

#include "fedcluster/loss.hpp"
#include "fedcluster/topology.hpp"

namespace fedcluster {

/// Three-way decomposition of the multi-cluster objective
/// F(Theta) = sum_i f_i(theta_i) + sum_j (1 - alpha_j) psi_j + phi.
struct ObjectiveValue {
  double total = 0.0;
  double per_client_loss = 0.0;
  double cluster_reg = 0.0;
  double global_reg = 0.0;
};

/// Constants the schedule tuners consume.
///   c1 = max_j max_{i in I_j} alpha_j gamma_i
///   c2 = max_j max_{i in I_j} (1 - alpha_j) gamma_i
///   loss_smoothness     = max_i L_i          (full gradients)
///   component_smoothness = max_i L~_i        (finite-sum components)
///   mu                  = min_i mu_i         (objective strong convexity)
struct SmoothnessProfile {
  double c1 = 0.0;
  double c2 = 0.0;
  double loss_smoothness = 0.0;
  double component_smoothness = 0.0;
  double mu = 0.0;
  double gamma_max = 0.0;

  /// L_F = L~ + max_i gamma_i, the smoothness of the full objective.
  double objective_smoothness() const { return component_smoothness + gamma_max; }
};

ObjectiveValue eval_objective(const ParameterStack& stack,
                              const NetworkTopology& topo,
                              const PenaltyConfig& pen, const LossSet& losses);

/// Exact gradient: per client i in I_j,
/// grad f_i(theta_i) + (1-alpha_j) gamma_i (theta_i - cluster avg)
///                  + alpha_j gamma_i (theta_i - global avg).
void grad_objective(const ParameterStack& stack, const NetworkTopology& topo,
                    const PenaltyConfig& pen, const LossSet& losses,
                    ParameterStack& out);
ParameterStack grad_objective(const ParameterStack& stack,
                              const NetworkTopology& topo,
                              const PenaltyConfig& pen, const LossSet& losses);

/// Multi-task form with explicit cluster variables w_j and global variable
/// w_bar; requires the lambda parametrization.
double eval_mtl_objective(const ParameterStack& stack,
                          const std::vector<Vector>& w, const Vector& w_bar,
                          const NetworkTopology& topo, const PenaltyConfig& pen,
                          const LossSet& losses);

struct MinimizerOptions {
  double tol = 1e-10;      // on the gradient norm
  long max_iterations = 500000;  // gradient-descent path only
};

/// Deterministic ground-truth minimizer: an exact linear solve when every
/// loss is quadratic, full-gradient descent with step 1/L_F otherwise.
ParameterStack reference_minimizer(const NetworkTopology& topo,
                                   const PenaltyConfig& pen,
                                   const LossSet& losses,
                                   const MinimizerOptions& opts = {});

SmoothnessProfile smoothness_profile(const NetworkTopology& topo,
                                     const PenaltyConfig& pen,
                                     const LossSet& losses);

}  // namespace fedcluster
