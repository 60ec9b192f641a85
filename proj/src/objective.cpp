#include "fedcluster/objective.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace fedcluster {

namespace {

void check_shapes(const ParameterStack& stack, const NetworkTopology& topo,
                  const PenaltyConfig& pen, const LossSet& losses) {
  if (stack.n() != topo.n_clients() ||
      pen.n_clients() != topo.n_clients() ||
      pen.n_clusters() != topo.n_clusters() ||
      static_cast<int>(losses.size()) != topo.n_clients())
    throw ConfigError("objective: stack/topology/penalty/loss sizes disagree");
  for (const auto& loss : losses)
    if (loss->dim() != stack.dim())
      throw ConfigError("objective: loss dimension mismatch");
}

}  // namespace

ObjectiveValue eval_objective(const ParameterStack& stack,
                              const NetworkTopology& topo,
                              const PenaltyConfig& pen, const LossSet& losses) {
  check_shapes(stack, topo, pen, losses);
  const StackAverages avg = compute_averages(stack, topo, pen);
  ObjectiveValue value;
  for (int j = 0; j < topo.n_clusters(); ++j) {
    const double aj = pen.alpha(j);
    double psi_j = 0.0;
    double phi_j = 0.0;
    for (int i : topo.cluster(j)) {
      value.per_client_loss += losses[i]->value(stack.client(i));
      psi_j += 0.5 * pen.gamma(i) * (stack.client(i) - avg.cluster[j]).squaredNorm();
      if (avg.has_global)
        phi_j += 0.5 * pen.gamma(i) * (stack.client(i) - avg.global).squaredNorm();
    }
    value.cluster_reg += (1.0 - aj) * psi_j;
    value.global_reg += aj * phi_j;
  }
  value.total = value.per_client_loss + value.cluster_reg + value.global_reg;
  return value;
}

void grad_objective(const ParameterStack& stack, const NetworkTopology& topo,
                    const PenaltyConfig& pen, const LossSet& losses,
                    ParameterStack& out) {
  check_shapes(stack, topo, pen, losses);
  if (out.n() != stack.n() || out.dim() != stack.dim())
    out = ParameterStack(stack.n(), stack.dim());
  const StackAverages avg = compute_averages(stack, topo, pen);
  Vector g(stack.dim());
  for (int j = 0; j < topo.n_clusters(); ++j) {
    const double aj = pen.alpha(j);
    for (int i : topo.cluster(j)) {
      losses[i]->grad(stack.client(i), g);
      auto out_i = out.client(i);
      out_i = g;
      out_i += (1.0 - aj) * pen.gamma(i) * (stack.client(i) - avg.cluster[j]);
      if (avg.has_global)
        out_i += aj * pen.gamma(i) * (stack.client(i) - avg.global);
    }
  }
}

ParameterStack grad_objective(const ParameterStack& stack,
                              const NetworkTopology& topo,
                              const PenaltyConfig& pen, const LossSet& losses) {
  ParameterStack out(stack.n(), stack.dim());
  grad_objective(stack, topo, pen, losses, out);
  return out;
}

double eval_mtl_objective(const ParameterStack& stack,
                          const std::vector<Vector>& w, const Vector& w_bar,
                          const NetworkTopology& topo, const PenaltyConfig& pen,
                          const LossSet& losses) {
  check_shapes(stack, topo, pen, losses);
  if (!pen.has_lambda())
    throw ConfigError("mtl objective: penalty must carry lambda");
  if (static_cast<int>(w.size()) != topo.n_clusters())
    throw ConfigError("mtl objective: need one w_j per cluster");
  double total = 0.0;
  for (int j = 0; j < topo.n_clusters(); ++j) {
    for (int i : topo.cluster(j)) {
      total += losses[i]->value(stack.client(i));
      total += 0.5 * pen.gamma(i) * (stack.client(i) - w[j]).squaredNorm();
    }
    total += 0.5 * pen.lambda(j) * (w[j] - w_bar).squaredNorm();
  }
  return total;
}

namespace {

// Assembles the nd x nd first-order system of the all-quadratic objective.
// Row block i:  (H_i + gamma_i I) theta_i
//               - (1-alpha_j) gamma_i * cluster-average weights
//               - alpha_j gamma_i * global-average weights  =  b_i.
ParameterStack solve_quadratic_exact(const NetworkTopology& topo,
                                     const PenaltyConfig& pen,
                                     const std::vector<Matrix>& hessians,
                                     const std::vector<Vector>& linears,
                                     double tol, const LossSet& losses) {
  const int n = topo.n_clients();
  const int d = static_cast<int>(hessians[0].rows());
  const Eigen::Index nd = static_cast<Eigen::Index>(n) * d;

  double alpha_gamma_total = 0.0;
  std::vector<double> cluster_gamma(topo.n_clusters(), 0.0);
  for (int j = 0; j < topo.n_clusters(); ++j) {
    for (int i : topo.cluster(j)) cluster_gamma[j] += pen.gamma(i);
    alpha_gamma_total += pen.alpha(j) * cluster_gamma[j];
  }

  Matrix system = Matrix::Zero(nd, nd);
  Vector rhs(nd);
  for (int j = 0; j < topo.n_clusters(); ++j) {
    const double aj = pen.alpha(j);
    for (int i : topo.cluster(j)) {
      const double gi = pen.gamma(i);
      system.block(i * d, i * d, d, d) = hessians[i];
      system.block(i * d, i * d, d, d).diagonal().array() += gi;
      rhs.segment(i * d, d) = linears[i];
      if (cluster_gamma[j] > 0.0) {
        for (int i2 : topo.cluster(j)) {
          const double w = pen.gamma(i2) / cluster_gamma[j];
          system.block(i * d, i2 * d, d, d).diagonal().array() -=
              (1.0 - aj) * gi * w;
        }
      }
      if (alpha_gamma_total > 0.0) {
        for (int j2 = 0; j2 < topo.n_clusters(); ++j2) {
          const double aj2 = pen.alpha(j2);
          for (int i2 : topo.cluster(j2)) {
            const double w = aj2 * pen.gamma(i2) / alpha_gamma_total;
            system.block(i * d, i2 * d, d, d).diagonal().array() -= aj * gi * w;
          }
        }
      }
    }
  }

  Eigen::LDLT<Matrix> ldlt(system);
  if (ldlt.info() != Eigen::Success)
    throw SolverError("reference_minimizer: singular first-order system");
  ParameterStack theta(n, d);
  theta.flat() = ldlt.solve(rhs);

  const ParameterStack grad = grad_objective(theta, topo, pen, losses);
  const double grad_norm = grad.flat().norm();
  if (!(grad_norm <= tol) || !theta.all_finite())
    throw SolverError("reference_minimizer: exact solve did not certify", grad_norm);
  return theta;
}

}  // namespace

ParameterStack reference_minimizer(const NetworkTopology& topo,
                                   const PenaltyConfig& pen,
                                   const LossSet& losses,
                                   const MinimizerOptions& opts) {
  ParameterStack zero(topo.n_clients(),
                      losses.empty() ? 0 : losses.front()->dim());
  check_shapes(zero, topo, pen, losses);

  std::vector<Matrix> hessians(losses.size());
  std::vector<Vector> linears(losses.size());
  bool all_quadratic = true;
  for (std::size_t i = 0; i < losses.size(); ++i)
    if (!losses[i]->quadratic_form(hessians[i], linears[i])) {
      all_quadratic = false;
      break;
    }
  if (all_quadratic)
    return solve_quadratic_exact(topo, pen, hessians, linears, opts.tol, losses);

  const SmoothnessProfile profile = smoothness_profile(topo, pen, losses);
  if (!(profile.mu > 0.0))
    throw SolverError(
        "reference_minimizer: gradient descent needs mu > 0; enable the ridge");
  const double step = 1.0 / profile.objective_smoothness();
  ParameterStack theta = zero;
  ParameterStack grad(theta.n(), theta.dim());
  double grad_norm = 0.0;
  for (long t = 0; t < opts.max_iterations; ++t) {
    grad_objective(theta, topo, pen, losses, grad);
    grad_norm = grad.flat().norm();
    if (grad_norm <= opts.tol) return theta;
    theta.flat() -= step * grad.flat();
  }
  grad_objective(theta, topo, pen, losses, grad);
  grad_norm = grad.flat().norm();
  if (grad_norm <= opts.tol) return theta;
  throw SolverError("reference_minimizer: no convergence within iteration cap",
                    grad_norm);
}

SmoothnessProfile smoothness_profile(const NetworkTopology& topo,
                                     const PenaltyConfig& pen,
                                     const LossSet& losses) {
  ParameterStack probe(topo.n_clients(),
                       losses.empty() ? 0 : losses.front()->dim());
  check_shapes(probe, topo, pen, losses);
  SmoothnessProfile profile;
  profile.mu = std::numeric_limits<double>::infinity();
  for (int j = 0; j < topo.n_clusters(); ++j) {
    const double aj = pen.alpha(j);
    for (int i : topo.cluster(j)) {
      const double gi = pen.gamma(i);
      profile.c1 = std::max(profile.c1, aj * gi);
      profile.c2 = std::max(profile.c2, (1.0 - aj) * gi);
      profile.gamma_max = std::max(profile.gamma_max, gi);
      profile.loss_smoothness = std::max(profile.loss_smoothness, losses[i]->smoothness());
      profile.component_smoothness =
          std::max(profile.component_smoothness, losses[i]->component_smoothness());
      profile.mu = std::min(profile.mu, losses[i]->strong_convexity());
    }
  }
  return profile;
}

}  // namespace fedcluster
