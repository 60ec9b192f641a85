#include "fedcluster/l2gd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "fedcluster/rng.hpp"

namespace fedcluster {

namespace {

constexpr std::uint64_t kGlobalCoinStream = stream_tag("l2gd/global-coin");
constexpr std::uint64_t kClusterCoinStream = stream_tag("l2gd/cluster-coin");

bool is_prob(double p) { return p >= 0.0 && p <= 1.0; }

}  // namespace

void SchedulerConfig::validate(int n_clusters) const {
  if (!is_prob(p0)) throw ConfigError("schedule: p0 must lie in [0, 1]");
  if (!(eta > 0.0)) throw ConfigError("schedule: step size must be positive");
  if (iterations < 0) throw ConfigError("schedule: negative iteration budget");
  if (mode == ScheduleMode::simple) return;
  if (static_cast<int>(p.size()) != n_clusters ||
      static_cast<int>(tau.size()) != n_clusters)
    throw ConfigError("schedule: need one p_j and tau_j per cluster");
  for (double pj : p)
    if (!is_prob(pj)) throw ConfigError("schedule: p_j must lie in [0, 1]");
  for (double tj : tau)
    if (!is_prob(tj)) throw ConfigError("schedule: tau_j must lie in [0, 1]");
}

double optimal_tau(double p0, double pj) {
  if (!is_prob(p0) || !is_prob(pj))
    throw ConfigError("optimal_tau: probabilities must lie in [0, 1]");
  const double denom = p0 + 2.0 * (1.0 - p0) * pj;
  if (denom == 0.0)
    throw ScheduleError("optimal_tau: degenerate schedule p0 = p_j = 0");
  return p0 / denom;
}

void gradient_oracle(const ParameterStack& stack, const NetworkTopology& topo,
                     const PenaltyConfig& pen, const LossSet& losses,
                     const SchedulerConfig& sched, int xi0,
                     const std::vector<int>& xi, ParameterStack& out) {
  if (sched.mode != ScheduleMode::three_branch)
    throw ConfigError("gradient_oracle: defined for the three-branch schedule");
  sched.validate(topo.n_clusters());
  if (out.n() != stack.n() || out.dim() != stack.dim())
    out = ParameterStack(stack.n(), stack.dim());

  if (xi0 == 1) {
    if (!(sched.p0 > 0.0))
      throw ScheduleError("gradient_oracle: xi0 = 1 branch has probability 0");
    const StackAverages avg = compute_averages(stack, topo, pen);
    for (int j = 0; j < topo.n_clusters(); ++j) {
      const double aj = pen.alpha(j);
      const double tj = sched.tau[j];
      for (int i : topo.cluster(j)) {
        const double gi = pen.gamma(i);
        auto out_i = out.client(i);
        out_i.setZero();
        if (avg.has_global)
          out_i += (gi * aj / sched.p0) * (stack.client(i) - avg.global);
        out_i += (gi * tj * (1.0 - aj) / sched.p0) *
                 (stack.client(i) - avg.cluster[j]);
      }
    }
    return;
  }

  if (!(sched.p0 < 1.0))
    throw ScheduleError("gradient_oracle: xi0 = 0 branch has probability 0");
  if (static_cast<int>(xi.size()) != topo.n_clusters())
    throw ConfigError("gradient_oracle: need one xi_j per cluster");
  Vector g(stack.dim());
  for (int j = 0; j < topo.n_clusters(); ++j) {
    const double aj = pen.alpha(j);
    const double tj = sched.tau[j];
    const double pj = sched.p[j];
    if (xi[j] == 1) {
      if (!(pj > 0.0))
        throw ScheduleError("gradient_oracle: xi_j = 1 branch has probability 0");
      double weight = 0.0;
      for (int i : topo.cluster(j)) weight += pen.gamma(i);
      const Vector avg_j = weight > 0.0 ? cluster_average(stack, topo, pen, j)
                                        : Vector::Zero(stack.dim());
      const double scale = (1.0 - tj) * (1.0 - aj) / ((1.0 - sched.p0) * pj);
      for (int i : topo.cluster(j))
        out.client(i) = (pen.gamma(i) * scale) * (stack.client(i) - avg_j);
    } else {
      if (!(pj < 1.0))
        throw ScheduleError("gradient_oracle: xi_j = 0 branch has probability 0");
      const double scale = 1.0 / ((1.0 - sched.p0) * (1.0 - pj));
      for (int i : topo.cluster(j)) {
        losses[i]->grad(stack.client(i), g);
        out.client(i) = scale * g;
      }
    }
  }
}

ParameterStack gradient_oracle(const ParameterStack& stack,
                               const NetworkTopology& topo,
                               const PenaltyConfig& pen, const LossSet& losses,
                               const SchedulerConfig& sched, int xi0,
                               const std::vector<int>& xi) {
  ParameterStack out(stack.n(), stack.dim());
  gradient_oracle(stack, topo, pen, losses, sched, xi0, xi, out);
  return out;
}

namespace {

void record_objective(TrajectoryRecord& traj, long t, const ParameterStack& theta,
                      const NetworkTopology& topo, const PenaltyConfig& pen,
                      const LossSet& losses, const CommLog& comm) {
  traj.objective_iters.push_back(t);
  traj.objective_values.push_back(eval_objective(theta, topo, pen, losses).total);
  traj.between_rounds_at.push_back(comm.between_cluster_rounds);
  traj.within_rounds_at.push_back(comm.within_cluster_rounds);
}

}  // namespace

L2gdResult run_async_l2gd(const NetworkTopology& topo, const PenaltyConfig& pen,
                          const LossSet& losses, const SchedulerConfig& sched,
                          const ParameterStack* theta_hat, long objective_stride) {
  const int k = topo.n_clusters();
  sched.validate(k);
  const int d = losses.empty() ? 0 : losses.front()->dim();

  if (sched.safe_step && sched.mode == ScheduleMode::three_branch) {
    const double script_l = expected_smoothness(topo, pen, losses, sched);
    if (sched.eta > 0.5 / script_l * (1.0 + 1e-12))
      throw ConfigError("schedule: safe-step mode requires eta <= 1/(2 script_L)");
  }

  L2gdResult result;
  result.theta = ParameterStack(topo.n_clients(), d);
  result.comm.within_cluster_rounds.assign(k, 0);
  result.comm.local_steps.assign(k, 0);
  result.comm.within_switches.assign(k, 0);
  result.comm.iterations = sched.iterations;
  result.trajectory.stride = objective_stride;

  ParameterStack& theta = result.theta;
  if (theta_hat)
    result.trajectory.dist_sq.push_back(
        (theta.flat() - theta_hat->flat()).squaredNorm());
  if (objective_stride > 0)
    record_objective(result.trajectory, 0, theta, topo, pen, losses, result.comm);

  Rng global_coin(derive_seed(sched.seed, kGlobalCoinStream));
  std::vector<Rng> cluster_coin;
  cluster_coin.reserve(k);
  for (int j = 0; j < k; ++j)
    cluster_coin.emplace_back(derive_seed(sched.seed, kClusterCoinStream, j));

  Vector g(d);
  int prev_xi0 = 0;
  std::vector<int> prev_xij(k, 0);

  for (long t = 1; t <= sched.iterations; ++t) {
    const int xi0 = global_coin.bernoulli(sched.p0) ? 1 : 0;
    // Coins are drawn for every cluster each iteration regardless of use, so
    // the switch counters match the expected-rounds proposition exactly.
    std::vector<int> xij(k, 0);
    if (sched.mode == ScheduleMode::three_branch)
      for (int j = 0; j < k; ++j)
        xij[j] = cluster_coin[j].bernoulli(sched.p[j]) ? 1 : 0;

    if (xi0 == 1) {
      result.comm.between_cluster_rounds++;
      if (prev_xi0 == 0) result.comm.between_switches++;
      const StackAverages avg = compute_averages(theta, topo, pen);
      for (int j = 0; j < k; ++j) {
        const double aj = pen.alpha(j);
        const double tj = sched.mode == ScheduleMode::simple ? 0.0 : sched.tau[j];
        for (int i : topo.cluster(j)) {
          const double gi = pen.gamma(i);
          auto theta_i = theta.client(i);
          if (sched.mode == ScheduleMode::simple) {
            // Combined step toward both averages with importance scaling 1/p.
            const double scale = sched.eta * gi / sched.p0;
            Vector step = (1.0 - aj) * (theta_i - avg.cluster[j]);
            if (avg.has_global) step += aj * (theta_i - avg.global);
            theta_i -= scale * step;
          } else {
            const double move = sched.eta * gi * (aj + tj * (1.0 - aj)) / sched.p0;
            Vector target = tj * (1.0 - aj) * avg.cluster[j];
            if (avg.has_global) target += aj * avg.global;
            theta_i = (1.0 - move) * theta_i + (sched.eta * gi / sched.p0) * target;
          }
        }
      }
    } else {
      for (int j = 0; j < k; ++j) {
        const double aj = pen.alpha(j);
        const bool within = sched.mode == ScheduleMode::three_branch && xij[j] == 1;
        if (within) {
          result.comm.within_cluster_rounds[j]++;
          if (prev_xij[j] == 0) result.comm.within_switches[j]++;
          double weight = 0.0;
          for (int i : topo.cluster(j)) weight += pen.gamma(i);
          const Vector avg_j = weight > 0.0 ? cluster_average(theta, topo, pen, j)
                                            : Vector::Zero(theta.dim());
          const double tj = sched.tau[j];
          for (int i : topo.cluster(j)) {
            const double move = sched.eta * pen.gamma(i) * (1.0 - tj) * (1.0 - aj) /
                                ((1.0 - sched.p0) * sched.p[j]);
            auto theta_i = theta.client(i);
            theta_i = (1.0 - move) * theta_i + move * avg_j;
          }
        } else {
          result.comm.local_steps[j]++;
          const double pj =
              sched.mode == ScheduleMode::simple ? 0.0 : sched.p[j];
          const double scale = sched.eta / ((1.0 - sched.p0) * (1.0 - pj));
          for (int i : topo.cluster(j)) {
            losses[i]->grad(theta.client(i), g);
            theta.client(i) -= scale * g;
          }
        }
      }
    }
    prev_xi0 = xi0;
    prev_xij = xij;

    if (!theta.all_finite())
      throw DivergenceError("async-l2gd: non-finite iterate", t);
    if (theta_hat)
      result.trajectory.dist_sq.push_back(
          (theta.flat() - theta_hat->flat()).squaredNorm());
    if (objective_stride > 0 &&
        (t % objective_stride == 0 || t == sched.iterations))
      record_objective(result.trajectory, t, theta, topo, pen, losses, result.comm);
  }
  return result;
}

namespace {

double local_branch_constant(const SchedulerConfig& sched, int n_clusters) {
  if (!(sched.p0 < 1.0))
    throw ScheduleError("expected_smoothness: p0 = 1 leaves no local steps");
  double worst = 0.0;
  for (int j = 0; j < n_clusters; ++j) {
    if (!(sched.p[j] < 1.0))
      throw ScheduleError("expected_smoothness: p_j = 1 leaves no local steps");
    worst = std::max(worst, 1.0 / (1.0 - sched.p[j]));
  }
  return worst / (1.0 - sched.p0);
}

}  // namespace

double expected_smoothness(const NetworkTopology& topo, const PenaltyConfig& pen,
                           const LossSet& losses, const SchedulerConfig& sched,
                           SmoothnessKind kind) {
  sched.validate(topo.n_clusters());
  if (sched.mode != ScheduleMode::three_branch)
    throw ConfigError("expected_smoothness: defined for the three-branch schedule");

  double term_global = 0.0;
  double term_cluster = 0.0;
  for (int j = 0; j < topo.n_clusters(); ++j) {
    const double aj = pen.alpha(j);
    double gamma_max = 0.0;
    double alpha_gamma_max = 0.0;
    for (int i : topo.cluster(j)) {
      gamma_max = std::max(gamma_max, pen.gamma(i));
      alpha_gamma_max = std::max(alpha_gamma_max, aj * pen.gamma(i));
    }
    const double denom = sched.p0 + 2.0 * (1.0 - sched.p0) * sched.p[j];
    if (alpha_gamma_max > 0.0 && !(sched.p0 > 0.0))
      throw ScheduleError("expected_smoothness: global regularizer unreachable (p0 = 0)");
    if (alpha_gamma_max > 0.0)
      term_global = std::max(term_global, 2.0 * alpha_gamma_max / sched.p0);
    const double cluster_weight = (1.0 - aj) * gamma_max;
    if (cluster_weight > 0.0) {
      if (!(denom > 0.0))
        throw ScheduleError(
            "expected_smoothness: cluster regularizer unreachable (p0 = p_j = 0)");
      // tau must take the variance-balancing value wherever it matters.
      const double tau_star = sched.p0 / denom;
      if (std::abs(sched.tau[j] - tau_star) > 1e-12)
        throw ScheduleError("expected_smoothness: tau_j not set per the optimal rule");
      term_cluster = std::max(term_cluster, 2.0 * cluster_weight / denom);
    }
  }

  const SmoothnessProfile profile = smoothness_profile(topo, pen, losses);
  const double l = kind == SmoothnessKind::full_gradient
                       ? profile.loss_smoothness
                       : profile.component_smoothness;
  const double term_local = l * local_branch_constant(sched, topo.n_clusters());
  return std::max({term_global, term_cluster, term_local});
}

double residual_variance(const ParameterStack& theta_hat,
                         const NetworkTopology& topo, const PenaltyConfig& pen,
                         const LossSet& losses, const SchedulerConfig& sched) {
  sched.validate(topo.n_clusters());
  const StackAverages avg = compute_averages(theta_hat, topo, pen);

  double phi_grad_sq = 0.0;
  double total = 0.0;
  Vector g(theta_hat.dim());
  for (int j = 0; j < topo.n_clusters(); ++j) {
    const double aj = pen.alpha(j);
    double psi_grad_sq = 0.0;
    double loss_grad_sq = 0.0;
    for (int i : topo.cluster(j)) {
      const double gi = pen.gamma(i);
      psi_grad_sq += (gi * (theta_hat.client(i) - avg.cluster[j])).squaredNorm();
      if (avg.has_global)
        phi_grad_sq +=
            (aj * gi * (theta_hat.client(i) - avg.global)).squaredNorm();
      losses[i]->grad(theta_hat.client(i), g);
      loss_grad_sq += g.squaredNorm();
    }
    const double cluster_weight = (1.0 - aj) * (1.0 - aj) * psi_grad_sq;
    if (cluster_weight > 0.0) {
      const double denom = sched.p0 + 2.0 * (1.0 - sched.p0) * sched.p[j];
      if (!(denom > 0.0))
        throw ScheduleError("residual_variance: cluster term unreachable");
      total += 2.0 * cluster_weight / denom;
    }
    if (loss_grad_sq > 0.0) {
      if (!(sched.p0 < 1.0) || !(sched.p[j] < 1.0))
        throw ScheduleError("residual_variance: local term unreachable");
      total += loss_grad_sq / ((1.0 - sched.p0) * (1.0 - sched.p[j]));
    }
  }
  if (phi_grad_sq > 0.0) {
    if (!(sched.p0 > 0.0))
      throw ScheduleError("residual_variance: global term unreachable");
    total += 2.0 * phi_grad_sq / sched.p0;
  }
  return total;
}

double script_l_tilde(const SmoothnessProfile& profile, const SchedulerConfig& sched,
                      SmoothnessKind kind) {
  const double l = kind == SmoothnessKind::full_gradient
                       ? profile.loss_smoothness
                       : profile.component_smoothness;
  double bound = 0.0;
  if (profile.c1 > 0.0) {
    if (!(sched.p0 > 0.0)) throw ScheduleError("script_l_tilde: p0 = 0 with C1 > 0");
    bound = std::max(bound, 2.0 * profile.c1 / sched.p0);
  }
  for (double pj : sched.p) {
    const double denom = sched.p0 + 2.0 * (1.0 - sched.p0) * pj;
    if (profile.c2 > 0.0) {
      if (!(denom > 0.0)) throw ScheduleError("script_l_tilde: C2 term unreachable");
      bound = std::max(bound, 2.0 * profile.c2 / denom);
    }
    if (!(sched.p0 < 1.0) || !(pj < 1.0))
      throw ScheduleError("script_l_tilde: no local steps");
    bound = std::max(bound, l / ((1.0 - sched.p0) * (1.0 - pj)));
  }
  return bound;
}

SchedulerConfig tune_schedule(const SmoothnessProfile& profile, int n_clusters) {
  if (!(profile.mu > 0.0))
    throw ConfigError("tune_schedule: needs mu > 0");
  const double l = profile.loss_smoothness;
  SchedulerConfig sched;
  sched.mode = ScheduleMode::three_branch;
  double l_tilde = 0.0;
  if (profile.c1 == 0.0 && profile.c2 == 0.0) {
    // No regularization: pure local training.
    sched.p0 = 0.0;
    sched.p.assign(n_clusters, 0.0);
    sched.tau.assign(n_clusters, 1.0);
    l_tilde = l;
  } else if (profile.c2 > profile.c1) {
    sched.p0 = 2.0 * profile.c1 / (profile.c1 + profile.c2 + l);
    sched.p.assign(n_clusters, (profile.c2 - profile.c1) / (profile.c2 - profile.c1 + l));
    sched.tau.assign(n_clusters, profile.c1 / profile.c2);
    l_tilde = profile.c1 + profile.c2 + l;
  } else {
    sched.p0 = 2.0 * profile.c1 / (2.0 * profile.c1 + l);
    sched.p.assign(n_clusters, 0.0);
    sched.tau.assign(n_clusters, 1.0);
    l_tilde = 2.0 * profile.c1 + l;
  }
  sched.eta = 0.5 / l_tilde;
  return sched;
}

}  // namespace fedcluster
