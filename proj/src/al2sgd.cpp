#include "fedcluster/al2sgd.hpp"

#include <algorithm>
#include <cmath>

#include "fedcluster/rng.hpp"

namespace fedcluster {

namespace {

constexpr std::uint64_t kGlobalCoinStream = stream_tag("al2sgd/global-coin");
constexpr std::uint64_t kClusterCoinStream = stream_tag("al2sgd/cluster-coin");
constexpr std::uint64_t kAnchorCoinStream = stream_tag("al2sgd/anchor-coin");
constexpr std::uint64_t kComponentStream = stream_tag("al2sgd/component");

}  // namespace

KatyushaParams tune_katyusha(const SmoothnessProfile& profile, double script_l,
                             double rho) {
  if (!(profile.mu > 0.0))
    throw ConfigError("tune_katyusha: needs mu > 0");
  if (!(rho > 0.0) || !(rho <= 1.0))
    throw ConfigError("tune_katyusha: rho must lie in (0, 1]");
  const double l_f = profile.objective_smoothness();
  const double top = std::max(l_f, script_l);
  KatyushaParams params;
  params.eta = 0.25 / top;
  params.a2 = script_l / (2.0 * top);
  params.a1 = std::min(
      0.5, std::sqrt(params.eta * profile.mu * std::max(0.5, params.a2 / rho)));
  params.b2 = 1.0 / std::max(2.0 * profile.mu, 4.0 * params.a1 / params.eta);
  params.b1 = 1.0 - params.b2 * profile.mu;
  return params;
}

KatyushaParams tune_katyusha(const NetworkTopology& topo, const PenaltyConfig& pen,
                             const LossSet& losses, const SchedulerConfig& sched,
                             double rho) {
  const double script_l =
      expected_smoothness(topo, pen, losses, sched, SmoothnessKind::component);
  return tune_katyusha(smoothness_profile(topo, pen, losses), script_l, rho);
}

SchedulerConfig tune_al2sgd_schedule(const SmoothnessProfile& profile,
                                     int n_clusters) {
  if (!(profile.mu > 0.0))
    throw ConfigError("tune_al2sgd_schedule: needs mu > 0");
  const double l = profile.component_smoothness;
  SchedulerConfig sched;
  sched.mode = ScheduleMode::three_branch;
  double l_tilde = 0.0;
  if (profile.c1 == 0.0 && profile.c2 == 0.0) {
    sched.p0 = 0.0;
    sched.p.assign(n_clusters, 0.0);
    sched.tau.assign(n_clusters, 1.0);
    l_tilde = l;
  } else if (profile.c2 > profile.c1) {
    sched.p0 = 2.0 * profile.c1 / (profile.c1 + profile.c2 + l);
    sched.p.assign(n_clusters,
                   (profile.c2 - profile.c1) / (profile.c2 - profile.c1 + l));
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

KatyushaState::KatyushaState(int n_clients, int dim)
    : x(n_clients, dim),
      y(n_clients, dim),
      z(n_clients, dim),
      anchor_grad(n_clients, dim) {}

void KatyushaState::refresh_anchors(const NetworkTopology& topo,
                                    const PenaltyConfig& pen,
                                    const LossSet& losses) {
  Vector g(x.dim());
  for (int i = 0; i < x.n(); ++i) {
    losses[i]->grad(x.client(i), g);
    anchor_grad.client(i) = g;
  }
  StackAverages avg = compute_averages(x, topo, pen);
  anchor_cluster_avg = std::move(avg.cluster);
  anchor_global_avg = std::move(avg.global);
  anchor_has_global = avg.has_global;
  anchors_fresh = true;
}

void vr_gradient_estimate(const KatyushaState& state, const ParameterStack& stack,
                          const NetworkTopology& topo, const PenaltyConfig& pen,
                          const LossSet& losses, const SchedulerConfig& sched,
                          int xi0, const std::vector<int>& xi,
                          const std::vector<int>& component,
                          ParameterStack& out) {
  if (!state.anchors_fresh)
    throw ScheduleError("vr_gradient_estimate: stale anchor averages");
  if (sched.mode != ScheduleMode::three_branch)
    throw ConfigError("vr_gradient_estimate: defined for the three-branch schedule");
  sched.validate(topo.n_clusters());
  if (static_cast<int>(component.size()) != stack.n())
    throw ConfigError("vr_gradient_estimate: need one component index per client");
  if (out.n() != stack.n() || out.dim() != stack.dim())
    out = ParameterStack(stack.n(), stack.dim());

  // Iterate-side averages are needed only by communication branches.
  StackAverages theta_avg;
  const bool need_global = xi0 == 1;
  if (need_global) {
    if (!(sched.p0 > 0.0))
      throw ScheduleError("vr_gradient_estimate: xi0 = 1 branch has probability 0");
    theta_avg = compute_averages(stack, topo, pen);
  } else if (!(sched.p0 < 1.0)) {
    throw ScheduleError("vr_gradient_estimate: xi0 = 0 branch has probability 0");
  }

  Vector diff(stack.dim());
  Vector g_theta(stack.dim());
  Vector g_anchor(stack.dim());
  for (int j = 0; j < topo.n_clusters(); ++j) {
    const double aj = pen.alpha(j);
    const double tj = sched.tau[j];
    const double pj = sched.p[j];
    Vector theta_cluster_avg;
    if (xi0 == 0 && xi[j] == 1) {
      double weight = 0.0;
      for (int i : topo.cluster(j)) weight += pen.gamma(i);
      theta_cluster_avg = weight > 0.0 ? cluster_average(stack, topo, pen, j)
                                       : Vector::Zero(stack.dim());
    }
    for (int i : topo.cluster(j)) {
      const double gi = pen.gamma(i);
      auto out_i = out.client(i);
      // Full gradient of F at the anchor.
      out_i = state.anchor_grad.client(i);
      if (state.anchor_has_global)
        out_i += aj * gi * (state.x.client(i) - state.anchor_global_avg);
      out_i += (1.0 - aj) * gi * (state.x.client(i) - state.anchor_cluster_avg[j]);

      if (xi0 == 1) {
        if (state.anchor_has_global || theta_avg.has_global) {
          diff = stack.client(i) - theta_avg.global;
          diff -= state.x.client(i) - state.anchor_global_avg;
          out_i += (gi * aj / sched.p0) * diff;
        }
        diff = stack.client(i) - theta_avg.cluster[j];
        diff -= state.x.client(i) - state.anchor_cluster_avg[j];
        out_i += (gi * tj * (1.0 - aj) / sched.p0) * diff;
      } else if (xi[j] == 1) {
        if (!(pj > 0.0))
          throw ScheduleError("vr_gradient_estimate: xi_j = 1 branch has probability 0");
        diff = stack.client(i) - theta_cluster_avg;
        diff -= state.x.client(i) - state.anchor_cluster_avg[j];
        out_i += (gi * (1.0 - tj) * (1.0 - aj) / ((1.0 - sched.p0) * pj)) * diff;
      } else {
        if (!(pj < 1.0))
          throw ScheduleError("vr_gradient_estimate: xi_j = 0 branch has probability 0");
        const int l = component[i];
        losses[i]->component_grad(stack.client(i), l, g_theta);
        losses[i]->component_grad(state.x.client(i), l, g_anchor);
        out_i += (g_theta - g_anchor) / ((1.0 - sched.p0) * (1.0 - pj));
      }
    }
  }
}

ParameterStack vr_gradient_estimate(const KatyushaState& state,
                                    const ParameterStack& stack,
                                    const NetworkTopology& topo,
                                    const PenaltyConfig& pen, const LossSet& losses,
                                    const SchedulerConfig& sched, int xi0,
                                    const std::vector<int>& xi,
                                    const std::vector<int>& component) {
  ParameterStack out(stack.n(), stack.dim());
  vr_gradient_estimate(state, stack, topo, pen, losses, sched, xi0, xi, component,
                       out);
  return out;
}

Al2sgdResult run_async_al2sgd_plus(const NetworkTopology& topo,
                                   const PenaltyConfig& pen, const LossSet& losses,
                                   const SchedulerConfig& sched, double rho,
                                   const KatyushaParams* params,
                                   const ParameterStack* theta_hat,
                                   long objective_stride) {
  const int k = topo.n_clusters();
  const int n = topo.n_clients();
  sched.validate(k);
  if (sched.mode != ScheduleMode::three_branch)
    throw ConfigError("async-al2sgd+: needs the three-branch schedule");
  if (!(rho > 0.0) || !(rho <= 1.0))
    throw ConfigError("async-al2sgd+: rho must lie in (0, 1]");
  const int d = losses.empty() ? 0 : losses.front()->dim();

  KatyushaParams tuned;
  if (params)
    tuned = *params;
  else
    tuned = tune_katyusha(topo, pen, losses, sched, rho);
  const double eta = tuned.eta;
  if (!(eta > 0.0)) throw ConfigError("async-al2sgd+: step size must be positive");

  KatyushaState state(n, d);
  state.refresh_anchors(topo, pen, losses);

  Al2sgdResult result;
  result.comm.within_cluster_rounds.assign(k, 0);
  result.comm.local_steps.assign(k, 0);
  result.comm.within_switches.assign(k, 0);
  result.comm.iterations = sched.iterations;
  result.trajectory.stride = objective_stride;

  auto record = [&](long t) {
    if (theta_hat)
      result.trajectory.dist_sq.push_back(
          (state.y.flat() - theta_hat->flat()).squaredNorm());
    if (objective_stride > 0 &&
        (t == 0 || t % objective_stride == 0 || t == sched.iterations)) {
      result.trajectory.objective_iters.push_back(t);
      result.trajectory.objective_values.push_back(
          eval_objective(state.y, topo, pen, losses).total);
      result.trajectory.between_rounds_at.push_back(
          result.comm.between_cluster_rounds);
      result.trajectory.within_rounds_at.push_back(
          result.comm.within_cluster_rounds);
    }
  };
  record(0);

  Rng global_coin(derive_seed(sched.seed, kGlobalCoinStream));
  Rng anchor_coin(derive_seed(sched.seed, kAnchorCoinStream));
  std::vector<Rng> cluster_coin;
  std::vector<Rng> component_rng;
  cluster_coin.reserve(k);
  component_rng.reserve(n);
  for (int j = 0; j < k; ++j)
    cluster_coin.emplace_back(derive_seed(sched.seed, kClusterCoinStream, j));
  for (int i = 0; i < n; ++i)
    component_rng.emplace_back(derive_seed(sched.seed, kComponentStream, i));

  ParameterStack theta(n, d);
  ParameterStack g(n, d);
  std::vector<int> xij(k, 0);
  std::vector<int> component(n, 0);
  int prev_xi0 = 0;
  std::vector<int> prev_xij(k, 0);

  for (long t = 1; t <= sched.iterations; ++t) {
    // Local combination step.
    theta.flat() = tuned.a1 * state.z.flat() + tuned.a2 * state.x.flat() +
                   (1.0 - tuned.a1 - tuned.a2) * state.y.flat();

    const int xi0 = global_coin.bernoulli(sched.p0) ? 1 : 0;
    for (int j = 0; j < k; ++j)
      xij[j] = cluster_coin[j].bernoulli(sched.p[j]) ? 1 : 0;
    for (int i = 0; i < n; ++i)
      component[i] = component_rng[i].uniform_int(losses[i]->n_components());

    vr_gradient_estimate(state, theta, topo, pen, losses, sched, xi0, xij,
                         component, g);

    if (xi0 == 1) {
      result.comm.between_cluster_rounds++;
      if (prev_xi0 == 0) result.comm.between_switches++;
    } else {
      for (int j = 0; j < k; ++j) {
        if (xij[j] == 1) {
          result.comm.within_cluster_rounds[j]++;
          if (prev_xij[j] == 0) result.comm.within_switches[j]++;
        } else {
          result.comm.local_steps[j]++;
        }
      }
    }
    prev_xi0 = xi0;
    prev_xij = xij;

    // y^{t+1} = theta^t - eta g^t; z^{t+1} = b1 z + (1-b1) theta + (b2/eta)(y^{t+1} - theta).
    // The z update folds in the gradient directly since y^{t+1} - theta = -eta g.
    state.y.flat() = theta.flat() - eta * g.flat();
    state.z.flat() = tuned.b1 * state.z.flat() + (1.0 - tuned.b1) * theta.flat() -
                     tuned.b2 * g.flat();

    if (anchor_coin.bernoulli(rho)) {
      state.x.flat() = state.y.flat();
      state.refresh_anchors(topo, pen, losses);
      result.comm.anchor_refreshes++;
    }

    if (!state.y.all_finite())
      throw DivergenceError("async-al2sgd+: non-finite iterate", t);
    record(t);
  }

  result.theta = std::move(state.y);
  return result;
}

}  // namespace fedcluster
