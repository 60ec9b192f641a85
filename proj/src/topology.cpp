#include "fedcluster/topology.hpp"

#include <algorithm>
#include <cmath>

namespace fedcluster {

NetworkTopology::NetworkTopology(int n_clients,
                                 std::vector<std::vector<int>> membership)
    : n_clients_(n_clients), membership_(std::move(membership)) {
  if (n_clients_ <= 0) throw TopologyError("topology: need at least one client");
  if (membership_.empty()) throw TopologyError("topology: need at least one cluster");
  cluster_of_.assign(n_clients_, -1);
  for (int j = 0; j < static_cast<int>(membership_.size()); ++j) {
    const auto& members = membership_[j];
    if (members.empty())
      throw TopologyError("topology: cluster " + std::to_string(j + 1) + " is empty");
    int prev = -1;
    for (int i : members) {
      if (i < 0 || i >= n_clients_)
        throw TopologyError("topology: client index out of range");
      if (i <= prev)
        throw TopologyError("topology: clients within a cluster must be in ascending order");
      if (cluster_of_[i] != -1)
        throw TopologyError("topology: client " + std::to_string(i + 1) +
                            " assigned to two clusters");
      cluster_of_[i] = j;
      prev = i;
    }
  }
  for (int i = 0; i < n_clients_; ++i)
    if (cluster_of_[i] == -1)
      throw TopologyError("topology: client " + std::to_string(i + 1) +
                          " belongs to no cluster");
}

NetworkTopology NetworkTopology::uniform(int n_clusters, int clients_per_cluster) {
  if (n_clusters <= 0 || clients_per_cluster <= 0)
    throw TopologyError("topology: cluster counts must be positive");
  std::vector<std::vector<int>> membership(n_clusters);
  int next = 0;
  for (auto& members : membership) {
    members.resize(clients_per_cluster);
    for (int& m : members) m = next++;
  }
  return NetworkTopology(n_clusters * clients_per_cluster, std::move(membership));
}

const std::vector<int>& NetworkTopology::cluster(int j) const {
  if (j < 0 || j >= n_clusters())
    throw TopologyError("topology: invalid cluster index " + std::to_string(j));
  return membership_[j];
}

namespace {

void check_gamma(const std::vector<double>& gamma) {
  if (gamma.empty()) throw TopologyError("penalty: empty gamma list");
  for (double g : gamma)
    if (!(g >= 0.0) || !std::isfinite(g))
      throw ConfigError("penalty: every gamma_i must be nonnegative and finite");
}

}  // namespace

PenaltyConfig PenaltyConfig::from_alpha(std::vector<double> gamma,
                                        std::vector<double> alpha) {
  check_gamma(gamma);
  if (alpha.empty()) throw ConfigError("penalty: empty alpha list");
  for (double a : alpha)
    if (!(a >= 0.0) || !(a <= 1.0))
      throw ConfigError("penalty: every alpha_j must lie in [0, 1]");
  PenaltyConfig pen;
  pen.gamma_ = std::move(gamma);
  pen.alpha_ = std::move(alpha);
  return pen;
}

PenaltyConfig PenaltyConfig::from_lambda(const NetworkTopology& topo,
                                         std::vector<double> gamma,
                                         std::vector<double> lambda) {
  check_gamma(gamma);
  if (static_cast<int>(gamma.size()) != topo.n_clients())
    throw ConfigError("penalty: gamma size must equal the number of clients");
  if (static_cast<int>(lambda.size()) != topo.n_clusters())
    throw ConfigError("penalty: lambda size must equal the number of clusters");
  std::vector<double> alpha(lambda.size());
  for (int j = 0; j < topo.n_clusters(); ++j) {
    if (!(lambda[j] >= 0.0) || !std::isfinite(lambda[j]))
      throw ConfigError("penalty: every lambda_j must be nonnegative and finite");
    std::vector<double> cluster_gamma;
    cluster_gamma.reserve(topo.cluster(j).size());
    for (int i : topo.cluster(j)) cluster_gamma.push_back(gamma[i]);
    alpha[j] = alpha_from_lambda(lambda[j], cluster_gamma);
  }
  PenaltyConfig pen;
  pen.gamma_ = std::move(gamma);
  pen.alpha_ = std::move(alpha);
  pen.lambda_ = std::move(lambda);
  return pen;
}

PenaltyConfig PenaltyConfig::uniform_from_lambda(const NetworkTopology& topo,
                                                 double gamma, double lambda) {
  return from_lambda(topo, std::vector<double>(topo.n_clients(), gamma),
                     std::vector<double>(topo.n_clusters(), lambda));
}

double PenaltyConfig::lambda(int cluster) const {
  if (!lambda_) throw ConfigError("penalty: lambda requested but not configured");
  return (*lambda_)[cluster];
}

double alpha_from_lambda(double lambda_j, const std::vector<double>& gammas) {
  if (gammas.empty()) throw TopologyError("alpha_from_lambda: empty gamma list");
  if (!(lambda_j >= 0.0)) throw ConfigError("alpha_from_lambda: lambda_j must be >= 0");
  double gamma_sum = 0.0;
  for (double g : gammas) {
    if (!(g > 0.0)) throw ConfigError("alpha_from_lambda: gamma_i must be > 0");
    gamma_sum += g;
  }
  if (lambda_j == 0.0) return 0.0;
  return lambda_j / (lambda_j + gamma_sum);
}

Vector cluster_average(const ParameterStack& stack, const NetworkTopology& topo,
                       const PenaltyConfig& pen, int j) {
  const auto& members = topo.cluster(j);
  Vector sum = Vector::Zero(stack.dim());
  double weight = 0.0;
  for (int i : members) {
    sum += pen.gamma(i) * stack.client(i);
    weight += pen.gamma(i);
  }
  if (!(weight > 0.0))
    throw ConfigError("cluster_average: undefined, all gamma_i in the cluster are zero");
  return sum / weight;
}

Vector global_average(const ParameterStack& stack, const NetworkTopology& topo,
                      const PenaltyConfig& pen) {
  Vector sum = Vector::Zero(stack.dim());
  double weight = 0.0;
  for (int j = 0; j < topo.n_clusters(); ++j) {
    const double aj = pen.alpha(j);
    for (int i : topo.cluster(j)) {
      sum += aj * pen.gamma(i) * stack.client(i);
      weight += aj * pen.gamma(i);
    }
  }
  if (!(weight > 0.0))
    throw ConfigError("global_average: undefined, all alpha_j gamma_i weights are zero");
  return sum / weight;
}

StackAverages compute_averages(const ParameterStack& stack,
                               const NetworkTopology& topo,
                               const PenaltyConfig& pen) {
  StackAverages avg;
  avg.cluster.reserve(topo.n_clusters());
  Vector global_sum = Vector::Zero(stack.dim());
  double global_weight = 0.0;
  avg.has_cluster.assign(topo.n_clusters(), 1);
  for (int j = 0; j < topo.n_clusters(); ++j) {
    Vector sum = Vector::Zero(stack.dim());
    double weight = 0.0;
    for (int i : topo.cluster(j)) {
      sum += pen.gamma(i) * stack.client(i);
      weight += pen.gamma(i);
    }
    const double aj = pen.alpha(j);
    global_sum += aj * sum;
    global_weight += aj * weight;
    if (weight > 0.0) {
      avg.cluster.push_back(sum / weight);
    } else {
      // Every gamma in the cluster is zero, so the regularizer and every
      // coefficient that would touch this average vanish; keep a zero vector
      // so downstream scaled-by-gamma arithmetic stays finite.
      avg.cluster.push_back(Vector::Zero(stack.dim()));
      avg.has_cluster[j] = 0;
    }
  }
  if (global_weight > 0.0) {
    avg.global = global_sum / global_weight;
    avg.has_global = true;
  } else {
    avg.global = Vector::Zero(stack.dim());
    avg.has_global = false;
  }
  return avg;
}

Vector cluster_substack(const ParameterStack& stack, const NetworkTopology& topo,
                        int j) {
  const auto& members = topo.cluster(j);
  Vector out(static_cast<Eigen::Index>(members.size()) * stack.dim());
  for (int l = 0; l < static_cast<int>(members.size()); ++l)
    out.segment(static_cast<Eigen::Index>(l) * stack.dim(), stack.dim()) =
        stack.client(members[l]);
  return out;
}

}  // namespace fedcluster
