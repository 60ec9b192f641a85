#pragma once

#include <Eigen/Dense>
#include <optional>
#include <vector>

#include "fedcluster/errors.hpp"

namespace fedcluster {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Partition of n clients into k known, nonempty clusters. Client indices are
/// 0-based internally; reports use 1-based ids.
class NetworkTopology {
 public:
  NetworkTopology(int n_clients, std::vector<std::vector<int>> membership);

  /// k clusters of equal size, clients numbered contiguously by cluster.
  static NetworkTopology uniform(int n_clusters, int clients_per_cluster);

  int n_clients() const { return n_clients_; }
  int n_clusters() const { return static_cast<int>(membership_.size()); }
  const std::vector<int>& cluster(int j) const;
  int cluster_of(int client) const { return cluster_of_[client]; }

 private:
  int n_clients_;
  std::vector<std::vector<int>> membership_;
  std::vector<int> cluster_of_;
};

/// Per-client weights gamma_i > 0 and per-cluster mixing alpha_j in [0, 1].
/// When built from the multi-task form, the lambda_j are kept and alpha_j =
/// lambda_j / (lambda_j + sum_{i in I_j} gamma_i) holds by construction.
class PenaltyConfig {
 public:
  static PenaltyConfig from_alpha(std::vector<double> gamma,
                                  std::vector<double> alpha);
  static PenaltyConfig from_lambda(const NetworkTopology& topo,
                                   std::vector<double> gamma,
                                   std::vector<double> lambda);
  /// Uniform gamma/lambda across clients and clusters.
  static PenaltyConfig uniform_from_lambda(const NetworkTopology& topo,
                                           double gamma, double lambda);

  double gamma(int client) const { return gamma_[client]; }
  double alpha(int cluster) const { return alpha_[cluster]; }
  bool has_lambda() const { return lambda_.has_value(); }
  double lambda(int cluster) const;
  int n_clients() const { return static_cast<int>(gamma_.size()); }
  int n_clusters() const { return static_cast<int>(alpha_.size()); }

 private:
  PenaltyConfig() = default;
  std::vector<double> gamma_;
  std::vector<double> alpha_;
  std::optional<std::vector<double>> lambda_;
};

/// The stacked iterate Theta = (theta_1, ..., theta_n), theta_i in R^d,
/// stored flat so whole-stack norms and axpy updates stay cheap.
class ParameterStack {
 public:
  ParameterStack() : n_(0), d_(0) {}
  ParameterStack(int n_clients, int dim)
      : n_(n_clients), d_(dim), flat_(Vector::Zero(static_cast<Eigen::Index>(n_clients) * dim)) {}

  int n() const { return n_; }
  int dim() const { return d_; }

  Eigen::VectorBlock<Vector> client(int i) { return flat_.segment(static_cast<Eigen::Index>(i) * d_, d_); }
  Eigen::VectorBlock<const Vector> client(int i) const {
    return flat_.segment(static_cast<Eigen::Index>(i) * d_, d_);
  }

  Vector& flat() { return flat_; }
  const Vector& flat() const { return flat_; }

  bool all_finite() const { return flat_.allFinite(); }
  void set_zero() { flat_.setZero(); }

 private:
  int n_;
  int d_;
  Vector flat_;
};

/// alpha_j = lambda_j / (lambda_j + sum gamma_i) for one cluster.
double alpha_from_lambda(double lambda_j, const std::vector<double>& gammas);

/// Gamma-weighted average of the parameters in cluster j.
Vector cluster_average(const ParameterStack& stack, const NetworkTopology& topo,
                       const PenaltyConfig& pen, int j);

/// Alpha-gamma-weighted average over the whole network; requires a positive
/// total weight.
Vector global_average(const ParameterStack& stack, const NetworkTopology& topo,
                      const PenaltyConfig& pen);

/// All cluster averages plus the global one, computed in one pass.
/// An average whose total weight is zero is reported as a zero vector with
/// its flag cleared; the corresponding regularizer vanishes identically in
/// that case.
struct StackAverages {
  std::vector<Vector> cluster;
  std::vector<char> has_cluster;
  Vector global;
  bool has_global = false;
};

StackAverages compute_averages(const ParameterStack& stack,
                               const NetworkTopology& topo,
                               const PenaltyConfig& pen);

/// Stacks the members of cluster j into one |I_j| * d vector.
Vector cluster_substack(const ParameterStack& stack, const NetworkTopology& topo,
                        int j);

}  // namespace fedcluster
