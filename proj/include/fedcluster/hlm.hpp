#pragma once

#include <cstdint>
#include <vector>

#include "fedcluster/loss.hpp"
#include "fedcluster/topology.hpp"

namespace fedcluster {

/// Generating parameters of the hierarchical linear model: cluster centers
/// spread sigma_bar_sq around theta_star_bar, client parameters spread
/// sigma_cluster_sq[j] around their center, observations carry noise
/// sigma_noise_sq[i]. Zero spreads are legal and produce the degenerate
/// (fully shared) model; operations that invert a variance check positivity
/// themselves.
struct HlmSpec {
  enum class Design { gaussian, identity };

  int d = 1;
  std::vector<int> cluster_sizes;
  double sigma_bar_sq = 1.0;
  std::vector<double> sigma_cluster_sq;
  std::vector<double> sigma_noise_sq;  // per client
  Vector theta_star_bar;
  std::vector<int> samples_per_client;
  Design design = Design::gaussian;

  static HlmSpec uniform(int clusters, int clients_per_cluster, int d,
                         int samples_per_client, double sigma_bar_sq = 1.0,
                         double sigma_cluster_sq = 1.0,
                         double sigma_noise_sq = 1.0);

  int n_clients() const;
  int n_clusters() const { return static_cast<int>(cluster_sizes.size()); }
  NetworkTopology topology() const;
  void validate() const;
};

/// One draw of the model: true centers, true client parameters, datasets.
struct HlmSample {
  HlmSpec spec;
  NetworkTopology topo;
  std::vector<Vector> cluster_centers;
  std::vector<Vector> theta_star;
  std::vector<ClientDataset> data;
};

HlmSample generate_hlm(const HlmSpec& spec, std::uint64_t seed);

/// Quadratic loss oracles for every client of a sample.
LossSet make_quadratic_losses(const HlmSample& sample);

enum class EstimatorTag { our, lt, sm, sc, gls, js };
const char* estimator_name(EstimatorTag tag);

struct EstimatorResult {
  EstimatorTag method;
  /// 0-based ids of the clients estimated; all clients unless the estimator
  /// targets a single one.
  std::vector<int> clients;
  std::vector<Vector> theta_hat;
  std::vector<double> sq_error;  // ||theta_hat - theta_star||^2 per entry
};

/// Exact minimizer of the hierarchical objective with explicit cluster and
/// global variables, obtained by block elimination of the first-order
/// conditions. Supports arbitrary X_i^T X_i. The optimal (w_j, w_bar) are
/// exposed for diagnostics when requested.
EstimatorResult solve_hlm_closed_form(const HlmSample& sample,
                                      const PenaltyConfig& pen,
                                      std::vector<Vector>* w_out = nullptr,
                                      Vector* w_bar_out = nullptr);

/// Minimum-norm least squares per client (Moore-Penrose pseudo-inverse with
/// singular values below 1e-12 * sigma_max treated as zero).
EstimatorResult estimate_local(const HlmSample& sample);
Vector pinv_solve(const Matrix& X, const Vector& y);

/// One pooled regression assigned to every client.
EstimatorResult estimate_single_model(const HlmSample& sample);

/// Single-cluster personalized baseline at a fixed ridge lambda_sc.
EstimatorResult estimate_single_cluster(const HlmSample& sample, double lambda_sc);
/// Same, with lambda_sc selected on a grid by held-out prediction error
/// (last 20% of each client's rows). Falls back to lambda_sc = 1 when any
/// client has fewer than 5 rows. The chosen value is reported through
/// lambda_out when given.
EstimatorResult estimate_single_cluster_cv(const HlmSample& sample,
                                           const std::vector<double>& grid,
                                           double* lambda_out = nullptr);
std::vector<double> default_sc_grid();  // 20 evenly spaced points in [0.01, 2]

/// Generalized least squares for one client's parameter from the raw data of
/// all clients, with the error covariance assembled from the model variances
/// and the designs. Dominates the hierarchical estimator in mean squared
/// error for that client.
Vector estimate_gls_target(const HlmSample& sample, const HlmSpec& spec,
                           int target_client);
EstimatorResult estimate_gls(const HlmSample& sample, const HlmSpec& spec,
                             int target_client);

/// The BLUE reference system: generalized least squares on the target's raw
/// data joined with the other clients' individual estimates theta_d. Requires
/// X_i^T X_i proportional to the identity.
Vector gls_from_theta_d(const HlmSample& sample, const HlmSpec& spec,
                        int target_client);

/// Best linear unbiased blend for the single-cluster point model
/// y_i ~ N(theta_i*, I), theta_i* ~ N(theta_bar*, I):
/// theta_hat_i = ((n+1)/(2n)) y_i + ((n-1)/(2n)) mean of the other y's.
std::vector<Vector> blue_blend_single_cluster(const std::vector<Vector>& ys);

enum class ShrinkMode { positive_part, plain };

/// James-Stein variant of the blend: the other-clients average is shrunk by
/// C = 1 - (d-2) s^2 / ||y_bar_{-i}||^2 (clipped at zero in positive-part
/// mode), where s^2 is the exact per-coordinate variance of that average.
/// Biased, and dominates the blend in mean squared error for d > 3.
EstimatorResult estimate_james_stein(const HlmSample& sample,
                                     ShrinkMode mode = ShrinkMode::positive_part);

}  // namespace fedcluster
