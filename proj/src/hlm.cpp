#include "fedcluster/hlm.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <string>

#include "fedcluster/rng.hpp"

namespace fedcluster {

namespace {

constexpr std::uint64_t kCenterStream = stream_tag("hlm/centers");
constexpr std::uint64_t kClientStream = stream_tag("hlm/client");

Vector gaussian_vector(Rng& rng, int d) {
  Vector v(d);
  for (int r = 0; r < d; ++r) v[r] = rng.normal();
  return v;
}

}  // namespace

HlmSpec HlmSpec::uniform(int clusters, int clients_per_cluster, int d,
                         int samples_per_client, double sigma_bar_sq,
                         double sigma_cluster_sq, double sigma_noise_sq) {
  HlmSpec spec;
  spec.d = d;
  spec.cluster_sizes.assign(clusters, clients_per_cluster);
  spec.sigma_bar_sq = sigma_bar_sq;
  spec.sigma_cluster_sq.assign(clusters, sigma_cluster_sq);
  spec.sigma_noise_sq.assign(clusters * clients_per_cluster, sigma_noise_sq);
  spec.theta_star_bar = Vector::Zero(d);
  spec.samples_per_client.assign(clusters * clients_per_cluster, samples_per_client);
  return spec;
}

int HlmSpec::n_clients() const {
  int n = 0;
  for (int size : cluster_sizes) n += size;
  return n;
}

NetworkTopology HlmSpec::topology() const {
  std::vector<std::vector<int>> membership(cluster_sizes.size());
  int next = 0;
  for (std::size_t j = 0; j < cluster_sizes.size(); ++j) {
    membership[j].resize(cluster_sizes[j]);
    for (int& m : membership[j]) m = next++;
  }
  return NetworkTopology(n_clients(), std::move(membership));
}

void HlmSpec::validate() const {
  if (d < 1) throw ConfigError("hlm spec: d must be at least 1");
  if (cluster_sizes.empty()) throw ConfigError("hlm spec: need clusters");
  for (int size : cluster_sizes)
    if (size < 1) throw ConfigError("hlm spec: empty cluster");
  if (!(sigma_bar_sq >= 0.0)) throw ConfigError("hlm spec: negative center spread");
  if (static_cast<int>(sigma_cluster_sq.size()) != n_clusters())
    throw ConfigError("hlm spec: need one cluster spread per cluster");
  for (double s : sigma_cluster_sq)
    if (!(s >= 0.0)) throw ConfigError("hlm spec: negative cluster spread");
  if (static_cast<int>(sigma_noise_sq.size()) != n_clients() ||
      static_cast<int>(samples_per_client.size()) != n_clients())
    throw ConfigError("hlm spec: per-client fields must cover every client");
  for (double s : sigma_noise_sq)
    if (!(s >= 0.0)) throw ConfigError("hlm spec: negative noise variance");
  for (std::size_t i = 0; i < samples_per_client.size(); ++i) {
    if (samples_per_client[i] < 1) throw ConfigError("hlm spec: need n_i >= 1");
    if (design == Design::identity && samples_per_client[i] != d)
      throw ConfigError("hlm spec: identity designs need n_i = d");
  }
  if (theta_star_bar.size() != d)
    throw ConfigError("hlm spec: theta_star_bar dimension mismatch");
}

HlmSample generate_hlm(const HlmSpec& spec, std::uint64_t seed) {
  spec.validate();
  HlmSample sample{spec, spec.topology(), {}, {}, {}};
  const int d = spec.d;

  Rng center_rng(derive_seed(seed, kCenterStream));
  sample.cluster_centers.reserve(spec.n_clusters());
  const double sigma_bar = std::sqrt(spec.sigma_bar_sq);
  for (int j = 0; j < spec.n_clusters(); ++j)
    sample.cluster_centers.push_back(spec.theta_star_bar +
                                     sigma_bar * gaussian_vector(center_rng, d));

  const int n = spec.n_clients();
  sample.theta_star.resize(n);
  sample.data.resize(n);
  for (int j = 0; j < spec.n_clusters(); ++j) {
    const double sigma_j = std::sqrt(spec.sigma_cluster_sq[j]);
    for (int i : sample.topo.cluster(j)) {
      Rng rng(derive_seed(seed, kClientStream, static_cast<std::uint64_t>(i)));
      sample.theta_star[i] =
          sample.cluster_centers[j] + sigma_j * gaussian_vector(rng, d);
      const int m = spec.samples_per_client[i];
      ClientDataset& data = sample.data[i];
      if (spec.design == HlmSpec::Design::identity) {
        data.X = Matrix::Identity(d, d);
      } else {
        data.X.resize(m, d);
        for (int r = 0; r < m; ++r)
          for (int c = 0; c < d; ++c) data.X(r, c) = rng.normal();
      }
      const double sigma_i = std::sqrt(spec.sigma_noise_sq[i]);
      data.y = data.X * sample.theta_star[i] +
               sigma_i * gaussian_vector(rng, m);
      data.noise_var = spec.sigma_noise_sq[i] > 0.0 ? spec.sigma_noise_sq[i] : 1.0;
    }
  }
  return sample;
}

LossSet make_quadratic_losses(const HlmSample& sample) {
  LossSet losses;
  losses.reserve(sample.data.size());
  for (const auto& data : sample.data)
    losses.push_back(quadratic_loss_oracle(data));
  return losses;
}

const char* estimator_name(EstimatorTag tag) {
  switch (tag) {
    case EstimatorTag::our: return "our";
    case EstimatorTag::lt: return "lt";
    case EstimatorTag::sm: return "sm";
    case EstimatorTag::sc: return "sc";
    case EstimatorTag::gls: return "gls";
    case EstimatorTag::js: return "js";
  }
  return "?";
}

namespace {

EstimatorResult make_result(EstimatorTag tag, const HlmSample& sample,
                            std::vector<Vector> estimates) {
  EstimatorResult result;
  result.method = tag;
  result.clients.resize(estimates.size());
  for (std::size_t i = 0; i < estimates.size(); ++i)
    result.clients[i] = static_cast<int>(i);
  result.sq_error.resize(estimates.size());
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    if (!estimates[i].allFinite())
      throw SolverError("estimator produced a non-finite estimate");
    result.sq_error[i] = (estimates[i] - sample.theta_star[i]).squaredNorm();
  }
  result.theta_hat = std::move(estimates);
  return result;
}

Matrix inverse_spd(const Matrix& m, const char* what) {
  Eigen::LDLT<Matrix> ldlt(m);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
    throw SolverError(std::string(what) + ": singular system");
  Matrix inv = ldlt.solve(Matrix::Identity(m.rows(), m.cols()));
  if (!inv.allFinite())
    throw SolverError(std::string(what) + ": singular system");
  return inv;
}

}  // namespace

EstimatorResult solve_hlm_closed_form(const HlmSample& sample,
                                      const PenaltyConfig& pen,
                                      std::vector<Vector>* w_out,
                                      Vector* w_bar_out) {
  if (!pen.has_lambda())
    throw ConfigError("hlm closed form: penalty must carry lambda");
  const NetworkTopology& topo = sample.topo;
  const int d = sample.spec.d;
  const int n = topo.n_clients();
  const int k = topo.n_clusters();

  // Eliminate theta_i = A_i^{-1}(b_i + gamma_i w_j), then the cluster
  // variables, then solve the d x d system for w_bar.
  std::vector<Matrix> a_inv(n);
  std::vector<Vector> b(n);
  for (int i = 0; i < n; ++i) {
    const ClientDataset& data = sample.data[i];
    Matrix a = data.X.transpose() * data.X / data.noise_var;
    a.diagonal().array() += pen.gamma(i);
    a_inv[i] = inverse_spd(a, "hlm closed form (client block)");
    b[i] = data.X.transpose() * data.y / data.noise_var;
  }

  std::vector<Matrix> m_inv(k);
  std::vector<Vector> c(k);
  double lambda_total = 0.0;
  for (int j = 0; j < k; ++j) {
    Matrix m = Matrix::Zero(d, d);
    Vector cj = Vector::Zero(d);
    double gamma_sum = 0.0;
    for (int i : topo.cluster(j)) {
      const double gi = pen.gamma(i);
      gamma_sum += gi;
      m -= gi * gi * a_inv[i];
      cj += gi * (a_inv[i] * b[i]);
    }
    m.diagonal().array() += gamma_sum + pen.lambda(j);
    m_inv[j] = inverse_spd(m, "hlm closed form (cluster block)");
    c[j] = cj;
    lambda_total += pen.lambda(j);
  }

  Vector w_bar = Vector::Zero(d);
  if (lambda_total > 0.0) {
    Matrix s = Matrix::Zero(d, d);
    Vector r = Vector::Zero(d);
    for (int j = 0; j < k; ++j) {
      const double lj = pen.lambda(j);
      s -= lj * lj * m_inv[j];
      r += lj * (m_inv[j] * c[j]);
    }
    s.diagonal().array() += lambda_total;
    w_bar = inverse_spd(s, "hlm closed form (global block)") * r;
  }

  std::vector<Vector> w(k);
  std::vector<Vector> estimates(n);
  for (int j = 0; j < k; ++j) {
    w[j] = m_inv[j] * (c[j] + pen.lambda(j) * w_bar);
    for (int i : topo.cluster(j))
      estimates[i] = a_inv[i] * (b[i] + pen.gamma(i) * w[j]);
  }
  if (w_out) *w_out = std::move(w);
  if (w_bar_out) *w_bar_out = std::move(w_bar);
  return make_result(EstimatorTag::our, sample, std::move(estimates));
}

Vector pinv_solve(const Matrix& X, const Vector& y) {
  Eigen::JacobiSVD<Matrix> svd(X, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  const double cutoff = sv.size() > 0 ? 1e-12 * sv[0] : 0.0;
  Vector scaled = svd.matrixU().transpose() * y;
  for (Eigen::Index r = 0; r < sv.size(); ++r)
    scaled[r] = sv[r] > cutoff ? scaled[r] / sv[r] : 0.0;
  return svd.matrixV() * scaled;
}

EstimatorResult estimate_local(const HlmSample& sample) {
  std::vector<Vector> estimates(sample.data.size());
  for (std::size_t i = 0; i < sample.data.size(); ++i)
    estimates[i] = pinv_solve(sample.data[i].X, sample.data[i].y);
  return make_result(EstimatorTag::lt, sample, std::move(estimates));
}

EstimatorResult estimate_single_model(const HlmSample& sample) {
  const int d = sample.spec.d;
  Matrix m = Matrix::Zero(d, d);
  Vector v = Vector::Zero(d);
  for (const auto& data : sample.data) {
    m += data.X.transpose() * data.X;
    v += data.X.transpose() * data.y;
  }
  // Pseudo-inverse of the pooled Gram matrix through its eigendecomposition.
  Eigen::SelfAdjointEigenSolver<Matrix> eig(m);
  const double cutoff = 1e-12 * std::max(0.0, eig.eigenvalues().maxCoeff());
  Vector coeff = eig.eigenvectors().transpose() * v;
  for (int r = 0; r < d; ++r)
    coeff[r] = eig.eigenvalues()[r] > cutoff ? coeff[r] / eig.eigenvalues()[r] : 0.0;
  const Vector pooled = eig.eigenvectors() * coeff;
  std::vector<Vector> estimates(sample.data.size(), pooled);
  return make_result(EstimatorTag::sm, sample, std::move(estimates));
}

namespace {

std::vector<Vector> single_cluster_estimates(const std::vector<Matrix>& gram,
                                             const std::vector<Vector>& xty,
                                             double lambda, int d) {
  const int n = static_cast<int>(gram.size());
  std::vector<Matrix> k_inv(n);
  for (int i = 0; i < n; ++i) {
    Matrix ki = gram[i];
    ki.diagonal().array() += lambda;
    k_inv[i] = inverse_spd(ki, "single-cluster baseline");
  }
  Matrix mix = Matrix::Identity(d, d);
  Vector pooled = Vector::Zero(d);
  for (int i = 0; i < n; ++i) {
    mix -= (lambda / n) * k_inv[i];
    pooled += k_inv[i] * xty[i] / n;  // K_i (X^T X) theta_lt = K_i X^T y
  }
  const Vector center = inverse_spd(mix, "single-cluster baseline (center)") * pooled;
  std::vector<Vector> estimates(n);
  for (int i = 0; i < n; ++i)
    estimates[i] = k_inv[i] * (xty[i] + lambda * center);
  return estimates;
}

}  // namespace

EstimatorResult estimate_single_cluster(const HlmSample& sample, double lambda_sc) {
  if (!(lambda_sc > 0.0))
    throw ConfigError("single-cluster baseline: lambda_sc must be positive");
  const int n = sample.topo.n_clients();
  std::vector<Matrix> gram(n);
  std::vector<Vector> xty(n);
  for (int i = 0; i < n; ++i) {
    gram[i] = sample.data[i].X.transpose() * sample.data[i].X;
    xty[i] = sample.data[i].X.transpose() * sample.data[i].y;
  }
  return make_result(
      EstimatorTag::sc, sample,
      single_cluster_estimates(gram, xty, lambda_sc, sample.spec.d));
}

std::vector<double> default_sc_grid() {
  std::vector<double> grid(20);
  for (int g = 0; g < 20; ++g) grid[g] = 0.01 + g * (2.0 - 0.01) / 19.0;
  return grid;
}

EstimatorResult estimate_single_cluster_cv(const HlmSample& sample,
                                           const std::vector<double>& grid,
                                           double* lambda_out) {
  if (grid.empty()) throw ConfigError("single-cluster baseline: empty CV grid");
  const int n = sample.topo.n_clients();
  const int d = sample.spec.d;

  bool can_split = true;
  for (const auto& data : sample.data)
    if (data.rows() < 5) can_split = false;

  double best_lambda = 1.0;
  if (can_split) {
    std::vector<Matrix> train_gram(n);
    std::vector<Vector> train_xty(n);
    std::vector<Matrix> holdout_x(n);
    std::vector<Vector> holdout_y(n);
    for (int i = 0; i < n; ++i) {
      const Matrix& X = sample.data[i].X;
      const Vector& y = sample.data[i].y;
      const int rows = static_cast<int>(X.rows());
      const int holdout = std::max(1, rows / 5);
      const int train = rows - holdout;
      train_gram[i] = X.topRows(train).transpose() * X.topRows(train);
      train_xty[i] = X.topRows(train).transpose() * y.head(train);
      holdout_x[i] = X.bottomRows(holdout);
      holdout_y[i] = y.tail(holdout);
    }
    double best_score = std::numeric_limits<double>::infinity();
    for (double lambda : grid) {
      const auto estimates = single_cluster_estimates(train_gram, train_xty, lambda, d);
      double score = 0.0;
      for (int i = 0; i < n; ++i)
        score += (holdout_x[i] * estimates[i] - holdout_y[i]).squaredNorm();
      if (score < best_score) {
        best_score = score;
        best_lambda = lambda;
      }
    }
  }
  if (lambda_out) *lambda_out = best_lambda;
  return estimate_single_cluster(sample, best_lambda);
}

namespace {

// Scalar covariance of the parameter deviations theta_i* - theta_target*
// induced by the shared hierarchy draws.
double deviation_covariance(const HlmSpec& spec, const NetworkTopology& topo,
                            int target, int i, int i2) {
  if (i == target || i2 == target) return 0.0;
  const int j0 = topo.cluster_of(target);
  const int ji = topo.cluster_of(i);
  const int ji2 = topo.cluster_of(i2);
  double v = spec.sigma_cluster_sq[j0];  // shared draw of the target's offset
  if (ji != j0 && ji2 != j0) v += spec.sigma_bar_sq;  // shared target-center offset
  if (ji == ji2 && ji != j0) v += spec.sigma_bar_sq;  // shared cluster center
  if (i == i2) v += spec.sigma_cluster_sq[ji];
  return v;
}

}  // namespace

Vector estimate_gls_target(const HlmSample& sample, const HlmSpec& spec,
                           int target_client) {
  const NetworkTopology& topo = sample.topo;
  const int n = topo.n_clients();
  const int d = spec.d;
  if (target_client < 0 || target_client >= n)
    throw TopologyError("gls: invalid target client");
  for (double s : spec.sigma_noise_sq)
    if (!(s > 0.0))
      throw SolverError("gls: covariance not positive definite (zero noise variance)");

  Eigen::Index total_rows = 0;
  std::vector<Eigen::Index> offset(n);
  for (int i = 0; i < n; ++i) {
    offset[i] = total_rows;
    total_rows += sample.data[i].X.rows();
  }

  Matrix design(total_rows, d);
  Vector response(total_rows);
  Matrix cov = Matrix::Zero(total_rows, total_rows);
  for (int i = 0; i < n; ++i) {
    const Matrix& Xi = sample.data[i].X;
    design.middleRows(offset[i], Xi.rows()) = Xi;
    response.segment(offset[i], Xi.rows()) = sample.data[i].y;
    cov.block(offset[i], offset[i], Xi.rows(), Xi.rows()) =
        spec.sigma_noise_sq[i] * Matrix::Identity(Xi.rows(), Xi.rows());
    for (int i2 = 0; i2 <= i; ++i2) {
      const double v = deviation_covariance(spec, topo, target_client, i, i2);
      if (v == 0.0) continue;
      const Matrix& Xi2 = sample.data[i2].X;
      cov.block(offset[i], offset[i2], Xi.rows(), Xi2.rows()) +=
          v * (Xi * Xi2.transpose());
      if (i2 != i)
        cov.block(offset[i2], offset[i], Xi2.rows(), Xi.rows()) +=
            v * (Xi2 * Xi.transpose());
    }
  }

  Eigen::LLT<Matrix> llt(cov);
  if (llt.info() != Eigen::Success)
    throw SolverError("gls: covariance not positive definite");
  const Matrix white_design = llt.matrixL().solve(design);
  const Vector white_response = llt.matrixL().solve(response);
  Eigen::LDLT<Matrix> normal(white_design.transpose() * white_design);
  if (normal.info() != Eigen::Success)
    throw SolverError("gls: singular normal equations");
  return normal.solve(white_design.transpose() * white_response);
}

EstimatorResult estimate_gls(const HlmSample& sample, const HlmSpec& spec,
                             int target_client) {
  EstimatorResult result;
  result.method = EstimatorTag::gls;
  result.clients = {target_client};
  result.theta_hat.push_back(estimate_gls_target(sample, spec, target_client));
  result.sq_error.push_back(
      (result.theta_hat[0] - sample.theta_star[target_client]).squaredNorm());
  return result;
}

Vector gls_from_theta_d(const HlmSample& sample, const HlmSpec& spec,
                        int target_client) {
  const NetworkTopology& topo = sample.topo;
  const int n = topo.n_clients();
  const int d = spec.d;
  if (n < 2) throw TopologyError("gls_from_theta_d: need at least two clients");

  // beta_i from X_i^T X_i = beta_i I, and the individual estimates theta_d.
  std::vector<double> beta(n);
  std::vector<Vector> theta_d(n);
  for (int i = 0; i < n; ++i) {
    const Matrix gram = sample.data[i].X.transpose() * sample.data[i].X;
    beta[i] = gram.trace() / d;
    if ((gram - beta[i] * Matrix::Identity(d, d)).norm() > 1e-8 * std::max(1.0, beta[i]))
      throw ValidationError("gls_from_theta_d: designs must satisfy X^T X = beta I");
    if (!(beta[i] > 0.0))
      throw SolverError("gls_from_theta_d: degenerate design");
    theta_d[i] = sample.data[i].X.transpose() * sample.data[i].y / beta[i];
  }

  // Scalar covariance of the theta_d rows around the target parameter:
  // the deviation structure plus each row's own measurement term.
  std::vector<int> others;
  others.reserve(n - 1);
  for (int i = 0; i < n; ++i)
    if (i != target_client) others.push_back(i);
  const int m = static_cast<int>(others.size());
  Matrix omega(m, m);
  for (int a = 0; a < m; ++a)
    for (int c = 0; c <= a; ++c) {
      double v = deviation_covariance(spec, topo, target_client, others[a], others[c]);
      if (a == c) v += spec.sigma_noise_sq[others[a]] / beta[others[a]];
      omega(a, c) = v;
      omega(c, a) = v;
    }
  Eigen::LDLT<Matrix> omega_ldlt(omega);
  if (omega_ldlt.info() != Eigen::Success || !omega_ldlt.isPositive())
    throw SolverError("gls_from_theta_d: covariance not positive definite");

  // With identity-block designs the normal equations collapse to d x d:
  //   (X_t^T X_t / sigma_t^2 + (1^T Omega^{-1} 1) I) theta
  //     = X_t^T y_t / sigma_t^2 + sum_b (column sum of Omega^{-1})_b theta_d_b.
  const Matrix& Xt = sample.data[target_client].X;
  const double st2 = spec.sigma_noise_sq[target_client];
  if (!(st2 > 0.0)) throw SolverError("gls_from_theta_d: zero target noise variance");
  const Vector ones_solve = omega_ldlt.solve(Vector::Ones(m));
  Matrix normal = Xt.transpose() * Xt / st2;
  normal.diagonal().array() += ones_solve.sum();
  Vector rhs = Xt.transpose() * sample.data[target_client].y / st2;
  for (int a = 0; a < m; ++a) rhs += ones_solve[a] * theta_d[others[a]];
  Eigen::LDLT<Matrix> solve(normal);
  if (solve.info() != Eigen::Success)
    throw SolverError("gls_from_theta_d: singular normal equations");
  return solve.solve(rhs);
}

std::vector<Vector> blue_blend_single_cluster(const std::vector<Vector>& ys) {
  const int n = static_cast<int>(ys.size());
  if (n < 2) throw ConfigError("blue blend: need at least two clients");
  Vector total = Vector::Zero(ys[0].size());
  for (const auto& y : ys) total += y;
  const double own = (n + 1.0) / (2.0 * n);
  const double rest = (n - 1.0) / (2.0 * n);
  std::vector<Vector> blends(n);
  for (int i = 0; i < n; ++i) {
    const Vector others_mean = (total - ys[i]) / (n - 1.0);
    blends[i] = own * ys[i] + rest * others_mean;
  }
  return blends;
}

EstimatorResult estimate_james_stein(const HlmSample& sample, ShrinkMode mode) {
  const HlmSpec& spec = sample.spec;
  if (spec.n_clusters() != 1)
    throw ConfigError("james-stein: defined for the single-cluster point model");
  if (spec.d <= 3) throw ConfigError("james-stein: needs d > 3");
  if (spec.design != HlmSpec::Design::identity)
    throw ConfigError("james-stein: needs identity designs (y_i = theta_i* + noise)");
  const int n = spec.n_clients();
  if (n < 2) throw ConfigError("james-stein: need at least two clients");
  const int d = spec.d;

  std::vector<Vector> ys(n);
  Vector total = Vector::Zero(d);
  for (int i = 0; i < n; ++i) {
    ys[i] = sample.data[i].y;
    total += ys[i];
  }

  const double own = (n + 1.0) / (2.0 * n);
  const double rest = (n - 1.0) / (2.0 * n);
  std::vector<Vector> estimates(n);
  for (int i = 0; i < n; ++i) {
    const Vector others_mean = (total - ys[i]) / (n - 1.0);
    // Exact per-coordinate variance of the others' average around the
    // population center.
    double s_sq = 0.0;
    for (int i2 = 0; i2 < n; ++i2)
      if (i2 != i)
        s_sq += (spec.sigma_cluster_sq[0] + spec.sigma_noise_sq[i2]) /
                ((n - 1.0) * (n - 1.0));
    const double norm_sq = others_mean.squaredNorm();
    double shrink = norm_sq > 0.0 ? 1.0 - (d - 2.0) * s_sq / norm_sq : 0.0;
    if (mode == ShrinkMode::positive_part) shrink = std::max(0.0, shrink);
    estimates[i] = own * ys[i] + rest * shrink * others_mean;
  }
  return make_result(EstimatorTag::js, sample, std::move(estimates));
}

}  // namespace fedcluster
