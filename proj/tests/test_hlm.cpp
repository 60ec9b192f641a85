#include <doctest.h>

#include <cmath>

#include "fedcluster/hlm.hpp"
#include "fedcluster/objective.hpp"
#include "support/test_oracles.hpp"

using namespace fedcluster;

namespace {

PenaltyConfig blue_tuning(const HlmSample& sample) {
  // lambda_j = 1/sigma_bar^2, gamma_i = 1/sigma_cluster_j^2.
  std::vector<double> gamma(sample.topo.n_clients());
  std::vector<double> lambda(sample.topo.n_clusters());
  for (int j = 0; j < sample.topo.n_clusters(); ++j) {
    lambda[j] = 1.0 / sample.spec.sigma_bar_sq;
    for (int i : sample.topo.cluster(j))
      gamma[i] = 1.0 / sample.spec.sigma_cluster_sq[j];
  }
  return PenaltyConfig::from_lambda(sample.topo, gamma, lambda);
}

}  // namespace

TEST_CASE("hlm generation") {
  SUBCASE("degenerate priors collapse every parameter to the center") {
    HlmSpec spec = HlmSpec::uniform(3, 2, 4, 5, 0.0, 0.0, 1.0);
    spec.theta_star_bar << 1.0, -2.0, 0.5, 3.0;
    const HlmSample sample = generate_hlm(spec, 9);
    for (int i = 0; i < 6; ++i)
      CHECK((sample.theta_star[i] - spec.theta_star_bar).norm() == 0.0);
  }

  SUBCASE("shapes follow the generator parameters") {
    HlmSpec spec = HlmSpec::uniform(2, 3, 4, 7);
    const HlmSample sample = generate_hlm(spec, 10);
    CHECK(sample.cluster_centers.size() == 2);
    CHECK(sample.theta_star.size() == 6);
    CHECK(sample.data[0].X.rows() == 7);
    CHECK(sample.data[0].X.cols() == 4);
    CHECK(sample.data[0].y.size() == 7);
  }

  SUBCASE("center spread matches the target variance") {
    HlmSpec spec = HlmSpec::uniform(10000, 1, 1, 1, 0.6, 1.0, 1.0);
    const HlmSample sample = generate_hlm(spec, 11);
    double mean = 0.0, var = 0.0;
    for (const Vector& center : sample.cluster_centers) mean += center[0];
    mean /= 10000.0;
    for (const Vector& center : sample.cluster_centers)
      var += (center[0] - mean) * (center[0] - mean);
    var /= 9999.0;
    // Variance of the sample variance is about 2 sigma^4 / n.
    const double se = std::sqrt(2.0 * 0.6 * 0.6 / 10000.0);
    CHECK(std::abs(var - 0.6) <= 4.0 * se);
  }

  SUBCASE("spec validation") {
    HlmSpec bad = HlmSpec::uniform(2, 2, 3, 4);
    bad.sigma_cluster_sq = {1.0};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    HlmSpec identity = HlmSpec::uniform(1, 3, 4, 5);
    identity.design = HlmSpec::Design::identity;
    CHECK_THROWS_AS(identity.validate(), ConfigError);  // needs n_i = d
  }
}

TEST_CASE("closed-form hierarchical estimator") {
  SUBCASE("consensus fixed point under proportional designs") {
    HlmSpec spec = HlmSpec::uniform(2, 3, 3, 3);
    spec.design = HlmSpec::Design::identity;
    HlmSample sample = generate_hlm(spec, 20);
    Vector v(3);
    v << 0.7, -1.0, 0.25;
    for (int i = 0; i < 6; ++i) sample.data[i].y = sample.data[i].X * v;
    const PenaltyConfig pen = blue_tuning(sample);
    const EstimatorResult result = solve_hlm_closed_form(sample, pen);
    for (int i = 0; i < 6; ++i) CHECK((result.theta_hat[i] - v).norm() < 1e-10);
  }

  SUBCASE("first-order conditions hold at the output") {
    HlmSpec spec = HlmSpec::uniform(3, 3, 3, 5);
    const HlmSample sample = generate_hlm(spec, 21);
    const PenaltyConfig pen = blue_tuning(sample);
    std::vector<Vector> w;
    Vector w_bar;
    const EstimatorResult result = solve_hlm_closed_form(sample, pen, &w, &w_bar);

    double residual = 0.0;
    Vector w_bar_grad = Vector::Zero(3);
    for (int j = 0; j < 3; ++j) {
      Vector w_grad = pen.lambda(j) * (w[j] - w_bar);
      for (int i : sample.topo.cluster(j)) {
        const Matrix& X = sample.data[i].X;
        const Vector theta_grad =
            X.transpose() * (X * result.theta_hat[i] - sample.data[i].y) /
                sample.data[i].noise_var +
            pen.gamma(i) * (result.theta_hat[i] - w[j]);
        residual = std::max(residual, theta_grad.norm());
        w_grad += pen.gamma(i) * (w[j] - result.theta_hat[i]);
      }
      residual = std::max(residual, w_grad.norm());
      w_bar_grad += pen.lambda(j) * (w_bar - w[j]);
    }
    residual = std::max(residual, w_bar_grad.norm());
    CHECK(residual <= 1e-10);
  }

  SUBCASE("agrees with the mixing-form reference minimizer") {
    HlmSpec spec = HlmSpec::uniform(2, 3, 2, 6);
    const HlmSample sample = generate_hlm(spec, 22);
    const PenaltyConfig pen = blue_tuning(sample);
    const EstimatorResult closed = solve_hlm_closed_form(sample, pen);
    const LossSet losses = make_quadratic_losses(sample);
    const ParameterStack reference = reference_minimizer(sample.topo, pen, losses);
    for (int i = 0; i < 6; ++i)
      CHECK((closed.theta_hat[i] - reference.client(i)).norm() < 1e-8);
  }
}

TEST_CASE("locally trained baseline") {
  SUBCASE("square invertible designs give ordinary least squares") {
    HlmSpec spec = HlmSpec::uniform(1, 2, 3, 3);
    const HlmSample sample = generate_hlm(spec, 30);
    const EstimatorResult result = estimate_local(sample);
    for (int i = 0; i < 2; ++i) {
      const Vector ols = sample.data[i].X.fullPivLu().solve(sample.data[i].y);
      CHECK((result.theta_hat[i] - ols).norm() < 1e-8);
    }
  }

  SUBCASE("underdetermined designs give the minimum-norm solution") {
    HlmSpec spec = HlmSpec::uniform(1, 2, 6, 3);
    const HlmSample sample = generate_hlm(spec, 31);
    const EstimatorResult result = estimate_local(sample);
    for (int i = 0; i < 2; ++i) {
      const Matrix& X = sample.data[i].X;
      const Vector residual = X * result.theta_hat[i] - sample.data[i].y;
      CHECK((X.transpose() * residual).norm() < 1e-8);  // stationarity
      // Minimum-norm solutions lie in the row space of X.
      const Matrix row_basis =
          X.transpose() * (X * X.transpose()).ldlt().solve(Matrix::Identity(3, 3));
      const Vector projected = row_basis * (X * result.theta_hat[i]);
      CHECK((result.theta_hat[i] - projected).norm() < 1e-8);
    }
  }

  SUBCASE("Monte Carlo risk agrees with the Gaussian-design theory") {
    // E ||theta_lt - theta*||^2 = sigma^2 d / (m - d - 1) for m > d + 1.
    const int d = 6, m = 30;
    double total = 0.0;
    int count = 0;
    for (int rep = 0; rep < 60; ++rep) {
      HlmSpec spec = HlmSpec::uniform(1, 4, d, m);
      const HlmSample sample = generate_hlm(spec, 3200 + rep);
      const EstimatorResult result = estimate_local(sample);
      for (double e : result.sq_error) {
        total += e;
        ++count;
      }
    }
    const double expected = static_cast<double>(d) / (m - d - 1);
    CHECK(std::abs(total / count - expected) <= 0.15 * expected);
  }
}

TEST_CASE("single-model baseline") {
  SUBCASE("single client reduces to the local fit") {
    HlmSpec spec = HlmSpec::uniform(1, 1, 3, 8);
    const HlmSample sample = generate_hlm(spec, 40);
    const EstimatorResult pooled = estimate_single_model(sample);
    const EstimatorResult local = estimate_local(sample);
    CHECK((pooled.theta_hat[0] - local.theta_hat[0]).norm() < 1e-9);
  }

  SUBCASE("matches a stacked regression oracle") {
    HlmSpec spec = HlmSpec::uniform(2, 3, 3, 5);
    const HlmSample sample = generate_hlm(spec, 41);
    const EstimatorResult pooled = estimate_single_model(sample);
    Eigen::Index rows = 0;
    for (const auto& data : sample.data) rows += data.X.rows();
    Matrix stacked_x(rows, 3);
    Vector stacked_y(rows);
    Eigen::Index at = 0;
    for (const auto& data : sample.data) {
      stacked_x.middleRows(at, data.X.rows()) = data.X;
      stacked_y.segment(at, data.y.size()) = data.y;
      at += data.X.rows();
    }
    const Vector oracle = pinv_solve(stacked_x, stacked_y);
    CHECK((pooled.theta_hat[0] - oracle).norm() < 1e-10);
  }

  SUBCASE("consistent under homogeneous clients") {
    HlmSpec spec = HlmSpec::uniform(2, 10, 3, 50, 0.0, 0.0, 1.0);
    spec.theta_star_bar << 1.0, -0.5, 2.0;
    const HlmSample sample = generate_hlm(spec, 42);
    const EstimatorResult pooled = estimate_single_model(sample);
    CHECK((pooled.theta_hat[0] - spec.theta_star_bar).norm() < 0.2);
  }
}

TEST_CASE("single-cluster baseline") {
  HlmSpec spec = HlmSpec::uniform(2, 3, 3, 8);
  const HlmSample sample = generate_hlm(spec, 50);

  SUBCASE("small lambda approaches the local fit") {
    const EstimatorResult sc = estimate_single_cluster(sample, 1e-8);
    const EstimatorResult lt = estimate_local(sample);
    for (int i = 0; i < 6; ++i)
      CHECK((sc.theta_hat[i] - lt.theta_hat[i]).norm() < 1e-5);
  }

  SUBCASE("large lambda approaches consensus") {
    const EstimatorResult sc = estimate_single_cluster(sample, 1e8);
    for (int i = 1; i < 6; ++i)
      CHECK((sc.theta_hat[i] - sc.theta_hat[0]).norm() < 1e-5);
  }

  SUBCASE("closed form minimizes the displayed objective") {
    // The displayed objective is the single-cluster mixing objective with
    // alpha = 1, gamma_i = lambda_sc, and unit noise; cross-check against the
    // generic reference minimizer.
    const double lambda_sc = 0.8;
    const EstimatorResult sc = estimate_single_cluster(sample, lambda_sc);
    NetworkTopology single = NetworkTopology::uniform(1, 6);
    PenaltyConfig pen =
        PenaltyConfig::from_alpha(std::vector<double>(6, lambda_sc), {1.0});
    LossSet losses;
    for (const auto& data : sample.data) {
      ClientDataset unit = data;
      unit.noise_var = 1.0;
      losses.push_back(quadratic_loss_oracle(unit));
    }
    const ParameterStack reference = reference_minimizer(single, pen, losses);
    for (int i = 0; i < 6; ++i)
      CHECK((sc.theta_hat[i] - reference.client(i)).norm() < 1e-6);
  }

  SUBCASE("cross validation picks from the grid and falls back for tiny clients") {
    double chosen = 0.0;
    estimate_single_cluster_cv(sample, default_sc_grid(), &chosen);
    bool on_grid = false;
    for (double g : default_sc_grid())
      if (g == chosen) on_grid = true;
    CHECK(on_grid);

    HlmSpec tiny = HlmSpec::uniform(1, 4, 3, 2);
    const HlmSample tiny_sample = generate_hlm(tiny, 51);
    estimate_single_cluster_cv(tiny_sample, default_sc_grid(), &chosen);
    CHECK(chosen == 1.0);
  }
}

TEST_CASE("generalized least squares") {
  SUBCASE("identity designs match the closed form at the blue tuning") {
    HlmSpec spec = HlmSpec::uniform(3, 3, 4, 4, 0.8, 0.6, 0.9);
    spec.design = HlmSpec::Design::identity;
    const HlmSample sample = generate_hlm(spec, 60);
    const PenaltyConfig pen = blue_tuning(sample);
    const EstimatorResult closed = solve_hlm_closed_form(sample, pen);
    for (int target : {0, 4, 8}) {
      const Vector gls = estimate_gls_target(sample, sample.spec, target);
      CHECK((gls - closed.theta_hat[target]).norm() < 1e-8);
      const Vector reference = gls_from_theta_d(sample, sample.spec, target);
      CHECK((reference - closed.theta_hat[target]).norm() < 1e-8);
    }
  }

  SUBCASE("vanishing hierarchy variances recover the pooled regression") {
    HlmSpec spec = HlmSpec::uniform(2, 3, 3, 6, 1e-10, 1e-10, 1.0);
    const HlmSample sample = generate_hlm(spec, 61);
    const Vector gls = estimate_gls_target(sample, sample.spec, 2);
    const EstimatorResult pooled = estimate_single_model(sample);
    CHECK((gls - pooled.theta_hat[2]).norm() < 1e-5);
  }

  SUBCASE("zero noise variance is rejected") {
    HlmSpec spec = HlmSpec::uniform(2, 2, 3, 4, 1.0, 1.0, 1.0);
    HlmSample sample = generate_hlm(spec, 62);
    HlmSpec zero_noise = spec;
    zero_noise.sigma_noise_sq.assign(4, 0.0);
    CHECK_THROWS_AS(estimate_gls_target(sample, zero_noise, 0), SolverError);
  }

  SUBCASE("coincides with the closed form at matched weights, wins when mistuned") {
    // With gamma = 1/cluster spread and lambda = 1/center spread the
    // hierarchical estimator is the mixed-model predictor, which is exactly
    // the marginalized generalized least squares; a mistuned closed form
    // falls strictly behind.
    double matched_gap = 0.0;
    double mse_gls = 0.0, mse_mistuned = 0.0;
    const int reps = 150;
    for (int rep = 0; rep < reps; ++rep) {
      HlmSpec spec = HlmSpec::uniform(3, 4, 5, 8);
      const HlmSample sample = generate_hlm(spec, 6300 + rep);
      const PenaltyConfig matched =
          PenaltyConfig::uniform_from_lambda(sample.topo, 1.0, 1.0);
      const PenaltyConfig mistuned =
          PenaltyConfig::uniform_from_lambda(sample.topo, 4.0, 0.1);
      const Vector gls = estimate_gls_target(sample, spec, 0);
      matched_gap = std::max(
          matched_gap,
          (gls - solve_hlm_closed_form(sample, matched).theta_hat[0]).norm());
      mse_gls += (gls - sample.theta_star[0]).squaredNorm() / reps;
      mse_mistuned += solve_hlm_closed_form(sample, mistuned).sq_error[0] / reps;
    }
    CHECK(matched_gap < 1e-9);
    CHECK(mse_gls < 0.9 * mse_mistuned);
  }
}

TEST_CASE("blue blend and james-stein") {
  SUBCASE("two clients") {
    std::vector<Vector> ys(2, Vector::Zero(1));
    ys[0][0] = 1.0;
    ys[1][0] = 5.0;
    const auto blend = blue_blend_single_cluster(ys);
    // own weight (n+1)/(2n) = 3/4, others weight (n-1)/(2n) = 1/4.
    CHECK(blend[0][0] == doctest::Approx(0.75 * 1.0 + 0.25 * 5.0));
    CHECK(blend[1][0] == doctest::Approx(0.75 * 5.0 + 0.25 * 1.0));
    CHECK_THROWS_AS(blue_blend_single_cluster({ys[0]}), ConfigError);
  }

  SUBCASE("consensus is a fixed point") {
    Vector v(3);
    v << 1.0, -2.0, 0.5;
    std::vector<Vector> ys(5, v);
    for (const Vector& blend : blue_blend_single_cluster(ys))
      CHECK((blend - v).norm() < 1e-14);
  }

  SUBCASE("matches the closed form on the point model") {
    HlmSpec spec = HlmSpec::uniform(1, 6, 4, 4, 1.0, 1.0, 1.0);
    spec.design = HlmSpec::Design::identity;
    const HlmSample sample = generate_hlm(spec, 70);
    const PenaltyConfig pen = blue_tuning(sample);
    const EstimatorResult closed = solve_hlm_closed_form(sample, pen);
    std::vector<Vector> ys;
    for (const auto& data : sample.data) ys.push_back(data.y);
    const auto blend = blue_blend_single_cluster(ys);
    for (int i = 0; i < 6; ++i)
      CHECK((blend[i] - closed.theta_hat[i]).norm() < 1e-10);
  }

  SUBCASE("james-stein shrinkage limits") {
    HlmSpec spec = HlmSpec::uniform(1, 3, 5, 5, 1.0, 1.0, 1.0);
    spec.design = HlmSpec::Design::identity;
    HlmSample sample = generate_hlm(spec, 71);

    // Others' average far away: no shrinkage, the blend is recovered.
    for (int i = 1; i < 3; ++i) sample.data[i].y.setConstant(1e8);
    sample.data[0].y.setConstant(1.0);
    const EstimatorResult far = estimate_james_stein(sample);
    std::vector<Vector> ys;
    for (const auto& data : sample.data) ys.push_back(data.y);
    const auto blend = blue_blend_single_cluster(ys);
    CHECK((far.theta_hat[0] - blend[0]).norm() / blend[0].norm() < 1e-6);

    // Others' average exactly zero: full shrinkage keeps only the own term.
    sample.data[1].y.setConstant(2.0);
    sample.data[2].y.setConstant(-2.0);
    const EstimatorResult zero = estimate_james_stein(sample);
    const Vector own_only = (3.0 + 1.0) / (2.0 * 3.0) * sample.data[0].y;
    CHECK((zero.theta_hat[0] - own_only).norm() < 1e-12);
  }

  SUBCASE("dimension guard") {
    HlmSpec spec = HlmSpec::uniform(1, 4, 3, 3, 1.0, 1.0, 1.0);
    spec.design = HlmSpec::Design::identity;
    const HlmSample sample = generate_hlm(spec, 72);
    CHECK_THROWS_AS(estimate_james_stein(sample), ConfigError);
  }

  SUBCASE("shrinkage makes the estimator biased") {
    // The mean shrink factor stays strictly below one when the center is 0.
    double shrink_sum = 0.0;
    int reps = 300;
    for (int rep = 0; rep < reps; ++rep) {
      HlmSpec spec = HlmSpec::uniform(1, 8, 6, 6, 1.0, 1.0, 1.0);
      spec.design = HlmSpec::Design::identity;
      const HlmSample sample = generate_hlm(spec, 7300 + rep);
      const EstimatorResult js = estimate_james_stein(sample);
      std::vector<Vector> ys;
      for (const auto& data : sample.data) ys.push_back(data.y);
      const auto blend = blue_blend_single_cluster(ys);
      // Infer the applied shrink from the difference to the blend.
      const Vector others =
          (blend[0] - (9.0 / 16.0) * ys[0]) / (7.0 / 16.0);
      const Vector applied =
          (js.theta_hat[0] - (9.0 / 16.0) * ys[0]) / (7.0 / 16.0);
      if (others.norm() > 1e-12) shrink_sum += applied.norm() / others.norm();
    }
    CHECK(shrink_sum / reps < 0.95);
  }
}

TEST_CASE("estimator unbiasedness") {
  // Monte Carlo mean of theta_hat - theta* vanishes for the unbiased
  // estimators (our, lt, sm, gls).
  const int reps = 10000;
  const int d = 3;
  testo::MeanAccumulator our_acc(d), lt_acc(d), sm_acc(d), gls_acc(d);
  for (int rep = 0; rep < reps; ++rep) {
    HlmSpec spec = HlmSpec::uniform(2, 3, d, 6, 0.7, 0.9, 1.1);
    spec.theta_star_bar << 0.4, -0.3, 1.2;
    const HlmSample sample = generate_hlm(spec, 80000 + rep);
    const PenaltyConfig pen = blue_tuning(sample);
    our_acc.add(solve_hlm_closed_form(sample, pen).theta_hat[0] -
                sample.theta_star[0]);
    lt_acc.add(estimate_local(sample).theta_hat[0] - sample.theta_star[0]);
    sm_acc.add(estimate_single_model(sample).theta_hat[0] - sample.theta_star[0]);
    gls_acc.add(estimate_gls_target(sample, sample.spec, 0) - sample.theta_star[0]);
  }
  for (const auto* acc : {&our_acc, &lt_acc, &sm_acc, &gls_acc}) {
    const Vector se = acc->standard_error();
    for (int r = 0; r < d; ++r)
      CHECK(std::abs(acc->mean[r]) <= 4.0 * se[r]);
  }
}
