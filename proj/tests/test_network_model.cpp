#include <doctest.h>

#include <cmath>
#include <limits>

#include "fedcluster/loss.hpp"
#include "fedcluster/topology.hpp"
#include "support/test_oracles.hpp"

using namespace fedcluster;

TEST_CASE("topology validates the partition") {
  NetworkTopology topo(5, {{0, 2}, {1, 3, 4}});
  CHECK(topo.n_clients() == 5);
  CHECK(topo.n_clusters() == 2);
  CHECK(topo.cluster_of(2) == 0);
  CHECK(topo.cluster_of(4) == 1);

  CHECK_THROWS_AS(NetworkTopology(3, {{0, 1}}), TopologyError);          // uncovered
  CHECK_THROWS_AS(NetworkTopology(3, {{0, 1}, {1, 2}}), TopologyError);  // duplicate
  CHECK_THROWS_AS(NetworkTopology(3, {{0, 1, 2}, {}}), TopologyError);   // empty
  CHECK_THROWS_AS(NetworkTopology(3, {{1, 0}, {2}}), TopologyError);     // order
  CHECK_THROWS_AS(NetworkTopology(3, {{0, 1, 5}}), TopologyError);       // range
  CHECK_THROWS_AS(topo.cluster(2), TopologyError);                       // bad index
}

TEST_CASE("alpha_from_lambda") {
  CHECK(alpha_from_lambda(0.0, {2.0, 3.0}) == 0.0);
  CHECK(alpha_from_lambda(1.0, std::vector<double>(20, 1.0)) ==
        doctest::Approx(1.0 / 21.0).epsilon(1e-12));
  CHECK(std::abs(alpha_from_lambda(1e12, std::vector<double>(20, 1.0)) - 1.0) <
        1e-10);
  CHECK_THROWS_AS(alpha_from_lambda(1.0, {}), TopologyError);

  // Inverting alpha back to lambda is the identity on (0, 1).
  Rng rng(11);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> gammas(4);
    for (double& g : gammas) g = 0.2 + rng.uniform();
    const double gamma_sum = gammas[0] + gammas[1] + gammas[2] + gammas[3];
    const double alpha = 0.05 + 0.9 * rng.uniform();
    const double lambda = alpha * gamma_sum / (1.0 - alpha);
    CHECK(alpha_from_lambda(lambda, gammas) == doctest::Approx(alpha).epsilon(1e-12));
  }
}

TEST_CASE("penalty configuration invariants") {
  NetworkTopology topo = NetworkTopology::uniform(2, 2);
  CHECK_THROWS_AS(PenaltyConfig::from_alpha({1.0, 1.0, 1.0, 1.0}, {0.5, 1.5}),
                  ConfigError);
  CHECK_THROWS_AS(PenaltyConfig::from_alpha({1.0, -1.0, 1.0, 1.0}, {0.5, 0.5}),
                  ConfigError);
  PenaltyConfig pen = PenaltyConfig::from_lambda(topo, {1.0, 2.0, 1.0, 2.0}, {1.0, 0.0});
  CHECK(pen.alpha(0) == doctest::Approx(1.0 / 4.0));
  CHECK(pen.alpha(1) == 0.0);
  CHECK(pen.lambda(0) == 1.0);
  CHECK_THROWS_AS(PenaltyConfig::from_alpha({1.0}, {0.5}).lambda(0), ConfigError);
}

TEST_CASE("cluster and global averages") {
  SUBCASE("consensus is a fixed point") {
    NetworkTopology topo = NetworkTopology::uniform(2, 3);
    PenaltyConfig pen = PenaltyConfig::uniform_from_lambda(topo, 1.0, 1.0);
    ParameterStack stack(6, 2);
    Vector v(2);
    v << 1.5, -3.0;
    for (int i = 0; i < 6; ++i) stack.client(i) = v;
    CHECK((cluster_average(stack, topo, pen, 1) - v).norm() == doctest::Approx(0.0));
    CHECK((global_average(stack, topo, pen) - v).norm() == doctest::Approx(0.0));
  }

  SUBCASE("weighted mean arithmetic") {
    NetworkTopology topo(2, {{0, 1}});
    PenaltyConfig pen = PenaltyConfig::from_alpha({1.0, 3.0}, {1.0});
    ParameterStack stack(2, 1);
    stack.client(0)[0] = 0.0;
    stack.client(1)[0] = 4.0;
    CHECK(cluster_average(stack, topo, pen, 0)[0] == doctest::Approx(3.0));
  }

  SUBCASE("single cluster with alpha = 1 reduces the global average") {
    NetworkTopology topo = NetworkTopology::uniform(1, 4);
    PenaltyConfig pen = PenaltyConfig::from_alpha({1.0, 2.0, 0.5, 3.0}, {1.0});
    ParameterStack stack = testo::random_stack(3, 4, 3);
    CHECK((global_average(stack, topo, pen) - cluster_average(stack, topo, pen, 0))
              .norm() < 1e-14);
  }

  SUBCASE("matches the naive summation oracle") {
    testo::QuadraticInstance instance = testo::random_quadratic_instance(5, 3, 3, 2, 4);
    ParameterStack stack = testo::random_stack(6, 9, 2);
    for (int j = 0; j < 3; ++j)
      CHECK((cluster_average(stack, instance.topo, instance.pen, j) -
             testo::naive_cluster_average(stack, instance.topo, instance.pen, j))
                .norm() < 1e-12);
    CHECK((global_average(stack, instance.topo, instance.pen) -
           testo::naive_global_average(stack, instance.topo, instance.pen))
              .norm() < 1e-12);
  }

  SUBCASE("all zero weights leave the global average undefined") {
    NetworkTopology topo = NetworkTopology::uniform(2, 2);
    PenaltyConfig pen = PenaltyConfig::from_alpha({1.0, 1.0, 1.0, 1.0}, {0.0, 0.0});
    ParameterStack stack(4, 1);
    CHECK_THROWS_AS(global_average(stack, topo, pen), ConfigError);
  }

  SUBCASE("averaging is affine equivariant") {
    testo::QuadraticInstance instance = testo::random_quadratic_instance(8, 2, 3, 3, 5);
    ParameterStack stack = testo::random_stack(9, 6, 3);
    const double a = 2.25;
    Vector b(3);
    b << -1.0, 0.5, 2.0;
    ParameterStack mapped(6, 3);
    for (int i = 0; i < 6; ++i) mapped.client(i) = a * stack.client(i) + b;
    for (int j = 0; j < 2; ++j) {
      const Vector lhs = cluster_average(mapped, instance.topo, instance.pen, j);
      const Vector rhs =
          a * cluster_average(stack, instance.topo, instance.pen, j) + b;
      CHECK((lhs - rhs).norm() < 1e-12);
    }
    const Vector lhs = global_average(mapped, instance.topo, instance.pen);
    const Vector rhs = a * global_average(stack, instance.topo, instance.pen) + b;
    CHECK((lhs - rhs).norm() < 1e-12);
  }
}

TEST_CASE("quadratic loss oracle") {
  SUBCASE("exact fit has zero value and gradient") {
    testo::Rng rng(20);
    ClientDataset data;
    data.X.resize(5, 3);
    for (int r = 0; r < 5; ++r)
      for (int c = 0; c < 3; ++c) data.X(r, c) = rng.normal();
    Vector theta(3);
    for (int r = 0; r < 3; ++r) theta[r] = rng.normal();
    data.y = data.X * theta;
    data.noise_var = 2.0;
    auto oracle = quadratic_loss_oracle(data);
    CHECK(oracle->value(theta) == doctest::Approx(0.0));
    CHECK(oracle->grad(theta).norm() < 1e-12);
  }

  SUBCASE("hand arithmetic") {
    ClientDataset data;
    data.X = Matrix::Identity(2, 2);
    data.y.resize(2);
    data.y << 1.0, 0.0;
    data.noise_var = 1.0;
    auto oracle = quadratic_loss_oracle(data);
    const Vector zero = Vector::Zero(2);
    CHECK(oracle->value(zero) == doctest::Approx(0.5));
    const Vector grad = oracle->grad(zero);
    CHECK(grad[0] == doctest::Approx(-1.0));
    CHECK(grad[1] == doctest::Approx(0.0));
    CHECK(oracle->smoothness() == doctest::Approx(1.0));
    CHECK(oracle->strong_convexity() == doctest::Approx(1.0));
  }

  SUBCASE("gradient matches central finite differences") {
    testo::Rng rng(21);
    ClientDataset data;
    data.X.resize(6, 4);
    data.y.resize(6);
    for (int r = 0; r < 6; ++r) {
      data.y[r] = rng.normal();
      for (int c = 0; c < 4; ++c) data.X(r, c) = rng.normal();
    }
    data.noise_var = 0.7;
    auto oracle = quadratic_loss_oracle(data);
    Vector theta(4);
    for (int r = 0; r < 4; ++r) theta[r] = rng.normal();
    const Vector analytic = oracle->grad(theta);
    const Vector numeric = testo::finite_difference_grad(
        [&](const Vector& at) { return oracle->value(at); }, theta);
    CHECK((analytic - numeric).norm() <= 1e-6 * std::max(1.0, analytic.norm()));
  }

  SUBCASE("finite-sum structure") {
    testo::Rng rng(22);
    ClientDataset data;
    data.X.resize(5, 3);
    data.y.resize(5);
    for (int r = 0; r < 5; ++r) {
      data.y[r] = rng.normal();
      for (int c = 0; c < 3; ++c) data.X(r, c) = rng.normal();
    }
    auto oracle = quadratic_loss_oracle(data);
    Vector theta(3);
    for (int r = 0; r < 3; ++r) theta[r] = rng.normal();
    Vector mean = Vector::Zero(3);
    double mean_value = 0.0;
    for (int l = 0; l < oracle->n_components(); ++l) {
      mean += oracle->component_grad(theta, l);
      const double residual = data.X.row(l).dot(theta) - data.y[l];
      mean_value += 0.5 * oracle->n_components() * residual * residual;
    }
    mean /= oracle->n_components();
    mean_value /= oracle->n_components();
    CHECK((mean - oracle->grad(theta)).norm() < 1e-10);
    CHECK(mean_value == doctest::Approx(oracle->value(theta)));
    CHECK(oracle->strong_convexity() <= oracle->smoothness());
    CHECK(oracle->smoothness() <= oracle->component_smoothness() + 1e-12);
  }

  SUBCASE("value is convex along random segments") {
    testo::Rng rng(23);
    ClientDataset data;
    data.X.resize(4, 3);
    data.y.resize(4);
    for (int r = 0; r < 4; ++r) {
      data.y[r] = rng.normal();
      for (int c = 0; c < 3; ++c) data.X(r, c) = rng.normal();
    }
    auto oracle = quadratic_loss_oracle(data);
    for (int rep = 0; rep < 20; ++rep) {
      Vector a(3), b(3);
      for (int r = 0; r < 3; ++r) {
        a[r] = 3.0 * rng.normal();
        b[r] = 3.0 * rng.normal();
      }
      const double midpoint = oracle->value(0.5 * (a + b));
      CHECK(midpoint <= 0.5 * (oracle->value(a) + oracle->value(b)) + 1e-12);
    }
  }

  SUBCASE("rank-deficient designs report mu = 0") {
    testo::Rng rng(24);
    ClientDataset data;
    data.X.resize(2, 4);
    data.y.resize(2);
    for (int r = 0; r < 2; ++r) {
      data.y[r] = rng.normal();
      for (int c = 0; c < 4; ++c) data.X(r, c) = rng.normal();
    }
    auto oracle = quadratic_loss_oracle(data);
    CHECK(oracle->strong_convexity() == 0.0);
  }
}

TEST_CASE("logistic loss oracle") {
  SUBCASE("theta = 0 gives ln 2") {
    testo::Rng rng(30);
    ClientDataset data;
    data.X.resize(7, 3);
    data.y.resize(7);
    for (int r = 0; r < 7; ++r) {
      for (int c = 0; c < 3; ++c) data.X(r, c) = rng.normal();
      data.y[r] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    }
    data.binary_labels = true;
    auto oracle = logistic_loss_oracle(data);
    CHECK(oracle->value(Vector::Zero(3)) == doctest::Approx(std::log(2.0)));
  }

  SUBCASE("loss decreases along the separating direction") {
    ClientDataset data;
    data.X = Matrix::Ones(1, 1);
    data.y = Vector::Ones(1);
    data.binary_labels = true;
    auto oracle = logistic_loss_oracle(data, 0.0);
    Vector t1(1), t2(1), t3(1);
    t1 << 0.0;
    t2 << 2.0;
    t3 << 5.0;
    CHECK(oracle->value(t2) < oracle->value(t1));
    CHECK(oracle->value(t3) < oracle->value(t2));
  }

  SUBCASE("gradient matches finite differences and the component mean") {
    testo::Rng rng(31);
    ClientDataset data;
    data.X.resize(9, 3);
    data.y.resize(9);
    for (int r = 0; r < 9; ++r) {
      for (int c = 0; c < 3; ++c) data.X(r, c) = rng.normal();
      data.y[r] = rng.bernoulli(0.4) ? 1.0 : 0.0;
    }
    data.binary_labels = true;
    auto oracle = logistic_loss_oracle(data, 1e-3);
    Vector theta(3);
    for (int r = 0; r < 3; ++r) theta[r] = 0.5 * rng.normal();
    const Vector analytic = oracle->grad(theta);
    const Vector numeric = testo::finite_difference_grad(
        [&](const Vector& at) { return oracle->value(at); }, theta);
    CHECK((analytic - numeric).norm() <= 1e-6 * std::max(1.0, analytic.norm()));
    Vector mean = Vector::Zero(3);
    for (int l = 0; l < oracle->n_components(); ++l)
      mean += oracle->component_grad(theta, l);
    mean /= oracle->n_components();
    CHECK((mean - analytic).norm() < 1e-10);
    CHECK(oracle->strong_convexity() == doctest::Approx(1e-3));
  }

  SUBCASE("non-binary labels are rejected") {
    ClientDataset data;
    data.X = Matrix::Ones(3, 2);
    data.y.resize(3);
    data.y << 0.0, 0.5, 1.0;
    data.binary_labels = true;
    CHECK_THROWS_AS(logistic_loss_oracle(data), ValidationError);
  }

  SUBCASE("value is convex along random segments") {
    testo::Rng rng(32);
    ClientDataset data;
    data.X.resize(6, 2);
    data.y.resize(6);
    for (int r = 0; r < 6; ++r) {
      for (int c = 0; c < 2; ++c) data.X(r, c) = rng.normal();
      data.y[r] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    }
    data.binary_labels = true;
    auto oracle = logistic_loss_oracle(data);
    for (int rep = 0; rep < 20; ++rep) {
      Vector a(2), b(2);
      for (int r = 0; r < 2; ++r) {
        a[r] = 2.0 * rng.normal();
        b[r] = 2.0 * rng.normal();
      }
      CHECK(oracle->value(0.5 * (a + b)) <=
            0.5 * (oracle->value(a) + oracle->value(b)) + 1e-12);
    }
  }
}

TEST_CASE("parameter stack and dataset validation") {
  ParameterStack stack(3, 2);
  CHECK(stack.all_finite());
  stack.client(1)[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK(!stack.all_finite());

  ClientDataset bad;
  bad.X = Matrix::Ones(3, 2);
  bad.y = Vector::Ones(2);
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}
