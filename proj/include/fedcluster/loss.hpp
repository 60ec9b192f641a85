#pragma once

#include <Eigen/Dense>
#include <memory>
#include <vector>

#include "fedcluster/errors.hpp"
#include "fedcluster/topology.hpp"

namespace fedcluster {

/// One client's data. noise_var is the observation variance sigma_i^2 of the
/// quadratic loss; binary_labels marks y as {0,1} responses for the logistic
/// loss.
struct ClientDataset {
  Matrix X;
  Vector y;
  double noise_var = 1.0;
  bool binary_labels = false;

  int rows() const { return static_cast<int>(X.rows()); }
  int dim() const { return static_cast<int>(X.cols()); }
  void validate() const;
};

/// Per-client loss interface. The loss has the finite-sum structure
/// f_i = (1/n_i) sum_l f_tilde_{i,l}, so grad() equals the mean of
/// component_grad() over l.
class LossOracle {
 public:
  virtual ~LossOracle() = default;

  virtual int dim() const = 0;
  virtual int n_components() const = 0;

  virtual double value(const Vector& theta) const = 0;
  virtual void grad(const Vector& theta, Vector& out) const = 0;
  virtual void component_grad(const Vector& theta, int l, Vector& out) const = 0;

  /// Smoothness L of the full gradient.
  virtual double smoothness() const = 0;
  /// Largest smoothness constant among the components f_tilde_{i,l}.
  virtual double component_smoothness() const = 0;
  /// Strong convexity mu (zero when the loss is only convex).
  virtual double strong_convexity() const = 0;

  /// Fills H and b with the exact quadratic form grad = H theta - b when the
  /// loss is quadratic; returns false otherwise.
  virtual bool quadratic_form(Matrix& hessian, Vector& linear) const {
    (void)hessian;
    (void)linear;
    return false;
  }

  Vector grad(const Vector& theta) const {
    Vector g(dim());
    grad(theta, g);
    return g;
  }
  Vector component_grad(const Vector& theta, int l) const {
    Vector g(dim());
    component_grad(theta, l, g);
    return g;
  }
};

using LossSet = std::vector<std::unique_ptr<LossOracle>>;

/// Least-squares loss ||y - X theta||^2 / (2 sigma^2). Component l is the
/// l-th row's squared residual scaled by n_i so the uniform mean of the
/// components recovers the full loss. L = lambda_max(X^T X)/sigma^2 and
/// mu = lambda_min(X^T X)/sigma^2 (zero when X is rank deficient).
std::unique_ptr<LossOracle> quadratic_loss_oracle(ClientDataset data);

/// Mean negative log-likelihood of logistic regression plus a ridge term
/// (ridge/2)||theta||^2 that restores strong convexity; ridge = 0 disables
/// the mu > 0 guarantee that the optimizer tuning relies on.
std::unique_ptr<LossOracle> logistic_loss_oracle(ClientDataset data,
                                                 double ridge = 1e-4);

}  // namespace fedcluster
