#include "fedcluster/loss.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>

namespace fedcluster {

void ClientDataset::validate() const {
  if (X.rows() < 1) throw ValidationError("dataset: need at least one row");
  if (X.rows() != y.size())
    throw ValidationError("dataset: X row count must equal y length");
  if (!X.allFinite() || !y.allFinite())
    throw ValidationError("dataset: non-finite entries");
  if (binary_labels) {
    for (Eigen::Index r = 0; r < y.size(); ++r)
      if (y[r] != 0.0 && y[r] != 1.0)
        throw ValidationError("dataset: labels must be 0 or 1");
  } else if (!(noise_var > 0.0)) {
    throw ValidationError("dataset: noise_var must be positive");
  }
}

namespace {

class QuadraticLoss final : public LossOracle {
 public:
  explicit QuadraticLoss(ClientDataset data) : data_(std::move(data)) {
    data_.validate();
    const double s2 = data_.noise_var;
    hessian_ = data_.X.transpose() * data_.X / s2;
    linear_ = data_.X.transpose() * data_.y / s2;
    Eigen::SelfAdjointEigenSolver<Matrix> eig(hessian_);
    const double floor = 1e-12 * std::max(1.0, eig.eigenvalues().maxCoeff());
    smoothness_ = std::max(0.0, eig.eigenvalues().maxCoeff());
    mu_ = eig.eigenvalues().minCoeff();
    if (mu_ < floor) mu_ = 0.0;
    const int n = data_.rows();
    component_smoothness_ = 0.0;
    for (int l = 0; l < n; ++l)
      component_smoothness_ = std::max(
          component_smoothness_, n * data_.X.row(l).squaredNorm() / s2);
  }

  int dim() const override { return data_.dim(); }
  int n_components() const override { return data_.rows(); }

  double value(const Vector& theta) const override {
    return (data_.y - data_.X * theta).squaredNorm() / (2.0 * data_.noise_var);
  }

  void grad(const Vector& theta, Vector& out) const override {
    out.noalias() = hessian_ * theta;
    out -= linear_;
  }

  void component_grad(const Vector& theta, int l, Vector& out) const override {
    const double residual = data_.X.row(l).dot(theta) - data_.y[l];
    out = (data_.rows() / data_.noise_var) * residual * data_.X.row(l).transpose();
  }

  double smoothness() const override { return smoothness_; }
  double component_smoothness() const override { return component_smoothness_; }
  double strong_convexity() const override { return mu_; }

  bool quadratic_form(Matrix& hessian, Vector& linear) const override {
    hessian = hessian_;
    linear = linear_;
    return true;
  }

 private:
  ClientDataset data_;
  Matrix hessian_;
  Vector linear_;
  double smoothness_;
  double component_smoothness_;
  double mu_;
};

double log1p_exp(double t) {
  // log(1 + e^t) without overflow.
  return t > 0.0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t));
}

double sigmoid(double t) {
  return t >= 0.0 ? 1.0 / (1.0 + std::exp(-t))
                  : std::exp(t) / (1.0 + std::exp(t));
}

class LogisticLoss final : public LossOracle {
 public:
  LogisticLoss(ClientDataset data, double ridge)
      : data_(std::move(data)), ridge_(ridge) {
    if (!data_.binary_labels)
      throw ValidationError("logistic loss: dataset must carry binary labels");
    data_.validate();
    if (!(ridge_ >= 0.0)) throw ConfigError("logistic loss: ridge must be >= 0");
    double max_row = 0.0;
    for (int l = 0; l < data_.rows(); ++l)
      max_row = std::max(max_row, data_.X.row(l).squaredNorm());
    smoothness_ = max_row / 4.0 + ridge_;
  }

  int dim() const override { return data_.dim(); }
  int n_components() const override { return data_.rows(); }

  double value(const Vector& theta) const override {
    const Vector z = data_.X * theta;
    double nll = 0.0;
    for (int l = 0; l < data_.rows(); ++l)
      nll += log1p_exp(z[l]) - data_.y[l] * z[l];
    return nll / data_.rows() + 0.5 * ridge_ * theta.squaredNorm();
  }

  void grad(const Vector& theta, Vector& out) const override {
    const Vector z = data_.X * theta;
    Vector residual(data_.rows());
    for (int l = 0; l < data_.rows(); ++l)
      residual[l] = sigmoid(z[l]) - data_.y[l];
    out.noalias() = data_.X.transpose() * residual / data_.rows();
    out += ridge_ * theta;
  }

  void component_grad(const Vector& theta, int l, Vector& out) const override {
    const double residual = sigmoid(data_.X.row(l).dot(theta)) - data_.y[l];
    out = residual * data_.X.row(l).transpose();
    out += ridge_ * theta;
  }

  double smoothness() const override { return smoothness_; }
  double component_smoothness() const override { return smoothness_; }
  double strong_convexity() const override { return ridge_; }

 private:
  ClientDataset data_;
  double ridge_;
  double smoothness_;
};

}  // namespace

std::unique_ptr<LossOracle> quadratic_loss_oracle(ClientDataset data) {
  return std::make_unique<QuadraticLoss>(std::move(data));
}

std::unique_ptr<LossOracle> logistic_loss_oracle(ClientDataset data, double ridge) {
  return std::make_unique<LogisticLoss>(std::move(data), ridge);
}

}  // namespace fedcluster
