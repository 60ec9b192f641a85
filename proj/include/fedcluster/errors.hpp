#pragma once

#include <stdexcept>
#include <string>

namespace fedcluster {

/// Invalid client/cluster structure (bad partition, unknown index, ...).
class TopologyError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid penalty/experiment configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dataset contents violate a precondition (non-binary labels, shape mismatch, ...).
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A branch whose probability is zero was requested, or the schedule is degenerate.
class ScheduleError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A solver failed; carries the final gradient norm when one is available.
class SolverError : public std::runtime_error {
 public:
  explicit SolverError(const std::string& what, double final_grad_norm = -1.0)
      : std::runtime_error(what), final_grad_norm_(final_grad_norm) {}
  double final_grad_norm() const { return final_grad_norm_; }

 private:
  double final_grad_norm_;
};

/// A stochastic run produced a non-finite iterate.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, long iteration)
      : std::runtime_error(what + " at iteration " + std::to_string(iteration)),
        iteration_(iteration) {}
  long iteration() const { return iteration_; }

 private:
  long iteration_;
};

}  // namespace fedcluster
