#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tnpde {

/// Operand shapes do not conform, or a shape has a non-positive extent.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Architecture cannot be realised (e.g. TN width not a square).
class InvalidArchitecture : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A tensor operation produced NaN or Inf.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller broke an API precondition that is not about data (e.g. grad of a
/// non-scalar node).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A forward state or loss became NaN/Inf during an Euler-Maruyama rollout.
class DivergedRollout : public std::runtime_error {
 public:
  DivergedRollout(std::size_t step, const std::string& what)
      : std::runtime_error("diverged rollout at step " + std::to_string(step) + ": " + what),
        step_(step) {}

  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// Training aborted; carries the epoch in which the failure happened.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(std::size_t epoch, const std::string& what)
      : std::runtime_error("training failed at epoch " + std::to_string(epoch) + ": " + what),
        epoch_(epoch) {}

  std::size_t epoch() const noexcept { return epoch_; }

 private:
  std::size_t epoch_;
};

class IoError : public std::runtime_error {
 public:
  IoError(const std::string& path, const std::string& what)
      : std::runtime_error(path + ": " + what), path_(path) {}

  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

}  // namespace tnpde
