#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mtml {

/// Malformed dataset, schema or checkpoint file.
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration value.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Shape mismatch between matrices/vectors handed to a metric operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A manifold point that is no longer orthonormal.
class StateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Numerical breakdown (rank-deficient retraction, non-finite values).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// No admissible anchor/positive pair exists at the requested match count.
class NTooStrictError : public std::runtime_error {
 public:
  NTooStrictError(int n, std::size_t admissible_pairs)
      : std::runtime_error("n too strict: n=" + std::to_string(n) +
                           " leaves " + std::to_string(admissible_pairs) +
                           " admissible anchor-positive pairs"),
        n_(n),
        admissible_pairs_(admissible_pairs) {}

  int n() const { return n_; }
  std::size_t admissible_pairs() const { return admissible_pairs_; }

 private:
  int n_;
  std::size_t admissible_pairs_;
};

/// Training produced a non-finite loss or parameter.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(int epoch, int batch, const std::string& what)
      : std::runtime_error("diverged at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(batch) + ": " + what),
        epoch_(epoch),
        batch_(batch) {}

  int epoch() const { return epoch_; }
  int batch() const { return batch_; }

 private:
  int epoch_;
  int batch_;
};

}  // namespace mtml
