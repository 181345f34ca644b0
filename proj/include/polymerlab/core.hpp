#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace polymerlab {

// Error taxonomy. Each maps to a CLI exit code (see cli.hpp).

/// A precondition on an argument was violated.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A numerical procedure failed (factorization, solver convergence).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A configured resource cap would be exceeded.
class ResourceError : public std::runtime_error {
 public:
  ResourceError(const std::string& what, std::size_t required_bytes)
      : std::runtime_error(what), required_bytes_(required_bytes) {}
  std::size_t required_bytes() const noexcept { return required_bytes_; }

 private:
  std::size_t required_bytes_;
};

/// A path left the spatial region where a noise field is defined.
class CoverageError : public std::runtime_error {
 public:
  CoverageError(const std::string& what, double first_offending_time)
      : std::runtime_error(what), time_(first_offending_time) {}
  double first_offending_time() const noexcept { return time_; }

 private:
  double time_;
};

template <typename Scalar>
using Point = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using PointMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Surface area of the unit sphere S^{d-1} in R^d.
template <typename Scalar>
Scalar unit_sphere_area(int d) {
  using std::pow;
  using std::tgamma;
  const Scalar pi = std::numbers::pi_v<Scalar>;
  return Scalar(2) * pow(pi, Scalar(d) / 2) / tgamma(Scalar(d) / 2);
}

/// Newtonian constant C_d with E_z int_0^inf V(W_s) ds = C_d int V(y) |y-z|^{2-d} dy.
template <typename Scalar>
Scalar green_constant(int d) {
  using std::pow;
  using std::tgamma;
  const Scalar pi = std::numbers::pi_v<Scalar>;
  return tgamma(Scalar(d) / 2 - 1) / (Scalar(2) * pow(pi, Scalar(d) / 2));
}

inline void require(bool condition, const char* message) {
  if (!condition) [[unlikely]]
    throw ArgumentError(message);
}

inline void require(bool condition, const std::string& message) {
  if (!condition) [[unlikely]]
    throw ArgumentError(message);
}

}  // namespace polymerlab
