#pragma once

#include "polymerlab/core.hpp"
#include "polymerlab/mollifier.hpp"
#include "polymerlab/random.hpp"

#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <vector>

namespace polymerlab {

/// Number of uniform steps of size dt covering [0, T]; T must be a multiple of dt.
template <typename Scalar>
Eigen::Index step_count(Scalar horizon, Scalar dt) {
  require(dt > 0, "time step must be positive");
  require(horizon > 0, "horizon must be positive");
  const Scalar ratio = horizon / dt;
  const Scalar rounded = std::round(ratio);
  require(rounded >= 1 && std::abs(ratio - rounded) <= Scalar(1e-9) * std::max(Scalar(1), ratio),
          "horizon must be a positive integer multiple of the time step");
  return static_cast<Eigen::Index>(rounded);
}

/// A d-dimensional trajectory on the grid {0, dt, ..., T}; column k is W_{k dt}.
template <typename Scalar>
struct BrownianPath {
  int dim = 0;
  Scalar horizon = 0;
  Scalar dt = 0;
  PointMatrix<Scalar> positions;
  SeedStream seed{};

  Eigen::Index steps() const { return positions.cols() - 1; }
  Scalar time(Eigen::Index k) const { return Scalar(k) * dt; }
  auto at(Eigen::Index k) const { return positions.col(k); }
  auto start() const { return positions.col(0); }
};

using PathD = BrownianPath<double>;

template <typename Scalar>
BrownianPath<Scalar> sample_path(int d, const Point<Scalar>& x, Scalar horizon, Scalar dt,
                                 const SeedStream& stream) {
  require(d >= 1, "path dimension must be >= 1");
  require(x.size() == d, "start point dimension does not match");
  const Eigen::Index n = step_count(horizon, dt);
  BrownianPath<Scalar> path{d, horizon, dt, PointMatrix<Scalar>(d, n + 1), stream};
  auto rng = stream.engine();
  std::normal_distribution<Scalar> normal(Scalar(0), std::sqrt(dt));
  path.positions.col(0) = x;
  for (Eigen::Index k = 1; k <= n; ++k)
    for (int i = 0; i < d; ++i) path.positions(i, k) = path.positions(i, k - 1) + normal(rng);
  return path;
}

template <typename Scalar>
BrownianPath<Scalar> sample_path(int d, Scalar horizon, Scalar dt, const SeedStream& stream) {
  return sample_path<Scalar>(d, Point<Scalar>::Zero(d), horizon, dt, stream);
}

/// The constant path at x.
template <typename Derived, typename Scalar = typename Derived::Scalar>
BrownianPath<Scalar> frozen_path(const Eigen::MatrixBase<Derived>& x, Scalar horizon, Scalar dt) {
  const Eigen::Index n = step_count(horizon, dt);
  BrownianPath<Scalar> path{static_cast<int>(x.size()), horizon, dt,
                            PointMatrix<Scalar>(x.size(), n + 1), {}};
  path.positions.colwise() = Point<Scalar>(x);
  return path;
}

/// Prefix of a path on [0, horizon].
template <typename Scalar>
BrownianPath<Scalar> restrict_path(const BrownianPath<Scalar>& path, Scalar horizon) {
  const Eigen::Index n = step_count(horizon, path.dt);
  require(n <= path.steps(), "restrict_path: horizon exceeds the path");
  return {path.dim, horizon, path.dt, path.positions.leftCols(n + 1), path.seed};
}

/// Piece of a path between grid indices from and to (times keep their offsets dropped).
template <typename Scalar>
BrownianPath<Scalar> segment(const BrownianPath<Scalar>& path, Eigen::Index from, Eigen::Index to) {
  require(0 <= from && from < to && to <= path.steps(), "segment: bad index range");
  return {path.dim, Scalar(to - from) * path.dt, path.dt, path.positions.middleCols(from, to - from + 1),
          path.seed};
}

/// Halves dt by inserting Brownian-bridge midpoints; the coarse points are kept.
template <typename Scalar>
BrownianPath<Scalar> refine(const BrownianPath<Scalar>& path, const SeedStream& stream) {
  const Eigen::Index n = path.steps();
  BrownianPath<Scalar> fine{path.dim, path.horizon, path.dt / 2, PointMatrix<Scalar>(path.dim, 2 * n + 1),
                            stream};
  auto rng = stream.engine();
  std::normal_distribution<Scalar> normal(Scalar(0), std::sqrt(path.dt / 4));
  for (Eigen::Index k = 0; k < n; ++k) {
    fine.positions.col(2 * k) = path.positions.col(k);
    for (int i = 0; i < path.dim; ++i)
      fine.positions(i, 2 * k + 1) =
          (path.positions(i, k) + path.positions(i, k + 1)) / 2 + normal(rng);
  }
  fine.positions.col(2 * n) = path.positions.col(n);
  return fine;
}

/// Diffusive rescaling s -> W_{s eps^2} / eps, a path on horizon T / eps^2.
template <typename Scalar>
BrownianPath<Scalar> diffusive_rescale(const BrownianPath<Scalar>& path, Scalar eps) {
  require(eps > 0, "rescaling factor must be positive");
  return {path.dim, path.horizon / (eps * eps), path.dt / (eps * eps), path.positions / eps, path.seed};
}

template <typename Scalar>
void require_shared_grid(const BrownianPath<Scalar>& a, const BrownianPath<Scalar>& b) {
  require(a.dim == b.dim, "paths have different dimensions");
  require(a.positions.cols() == b.positions.cols() && a.dt == b.dt, "paths are on different grids");
}

/// Trapezoidal approximation of int_0^T V(a_s - b_s) ds.
template <typename Scalar>
Scalar overlap(const BrownianPath<Scalar>& a, const BrownianPath<Scalar>& b,
               const CovarianceKernel<Scalar>& k) {
  require_shared_grid(a, b);
  require(k.dim() == a.dim, "kernel dimension does not match paths");
  const Eigen::Index n = a.steps();
  const Scalar reach2 = k.effective_radius() * k.effective_radius();
  auto term = [&](Eigen::Index j) {
    const Scalar r2 = (a.positions.col(j) - b.positions.col(j)).squaredNorm();
    if (r2 >= reach2) return Scalar(0);
    return k.radial(std::sqrt(r2));
  };
  Scalar total = (term(0) + term(n)) / 2;
  for (Eigen::Index j = 1; j < n; ++j) total += term(j);
  return total * a.dt;
}

/// First grid time with |a_t - b_t| >= delta, or nothing if the horizon is reached.
template <typename Scalar>
struct StoppingTimeSample {
  Scalar threshold = 0;
  std::optional<Scalar> value;
  Scalar horizon = 0;

  bool exceeded_horizon() const { return !value.has_value(); }
};

template <typename Scalar>
StoppingTimeSample<Scalar> proximity_time(const BrownianPath<Scalar>& a, const BrownianPath<Scalar>& b,
                                          Scalar delta) {
  require_shared_grid(a, b);
  require(delta > 0, "proximity threshold must be positive");
  StoppingTimeSample<Scalar> out{delta, std::nullopt, a.horizon};
  const Scalar d2 = delta * delta;
  for (Eigen::Index k = 1; k <= a.steps(); ++k) {
    if ((a.positions.col(k) - b.positions.col(k)).squaredNorm() >= d2) {
      out.value = a.time(k);
      break;
    }
  }
  return out;
}

/// Monte-Carlo survival curve P_0(sigma > t) on a time grid, with binomial errors.
struct SurvivalCurve {
  std::vector<double> times;
  std::vector<double> survival;
  std::vector<double> stderr_;
  std::size_t reps = 0;
  double dt = 0;

  void export_csv(std::ostream& os) const;
};

/// Exit of a d-dimensional Brownian motion from the ball of radius r, monitored
/// on the grid of step dt. The survival estimate is nonincreasing by construction.
SurvivalCurve exit_time_survival(int d, double radius, std::span<const double> t_grid, std::size_t reps,
                                 const SeedStream& stream, double dt);

/// Exit times from one simulation at the finest step, read off on the nested
/// coarser grids dt * 2^level (level 0 is the coarsest). Results are coupled.
std::vector<SurvivalCurve> exit_time_survival_levels(int d, double radius, std::span<const double> t_grid,
                                                     std::size_t reps, const SeedStream& stream,
                                                     double coarse_dt, int levels);

/// Exponential decay fit of log-survival: log S(t) = a - rate * t.
struct DecayFit {
  double rate = 0;
  double rate_stderr = 0;
  double intercept = 0;
  double r_squared = 0;
  std::size_t first_index = 0;  // start of the fit window in the input grid
  bool determined = false;
};

/// Weighted fit over a window that drops the smallest times until R^2 >= min_r2
/// (or only two usable points remain, then undetermined). Points with survival
/// 0 or 1, or a zero standard error, carry no weight and are excluded.
DecayFit fit_decay_rate(std::span<const double> times, std::span<const double> survival,
                        std::span<const double> stderr_, double min_r2 = 0.98);

struct RefinedRate {
  DecayFit fit;
  double dt = 0;
  std::vector<double> rates_by_level;
  bool converged = false;
};

/// Halves dt (coupled) until the fitted rate moves by less than rel_tol.
RefinedRate refined_exit_rate(int d, double radius, std::span<const double> t_grid, std::size_t reps,
                              const SeedStream& stream, double coarse_dt, int max_levels,
                              double rel_tol = 0.02);

/// Binary record: int32 dim, float64 dt, float64 horizon, uint64 point count,
/// then the coordinates point by point (native byte order).
void write_path(std::ostream& os, const PathD& path);
PathD read_path(std::istream& is);

}  // namespace polymerlab
