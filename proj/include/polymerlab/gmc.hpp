#pragma once

#include "polymerlab/analysis.hpp"
#include "polymerlab/mollifier.hpp"
#include "polymerlab/paths.hpp"
#include "polymerlab/random.hpp"
#include "polymerlab/stats.hpp"

#include <limits>
#include <ostream>
#include <span>
#include <vector>

namespace polymerlab {

/// Two covariance matrices on n atoms with K <= K_hat entrywise and a
/// probability vector of weights.
struct FiniteKernelPair {
  Eigen::MatrixXd K;
  Eigen::MatrixXd K_hat;
  Eigen::VectorXd p;

  Eigen::Index size() const { return K.rows(); }

  /// Throws ArgumentError naming the first offending entry or property.
  void validate() const;
};

/// Random pair with K_hat = A A^T for a nonnegative n x n matrix A and
/// K = ratio * K_hat, so domination holds entrywise; weights are Dirichlet(1).
FiniteKernelPair random_dominated_pair(Eigen::Index n, const SeedStream& stream, double ratio = 0.5);

struct KahaneComparison {
  stats::MeanEstimate smaller;     // E f(sum p_i exp(X_i - K_ii / 2)), X ~ N(0, K)
  stats::MeanEstimate larger;      // same with K_hat
  stats::MeanEstimate difference;  // smaller - larger on shared standard normals

  /// The concave-increasing direction: the smaller kernel gives the larger mean.
  bool ordered(double se_multiple = 2.0) const {
    return difference.mean >= -se_multiple * difference.stderr_;
  }
};

KahaneComparison kahane_compare(const FiniteKernelPair& pair, const ConcaveTestFunction& f, std::size_t reps,
                                const SeedStream& stream);

enum class QpSolver { interior_point, projected_gradient };

struct TubeSolution {
  double energy = 0.0;
  PointMatrix<double> phi;
  double kkt_residual = 0.0;
  int iterations = 0;
  QpSolver solver = QpSolver::interior_point;
  double dt = 0.0;

  /// Rows "step,time,coordinate,w,phi".
  void export_csv(std::ostream& os, const PathD& w) const;
};

/// Y(W) = min sum_k |phi_{k+1} - phi_k|^2 / dt over grid paths with both ends
/// pinned to W and |phi_k - W_k| <= delta / 2 at every step. delta = +inf drops
/// the tube constraint.
TubeSolution tube_energy(const PathD& w, double delta, double tol = 1e-9,
                         QpSolver solver = QpSolver::interior_point, int max_iterations = 200000);

struct Kappa2Estimate {
  std::vector<double> horizons;
  std::vector<stats::MeanEstimate> rates;  // Y_{0,t} / t per horizon
  double plateau = 0.0;                    // intercept a of Y/t = a + b/t
  double plateau_stderr = 0.0;
  stats::Trend trend = stats::Trend::flat;
  bool subadditive = true;
  double max_violation = 0.0;  // max of Y_{0,t} - Y_{0,t/2} - Y_{t/2,t}
  double dt = 0.0;
};

/// Kingman rate from tube energies on one path per repetition, read at each
/// horizon of the grid. `refinements` Brownian-bridge halvings of the coarse
/// grid are applied to every path, so different levels share their paths.
Kappa2Estimate kingman_kappa2(int d, double delta, std::span<const double> horizons, std::size_t reps,
                              const SeedStream& stream, double coarse_dt = 0.01, int refinements = 0,
                              double tol = 1e-9);

struct KappaReference {
  double lambda1 = 0.0;       // principal Dirichlet eigenvalue of -Laplace/2 on the ball of radius delta/2
  double radius = 0.0;
  double bessel_zero = 0.0;   // j_{(d-2)/2, 1}

  /// kappa <= 2 (kappa2 / 2 + lambda1).
  double rate_bound(double kappa2) const { return kappa2 + 2 * lambda1; }
};

KappaReference kappa_references(double delta, int d);

struct TubeRateEstimate {
  double kappa = 0.0;
  double kappa_stderr = 0.0;
  double kappa2 = std::numeric_limits<double>::quiet_NaN();
  double lambda1 = 0.0;  // ball of radius delta
  double delta = 0.0;
  double dt = 0.0;
  double r_squared = 0.0;
  std::size_t window_first = 0;
  std::size_t window_last = 0;  // inclusive
  bool determined = false;
  bool truncated = false;        // some horizon had no surviving partner
  double slope_spread = 0.0;     // spread of per-spine slopes
  std::vector<double> times;
  std::vector<std::vector<double>> survival;  // spine x horizon
  std::vector<double> log_chi;                // per-spine intercepts

  bool within_bound(double kappa2_value, double se_multiple = 3.0) const {
    return kappa <= kappa2_value + 2 * lambda1 + se_multiple * kappa_stderr;
  }

  /// Rows "spine,time,survival".
  void export_csv(std::ostream& os) const;
};

/// P(tau_delta >= t | W) by partner Monte Carlo for each spine W, where
/// tau_delta is the first grid time with |W_s - W'_s| >= delta and both paths
/// start at the origin. Fits log S = log chi_W - kappa t with one slope.
TubeRateEstimate conditional_proximity_rate(int d, double delta, std::span<const double> horizons,
                                            std::size_t spine_reps, std::size_t partner_reps,
                                            const SeedStream& stream, double dt = 0.01,
                                            bool frozen_spine = false);

/// Repeats the fit with dt halved (spines refined by Brownian bridge) until the
/// rate changes by less than rel_tol or max_levels is reached.
TubeRateEstimate refined_proximity_rate(int d, double delta, std::span<const double> horizons,
                                        std::size_t spine_reps, std::size_t partner_reps,
                                        const SeedStream& stream, double coarse_dt, int max_levels,
                                        double rel_tol = 0.05, bool frozen_spine = false);

struct DeltaCalibration {
  double delta = 0.0;
  double kernel_at_delta = 0.0;
  double kernel_at_zero = 0.0;
  double fraction = 2.0 / 3.0;
};

/// Largest delta on a uniform grid of `points` radii up to the kernel support
/// with inf_{|f| <= delta} V(f) >= fraction * V(0). V is radial and decreasing,
/// so the infimum is V(delta).
DeltaCalibration calibrate_delta(const KernelD& k, double fraction = 2.0 / 3.0, int points = 4096);

struct OverlapBoundCheck {
  std::size_t pairs = 0;
  std::size_t survivors = 0;
  std::size_t violations = 0;
  double min_ratio = std::numeric_limits<double>::infinity();  // overlap / (V(0) T) over survivors
};

/// Samples independent pairs from the origin and checks overlap >= fraction * V(0) * T
/// for every pair with tau_delta > T.
OverlapBoundCheck overlap_lower_bound_check(const KernelD& k, const DeltaCalibration& cal, double horizon,
                                            std::size_t pairs, const SeedStream& stream, double dt);

}  // namespace polymerlab
