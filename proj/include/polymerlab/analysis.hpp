#pragma once

#include "polymerlab/mollifier.hpp"
#include "polymerlab/paths.hpp"
#include "polymerlab/random.hpp"
#include "polymerlab/stats.hpp"

#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace polymerlab {

/// E_0 exp{beta^2 int_0^t V(sqrt2 W_s) ds}, the second moment of the partition
/// function, by single-path Monte Carlo with trapezoid time quadrature.
stats::MeanEstimate second_moment_formula(const KernelD& k, double beta, double horizon, std::size_t reps,
                                          const SeedStream& stream, double dt = 0.1);

/// Samplewise values of the same functional on a shared path at several
/// horizons; nonnegative integrand, so each row is nondecreasing.
std::vector<stats::MeanEstimate> second_moment_profile(const KernelD& k, double beta,
                                                       std::span<const double> horizons, std::size_t reps,
                                                       const SeedStream& stream, double dt = 0.1);

/// G(z) = C_d int V(y) |y - z|^{2-d} dy = E_z int_0^inf V(W_s) ds, for d >= 3.
double green_potential(const KernelD& k, double z_norm);

template <typename Derived>
double green_potential(const KernelD& k, const Eigen::MatrixBase<Derived>& z) {
  require(z.size() == k.dim(), "green_potential: point dimension does not match kernel");
  return green_potential(k, z.norm());
}

/// Monte Carlo of E_z int_0^T V(W_s) ds, plus the analytic tail
/// int_T^inf (2 pi s)^{-d/2} ds * int V when `tail_correction` is set.
stats::MeanEstimate occupation_estimate(const KernelD& k, const Eigen::VectorXd& z, double horizon,
                                        std::size_t reps, const SeedStream& stream, double dt = 0.1,
                                        bool tail_correction = true);

/// Monte Carlo of E_0 exp{beta^2 int_0^T V(W_s) ds}.
stats::MeanEstimate exponential_occupation(const KernelD& k, double beta, double horizon, std::size_t reps,
                                           const SeedStream& stream, double dt = 0.1);

struct MomentBound {
  double eta = 0.0;
  double bound = 1.0;  // 1 / (1 - eta), or +inf when eta >= 1
  double beta = 0.0;
  bool finite() const { return eta < 1.0; }
  bool sup_at_origin = true;  // G(0) >= G on the verification grid
};

/// eta = beta^2 sup_z G(z); the sup is taken at z = 0 and verified on a radial grid.
MomentBound portenko_eta(double beta, const KernelD& k);

/// Largest beta (to tol) with (beta^2 / 2) sup_z G(z) < 1. The factor 1/2 is the
/// time change int V(sqrt2 W_s) ds = (1/2) int V(W_u) du. Returns the lower
/// end of the final bisection bracket, a certified value inside the region.
double beta_star_bound(const KernelD& k, double tol = 1e-10);

/// Centered isotropic Gaussian mixture f(x) = sum_k a_k N(x; 0, s_k^2 I).
struct GaussianMixture {
  std::vector<double> weights;
  std::vector<double> widths;

  double integral() const;
  /// (f * f~)(r): the autocorrelation at separation r in dimension d.
  double autocorrelation(double r, int d) const;
};

/// E[u_eps(f) - int f]^2 = int F(w) (g(w / eps) - 1) dw with F the
/// autocorrelation of f and g(z) = E_z exp{(beta^2/2) int_0^{2/eps^2} V(W_s) ds}.
/// Outer Gauss-Legendre in r = |w|; inner Monte Carlo with one set of paths
/// shared by all nodes.
std::vector<stats::MeanEstimate> smoothed_variance(const GaussianMixture& f, const KernelD& k, double beta,
                                                   std::span<const double> eps_grid, std::size_t reps,
                                                   const SeedStream& stream, double dt = 0.1, int nodes = 24);

struct NonCauchyGap {
  stats::MeanEstimate matched;  // E exp{beta^2 int_0^{1/eps^2} V(W - W')}
  stats::MeanEstimate mixed;    // the mixed-scale term at small delta
  stats::MeanEstimate gap;      // matched - mixed, paired
  double delta = 0.0;
};

/// The two expectations of the non-Cauchy remark for a Gaussian mollifier of
/// unit scale, paired on common paths; mixed term at delta = delta_ratio * eps.
NonCauchyGap non_cauchy_gap(const MollifierD& m, double beta, double eps, std::size_t reps,
                            const SeedStream& stream, double delta_ratio = 1e-4, double dt = 0.05);

/// f_alpha(x) = min(x / alpha, 1).
struct ConcaveTestFunction {
  double alpha = 1.0;

  explicit ConcaveTestFunction(double a) : alpha(a) { require(a > 0, "alpha must be positive"); }
  double operator()(double x) const { return x >= alpha ? 1.0 : x / alpha; }
  /// f_alpha(exp(log_x)) without overflow.
  double of_log(double log_x) const { return log_x >= std::log(alpha) ? 1.0 : std::exp(log_x - std::log(alpha)); }
};

enum class Verdict { weak_like, strong_like, undetermined };

const char* to_string(Verdict v);

struct Evidence {
  std::string test;
  std::string outcome;
  double statistic = 0.0;
  double p_value = 1.0;
};

struct DisorderVerdict {
  Verdict verdict = Verdict::undetermined;
  std::vector<Evidence> evidence;
};

struct UiOptions {
  std::vector<double> alphas{2.0, 8.0, 32.0};
  double level = 0.05;
  double tail_threshold = 0.0;  // m for the tail mass; 0 means the largest alpha
};

/// Uniform-integrability diagnostic from log-samples of Z (plain) and of the
/// size-biased Z, one sample set per horizon.
///   strong-like: every f_alpha mean tends to 1 (increasing, or saturated at 1)
///                and the plain median decreases;
///   weak-like:   every f_alpha mean is flat and below 1, the tail mass
///                Q(Z > m) is flat, and the plain median is flat;
///   otherwise undetermined.
DisorderVerdict ui_diagnostic(std::span<const std::vector<double>> plain_log,
                              std::span<const std::vector<double>> biased_log, const UiOptions& options = {});

}  // namespace polymerlab
