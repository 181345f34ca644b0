#pragma once

#include "polymerlab/field.hpp"
#include "polymerlab/mollifier.hpp"
#include "polymerlab/paths.hpp"
#include "polymerlab/random.hpp"

#include <span>
#include <string>
#include <vector>

namespace polymerlab {

enum class Method { replica_gaussian, explicit_field };

const char* to_string(Method m);
Method method_from_string(const std::string& name);

/// Disorder strength and horizon in the diffusively rescaled picture: a
/// unit-scale mollifier and paths run up to t = eps^{-2}. The horizon is the
/// primary quantity and eps is derived from it.
struct PolymerParams {
  double beta = 0.0;
  double horizon = 1.0;
  int dim = 3;
  MollifierKind kind = MollifierKind::compact_bump;
  double dt = 0.1;        // path and field time step, at most scale^2 / 10
  double spacing = 0.125;  // explicit-field lattice spacing, scale / 8

  double eps() const { return 1.0 / std::sqrt(horizon); }
  MollifierD mollifier() const { return MollifierD(kind, 1.0, dim); }
  KernelD kernel() const { return KernelD(mollifier()); }
  PolymerParams with_beta(double b) const;
  PolymerParams with_horizon(double t) const;
  static PolymerParams from_eps(double beta, double eps);

  /// Throws ArgumentError naming the offending field.
  void validate() const;
};

/// Joint Wiener integrals of N replica paths over one disorder, read off at
/// nested horizons. Independent of beta, so one bank serves every beta.
struct ReplicaBank {
  Method method = Method::replica_gaussian;
  std::vector<double> horizons;
  Eigen::MatrixXd integrals;      // replicas x horizons: M_i(t_j)
  Eigen::MatrixXd compensators;   // replicas x horizons: conditional variance of M_i(t_j)
  SeedStream seed{};

  Eigen::Index replicas() const { return integrals.rows(); }
};

/// Draws N paths and one disorder. Replica-gaussian draws the increments of M
/// over consecutive horizon segments with the overlap covariance of each
/// segment; explicit-field integrates the paths against one lattice noise.
ReplicaBank sample_replica_bank(const PolymerParams& p, std::size_t replicas, std::span<const double> horizons,
                                Method method, const SeedStream& stream);

struct PartitionEstimate {
  double value = 1.0;
  double log_value = 0.0;
  std::size_t replicas = 0;
  double stderr_ = 0.0;  // replica-noise standard error of the N-average
  Method method = Method::replica_gaussian;
  SeedStream seed{};
  PolymerParams params{};
};

/// Z = (1/N) sum_i exp(beta M_i - beta^2 c_i / 2) at horizon index j, where c_i is
/// the conditional variance of M_i; averaged in log space.
PartitionEstimate estimate_from_bank(const ReplicaBank& bank, const PolymerParams& p, std::size_t horizon_index);

PartitionEstimate partition_estimate(const PolymerParams& p, std::size_t replicas, Method method,
                                     const SeedStream& stream);

/// Off-diagonal replica moment ((sum L)^2 - sum L^2) / (N (N-1)), an unbiased
/// estimate of E[Z^2] for the N -> infinity partition function.
double replica_second_moment(const ReplicaBank& bank, const PolymerParams& p, std::size_t horizon_index);

struct MartingaleTrajectory {
  std::vector<double> horizons;
  std::vector<double> values;
  std::vector<double> log_values;
  bool nested = true;
  PolymerParams params{};
  SeedStream seed{};
};

/// Z_t along a dyadic grid {t, 2t, 4t, ...} with one explicit field whose
/// increments on [0, t] are shared by every later horizon.
MartingaleTrajectory martingale_trajectory(const PolymerParams& p0, std::span<const double> horizons,
                                           std::size_t replicas, const SeedStream& stream);

MartingaleTrajectory trajectory_from_bank(const ReplicaBank& bank, const PolymerParams& p);

/// Which replicas enter the size-biased average.
enum class SpineMode {
  partners_only,  // (1/N) sum_i exp(beta^2 K(W, W'_i)) L(W'_i), i = 1..N
  include_spine,  // the spine is one of the N replicas: exact size-biased law of the N-average
};

const char* to_string(SpineMode m);

PartitionEstimate size_biased_partition(const PolymerParams& p, std::size_t replicas, const SeedStream& stream,
                                        SpineMode mode = SpineMode::partners_only,
                                        Method method = Method::replica_gaussian);

/// Z_{rho beta}(B) against inner averages of Z_beta(rho B + sqrt(1 - rho^2) B').
struct InterpolationSample {
  std::vector<double> direct;
  std::vector<double> mixed;
  std::vector<double> mixed_stderr;  // inner-average standard error per outer rep
};

enum class OuterCoupling {
  independent,  // the two arms use independent outer fields and paths
  shared,       // both arms use the same outer field and paths
};

/// Outer fields are explicit lattice noise. Given the replica paths, the inner
/// field B' enters only through the jointly Gaussian integrals M_{B'}(W_i),
/// which are drawn from their exact lattice covariance.
InterpolationSample interpolation_check(const PolymerParams& p, double rho, std::size_t outer_reps,
                                        std::size_t inner_reps, std::size_t replicas, const SeedStream& stream,
                                        OuterCoupling coupling = OuterCoupling::independent);

}  // namespace polymerlab
