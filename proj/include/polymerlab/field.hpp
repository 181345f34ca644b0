#pragma once

#include "polymerlab/core.hpp"
#include "polymerlab/mollifier.hpp"
#include "polymerlab/paths.hpp"
#include "polymerlab/random.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <vector>

namespace polymerlab {

/// Axis-aligned region of R^d.
struct Box {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;

  int dim() const { return static_cast<int>(lower.size()); }
  /// Whether x lies inside with the given margin, up to rounding (1e-9 relative).
  bool contains(const Eigen::Ref<const Eigen::VectorXd>& x, double margin = 0.0) const {
    const double slack = margin - 1e-9 * (1.0 + margin);
    return ((x.array() - lower.array()) >= slack).all() && ((upper.array() - x.array()) >= slack).all();
  }
};

/// Bounding box of the given paths, widened by margin on every side.
Box covering_box(std::span<const PathD> paths, double margin);

inline constexpr std::size_t default_field_max_bytes = std::size_t(1) << 30;

/// Discretized space-time white noise on the lattice h*Z^d times the grid
/// {0, dt, ..., T}. The increment of cell i in step k is a centered Gaussian of
/// variance h^d dt generated from (stream, k, i) alone, so values never depend
/// on the box, on the horizon, or on the order of queries. Slabs (all cells of
/// the box in one step) are materialized lazily and cached up to max_bytes.
class NoiseField {
 public:
  NoiseField(Box box, double h, double horizon, double dt, const SeedStream& stream,
             std::size_t max_bytes = default_field_max_bytes);

  int dim() const { return box_.dim(); }
  const Box& box() const { return box_; }
  double spacing() const { return h_; }
  double horizon() const { return horizon_; }
  double dt() const { return dt_; }
  Eigen::Index steps() const { return steps_; }
  const SeedStream& stream() const { return stream_; }
  bool reversed() const { return reversed_; }
  double cell_variance() const { return cell_variance_; }

  /// Lattice index range covered by the box, per axis (inclusive).
  const Eigen::VectorX<std::int64_t>& first_index() const { return first_; }
  const Eigen::VectorX<std::int64_t>& cells_per_axis() const { return counts_; }
  std::size_t cell_count() const { return cell_count_; }
  std::size_t slab_bytes() const { return cell_count_ * sizeof(double); }

  /// Increment of lattice cell `index` in step k (time [k dt, (k+1) dt)).
  double increment(Eigen::Index step, std::span<const std::int64_t> index) const;

  /// Same as increment() but for a precomputed step key and cell code.
  static double increment_from(std::uint64_t step_key, std::uint64_t cell_code, double sd) {
    return sd * counter_normal(step_key, cell_code, 0);
  }
  std::uint64_t step_key(Eigen::Index step) const;
  static std::uint64_t cell_code(std::span<const std::int64_t> index);

  /// All increments of step k over the box, first axis fastest.
  std::shared_ptr<const Eigen::VectorXd> slab(Eigen::Index step) const;

  /// The same noise on a longer horizon; increments on [0, T] are unchanged.
  NoiseField extended(double horizon) const;
  /// The same noise truncated to [0, horizon].
  NoiseField restricted(double horizon) const;
  /// View with step k mapped to steps-1-k.
  NoiseField time_reversed() const;
  /// A different region of the same noise.
  NoiseField with_box(Box box) const;

 private:
  Box box_;
  double h_;
  double horizon_;
  double dt_;
  Eigen::Index steps_;
  SeedStream stream_;
  std::uint64_t key_;
  std::size_t max_bytes_;
  bool reversed_ = false;
  double cell_variance_;
  Eigen::VectorX<std::int64_t> first_, counts_;
  std::size_t cell_count_ = 0;

  struct SlabCache {
    std::mutex mutex;
    std::map<Eigen::Index, std::shared_ptr<const Eigen::VectorXd>> slabs;
  };
  std::shared_ptr<SlabCache> cache_;
};

NoiseField build_noise_field(const Box& box, double h, double horizon, double dt, const SeedStream& stream,
                             std::size_t max_bytes = default_field_max_bytes);

/// M_t(W) = sum_k sum_cells phi(x_cell - W_{k dt}) dB(cell, k), together with its
/// exact conditional variance given the path, dt sum_k sum_cells h^d phi^2.
struct WienerIntegralSample {
  double value = 0.0;
  double conditional_variance = 0.0;
  double horizon = 0.0;
};

/// Integrals of one path against several fields, read off at nested prefix
/// horizons: result[f][j] covers steps [0, prefix_steps[j]) of field f.
/// The path step must be a multiple of the field step; path positions are
/// held at the left endpoint of each path step.
std::vector<std::vector<WienerIntegralSample>> wiener_integral_prefixes(
    std::span<const NoiseField* const> fields, const PathD& path, const MollifierD& m,
    std::span<const Eigen::Index> prefix_steps);

WienerIntegralSample wiener_integral(const NoiseField& field, const PathD& path, const MollifierD& m);

/// Exact conditional covariance of explicit-field integrals for a set of paths:
/// dt sum_k sum_cells h^d phi(x - W^i_k) phi(x - W^j_k).
Eigen::MatrixXd lattice_covariance(std::span<const PathD> paths, const NoiseField& geometry,
                                   const MollifierD& m);

/// Row of lattice_covariance for one path against a list of others.
Eigen::VectorXd lattice_cross_covariance(const PathD& path, std::span<const PathD> others,
                                         const NoiseField& geometry, const MollifierD& m);

/// Sigma_ij = overlap(W^i, W^j, k).
Eigen::MatrixXd overlap_matrix(std::span<const PathD> paths, const KernelD& k);

/// Lower-triangular factor of a covariance matrix. Jitter starts at
/// 1e-12 * scale and doubles at most six times; failure reports the minimum
/// eigenvalue.
struct CovarianceFactor {
  Eigen::MatrixXd lower;
  double jitter = 0.0;
};

CovarianceFactor factor_covariance(const Eigen::MatrixXd& sigma, double scale);

struct ReplicaSample {
  Eigen::VectorXd values;
  double jitter = 0.0;
};

/// One joint draw of (M(W^i))_i with covariance overlap_matrix(paths, k).
ReplicaSample replica_gaussian_sample(std::span<const PathD> paths, const KernelD& k,
                                      const SeedStream& stream);

/// Draws from N(0, L L^T) given its factor.
Eigen::VectorXd gaussian_draw(const CovarianceFactor& factor, std::mt19937_64& rng);

}  // namespace polymerlab
