#include "polymerlab/field.hpp"

#include "polymerlab/parallel.hpp"

#include <algorithm>
#include <sstream>

namespace polymerlab {

Box covering_box(std::span<const PathD> paths, double margin) {
  require(!paths.empty(), "covering_box needs at least one path");
  Box box{paths.front().positions.rowwise().minCoeff(), paths.front().positions.rowwise().maxCoeff()};
  for (const auto& p : paths) {
    require(p.dim == box.dim(), "covering_box: paths have different dimensions");
    box.lower = box.lower.cwiseMin(p.positions.rowwise().minCoeff());
    box.upper = box.upper.cwiseMax(p.positions.rowwise().maxCoeff());
  }
  box.lower.array() -= margin;
  box.upper.array() += margin;
  return box;
}

NoiseField::NoiseField(Box box, double h, double horizon, double dt, const SeedStream& stream,
                       std::size_t max_bytes)
    : box_(std::move(box)),
      h_(h),
      horizon_(horizon),
      dt_(dt),
      steps_(step_count(horizon, dt)),
      stream_(stream),
      key_(stream.key()),
      max_bytes_(max_bytes),
      cache_(std::make_shared<SlabCache>()) {
  require(h > 0, "field spacing must be positive");
  require(box_.dim() >= 1 && box_.upper.size() == box_.lower.size(), "field box is malformed");
  require((box_.upper.array() >= box_.lower.array()).all(), "field box has negative extent");
  const int d = box_.dim();
  cell_variance_ = std::pow(h, d) * dt;
  first_.resize(d);
  counts_.resize(d);
  double cells = 1.0;
  for (int a = 0; a < d; ++a) {
    first_[a] = static_cast<std::int64_t>(std::ceil(box_.lower[a] / h));
    const auto last = static_cast<std::int64_t>(std::floor(box_.upper[a] / h));
    counts_[a] = std::max<std::int64_t>(0, last - first_[a] + 1);
    cells *= static_cast<double>(counts_[a]);
  }
  const double bytes = cells * sizeof(double);
  if (bytes > static_cast<double>(max_bytes_)) {
    std::ostringstream msg;
    msg << "noise field slab needs " << bytes << " bytes, above the cap field.max_bytes = " << max_bytes_;
    throw ResourceError(msg.str(), static_cast<std::size_t>(bytes));
  }
  cell_count_ = static_cast<std::size_t>(cells);
}

std::uint64_t NoiseField::step_key(Eigen::Index step) const {
  const Eigen::Index actual = reversed_ ? steps_ - 1 - step : step;
  return hash_combine(key_, static_cast<std::uint64_t>(actual));
}

std::uint64_t NoiseField::cell_code(std::span<const std::int64_t> index) {
  constexpr std::int64_t offset = std::int64_t(1) << 20;
  if (index.size() <= 3) {
    std::uint64_t code = 0;
    for (std::int64_t i : index) {
      require(i > -offset && i < offset, "lattice index out of the supported range");
      code = (code << 21) | static_cast<std::uint64_t>(i + offset);
    }
    return code;
  }
  std::uint64_t code = index.size();
  for (std::int64_t i : index) code = hash_combine(code, static_cast<std::uint64_t>(i));
  return code;
}

double NoiseField::increment(Eigen::Index step, std::span<const std::int64_t> index) const {
  require(step >= 0 && step < steps_, "field step out of range");
  require(static_cast<int>(index.size()) == dim(), "lattice index has the wrong dimension");
  return increment_from(step_key(step), cell_code(index), std::sqrt(cell_variance_));
}

std::shared_ptr<const Eigen::VectorXd> NoiseField::slab(Eigen::Index step) const {
  require(step >= 0 && step < steps_, "field step out of range");
  {
    std::lock_guard lock(cache_->mutex);
    if (auto it = cache_->slabs.find(step); it != cache_->slabs.end()) return it->second;
  }
  auto values = std::make_shared<Eigen::VectorXd>(static_cast<Eigen::Index>(cell_count_));
  const int d = dim();
  const std::uint64_t k = step_key(step);
  const double sd = std::sqrt(cell_variance_);
  std::vector<std::int64_t> index(first_.data(), first_.data() + d);
  for (std::size_t c = 0; c < cell_count_; ++c) {
    (*values)[static_cast<Eigen::Index>(c)] = increment_from(k, cell_code(index), sd);
    for (int a = 0; a < d; ++a) {
      if (++index[a] < first_[a] + counts_[a]) break;
      index[a] = first_[a];
    }
  }
  // Generation is deterministic, so a concurrent duplicate is harmless.
  std::lock_guard lock(cache_->mutex);
  const std::size_t capacity = std::max<std::size_t>(1, max_bytes_ / std::max<std::size_t>(1, slab_bytes()));
  while (cache_->slabs.size() >= capacity) cache_->slabs.erase(cache_->slabs.begin());
  return cache_->slabs.try_emplace(step, std::move(values)).first->second;
}

NoiseField NoiseField::extended(double horizon) const {
  require(!reversed_, "a time-reversed view cannot be extended");
  require(horizon >= horizon_, "extension must not shorten the horizon");
  return NoiseField(box_, h_, horizon, dt_, stream_, max_bytes_);
}

NoiseField NoiseField::restricted(double horizon) const {
  require(!reversed_, "a time-reversed view cannot be restricted");
  require(horizon <= horizon_, "restriction must not lengthen the horizon");
  return NoiseField(box_, h_, horizon, dt_, stream_, max_bytes_);
}

NoiseField NoiseField::time_reversed() const {
  NoiseField out(box_, h_, horizon_, dt_, stream_, max_bytes_);
  out.reversed_ = !reversed_;
  return out;
}

NoiseField NoiseField::with_box(Box box) const {
  NoiseField out(std::move(box), h_, horizon_, dt_, stream_, max_bytes_);
  out.reversed_ = reversed_;
  return out;
}

NoiseField build_noise_field(const Box& box, double h, double horizon, double dt, const SeedStream& stream,
                             std::size_t max_bytes) {
  return NoiseField(box, h, horizon, dt, stream, max_bytes);
}

namespace {

// Visits the lattice cells strictly within distance R of w as
// f(squared distance, cell code, index). Rows along the last axis are clipped
// to the ball analytically, and codes are advanced incrementally along a row.
template <typename F>
void for_each_cell_near(const Eigen::Ref<const Eigen::VectorXd>& w, double h, double radius,
                        std::vector<std::int64_t>& index, F&& f) {
  const int d = static_cast<int>(w.size());
  require(d <= 8, "lattice traversal supports d <= 8");
  const int last = d - 1;
  std::int64_t lo[8], hi[8];
  for (int a = 0; a < last; ++a) {
    lo[a] = static_cast<std::int64_t>(std::ceil((w[a] - radius) / h));
    hi[a] = static_cast<std::int64_t>(std::floor((w[a] + radius) / h));
    if (lo[a] > hi[a]) return;
  }
  const double r2max = radius * radius;
  const bool packed = d <= 3;
  index.assign(lo, lo + last);
  index.push_back(0);
  for (;;) {
    double outer = 0.0;
    for (int a = 0; a < last; ++a) {
      const double delta = h * static_cast<double>(index[a]) - w[a];
      outer += delta * delta;
    }
    if (outer < r2max) {
      const double reach = std::sqrt(r2max - outer);
      std::int64_t i = static_cast<std::int64_t>(std::ceil((w[last] - reach) / h));
      const auto i_end = static_cast<std::int64_t>(std::floor((w[last] + reach) / h));
      if (i <= i_end) {
        index[last] = i;
        std::uint64_t code = NoiseField::cell_code(index);
        for (; i <= i_end; ++i) {
          const double delta = h * static_cast<double>(i) - w[last];
          const double r2 = outer + delta * delta;
          index[last] = i;
          if (!packed) code = NoiseField::cell_code(index);
          if (r2 < r2max) f(r2, code, index);
          if (packed) ++code;
        }
      }
    }
    int a = last - 1;
    while (a >= 0) {
      if (++index[a] <= hi[a]) break;
      index[a] = lo[a];
      --a;
    }
    if (a < 0) return;
  }
}

Eigen::Index step_ratio(const PathD& path, const NoiseField& field) {
  const double ratio = path.dt / field.dt();
  const double rounded = std::round(ratio);
  require(rounded >= 1 && std::abs(ratio - rounded) <= 1e-9 * ratio,
          "path step must be a positive integer multiple of the field step");
  return static_cast<Eigen::Index>(rounded);
}

}  // namespace

std::vector<std::vector<WienerIntegralSample>> wiener_integral_prefixes(
    std::span<const NoiseField* const> fields, const PathD& path, const MollifierD& m,
    std::span<const Eigen::Index> prefix_steps) {
  require(!fields.empty(), "wiener_integral needs at least one field");
  require(!prefix_steps.empty(), "wiener_integral needs at least one horizon");
  const NoiseField& geometry = *fields.front();
  for (const NoiseField* f : fields)
    require(f->dim() == geometry.dim() && f->spacing() == geometry.spacing() && f->dt() == geometry.dt(),
            "fields must share spacing and time step");
  require(path.dim == geometry.dim(), "path and field dimensions differ");
  require(m.dim() == geometry.dim(), "mollifier and field dimensions differ");
  require(std::is_sorted(prefix_steps.begin(), prefix_steps.end()) && prefix_steps.front() >= 1,
          "prefix horizons must be increasing");
  const Eigen::Index ratio = step_ratio(path, geometry);
  const Eigen::Index total = prefix_steps.back();
  for (const NoiseField* f : fields) require(total <= f->steps(), "horizon exceeds the field");
  require(total <= path.steps() * ratio, "horizon exceeds the path");

  const double h = geometry.spacing();
  const double radius = m.truncation_radius();
  const double sd = std::sqrt(geometry.cell_variance());
  const std::size_t nf = fields.size();
  std::vector<double> acc(nf, 0.0);
  std::vector<std::uint64_t> keys(nf);
  double var = 0.0;
  std::vector<std::vector<WienerIntegralSample>> out(nf);
  std::vector<std::int64_t> index;
  std::size_t next_prefix = 0;

  for (Eigen::Index k = 0; k < total; ++k) {
    const auto w = path.positions.col(k / ratio);
    for (std::size_t f = 0; f < nf; ++f) {
      if (!fields[f]->box().contains(w, radius)) {
        std::ostringstream msg;
        msg << "path leaves the field box (with mollifier margin) at t = " << double(k) * geometry.dt();
        throw CoverageError(msg.str(), double(k) * geometry.dt());
      }
      keys[f] = fields[f]->step_key(k);
    }
    for_each_cell_near(w, h, radius, index, [&](double r2, std::uint64_t code, const std::vector<std::int64_t>&) {
      const double phi = m.radial_squared(r2);
      if (phi == 0.0) return;
      var += phi * phi;
      for (std::size_t f = 0; f < nf; ++f) acc[f] += phi * NoiseField::increment_from(keys[f], code, sd);
    });
    while (next_prefix < prefix_steps.size() && prefix_steps[next_prefix] == k + 1) {
      for (std::size_t f = 0; f < nf; ++f)
        out[f].push_back({acc[f], var * geometry.cell_variance(), double(k + 1) * geometry.dt()});
      ++next_prefix;
    }
  }
  return out;
}

WienerIntegralSample wiener_integral(const NoiseField& field, const PathD& path, const MollifierD& m) {
  const NoiseField* fields[] = {&field};
  const Eigen::Index n = std::min(field.steps(), path.steps() * step_ratio(path, field));
  const Eigen::Index prefix[] = {n};
  return wiener_integral_prefixes(fields, path, m, prefix).front().front();
}

namespace {

// sum_k sum_cells phi(x - a_k) phi(x - b_k) over steps where the two paths are
// within twice the truncation radius, for every b in others.
void accumulate_cross(const PathD& a, std::span<const PathD> others, std::span<double> out,
                      const NoiseField& geometry, const MollifierD& m, bool include_self, double& self) {
  const Eigen::Index ratio = step_ratio(a, geometry);
  const Eigen::Index total = a.steps() * ratio;
  const double radius = m.truncation_radius();
  const double r2max = radius * radius;
  const double h = geometry.spacing();
  const int d = geometry.dim();
  std::vector<std::int64_t> index;
  std::vector<std::size_t> near;
  Eigen::VectorXd x(d);
  for (Eigen::Index k = 0; k < total; ++k) {
    const Eigen::Index j = k / ratio;
    const auto wa = a.positions.col(j);
    near.clear();
    for (std::size_t b = 0; b < others.size(); ++b)
      if ((others[b].positions.col(j) - wa).squaredNorm() < 4 * r2max) near.push_back(b);
    if (near.empty() && !include_self) continue;
    for_each_cell_near(wa, h, radius, index, [&](double r2, std::uint64_t, const std::vector<std::int64_t>& idx) {
      const double pa = m.radial_squared(r2);
      if (pa == 0.0) return;
      if (include_self) self += pa * pa;
      if (near.empty()) return;
      for (int c = 0; c < d; ++c) x[c] = h * double(idx[c]);
      for (std::size_t b : near) {
        const double rb = (x - others[b].positions.col(j)).squaredNorm();
        if (rb < r2max) out[b] += pa * m.radial_squared(rb);
      }
    });
  }
}

}  // namespace

Eigen::MatrixXd lattice_covariance(std::span<const PathD> paths, const NoiseField& geometry,
                                   const MollifierD& m) {
  require(!paths.empty(), "lattice_covariance needs at least one path");
  const auto n = static_cast<Eigen::Index>(paths.size());
  for (const auto& p : paths) require_shared_grid(p, paths.front());
  Eigen::MatrixXd sigma = Eigen::MatrixXd::Zero(n, n);
  std::vector<double> row(paths.size());
  for (Eigen::Index a = 0; a < n; ++a) {
    std::fill(row.begin(), row.end(), 0.0);
    double self = 0.0;
    const auto rest = paths.subspan(static_cast<std::size_t>(a) + 1);
    accumulate_cross(paths[a], rest, std::span(row).first(rest.size()), geometry, m, true, self);
    sigma(a, a) = self;
    for (std::size_t b = 0; b < rest.size(); ++b) sigma(a, a + 1 + static_cast<Eigen::Index>(b)) = row[b];
  }
  sigma *= geometry.cell_variance();
  return sigma.selfadjointView<Eigen::Upper>();
}

Eigen::VectorXd lattice_cross_covariance(const PathD& path, std::span<const PathD> others,
                                         const NoiseField& geometry, const MollifierD& m) {
  for (const auto& p : others) require_shared_grid(p, path);
  std::vector<double> row(others.size(), 0.0);
  double self = 0.0;
  accumulate_cross(path, others, row, geometry, m, false, self);
  return Eigen::Map<Eigen::VectorXd>(row.data(), static_cast<Eigen::Index>(row.size())) * geometry.cell_variance();
}

Eigen::MatrixXd overlap_matrix(std::span<const PathD> paths, const KernelD& k) {
  require(!paths.empty(), "overlap_matrix needs at least one path");
  const auto n = static_cast<Eigen::Index>(paths.size());
  Eigen::MatrixXd sigma(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    sigma(i, i) = overlap(paths[i], paths[i], k);
    for (Eigen::Index j = i + 1; j < n; ++j) sigma(i, j) = sigma(j, i) = overlap(paths[i], paths[j], k);
  }
  return sigma;
}

CovarianceFactor factor_covariance(const Eigen::MatrixXd& sigma, double scale) {
  require(sigma.rows() == sigma.cols() && sigma.rows() >= 1, "covariance must be square");
  const Eigen::Index n = sigma.rows();
  double jitter = 0.0;
  for (int attempt = 0; attempt <= 7; ++attempt) {
    Eigen::LLT<Eigen::MatrixXd> llt(sigma + jitter * Eigen::MatrixXd::Identity(n, n));
    if (llt.info() == Eigen::Success) return {llt.matrixL(), jitter};
    jitter = attempt == 0 ? 1e-12 * scale : 2 * jitter;
  }
  const double min_eig = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(sigma, Eigen::EigenvaluesOnly)
                             .eigenvalues()
                             .minCoeff();
  std::ostringstream msg;
  msg << "covariance factorization failed after maximal jitter " << jitter << "; minimum eigenvalue "
      << min_eig;
  throw NumericalError(msg.str());
}

Eigen::VectorXd gaussian_draw(const CovarianceFactor& factor, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Eigen::VectorXd z(factor.lower.rows());
  for (auto& v : z) v = normal(rng);
  return factor.lower.triangularView<Eigen::Lower>() * z;
}

ReplicaSample replica_gaussian_sample(std::span<const PathD> paths, const KernelD& k, const SeedStream& stream) {
  const Eigen::MatrixXd sigma = overlap_matrix(paths, k);
  const auto factor = factor_covariance(sigma, k.at_zero() * paths.front().horizon);
  auto rng = stream.engine();
  return {gaussian_draw(factor, rng), factor.jitter};
}

}  // namespace polymerlab
