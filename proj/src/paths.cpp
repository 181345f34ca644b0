#include "polymerlab/paths.hpp"

#include "polymerlab/parallel.hpp"
#include "polymerlab/stats.hpp"

#include <cmath>
#include <limits>

namespace polymerlab {

void SurvivalCurve::export_csv(std::ostream& os) const {
  os << "t,survival,stderr\n";
  os.precision(17);
  for (std::size_t i = 0; i < times.size(); ++i)
    os << times[i] << ',' << survival[i] << ',' << stderr_[i] << '\n';
}

namespace {

void validate_grid(std::span<const double> t_grid) {
  require(!t_grid.empty(), "time grid must not be empty");
  for (std::size_t i = 0; i < t_grid.size(); ++i) {
    require(t_grid[i] >= 0, "time grid must be nonnegative");
    if (i > 0) require(t_grid[i] > t_grid[i - 1], "time grid must be increasing");
  }
}

SurvivalCurve curve_from_exits(std::span<const double> exits, std::span<const double> t_grid, double dt) {
  SurvivalCurve c;
  c.reps = exits.size();
  c.dt = dt;
  const double n = static_cast<double>(exits.size());
  for (double t : t_grid) {
    std::size_t alive = 0;
    for (double e : exits) alive += e > t + 1e-12 * dt ? 1 : 0;
    const double s = static_cast<double>(alive) / n;
    c.times.push_back(t);
    c.survival.push_back(s);
    c.stderr_.push_back(std::sqrt(s * (1 - s) / n));
  }
  return c;
}

}  // namespace

std::vector<SurvivalCurve> exit_time_survival_levels(int d, double radius, std::span<const double> t_grid,
                                                     std::size_t reps, const SeedStream& stream,
                                                     double coarse_dt, int levels) {
  require(d >= 1, "dimension must be >= 1");
  require(radius > 0, "exit radius must be positive");
  require(reps >= 1000, "exit_time_survival needs at least 1000 replicas");
  require(coarse_dt > 0 && levels >= 1 && levels <= 12, "bad refinement levels");
  validate_grid(t_grid);
  const double t_max = t_grid.back();
  const int stride_top = 1 << (levels - 1);
  const double fine_dt = coarse_dt / stride_top;
  const auto max_steps = static_cast<long long>(std::ceil(t_max / fine_dt)) + stride_top;
  const double r2 = radius * radius;
  const double inf = std::numeric_limits<double>::infinity();

  std::vector<std::vector<double>> exits(static_cast<std::size_t>(levels), std::vector<double>(reps, inf));
  parallel_for(reps, [&](std::size_t rep) {
    auto rng = stream.child("exit", rep).engine();
    std::normal_distribution<double> normal(0.0, std::sqrt(fine_dt));
    std::vector<double> x(static_cast<std::size_t>(d), 0.0);
    int pending = levels;
    for (long long j = 1; j <= max_steps && pending > 0; ++j) {
      double q = 0.0;
      for (double& xi : x) {
        xi += normal(rng);
        q += xi * xi;
      }
      if (q < r2) continue;
      for (int level = 0; level < levels; ++level) {
        const long long stride = 1LL << (levels - 1 - level);
        auto& slot = exits[static_cast<std::size_t>(level)][rep];
        if (slot == inf && j % stride == 0) {
          slot = static_cast<double>(j) * fine_dt;
          --pending;
        }
      }
    }
  });

  std::vector<SurvivalCurve> out;
  for (int level = 0; level < levels; ++level)
    out.push_back(curve_from_exits(exits[static_cast<std::size_t>(level)], t_grid, coarse_dt / (1 << level)));
  return out;
}

SurvivalCurve exit_time_survival(int d, double radius, std::span<const double> t_grid, std::size_t reps,
                                 const SeedStream& stream, double dt) {
  return exit_time_survival_levels(d, radius, t_grid, reps, stream, dt, 1).front();
}

DecayFit fit_decay_rate(std::span<const double> times, std::span<const double> survival,
                        std::span<const double> stderr_, double min_r2) {
  require(times.size() == survival.size() && survival.size() == stderr_.size(),
          "fit_decay_rate: mismatched inputs");
  std::vector<double> t, y, w;
  std::vector<std::size_t> index;
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (survival[i] <= 0 || survival[i] >= 1 || stderr_[i] <= 0) continue;
    const double rel = stderr_[i] / survival[i];
    t.push_back(times[i]);
    y.push_back(std::log(survival[i]));
    w.push_back(1.0 / (rel * rel));
    index.push_back(i);
  }
  DecayFit fit;
  if (t.size() < 3) return fit;
  for (std::size_t start = 0; start + 2 <= t.size(); ++start) {
    const std::size_t count = t.size() - start;
    const auto lf = stats::weighted_linear_fit(std::span(t).subspan(start), std::span(y).subspan(start),
                                               std::span(w).subspan(start));
    fit.rate = -lf.slope;
    fit.rate_stderr = lf.slope_stderr;
    fit.intercept = lf.intercept;
    fit.r_squared = lf.r_squared;
    fit.first_index = index[start];
    if (count >= 3 && lf.r_squared >= min_r2) {
      fit.determined = true;
      return fit;
    }
  }
  fit.determined = false;
  return fit;
}

RefinedRate refined_exit_rate(int d, double radius, std::span<const double> t_grid, std::size_t reps,
                              const SeedStream& stream, double coarse_dt, int max_levels, double rel_tol) {
  const auto curves = exit_time_survival_levels(d, radius, t_grid, reps, stream, coarse_dt, max_levels);
  RefinedRate out;
  std::vector<DecayFit> fits;
  for (const auto& c : curves) {
    fits.push_back(fit_decay_rate(c.times, c.survival, c.stderr_));
    out.rates_by_level.push_back(fits.back().rate);
  }
  std::size_t pick = fits.size() - 1;
  for (std::size_t l = 1; l < fits.size(); ++l) {
    if (std::abs(fits[l].rate - fits[l - 1].rate) < rel_tol * std::abs(fits[l].rate)) {
      pick = l;
      out.converged = true;
      break;
    }
  }
  out.fit = fits[pick];
  out.dt = curves[pick].dt;
  return out;
}

void write_path(std::ostream& os, const PathD& path) {
  const std::int32_t dim = path.dim;
  const std::uint64_t count = static_cast<std::uint64_t>(path.positions.cols());
  os.write(reinterpret_cast<const char*>(&dim), sizeof dim);
  os.write(reinterpret_cast<const char*>(&path.dt), sizeof path.dt);
  os.write(reinterpret_cast<const char*>(&path.horizon), sizeof path.horizon);
  os.write(reinterpret_cast<const char*>(&count), sizeof count);
  os.write(reinterpret_cast<const char*>(path.positions.data()),
           static_cast<std::streamsize>(sizeof(double) * path.positions.size()));
}

PathD read_path(std::istream& is) {
  std::int32_t dim = 0;
  std::uint64_t count = 0;
  PathD path;
  is.read(reinterpret_cast<char*>(&dim), sizeof dim);
  is.read(reinterpret_cast<char*>(&path.dt), sizeof path.dt);
  is.read(reinterpret_cast<char*>(&path.horizon), sizeof path.horizon);
  is.read(reinterpret_cast<char*>(&count), sizeof count);
  require(is.good() && dim >= 1 && count >= 1, "read_path: malformed header");
  path.dim = dim;
  path.positions.resize(dim, static_cast<Eigen::Index>(count));
  is.read(reinterpret_cast<char*>(path.positions.data()),
          static_cast<std::streamsize>(sizeof(double) * path.positions.size()));
  require(static_cast<bool>(is), "read_path: truncated coordinate array");
  return path;
}

}  // namespace polymerlab
