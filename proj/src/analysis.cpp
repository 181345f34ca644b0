#include "polymerlab/analysis.hpp"

#include "polymerlab/parallel.hpp"

#include <boost/math/quadrature/gauss.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace polymerlab {

namespace {

// Trapezoid rule for int_0^T V(scale * x_s) ds along a stored path, with a
// linearly interpolated last partial step when T is off the grid.
double path_occupation(const KernelD& k, const PathD& path, double scale, double horizon) {
  const double reach = k.effective_radius();
  auto value = [&](Eigen::Index j) {
    const double r = scale * path.positions.col(j).norm();
    return r >= reach ? 0.0 : k.radial(r);
  };
  const double steps = horizon / path.dt;
  const auto full = std::min<Eigen::Index>(path.steps(), static_cast<Eigen::Index>(std::floor(steps + 1e-9)));
  double total = 0.0;
  double prev = value(0);
  for (Eigen::Index j = 1; j <= full; ++j) {
    const double cur = value(j);
    total += 0.5 * (prev + cur);
    prev = cur;
  }
  total *= path.dt;
  const double theta = steps - static_cast<double>(full);
  if (theta > 1e-9 && full < path.steps()) {
    const double next = value(full + 1);
    const double mid = prev + theta * (next - prev);
    total += 0.5 * theta * path.dt * (prev + mid);
  }
  return total;
}

// Running trapezoid integrals read off at each grid index in `marks`.
std::vector<double> path_occupation_prefixes(const KernelD& k, const PathD& path, double scale,
                                             std::span<const Eigen::Index> marks) {
  const double reach = k.effective_radius();
  auto value = [&](Eigen::Index j) {
    const double r = scale * path.positions.col(j).norm();
    return r >= reach ? 0.0 : k.radial(r);
  };
  std::vector<double> out;
  out.reserve(marks.size());
  double total = 0.0, prev = value(0);
  Eigen::Index j = 0;
  for (Eigen::Index m : marks) {
    for (; j < m; ++j) {
      const double cur = value(j + 1);
      total += 0.5 * (prev + cur);
      prev = cur;
    }
    out.push_back(total * path.dt);
  }
  return out;
}

void require_transient(int d, const char* what) {
  if (d < 3) throw ArgumentError(std::string(what) + ": dimension must be >= 3 (transience)");
}

// Grid horizon covering T on steps of dt.
double covering_horizon(double horizon, double dt) {
  return std::ceil(horizon / dt - 1e-9) * dt;
}

}  // namespace

stats::MeanEstimate second_moment_formula(const KernelD& k, double beta, double horizon, std::size_t reps,
                                          const SeedStream& stream, double dt) {
  const double hs[] = {horizon};
  return second_moment_profile(k, beta, hs, reps, stream, dt).front();
}

std::vector<stats::MeanEstimate> second_moment_profile(const KernelD& k, double beta,
                                                       std::span<const double> horizons, std::size_t reps,
                                                       const SeedStream& stream, double dt) {
  require(beta >= 0, "beta must be nonnegative");
  require(!horizons.empty(), "second_moment_profile needs a horizon");
  require(reps >= 2, "second_moment_profile needs two or more repetitions");
  require(std::is_sorted(horizons.begin(), horizons.end()), "horizons must be increasing");
  std::vector<Eigen::Index> marks;
  for (double t : horizons) marks.push_back(step_count(t, dt));
  const double top = horizons.back();
  const double b2 = beta * beta;
  std::vector<std::vector<double>> rows(horizons.size(), std::vector<double>(reps));
  parallel_for(reps, [&](std::size_t r) {
    const auto w = sample_path(k.dim(), top, dt, stream.child("path", r));
    const auto prefix = path_occupation_prefixes(k, w, std::numbers::sqrt2, marks);
    for (std::size_t j = 0; j < prefix.size(); ++j) rows[j][r] = std::exp(b2 * prefix[j]);
  });
  std::vector<stats::MeanEstimate> out;
  for (const auto& row : rows) out.push_back(stats::mean_estimate(row));
  return out;
}

double green_potential(const KernelD& k, double z_norm) {
  require_transient(k.dim(), "green_potential");
  require(z_norm >= 0 && std::isfinite(z_norm), "green_potential: |z| must be finite");
  // Newton's shell theorem: the average of |y - z|^{2-d} over the sphere |y| = r
  // is max(r, |z|)^{2-d}, so the singularity at y = z never enters.
  const int d = k.dim();
  const double top = k.effective_radius();
  auto integrand = [&](double r) {
    return std::pow(r, d - 1) * k.radial(r) * std::pow(std::max(r, z_norm), 2 - d);
  };
  double total = 0.0;
  if (z_norm > 0 && z_norm < top) {
    total = detail::panel_integrate(integrand, 0.0, z_norm, 64) + detail::panel_integrate(integrand, z_norm, top, 64);
  } else {
    total = detail::panel_integrate(integrand, 0.0, top, 128);
  }
  return green_constant<double>(d) * unit_sphere_area<double>(d) * total;
}

stats::MeanEstimate occupation_estimate(const KernelD& k, const Eigen::VectorXd& z, double horizon,
                                        std::size_t reps, const SeedStream& stream, double dt,
                                        bool tail_correction) {
  require_transient(k.dim(), "occupation_estimate");
  require(z.size() == k.dim(), "occupation_estimate: point dimension does not match kernel");
  require(reps >= 2, "occupation_estimate needs two or more repetitions");
  std::vector<double> xs(reps);
  parallel_for(reps, [&](std::size_t r) {
    const auto w = sample_path<double>(k.dim(), z, horizon, dt, stream.child("path", r));
    xs[r] = path_occupation(k, w, 1.0, horizon);
  });
  auto e = stats::mean_estimate(xs);
  if (tail_correction) {
    const double d = k.dim();
    e.mean += kernel_integral(k) * std::pow(2 * std::numbers::pi, -d / 2) * std::pow(horizon, 1 - d / 2) / (d / 2 - 1);
  }
  return e;
}

stats::MeanEstimate exponential_occupation(const KernelD& k, double beta, double horizon, std::size_t reps,
                                           const SeedStream& stream, double dt) {
  require(beta >= 0, "beta must be nonnegative");
  require(reps >= 2, "exponential_occupation needs two or more repetitions");
  std::vector<double> xs(reps);
  parallel_for(reps, [&](std::size_t r) {
    const auto w = sample_path(k.dim(), horizon, dt, stream.child("path", r));
    xs[r] = std::exp(beta * beta * path_occupation(k, w, 1.0, horizon));
  });
  return stats::mean_estimate(xs);
}

namespace {

// sup_z G(z), taken at the origin and verified on a radial grid.
std::pair<double, bool> green_supremum(const KernelD& k) {
  const double g0 = green_potential(k, 0.0);
  const double top = 2 * std::min(k.effective_radius(), 8.0 * k.eps());
  double best = g0;
  for (int i = 1; i <= 64; ++i) best = std::max(best, green_potential(k, top * i / 64));
  return {best, best <= g0 * (1 + 1e-12)};
}

}  // namespace

MomentBound portenko_eta(double beta, const KernelD& k) {
  require_transient(k.dim(), "portenko_eta");
  require(beta >= 0, "beta must be nonnegative");
  MomentBound out;
  out.beta = beta;
  if (beta == 0) return out;
  const auto [sup, at_origin] = green_supremum(k);
  out.sup_at_origin = at_origin;
  out.eta = beta * beta * sup;
  out.bound = out.eta < 1 ? 1 / (1 - out.eta) : std::numeric_limits<double>::infinity();
  return out;
}

double beta_star_bound(const KernelD& k, double tol) {
  require(tol > 0, "tolerance must be positive");
  require_transient(k.dim(), "beta_star_bound");
  const double sup = green_supremum(k).first;
  auto eta = [&](double b) { return 0.5 * b * b * sup; };
  double lo = 0.0, hi = 1.0;
  while (eta(hi) < 1) hi *= 2;
  while (hi - lo > tol) {
    const double mid = 0.5 * (lo + hi);
    (eta(mid) < 1 ? lo : hi) = mid;
  }
  return lo;
}

double GaussianMixture::integral() const {
  double s = 0.0;
  for (double a : weights) s += a;
  return s;
}

double GaussianMixture::autocorrelation(double r, int d) const {
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i)
    for (std::size_t j = 0; j < weights.size(); ++j) {
      const double v = widths[i] * widths[i] + widths[j] * widths[j];
      s += weights[i] * weights[j] * std::pow(2 * std::numbers::pi * v, -0.5 * d) * std::exp(-r * r / (2 * v));
    }
  return s;
}

std::vector<stats::MeanEstimate> smoothed_variance(const GaussianMixture& f, const KernelD& k, double beta,
                                                   std::span<const double> eps_grid, std::size_t reps,
                                                   const SeedStream& stream, double dt, int nodes) {
  require_transient(k.dim(), "smoothed_variance");
  require(beta >= 0, "beta must be nonnegative");
  require(!f.weights.empty() && f.weights.size() == f.widths.size(), "mixture weights and widths must match");
  for (double s : f.widths) require(s > 0, "mixture widths must be positive");
  require(reps >= 2, "smoothed_variance needs two or more repetitions");
  require(nodes >= 2, "smoothed_variance needs two or more quadrature nodes");
  const double sup = green_supremum(k).first;
  const double eta = 0.5 * beta * beta * sup;
  if (eta >= 1) {
    std::ostringstream msg;
    msg << "smoothed_variance: beta = " << beta << " gives eta = (beta^2/2) sup G = " << eta
        << " >= 1; the exponential moment is not controlled";
    throw ArgumentError(msg.str());
  }
  const int d = k.dim();
  double widest = 0.0;
  for (double s : f.widths) widest = std::max(widest, s);
  const double r_max = 8.0 * std::numbers::sqrt2 * widest;

  // Gauss-Legendre nodes on [0, r_max] from the 20-point rule on equal panels.
  using rule = boost::math::quadrature::gauss<double, 20>;
  const int panels = std::max(1, (nodes + 19) / 20);
  std::vector<double> rs, ws;
  for (int p = 0; p < panels; ++p) {
    const double a = r_max * p / panels, b = r_max * (p + 1) / panels, c = 0.5 * (a + b), h = 0.5 * (b - a);
    const auto& x = rule::abscissa();
    const auto& w = rule::weights();
    for (std::size_t i = 0; i < x.size(); ++i) {
      for (double sign : {-1.0, 1.0}) {
        if (x[i] == 0 && sign < 0) continue;
        const double r = c + sign * h * x[i];
        rs.push_back(r);
        ws.push_back(h * w[i] * unit_sphere_area<double>(d) * std::pow(r, d - 1) * f.autocorrelation(r, d));
      }
    }
  }

  std::vector<stats::MeanEstimate> out;
  for (std::size_t e = 0; e < eps_grid.size(); ++e) {
    const double eps = eps_grid[e];
    require(eps > 0, "eps must be positive");
    if (beta == 0) {
      out.push_back({0.0, 0.0, reps});
      continue;
    }
    const double horizon = 2 / (eps * eps);
    const double grid_horizon = covering_horizon(horizon, dt);
    const double c = 0.5 * beta * beta;
    std::vector<double> xs(reps);
    const auto es = stream.child("eps", e);
    parallel_for(reps, [&](std::size_t r) {
      // One Brownian increment path shared by every start point.
      auto w = sample_path(d, grid_horizon, dt, es.child("path", r));
      const PointMatrix<double> base = w.positions;
      double total = 0.0;
      for (std::size_t n = 0; n < rs.size(); ++n) {
        w.positions = base;
        w.positions.row(0).array() += rs[n] / eps;
        total += ws[n] * std::expm1(c * path_occupation(k, w, 1.0, horizon));
      }
      xs[r] = total;
    });
    out.push_back(stats::mean_estimate(xs));
  }
  return out;
}

NonCauchyGap non_cauchy_gap(const MollifierD& m, double beta, double eps, std::size_t reps,
                            const SeedStream& stream, double delta_ratio, double dt) {
  if (m.kind() != MollifierKind::gaussian)
    throw ArgumentError("non_cauchy_gap: requires the gaussian mollifier kind (closed-form reduction)");
  require_transient(m.dim(), "non_cauchy_gap");
  require(beta >= 0, "beta must be nonnegative");
  require(eps > 0, "eps must be positive");
  require(delta_ratio > 0 && delta_ratio < 1, "delta_ratio must lie in (0, 1)");
  require(reps >= 2, "non_cauchy_gap needs two or more repetitions");
  const KernelD k(m.rescaled(1.0));
  const int d = m.dim();
  const double delta = delta_ratio * eps;
  auto eta = [d](double x) { return std::pow(x, 0.5 * (d - 2)); };
  const double joint = std::sqrt(eps * eps + delta * delta);
  const double coupling = eta(eps) * eta(delta) / (eta(joint) * eta(joint));
  const double t_matched = 1 / (eps * eps), t_mixed = 1 / (joint * joint);
  const double b2 = beta * beta;
  std::vector<double> a(reps), b(reps), gap(reps);
  parallel_for(reps, [&](std::size_t r) {
    // W - W' has the law of sqrt(2) W.
    const auto w = sample_path(d, covering_horizon(t_matched, dt), dt, stream.child("path", r));
    a[r] = std::exp(b2 * path_occupation(k, w, std::numbers::sqrt2, t_matched));
    b[r] = std::exp(b2 * coupling * path_occupation(k, w, std::numbers::sqrt2, t_mixed));
    gap[r] = a[r] - b[r];
  });
  return {stats::mean_estimate(a), stats::mean_estimate(b), stats::mean_estimate(gap), delta};
}

const char* to_string(Verdict v) {
  switch (v) {
    case Verdict::weak_like: return "weak-like";
    case Verdict::strong_like: return "strong-like";
    case Verdict::undetermined: return "undetermined";
  }
  return "undetermined";
}

namespace {

// p-value attached to a trend classification: the weakest step for a
// monotone call, the strongest step against flatness otherwise.
double trend_p_value(const stats::TrendTest& t) {
  double p_up = 0.0, p_down = 0.0, p_flat = 1.0;
  for (double z : t.z_scores) {
    p_up = std::max(p_up, 1 - stats::normal_cdf(z));
    p_down = std::max(p_down, stats::normal_cdf(z));
    p_flat = std::min(p_flat, 2 * (1 - stats::normal_cdf(std::abs(z))));
  }
  switch (t.trend) {
    case stats::Trend::increasing: return p_up;
    case stats::Trend::decreasing: return p_down;
    default: return p_flat;
  }
}

}  // namespace

DisorderVerdict ui_diagnostic(std::span<const std::vector<double>> plain_log,
                              std::span<const std::vector<double>> biased_log, const UiOptions& options) {
  require(biased_log.size() >= 3, "ui_diagnostic needs three or more horizons");
  require(plain_log.size() == biased_log.size(), "ui_diagnostic: plain and size-biased horizon counts differ");
  require(!options.alphas.empty(), "ui_diagnostic needs an alpha ladder");
  require(options.level > 0 && options.level < 1, "significance level must lie in (0, 1)");
  for (std::size_t j = 0; j < biased_log.size(); ++j)
    require(biased_log[j].size() >= 2 && plain_log[j].size() >= 2, "ui_diagnostic needs two or more samples per horizon");

  DisorderVerdict out;
  bool all_to_one = true, all_flat_below_one = true;
  for (double alpha : options.alphas) {
    const ConcaveTestFunction f(alpha);
    std::vector<stats::MeanEstimate> points;
    bool saturated = true;
    for (const auto& xs : biased_log) {
      std::vector<double> v;
      v.reserve(xs.size());
      for (double x : xs) v.push_back(f.of_log(x));
      saturated = saturated && std::all_of(v.begin(), v.end(), [](double y) { return y == 1.0; });
      points.push_back(stats::mean_estimate(v));
    }
    const auto trend = stats::monotone_trend(points, options.level);
    const bool to_one = trend.trend == stats::Trend::increasing || saturated;
    const bool flat_below = trend.trend == stats::Trend::flat && !saturated;
    all_to_one = all_to_one && to_one;
    all_flat_below_one = all_flat_below_one && flat_below;
    std::ostringstream name;
    name << "mean f_alpha(Z) alpha=" << alpha;
    out.evidence.push_back({name.str(), saturated ? "saturated" : stats::to_string(trend.trend),
                            points.back().mean, saturated ? 0.0 : trend_p_value(trend)});
  }

  const double m = options.tail_threshold > 0
                       ? options.tail_threshold
                       : *std::max_element(options.alphas.begin(), options.alphas.end());
  std::vector<stats::MeanEstimate> tail;
  for (const auto& xs : biased_log) {
    std::vector<double> v;
    for (double x : xs) v.push_back(x > std::log(m) ? 1.0 : 0.0);
    tail.push_back(stats::mean_estimate(v));
  }
  const auto tail_trend = stats::monotone_trend(tail, options.level);
  {
    std::ostringstream name;
    name << "size-biased tail mass m=" << m;
    out.evidence.push_back({name.str(), stats::to_string(tail_trend.trend), tail.back().mean, trend_p_value(tail_trend)});
  }

  std::vector<stats::MeanEstimate> median;
  for (const auto& xs : plain_log)
    median.push_back({stats::quantile(xs, 0.5), stats::quantile_stderr(xs, 0.5), xs.size()});
  const auto median_trend = stats::monotone_trend(median, options.level);
  out.evidence.push_back({"plain log-median", stats::to_string(median_trend.trend), median.back().mean,
                          trend_p_value(median_trend)});

  if (all_to_one && median_trend.trend == stats::Trend::decreasing)
    out.verdict = Verdict::strong_like;
  else if (all_flat_below_one && tail_trend.trend == stats::Trend::flat && median_trend.trend == stats::Trend::flat)
    out.verdict = Verdict::weak_like;
  return out;
}

}  // namespace polymerlab
