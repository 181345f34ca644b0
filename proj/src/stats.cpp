#include "polymerlab/stats.hpp"

#include <boost/math/distributions/binomial.hpp>
#include <boost/math/distributions/normal.hpp>

namespace polymerlab::stats {

MeanEstimate mean_estimate(std::span<const double> xs) {
  MeanEstimate e;
  e.count = xs.size();
  if (xs.empty()) return e;
  CompensatedSum s;
  for (double x : xs) s.add(x);
  e.mean = s.value() / static_cast<double>(xs.size());
  if (xs.size() < 2) return e;
  CompensatedSum ss;
  for (double x : xs) ss.add((x - e.mean) * (x - e.mean));
  const double var = ss.value() / static_cast<double>(xs.size() - 1);
  e.stderr_ = std::sqrt(var / static_cast<double>(xs.size()));
  return e;
}

double log_mean_exp(std::span<const double> log_terms) {
  if (log_terms.empty()) return -std::numeric_limits<double>::infinity();
  const double top = *std::max_element(log_terms.begin(), log_terms.end());
  if (!std::isfinite(top)) return top;
  CompensatedSum s;
  for (double x : log_terms) s.add(std::exp(x - top));
  return top + std::log(s.value() / static_cast<double>(log_terms.size()));
}

double quantile(std::vector<double> xs, double p) {
  require(!xs.empty(), "quantile of empty sample");
  std::sort(xs.begin(), xs.end());
  const double pos = p * static_cast<double>(xs.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, xs.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return xs[lo] + frac * (xs[hi] - xs[lo]);
}

double quantile_stderr(std::vector<double> xs, double p) {
  require(xs.size() >= 2, "quantile_stderr needs two or more samples");
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  const double half = 1.96 * std::sqrt(n * p * (1 - p));
  const auto clamp_index = [&](double v) {
    return static_cast<std::size_t>(std::clamp(v, 0.0, n - 1));
  };
  const std::size_t lo = clamp_index(std::floor(n * p - half));
  const std::size_t hi = clamp_index(std::ceil(n * p + half));
  return (xs[hi] - xs[lo]) / (2 * 1.96);
}

namespace {
double kolmogorov_survival(double lambda) {
  if (lambda < 1e-3) return 1.0;
  double sum = 0.0;
  for (int k = 1; k <= 200; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    sum += (k % 2 == 1 ? 2.0 : -2.0) * term;
    if (term < 1e-16) break;
  }
  return std::clamp(sum, 0.0, 1.0);
}
}  // namespace

KsResult ks_two_sample(std::vector<double> a, std::vector<double> b) {
  require(!a.empty() && !b.empty(), "ks_two_sample needs non-empty samples");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  const double ne = std::sqrt(na * nb / (na + nb));
  return {d, kolmogorov_survival((ne + 0.12 + 0.11 / ne) * d)};
}

LinearFit linear_fit(std::span<const double> x, std::span<const double> y, bool robust) {
  require(x.size() == y.size() && x.size() >= 3, "linear_fit needs matching samples, n >= 3");
  const std::size_t n = x.size();
  const double nd = static_cast<double>(n);
  const MeanEstimate mx = mean_estimate(x);
  const MeanEstimate my = mean_estimate(y);
  CompensatedSum sxx, sxy, syy;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx.mean, dy = y[i] - my.mean;
    sxx.add(dx * dx);
    sxy.add(dx * dy);
    syy.add(dy * dy);
  }
  LinearFit fit;
  fit.count = n;
  require(sxx.value() > 0, "linear_fit: regressor has zero variance");
  fit.slope = sxy.value() / sxx.value();
  fit.intercept = my.mean - fit.slope * mx.mean;
  CompensatedSum rss;
  std::vector<double> resid(n);
  for (std::size_t i = 0; i < n; ++i) {
    resid[i] = y[i] - fit.intercept - fit.slope * x[i];
    rss.add(resid[i] * resid[i]);
  }
  fit.r_squared = syy.value() > 0 ? 1.0 - rss.value() / syy.value() : 1.0;
  if (!robust) {
    const double s2 = rss.value() / (nd - 2);
    fit.slope_stderr = std::sqrt(s2 / sxx.value());
    fit.intercept_stderr = std::sqrt(s2 * (1.0 / nd + mx.mean * mx.mean / sxx.value()));
    return fit;
  }
  // HC1 sandwich: (X'X)^{-1} X' diag(e^2) X (X'X)^{-1} * n/(n-2).
  Eigen::Matrix2d xtx = Eigen::Matrix2d::Zero(), meat = Eigen::Matrix2d::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Vector2d row(1.0, x[i]);
    xtx += row * row.transpose();
    meat += resid[i] * resid[i] * row * row.transpose();
  }
  const Eigen::Matrix2d inv = xtx.inverse();
  const Eigen::Matrix2d cov = inv * meat * inv * (nd / (nd - 2));
  fit.intercept_stderr = std::sqrt(cov(0, 0));
  fit.slope_stderr = std::sqrt(cov(1, 1));
  return fit;
}

LinearFit weighted_linear_fit(std::span<const double> x, std::span<const double> y,
                              std::span<const double> w) {
  require(x.size() == y.size() && y.size() == w.size() && x.size() >= 2,
          "weighted_linear_fit needs matching samples, n >= 2");
  double sw = 0, swx = 0, swy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sw += w[i];
    swx += w[i] * x[i];
    swy += w[i] * y[i];
  }
  const double xbar = swx / sw, ybar = swy / sw;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += w[i] * (x[i] - xbar) * (x[i] - xbar);
    sxy += w[i] * (x[i] - xbar) * (y[i] - ybar);
    syy += w[i] * (y[i] - ybar) * (y[i] - ybar);
  }
  require(sxx > 0, "weighted_linear_fit: regressor has zero variance");
  LinearFit fit;
  fit.count = x.size();
  fit.slope = sxy / sxx;
  fit.intercept = ybar - fit.slope * xbar;
  fit.slope_stderr = std::sqrt(1.0 / sxx);
  fit.intercept_stderr = std::sqrt(1.0 / sw + xbar * xbar / sxx);
  double rss = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = y[i] - fit.intercept - fit.slope * x[i];
    rss += w[i] * r * r;
  }
  fit.r_squared = syy > 0 ? 1.0 - rss / syy : 1.0;
  return fit;
}

double normal_cdf(double z) { return boost::math::cdf(boost::math::normal(), z); }

double normal_quantile(double p) { return boost::math::quantile(boost::math::normal(), p); }

double sign_test_p_value(std::size_t successes, std::size_t trials) {
  if (trials == 0) return 1.0;
  if (successes == 0) return 1.0;
  const boost::math::binomial_distribution<> bin(static_cast<double>(trials), 0.5);
  return boost::math::cdf(boost::math::complement(bin, static_cast<double>(successes - 1)));
}

const char* to_string(Trend t) {
  switch (t) {
    case Trend::increasing: return "increasing";
    case Trend::decreasing: return "decreasing";
    case Trend::flat: return "flat";
    case Trend::mixed: return "mixed";
  }
  return "mixed";
}

TrendTest monotone_trend(std::span<const MeanEstimate> points, double level) {
  require(points.size() >= 2, "monotone_trend needs two or more points");
  const double one_sided = normal_quantile(1.0 - level);
  const double two_sided = normal_quantile(1.0 - level / 2);
  TrendTest out;
  bool all_up = true, all_down = true, none = true;
  for (std::size_t k = 0; k + 1 < points.size(); ++k) {
    const double diff = points[k + 1].mean - points[k].mean;
    const double se = std::hypot(points[k].stderr_, points[k + 1].stderr_);
    double z;
    if (se > 0)
      z = diff / se;
    else
      z = diff == 0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), diff);
    out.z_scores.push_back(z);
    all_up = all_up && z > one_sided;
    all_down = all_down && z < -one_sided;
    none = none && std::abs(z) < two_sided;
  }
  out.trend = all_up ? Trend::increasing : all_down ? Trend::decreasing : none ? Trend::flat : Trend::mixed;
  return out;
}

}  // namespace polymerlab::stats
