#pragma once

#include "polymerlab/core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

namespace polymerlab::stats {

/// Neumaier compensated summation.
class CompensatedSum {
 public:
  void add(double x) noexcept {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x))
      comp_ += (sum_ - t) + x;
    else
      comp_ += (x - t) + sum_;
    sum_ = t;
  }
  double value() const noexcept { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

struct MeanEstimate {
  double mean = 0.0;
  double stderr_ = 0.0;
  std::size_t count = 0;
};

MeanEstimate mean_estimate(std::span<const double> xs);

/// log((1/n) sum exp(x_i)) with a max shift; returns -inf for an empty span.
double log_mean_exp(std::span<const double> log_terms);

double quantile(std::vector<double> xs, double p);

/// Standard error of the sample p-quantile from the distribution-free
/// order-statistic confidence interval (half-width / 1.96).
double quantile_stderr(std::vector<double> xs, double p);

struct KsResult {
  double statistic = 0.0;
  double p_value = 1.0;
};

/// Two-sample Kolmogorov-Smirnov test with the asymptotic Kolmogorov law.
KsResult ks_two_sample(std::vector<double> a, std::vector<double> b);

struct LinearFit {
  double intercept = 0.0;
  double slope = 0.0;
  double intercept_stderr = 0.0;
  double slope_stderr = 0.0;
  double r_squared = 0.0;
  std::size_t count = 0;
};

/// Ordinary least squares y = a + b x. Standard errors are the
/// heteroskedasticity-consistent (HC1) sandwich estimates when `robust`.
LinearFit linear_fit(std::span<const double> x, std::span<const double> y, bool robust = false);

/// Weighted least squares with weights w_i = 1/sigma_i^2 and classical errors.
LinearFit weighted_linear_fit(std::span<const double> x, std::span<const double> y,
                              std::span<const double> w);

double normal_cdf(double z);
double normal_quantile(double p);

/// One-sided upper-tail binomial p-value P(X >= k), X ~ Bin(n, 1/2).
double sign_test_p_value(std::size_t successes, std::size_t trials);

enum class Trend { increasing, decreasing, flat, mixed };

const char* to_string(Trend t);

struct TrendTest {
  Trend trend = Trend::flat;
  std::vector<double> z_scores;  // consecutive (next - previous) / combined s.e.
};

/// Classifies a sequence of independent estimates: increasing (every
/// consecutive step significantly up at one-sided `level`), decreasing
/// (likewise down), flat (no step significant at two-sided `level`), else mixed.
TrendTest monotone_trend(std::span<const MeanEstimate> points, double level);

}  // namespace polymerlab::stats
