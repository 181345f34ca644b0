#include <doctest.h>

#include "polymerlab/analysis.hpp"
#include "polymerlab/field.hpp"
#include "polymerlab/polymer.hpp"

#include <algorithm>
#include <numbers>

using namespace polymerlab;

namespace {

const KernelD& bump_kernel() {
  static const KernelD k(MollifierD(MollifierKind::compact_bump, 1.0, 3));
  return k;
}

const KernelD& gauss_kernel() {
  static const KernelD k(MollifierD(MollifierKind::gaussian, 1.0, 3));
  return k;
}

double beta_ref() {
  static const double b = beta_star_bound(bump_kernel());
  return b;
}

}  // namespace

TEST_CASE("second moment formula: beta zero, monotone in t") {
  const auto zero = second_moment_formula(bump_kernel(), 0.0, 4.0, 50, root_stream(1));
  CHECK(zero.mean == 1.0);
  CHECK(zero.stderr_ == 0.0);
  const double hs[] = {4.0, 8.0};
  const auto profile = second_moment_profile(bump_kernel(), 1.5, hs, 500, root_stream(2));
  CHECK(profile[1].mean >= profile[0].mean);
  // Same seeds as the single-horizon call.
  CHECK(second_moment_formula(bump_kernel(), 1.5, 4.0, 500, root_stream(2)).mean == profile[0].mean);
}

TEST_CASE("second moment formula agrees with the replica pair moment") {
  PolymerParams p;
  p.beta = 0.5;
  p.horizon = 4.0;
  const double hs[] = {4.0};
  std::vector<double> pairs;
  for (std::size_t r = 0; r < 600; ++r) {
    const auto bank = sample_replica_bank(p, 8, hs, Method::replica_gaussian, root_stream(3).child("bank", r));
    pairs.push_back(replica_second_moment(bank, p, 0));
  }
  const auto replica = stats::mean_estimate(pairs);
  const auto formula = second_moment_formula(bump_kernel(), 0.5, 4.0, 20000, root_stream(4));
  INFO("replica ", replica.mean, " +- ", replica.stderr_, " formula ", formula.mean, " +- ", formula.stderr_);
  CHECK(std::abs(replica.mean - formula.mean) <= 3 * std::hypot(replica.stderr_, formula.stderr_));
}

TEST_CASE("green potential of the gaussian kernel at the origin has the closed form") {
  // V = N(0, 2 I): G(0) = (1 / 2 pi) E|Y|^{-1} with Y ~ N(0, 2 I), E|Y|^{-1} = 1 / sqrt(pi).
  const double closed = 1.0 / (2 * std::numbers::pi * std::sqrt(std::numbers::pi));
  CHECK(green_potential(gauss_kernel(), 0.0) == doctest::Approx(closed).epsilon(1e-8));
  // Far field: G(z) -> C_3 / |z| times the kernel mass.
  CHECK(green_potential(gauss_kernel(), 30.0) == doctest::Approx(1.0 / (2 * std::numbers::pi * 30.0)).epsilon(1e-6));
}

TEST_CASE("green potential decays and is radially nonincreasing") {
  const double g0 = green_potential(bump_kernel(), 0.0);
  // Outside the support G is exactly the point-mass potential C_3 / |z|.
  CHECK(green_potential(bump_kernel(), 10.0) == doctest::Approx(1.0 / (20.0 * std::numbers::pi)).epsilon(1e-9));
  const double reach = bump_kernel().support_radius();
  CHECK(green_potential(bump_kernel(), 10.0 * reach) <= 0.05 * g0);
  double prev = g0;
  for (int i = 1; i <= 40; ++i) {
    const double g = green_potential(bump_kernel(), 0.1 * i);
    CHECK(g <= prev * (1 + 1e-12));
    prev = g;
  }
  CHECK(green_potential(bump_kernel(), Eigen::Vector3d(0.3, 0.4, 0.0)) ==
        doctest::Approx(green_potential(bump_kernel(), 0.5)));
  const KernelD flat(MollifierD(MollifierKind::compact_bump, 1.0, 2));
  CHECK_THROWS_AS(green_potential(flat, 0.0), ArgumentError);
}

TEST_CASE("occupation Monte Carlo matches the green potential quadrature") {
  std::uint64_t point = 0;
  for (double r : {0.0, 0.75, 1.5}) {
    const Eigen::Vector3d z(r, 0.0, 0.0);
    const auto mc = occupation_estimate(bump_kernel(), z, 200.0, 8000, root_stream(5).child("z", point++));
    const double quad = green_potential(bump_kernel(), r);
    INFO("r ", r, " mc ", mc.mean, " +- ", mc.stderr_, " quadrature ", quad);
    CHECK(std::abs(mc.mean - quad) <= 0.05 * quad);
  }
}

TEST_CASE("portenko bound") {
  const auto none = portenko_eta(0.0, bump_kernel());
  CHECK(none.eta == 0.0);
  CHECK(none.bound == 1.0);

  const double g0 = green_potential(bump_kernel(), 0.0);
  const double beta = std::sqrt(0.5 / g0);
  const auto half = portenko_eta(beta, bump_kernel());
  CHECK(half.eta == doctest::Approx(0.5));
  CHECK(half.bound == doctest::Approx(2.0));
  CHECK(half.sup_at_origin);
  const auto mc = exponential_occupation(bump_kernel(), beta, 100.0, 2000, root_stream(6));
  INFO("MC ", mc.mean, " +- ", mc.stderr_);
  CHECK(mc.mean <= half.bound + 3 * mc.stderr_);

  CHECK(!portenko_eta(2 * beta, bump_kernel()).finite());
  CHECK(std::isinf(portenko_eta(2 * beta, bump_kernel()).bound));

  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int i = 0; i < 20; ++i) CHECK(green_potential(bump_kernel(), Eigen::Vector3d(u(rng), u(rng), u(rng))) <= g0);
}

TEST_CASE("beta_star_bound: regression value, scaling and certification") {
  const double b = beta_ref();
  CHECK(b == doctest::Approx(2.78854).epsilon(1e-5));
  CHECK(0.5 * b * b * green_potential(bump_kernel(), 0.0) < 1.0);
  const double doubled = beta_star_bound(bump_kernel().scaled(2.0), 1e-12);
  CHECK(std::abs(doubled * doubled - 0.5 * b * b) <= 1e-8);
}

TEST_CASE("second moment stays bounded below the L2 threshold") {
  const double beta = 0.9 * beta_ref();
  const double eta = 0.5 * beta * beta * green_potential(bump_kernel(), 0.0);
  const double hs[] = {16.0, 32.0};
  const auto profile = second_moment_profile(bump_kernel(), beta, hs, 4000, root_stream(8));
  INFO("t=16 ", profile[0].mean, " t=32 ", profile[1].mean, " +- ", profile[1].stderr_, " bound ", 1 / (1 - eta));
  CHECK(profile[1].mean <= 1 / (1 - eta) + 3 * profile[1].stderr_);
  CHECK(profile[1].mean / profile[0].mean <= 1.0 + 3 * profile[1].stderr_ / profile[0].mean + 0.05);
}

TEST_CASE("smoothed variance: zero at beta zero, decreasing in eps, refusal above threshold") {
  const GaussianMixture f{{0.7, 0.3}, {0.5, 1.5}};
  const double grid[] = {1.0, 0.5, 0.25};
  for (const auto& e : smoothed_variance(f, bump_kernel(), 0.0, grid, 10, root_stream(9))) CHECK(e.mean == 0.0);

  const auto v = smoothed_variance(f, bump_kernel(), 0.5 * beta_ref(), grid, 800, root_stream(10));
  for (const auto& e : v) INFO(e.mean, " +- ", e.stderr_);
  CHECK(stats::monotone_trend(v, 0.05).trend == stats::Trend::decreasing);
  CHECK_THROWS_WITH_AS(smoothed_variance(f, bump_kernel(), 1.01 * beta_ref(), grid, 10, root_stream(1)),
                       doctest::Contains("eta"), ArgumentError);
}

TEST_CASE("smoothed variance agrees with a replica estimate at eps = 1/2") {
  // Var u_eps(f) = (int f)^2 E[L(W^X) L(W^Y)] - (int f)^2 with X, Y ~ f / int f and
  // the pair of Wiener integrals drawn jointly from their overlap covariance.
  const GaussianMixture f{{1.0}, {0.6}};
  const double beta = 1.0, eps = 0.5, horizon = 1 / (eps * eps);
  const double grid[] = {eps};
  const auto quad = smoothed_variance(f, bump_kernel(), beta, grid, 3000, root_stream(11)).front();
  std::vector<double> xs;
  for (std::size_t r = 0; r < 20000; ++r) {
    const auto s = root_stream(12).child("r", r);
    auto rng = s.engine();
    std::normal_distribution<double> n(0.0, f.widths[0]);
    std::vector<PathD> ws;
    for (int i = 0; i < 2; ++i) {
      const Eigen::Vector3d x(n(rng), n(rng), n(rng));
      ws.push_back(sample_path<double>(3, x / eps, horizon, 0.1, s.child("path", i)));
    }
    const Eigen::MatrixXd sigma = overlap_matrix(ws, bump_kernel());
    const auto m = replica_gaussian_sample(ws, bump_kernel(), s.child("gaussian")).values;
    const double l0 = std::exp(beta * m[0] - 0.5 * beta * beta * sigma(0, 0));
    const double l1 = std::exp(beta * m[1] - 0.5 * beta * beta * sigma(1, 1));
    xs.push_back(l0 * l1 - 1.0);
  }
  const auto replica = stats::mean_estimate(xs);
  INFO("quadrature ", quad.mean, " +- ", quad.stderr_, " replica ", replica.mean, " +- ", replica.stderr_);
  CHECK(std::abs(quad.mean - replica.mean) <= 3 * std::hypot(quad.stderr_, replica.stderr_));
}

TEST_CASE("non-Cauchy gap") {
  const MollifierD gauss(MollifierKind::gaussian, 1.0, 3);
  const auto zero = non_cauchy_gap(gauss, 0.0, 0.5, 20, root_stream(13));
  CHECK(zero.matched.mean == 1.0);
  CHECK(zero.mixed.mean == 1.0);
  CHECK(zero.gap.mean == 0.0);

  const auto g = non_cauchy_gap(gauss, 0.5, 0.5, 4000, root_stream(14));
  INFO("gap ", g.gap.mean, " +- ", g.gap.stderr_);
  CHECK(g.gap.mean > 3 * g.gap.stderr_);
  CHECK(g.matched.mean > 1.0);

  std::vector<stats::MeanEstimate> gaps;
  for (double beta : {0.5, 0.25, 0.125}) gaps.push_back(non_cauchy_gap(gauss, beta, 0.5, 4000, root_stream(15)).gap);
  CHECK(stats::monotone_trend(gaps, 0.05).trend == stats::Trend::decreasing);

  CHECK_THROWS_AS(non_cauchy_gap(MollifierD(MollifierKind::compact_bump, 1.0, 3), 0.5, 0.5, 10, root_stream(1)),
                  ArgumentError);
}

TEST_CASE("f_alpha is increasing, concave, bounded by one and exact at the cutoff") {
  for (double alpha : {0.5, 2.0, 32.0}) {
    const ConcaveTestFunction f(alpha);
    double prev = f(0.0), prev_slope = std::numeric_limits<double>::infinity();
    for (int i = 1; i <= 400; ++i) {
      const double x = 0.01 * i * alpha;
      const double y = f(x);
      CHECK(y >= prev);
      CHECK(y >= 0.0);
      CHECK(y <= 1.0);
      const double slope = (y - prev) / (0.01 * alpha);
      CHECK(slope <= prev_slope + 1e-12);
      prev = y;
      prev_slope = slope;
      if (x >= alpha) CHECK(y == 1.0);
      CHECK(f.of_log(std::log(x)) == doctest::Approx(y));
    }
  }
  CHECK_THROWS_AS(ConcaveTestFunction(0.0), ArgumentError);
}

namespace {

struct PhaseSamples {
  std::vector<std::vector<double>> plain, biased;
};

PhaseSamples phase_samples(double beta, std::size_t reps, std::uint64_t seed) {
  PhaseSamples out;
  for (double t : {4.0, 8.0, 16.0}) {
    PolymerParams p;
    p.beta = beta;
    p.horizon = t;
    std::vector<double> plain, biased;
    for (std::size_t r = 0; r < reps; ++r) {
      const auto s = root_stream(seed).child("t", static_cast<std::uint64_t>(t)).child("r", r);
      plain.push_back(partition_estimate(p, 4, Method::replica_gaussian, s.child("plain")).log_value);
      biased.push_back(
          size_biased_partition(p, 4, s.child("biased"), SpineMode::include_spine, Method::replica_gaussian).log_value);
    }
    out.plain.push_back(std::move(plain));
    out.biased.push_back(std::move(biased));
  }
  return out;
}

}  // namespace

TEST_CASE("ui diagnostic: beta zero is weak-like, strong beta is strong-like, shuffles are undetermined") {
  const auto zero = phase_samples(0.0, 50, 16);
  CHECK(ui_diagnostic(zero.plain, zero.biased).verdict == Verdict::weak_like);

  const auto strong = phase_samples(4 * beta_ref(), 200, 17);
  const auto verdict = ui_diagnostic(strong.plain, strong.biased);
  for (const auto& e : verdict.evidence) INFO(e.test, ": ", e.outcome, " ", e.statistic, " p=", e.p_value);
  CHECK(verdict.verdict == Verdict::strong_like);
  const auto again = ui_diagnostic(strong.plain, strong.biased);
  CHECK(again.verdict == verdict.verdict);
  CHECK(again.evidence.size() == verdict.evidence.size());

  std::vector<std::size_t> order{0, 1, 2};
  while (std::next_permutation(order.begin(), order.end())) {
    PhaseSamples shuffled;
    for (std::size_t j : order) {
      shuffled.plain.push_back(strong.plain[j]);
      shuffled.biased.push_back(strong.biased[j]);
    }
    CHECK(ui_diagnostic(shuffled.plain, shuffled.biased).verdict == Verdict::undetermined);
  }

  const std::vector<std::vector<double>> two(2, std::vector<double>(5, 0.0));
  CHECK_THROWS_AS(ui_diagnostic(two, two), ArgumentError);
}
