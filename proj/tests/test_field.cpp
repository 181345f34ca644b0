#include <doctest.h>

#include "polymerlab/field.hpp"
#include "polymerlab/stats.hpp"

using namespace polymerlab;

namespace {

const MollifierD bump(MollifierKind::compact_bump, 1.0, 3);

const KernelD& bump_kernel() {
  static const KernelD v(bump);
  return v;
}

Box cube(double half) {
  return {Eigen::Vector3d::Constant(-half), Eigen::Vector3d::Constant(half)};
}

double sample_covariance(const std::vector<double>& a, const std::vector<double>& b) {
  const double ma = stats::mean_estimate(a).mean, mb = stats::mean_estimate(b).mean;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - ma) * (b[i] - mb);
  return s / static_cast<double>(a.size() - 1);
}

}  // namespace

TEST_CASE("noise field is deterministic per stream") {
  const auto a = build_noise_field(cube(1.0), 0.25, 1.0, 0.1, root_stream(1).child("field"));
  const auto b = build_noise_field(cube(1.0), 0.25, 1.0, 0.1, root_stream(1).child("field"));
  const auto c = build_noise_field(cube(1.0), 0.25, 1.0, 0.1, root_stream(2).child("field"));
  CHECK(a.cell_count() == 9 * 9 * 9);
  for (Eigen::Index k : {0, 5, 9}) {
    CHECK(*a.slab(k) == *b.slab(k));
    CHECK(*a.slab(k) != *c.slab(k));
  }
  const std::int64_t index[] = {-4, 0, 3};
  const double direct = a.increment(2, index);
  const auto& counts = a.cells_per_axis();
  const Eigen::Index flat = (index[0] - a.first_index()[0]) +
                            counts[0] * ((index[1] - a.first_index()[1]) + counts[1] * (index[2] - a.first_index()[2]));
  CHECK((*a.slab(2))[flat] == direct);
}

TEST_CASE("cell increments have variance h^d dt") {
  const double h = 0.125, dt = 0.1;
  const auto field = build_noise_field(cube(2.0), h, 0.3, dt, root_stream(3));
  std::vector<double> sq;
  for (Eigen::Index k = 0; k < field.steps(); ++k)
    for (double x : *field.slab(k)) sq.push_back(x * x);
  REQUIRE(sq.size() >= 100000);
  const auto v = stats::mean_estimate(sq);
  CHECK(std::abs(v.mean - std::pow(h, 3) * dt) <= 3 * v.stderr_);
}

TEST_CASE("extending in time leaves existing increments unchanged") {
  const auto field = build_noise_field(cube(1.0), 0.25, 2.0, 0.1, root_stream(4));
  const auto longer = field.extended(4.0);
  CHECK(longer.steps() == 2 * field.steps());
  const auto back = longer.restricted(2.0);
  for (Eigen::Index k = 0; k < field.steps(); ++k) {
    CHECK(*longer.slab(k) == *field.slab(k));
    CHECK(*back.slab(k) == *field.slab(k));
  }
  const auto reversed = field.time_reversed();
  CHECK(*reversed.slab(0) == *field.slab(field.steps() - 1));
  CHECK(*reversed.time_reversed().slab(0) == *field.slab(0));
}

TEST_CASE("slab memory above the cap is a resource error") {
  try {
    build_noise_field(cube(4.0), 0.0625, 1.0, 0.1, root_stream(1), 1 << 20);
    FAIL("expected a resource error");
  } catch (const ResourceError& e) {
    CHECK(e.required_bytes() == std::size_t(129) * 129 * 129 * sizeof(double));
  }
}

TEST_CASE("wiener integrals have mean zero and the overlap covariance") {
  // A fixed Brownian path and a translated copy; 10^4 independent fields.
  const double horizon = 0.3, dt = 0.1;
  const auto w = sample_path(3, horizon, dt, root_stream(5));
  auto w2 = w;
  w2.positions.colwise() += Eigen::Vector3d(0.3, 0.0, 0.0);
  const std::vector<PathD> both{w, w2};
  const Box box = covering_box(both, 1.0);
  const std::size_t reps = 10000;
  std::vector<double> m1(reps), m2(reps);
  double variance = 0.0;
  for (std::size_t r = 0; r < reps; ++r) {
    const NoiseField field(box, 0.125, horizon, dt, root_stream(6).child("field", r));
    const auto a = wiener_integral(field, w, bump);
    m1[r] = a.value;
    m2[r] = wiener_integral(field, w2, bump).value;
    variance = a.conditional_variance;
  }
  const double v0t = bump_kernel().at_zero() * horizon;
  const auto mean = stats::mean_estimate(m1);
  CHECK(std::abs(mean.mean) <= 3 * mean.stderr_);
  const double var = sample_covariance(m1, m1);
  CHECK(std::abs(var - v0t) <= 0.05 * v0t);
  CHECK(std::abs(variance - v0t) <= 0.05 * v0t);
  // The overlap is a trapezoid rule; a translated copy has constant separation,
  // so the left-point sum of the field agrees with it.
  const double cross = overlap(w, w2, bump_kernel());
  CHECK(std::abs(sample_covariance(m1, m2) - cross) <= 0.05 * cross);
}

TEST_CASE("exact lattice covariance tracks the kernel overlap") {
  std::vector<PathD> paths;
  for (std::size_t i = 0; i < 4; ++i) paths.push_back(sample_path(3, 2.0, 0.1, root_stream(7).child("p", i)));
  // Frozen copies make left-point and trapezoid time sums coincide.
  std::vector<PathD> frozen;
  for (const auto& p : paths) frozen.push_back(frozen_path(p.positions.col(20), 2.0, 0.1));
  const NoiseField geometry(covering_box(frozen, 1.0), 0.125, 2.0, 0.1, root_stream(1));
  const Eigen::MatrixXd lattice = lattice_covariance(frozen, geometry, bump);
  const Eigen::MatrixXd exact = overlap_matrix(frozen, bump_kernel());
  CHECK((lattice - lattice.transpose()).norm() == 0.0);
  CHECK((lattice - exact).cwiseAbs().maxCoeff() <= 1e-3 * exact(0, 0));
}

TEST_CASE("path outside the field box is a coverage error at the first offending time") {
  const Box box = cube(1.5);
  const NoiseField field(box, 0.25, 1.0, 0.1, root_stream(1));
  auto path = frozen_path(Eigen::Vector3d::Zero(), 1.0, 0.1);
  path.positions.rightCols(4).colwise() = Eigen::Vector3d(1.0, 0.0, 0.0).eval();
  try {
    wiener_integral(field, path, bump);
    FAIL("expected a coverage error");
  } catch (const CoverageError& e) {
    CHECK(e.first_offending_time() == doctest::Approx(0.7));
  }
}

TEST_CASE("nested horizons use identical noise") {
  const auto w = sample_path(3, 2.0, 0.1, root_stream(8));
  const std::vector<PathD> ps{w};
  const NoiseField field(covering_box(ps, 1.0), 0.125, 2.0, 0.1, root_stream(9));
  const NoiseField* fields[] = {&field};
  const Eigen::Index prefixes[] = {5, 10, 20};
  const auto nested = wiener_integral_prefixes(fields, w, bump, prefixes).front();
  REQUIRE(nested.size() == 3);
  const auto shorter = field.restricted(1.0);
  CHECK(wiener_integral(shorter, restrict_path(w, 1.0), bump).value == nested[1].value);
  CHECK(wiener_integral(field.extended(4.0), w, bump).value == nested[2].value);
  CHECK(nested[0].horizon == doctest::Approx(0.5));
}

TEST_CASE("time reversal of the field leaves the law of the integral unchanged") {
  const auto w = sample_path(3, 1.0, 0.1, root_stream(10));
  const std::vector<PathD> ps{w};
  const Box box = covering_box(ps, 1.0);
  std::vector<double> forward, backward;
  for (std::size_t r = 0; r < 1000; ++r) {
    const NoiseField f(box, 0.125, 1.0, 0.1, root_stream(11).child("f", r));
    const NoiseField g(box, 0.125, 1.0, 0.1, root_stream(11).child("g", r));
    forward.push_back(wiener_integral(f, w, bump).value);
    backward.push_back(wiener_integral(g.time_reversed(), w, bump).value);
  }
  CHECK(stats::ks_two_sample(forward, backward).p_value > 0.01);
}

TEST_CASE("replica gaussian sampler: single path variance and independence") {
  const auto w = sample_path(3, 4.0, 0.1, root_stream(12));
  const std::vector<PathD> one{w};
  std::vector<double> sq;
  for (std::size_t r = 0; r < 10000; ++r) {
    const double x = replica_gaussian_sample(one, bump_kernel(), root_stream(13).child("r", r)).values[0];
    sq.push_back(x * x);
  }
  const auto v = stats::mean_estimate(sq);
  CHECK(std::abs(v.mean - 4.0 * bump_kernel().at_zero()) <= 3 * v.stderr_);

  const std::vector<PathD> far{frozen_path(Eigen::Vector3d(0, 0, 0), 1.0, 0.1),
                               frozen_path(Eigen::Vector3d(3, 0, 0), 1.0, 0.1)};
  std::vector<double> a, b;
  for (std::size_t r = 0; r < 10000; ++r) {
    const auto s = replica_gaussian_sample(far, bump_kernel(), root_stream(14).child("r", r));
    a.push_back(s.values[0]);
    b.push_back(s.values[1]);
  }
  const double rho = sample_covariance(a, b) / std::sqrt(sample_covariance(a, a) * sample_covariance(b, b));
  CHECK(std::abs(rho) <= 3.0 / std::sqrt(10000.0));
}

TEST_CASE("replica gaussian and explicit field agree in law for max_i M_i") {
  // Eight frozen, mutually overlapping replicas: the trapezoid and left-point
  // time sums coincide, so both methods target the same Gaussian vector.
  std::vector<PathD> paths;
  std::mt19937_64 rng(15);
  std::uniform_real_distribution<double> u(-0.6, 0.6);
  for (int i = 0; i < 8; ++i)
    paths.push_back(frozen_path(Eigen::Vector3d(u(rng), u(rng), u(rng)), 0.1, 0.1));
  const Box box = covering_box(paths, 1.0);
  std::vector<double> explicit_max, replica_max;
  for (std::size_t r = 0; r < 10000; ++r) {
    const NoiseField field(box, 0.125, 0.1, 0.1, root_stream(16).child("f", r));
    double best = -1e300;
    for (const auto& p : paths) best = std::max(best, wiener_integral(field, p, bump).value);
    explicit_max.push_back(best);
    replica_max.push_back(replica_gaussian_sample(paths, bump_kernel(), root_stream(17).child("r", r)).values.maxCoeff());
  }
  CHECK(stats::ks_two_sample(explicit_max, replica_max).p_value > 0.01);
}

TEST_CASE("covariance factorization: jitter on singular input, error on indefinite input") {
  const auto w = sample_path(3, 1.0, 0.1, root_stream(18));
  const std::vector<PathD> twins{w, w};
  const Eigen::MatrixXd sigma = overlap_matrix(twins, bump_kernel());
  const double scale = bump_kernel().at_zero();
  const auto f = factor_covariance(sigma, scale);
  CHECK(f.jitter <= 1e-10 * scale);
  CHECK((f.lower * f.lower.transpose() - sigma).norm() <= 1e-9 * scale);
  Eigen::Matrix2d bad;
  bad << 1.0, 2.0, 2.0, 1.0;
  CHECK_THROWS_WITH_AS(factor_covariance(bad, 1.0), doctest::Contains("minimum eigenvalue -1"), NumericalError);
}
