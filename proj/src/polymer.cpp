#include "polymerlab/polymer.hpp"

#include "polymerlab/parallel.hpp"
#include "polymerlab/stats.hpp"

#include <algorithm>

namespace polymerlab {

const char* to_string(Method m) {
  return m == Method::replica_gaussian ? "replica-gaussian" : "explicit-field";
}

Method method_from_string(const std::string& name) {
  if (name == "replica-gaussian") return Method::replica_gaussian;
  if (name == "explicit-field") return Method::explicit_field;
  throw ArgumentError("unknown method '" + name + "' (expected replica-gaussian or explicit-field)");
}

const char* to_string(SpineMode m) {
  return m == SpineMode::partners_only ? "partners-only" : "include-spine";
}

PolymerParams PolymerParams::with_beta(double b) const {
  PolymerParams p = *this;
  p.beta = b;
  return p;
}

PolymerParams PolymerParams::with_horizon(double t) const {
  PolymerParams p = *this;
  p.horizon = t;
  return p;
}

PolymerParams PolymerParams::from_eps(double beta, double eps) {
  require(eps > 0, "eps must be positive");
  PolymerParams p;
  p.beta = beta;
  p.horizon = 1.0 / (eps * eps);
  return p;
}

void PolymerParams::validate() const {
  require(beta >= 0, "beta must be nonnegative");
  require(dim >= 3, "dimension must be >= 3");
  require(horizon > 0, "horizon must be positive");
  require(dt > 0 && dt <= 0.1 * (1 + 1e-12), "dt must satisfy 0 < dt <= scale^2 / 10");
  require(spacing > 0, "field spacing must be positive");
  step_count(horizon, dt);
}

namespace {

std::vector<Eigen::Index> horizon_steps(std::span<const double> horizons, double dt) {
  require(!horizons.empty(), "at least one horizon is required");
  std::vector<Eigen::Index> steps;
  for (double t : horizons) {
    steps.push_back(step_count(t, dt));
    if (steps.size() > 1) require(steps.back() > steps[steps.size() - 2], "horizons must be increasing");
  }
  return steps;
}

std::vector<PathD> sample_paths(const PolymerParams& p, std::size_t count, double horizon, const SeedStream& stream,
                                std::string_view tag) {
  std::vector<PathD> paths(count);
  for (std::size_t i = 0; i < count; ++i) paths[i] = sample_path(p.dim, horizon, p.dt, stream.child(tag, i));
  return paths;
}

NoiseField field_for(const PolymerParams& p, std::span<const PathD> paths, double horizon, const SeedStream& stream) {
  const MollifierD m = p.mollifier();
  return NoiseField(covering_box(paths, m.truncation_radius()), p.spacing, horizon, p.dt, stream);
}

// Explicit-field integrals of each path at the prefix steps.
void integrate_paths(std::span<const PathD> paths, const NoiseField& field, const MollifierD& m,
                     std::span<const Eigen::Index> steps, Eigen::MatrixXd& values, Eigen::MatrixXd& variances) {
  const auto n = static_cast<Eigen::Index>(paths.size());
  const auto h = static_cast<Eigen::Index>(steps.size());
  values.resize(n, h);
  variances.resize(n, h);
  const NoiseField* fields[] = {&field};
  parallel_for(paths.size(), [&](std::size_t i) {
    const auto out = wiener_integral_prefixes(fields, paths[i], m, steps).front();
    for (Eigen::Index j = 0; j < h; ++j) {
      values(static_cast<Eigen::Index>(i), j) = out[static_cast<std::size_t>(j)].value;
      variances(static_cast<Eigen::Index>(i), j) = out[static_cast<std::size_t>(j)].conditional_variance;
    }
  });
}

PartitionEstimate estimate_from_log_weights(std::span<const double> log_weights, Method method,
                                            const SeedStream& seed, const PolymerParams& p) {
  PartitionEstimate e;
  e.replicas = log_weights.size();
  e.method = method;
  e.seed = seed;
  e.params = p;
  e.log_value = stats::log_mean_exp(log_weights);
  e.value = std::exp(e.log_value);
  if (log_weights.size() >= 2) {
    const double top = *std::max_element(log_weights.begin(), log_weights.end());
    std::vector<double> scaled(log_weights.size());
    std::transform(log_weights.begin(), log_weights.end(), scaled.begin(),
                   [top](double l) { return std::exp(l - top); });
    e.stderr_ = std::exp(top) * stats::mean_estimate(scaled).stderr_;
  }
  return e;
}

}  // namespace

ReplicaBank sample_replica_bank(const PolymerParams& p, std::size_t replicas, std::span<const double> horizons,
                                Method method, const SeedStream& stream) {
  p.validate();
  require(replicas >= 1, "at least one replica is required");
  const auto steps = horizon_steps(horizons, p.dt);
  const double t_max = horizons.back();
  const auto paths = sample_paths(p, replicas, t_max, stream, "path");
  ReplicaBank bank;
  bank.method = method;
  bank.horizons.assign(horizons.begin(), horizons.end());
  bank.seed = stream;
  const auto n = static_cast<Eigen::Index>(replicas);
  const auto h = static_cast<Eigen::Index>(steps.size());

  if (method == Method::explicit_field) {
    const NoiseField field = field_for(p, paths, t_max, stream.child("field"));
    integrate_paths(paths, field, p.mollifier(), steps, bank.integrals, bank.compensators);
    return bank;
  }

  const KernelD k = p.kernel();
  bank.integrals.resize(n, h);
  bank.compensators.resize(n, h);
  auto rng = stream.child("gaussian").engine();
  Eigen::VectorXd running = Eigen::VectorXd::Zero(n), variance = Eigen::VectorXd::Zero(n);
  Eigen::Index from = 0;
  for (Eigen::Index j = 0; j < h; ++j) {
    const Eigen::Index to = steps[static_cast<std::size_t>(j)];
    std::vector<PathD> pieces;
    pieces.reserve(replicas);
    for (const auto& path : paths) pieces.push_back(segment(path, from, to));
    const Eigen::MatrixXd sigma = overlap_matrix(pieces, k);
    const auto factor = factor_covariance(sigma, k.at_zero() * pieces.front().horizon);
    running += gaussian_draw(factor, rng);
    variance += sigma.diagonal();
    bank.integrals.col(j) = running;
    bank.compensators.col(j) = variance;
    from = to;
  }
  return bank;
}

PartitionEstimate estimate_from_bank(const ReplicaBank& bank, const PolymerParams& p, std::size_t horizon_index) {
  require(p.beta >= 0, "beta must be nonnegative");
  require(horizon_index < bank.horizons.size(), "horizon index out of range");
  const auto j = static_cast<Eigen::Index>(horizon_index);
  std::vector<double> logs(static_cast<std::size_t>(bank.replicas()));
  for (Eigen::Index i = 0; i < bank.replicas(); ++i)
    logs[static_cast<std::size_t>(i)] =
        p.beta == 0 ? 0.0 : p.beta * bank.integrals(i, j) - 0.5 * p.beta * p.beta * bank.compensators(i, j);
  return estimate_from_log_weights(logs, bank.method, bank.seed, p.with_horizon(bank.horizons[horizon_index]));
}

PartitionEstimate partition_estimate(const PolymerParams& p, std::size_t replicas, Method method,
                                     const SeedStream& stream) {
  require(replicas >= 2, "partition_estimate needs N >= 2 replicas");
  const double horizons[] = {p.horizon};
  return estimate_from_bank(sample_replica_bank(p, replicas, horizons, method, stream), p, 0);
}

double replica_second_moment(const ReplicaBank& bank, const PolymerParams& p, std::size_t horizon_index) {
  require(bank.replicas() >= 2, "replica_second_moment needs N >= 2");
  require(horizon_index < bank.horizons.size(), "horizon index out of range");
  const auto j = static_cast<Eigen::Index>(horizon_index);
  const Eigen::Index n = bank.replicas();
  Eigen::VectorXd logs(n);
  for (Eigen::Index i = 0; i < n; ++i)
    logs[i] = p.beta * bank.integrals(i, j) - 0.5 * p.beta * p.beta * bank.compensators(i, j);
  const double top = logs.maxCoeff();
  // sum_{i != j} w_i w_j = 2 sum_j w_j (w_0 + ... + w_{j-1}), free of cancellation.
  stats::CompensatedSum prefix, pairs;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double w = std::exp(logs[i] - top);
    pairs.add(w * prefix.value());
    prefix.add(w);
  }
  return std::exp(2 * top) * 2 * pairs.value() / (double(n) * double(n - 1));
}

MartingaleTrajectory trajectory_from_bank(const ReplicaBank& bank, const PolymerParams& p) {
  MartingaleTrajectory out;
  out.horizons = bank.horizons;
  out.params = p;
  out.seed = bank.seed;
  out.nested = true;
  for (std::size_t j = 0; j < bank.horizons.size(); ++j) {
    const auto e = estimate_from_bank(bank, p, j);
    out.values.push_back(e.value);
    out.log_values.push_back(e.log_value);
  }
  return out;
}

MartingaleTrajectory martingale_trajectory(const PolymerParams& p0, std::span<const double> horizons,
                                           std::size_t replicas, const SeedStream& stream) {
  require(!horizons.empty(), "martingale_trajectory needs a horizon grid");
  for (std::size_t j = 1; j < horizons.size(); ++j)
    require(std::abs(horizons[j] - 2 * horizons[j - 1]) <= 1e-12 * horizons[j], "horizon grid must be dyadic");
  require(replicas >= 2, "martingale_trajectory needs N >= 2 replicas");
  const auto bank = sample_replica_bank(p0, replicas, horizons, Method::explicit_field, stream);
  return trajectory_from_bank(bank, p0);
}

PartitionEstimate size_biased_partition(const PolymerParams& p, std::size_t replicas, const SeedStream& stream,
                                        SpineMode mode, Method method) {
  p.validate();
  require(replicas >= 2 || mode == SpineMode::partners_only, "include-spine needs N >= 2 replicas");
  require(replicas >= 1, "size_biased_partition needs N >= 1");
  // Path 0 is the spine; the replicas averaged are [first, first + N).
  const std::size_t first = mode == SpineMode::include_spine ? 0 : 1;
  const std::size_t partners = mode == SpineMode::include_spine ? replicas - 1 : replicas;
  std::vector<PathD> paths;
  paths.push_back(sample_path(p.dim, p.horizon, p.dt, stream.child("spine")));
  for (std::size_t i = 0; i < partners; ++i) paths.push_back(sample_path(p.dim, p.horizon, p.dt, stream.child("path", i)));
  const auto n = static_cast<Eigen::Index>(paths.size());
  Eigen::VectorXd m(n), c(n), tilt(n);

  if (method == Method::replica_gaussian) {
    const KernelD k = p.kernel();
    const Eigen::MatrixXd sigma = overlap_matrix(paths, k);
    const auto factor = factor_covariance(sigma, k.at_zero() * p.horizon);
    auto rng = stream.child("gaussian").engine();
    m = gaussian_draw(factor, rng);
    c = sigma.diagonal();
    tilt = sigma.row(0).transpose();
  } else {
    const NoiseField field = field_for(p, paths, p.horizon, stream.child("field"));
    const auto averaged = std::span<const PathD>(paths).subspan(first);
    Eigen::MatrixXd values, variances;
    const Eigen::Index steps[] = {step_count(p.horizon, p.dt)};
    integrate_paths(averaged, field, p.mollifier(), steps, values, variances);
    m.setZero();
    c.setZero();
    m.tail(values.rows()) = values.col(0);
    c.tail(values.rows()) = variances.col(0);
    const auto others = std::span<const PathD>(paths).subspan(1);
    tilt.tail(n - 1) = lattice_cross_covariance(paths.front(), others, field, p.mollifier());
    tilt[0] = c[0];
  }

  // Under the tilted law the noise is shifted by beta * phi(x - W_s) along the
  // spine, which moves each integral by beta times its covariance with the spine.
  std::vector<double> logs;
  for (Eigen::Index i = static_cast<Eigen::Index>(first); i < n; ++i) {
    const double shifted = m[i] + p.beta * tilt[i];
    logs.push_back(p.beta == 0 ? 0.0 : p.beta * shifted - 0.5 * p.beta * p.beta * c[i]);
  }
  return estimate_from_log_weights(logs, method, stream, p);
}

InterpolationSample interpolation_check(const PolymerParams& p, double rho, std::size_t outer_reps,
                                        std::size_t inner_reps, std::size_t replicas, const SeedStream& stream,
                                        OuterCoupling coupling) {
  p.validate();
  require(rho > 0 && rho < 1, "rho must lie in (0, 1)");
  require(outer_reps >= 1 && inner_reps >= 2 && replicas >= 1, "interpolation_check needs positive rep counts");
  const MollifierD mol = p.mollifier();
  const double s = std::sqrt((1 - rho) * (1 + rho));
  const Eigen::Index steps[] = {step_count(p.horizon, p.dt)};
  InterpolationSample out;
  out.direct.resize(outer_reps);
  out.mixed.resize(outer_reps);
  out.mixed_stderr.resize(outer_reps);

  struct Draw {
    std::vector<PathD> paths;
    Eigen::MatrixXd m, v;
  };
  auto draw = [&](const SeedStream& st) {
    Draw d;
    d.paths = sample_paths(p, replicas, p.horizon, st, "path");
    const NoiseField field = field_for(p, d.paths, p.horizon, st.child("field"));
    integrate_paths(d.paths, field, mol, steps, d.m, d.v);
    return d;
  };

  for (std::size_t r = 0; r < outer_reps; ++r) {
    const SeedStream direct_stream = stream.child("direct", r);
    const Draw a = draw(direct_stream);
    const double rb = rho * p.beta;
    std::vector<double> logs(replicas);
    for (std::size_t i = 0; i < replicas; ++i)
      logs[i] = rb * a.m(Eigen::Index(i), 0) - 0.5 * rb * rb * a.v(Eigen::Index(i), 0);
    out.direct[r] = std::exp(stats::log_mean_exp(logs));

    const SeedStream mixed_stream = coupling == OuterCoupling::shared ? direct_stream : stream.child("mixed", r);
    const Draw b = coupling == OuterCoupling::shared ? a : draw(mixed_stream);
    const NoiseField geometry = field_for(p, b.paths, p.horizon, mixed_stream.child("field"));
    const Eigen::MatrixXd cov = lattice_covariance(b.paths, geometry, mol);
    const auto factor = factor_covariance(cov, p.kernel().at_zero() * p.horizon);
    auto rng = mixed_stream.child("inner").engine();
    std::vector<double> inner(inner_reps);
    for (std::size_t q = 0; q < inner_reps; ++q) {
      const Eigen::VectorXd m2 = gaussian_draw(factor, rng);
      for (std::size_t i = 0; i < replicas; ++i) {
        const auto ii = Eigen::Index(i);
        logs[i] = p.beta * (rho * b.m(ii, 0) + s * m2[ii]) - 0.5 * p.beta * p.beta * b.v(ii, 0);
      }
      inner[q] = std::exp(stats::log_mean_exp(logs));
    }
    const auto e = stats::mean_estimate(inner);
    out.mixed[r] = e.mean;
    out.mixed_stderr[r] = e.stderr_;
  }
  return out;
}

}  // namespace polymerlab
