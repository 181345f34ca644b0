#include "polymerlab/gmc.hpp"

#include "polymerlab/parallel.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SparseCholesky>
#include <boost/math/special_functions/bessel.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace polymerlab {

// ---------------------------------------------------------------------------
// Kahane comparison

void FiniteKernelPair::validate() const {
  const Eigen::Index n = K.rows();
  require(n >= 1, "kernel pair needs at least one atom");
  require(K.cols() == n && K_hat.rows() == n && K_hat.cols() == n, "kernel pair matrices must be n x n");
  require(p.size() == n, "weights must have one entry per atom");
  require((p.array() >= 0).all(), "weights must be nonnegative");
  require(std::abs(p.sum() - 1.0) <= 1e-9, "weights must sum to one");
  const double scale = std::max(1.0, std::max(K.cwiseAbs().maxCoeff(), K_hat.cwiseAbs().maxCoeff()));
  auto check_psd = [&](const Eigen::MatrixXd& m, const char* name) {
    if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
      throw ArgumentError(std::string(name) + " is not symmetric");
    const double low = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(m, Eigen::EigenvaluesOnly).eigenvalues().minCoeff();
    if (low < -1e-10 * scale) {
      std::ostringstream msg;
      msg << name << " is not positive semidefinite (minimum eigenvalue " << low << ")";
      throw ArgumentError(msg.str());
    }
  };
  check_psd(K, "K");
  check_psd(K_hat, "K_hat");
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (K(i, j) > K_hat(i, j) + 1e-12 * scale) {
        std::ostringstream msg;
        msg << "kernel domination fails at entry (" << i << ", " << j << "): K = " << K(i, j)
            << " > K_hat = " << K_hat(i, j);
        throw ArgumentError(msg.str());
      }
}

FiniteKernelPair random_dominated_pair(Eigen::Index n, const SeedStream& stream, double ratio) {
  require(n >= 1, "pair size must be positive");
  require(ratio >= 0 && ratio <= 1, "ratio must lie in [0, 1]");
  auto rng = stream.engine();
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::exponential_distribution<double> e(1.0);
  Eigen::MatrixXd a(n, n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < n; ++i) a(i, j) = u(rng);
  FiniteKernelPair out;
  out.K_hat = a * a.transpose() / static_cast<double>(n);
  out.K = ratio * out.K_hat;
  out.p.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) out.p[i] = e(rng);
  out.p /= out.p.sum();
  return out;
}

namespace {

// Symmetric square root factor U sqrt(max(lambda, 0)); exact for singular PSD input.
Eigen::MatrixXd psd_factor(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
  return eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
}

}  // namespace

KahaneComparison kahane_compare(const FiniteKernelPair& pair, const ConcaveTestFunction& f, std::size_t reps,
                                const SeedStream& stream) {
  pair.validate();
  require(reps >= 10000, "kahane_compare needs at least 10^4 repetitions");
  const Eigen::Index n = pair.size();
  const Eigen::MatrixXd a = psd_factor(pair.K), a_hat = psd_factor(pair.K_hat);
  const Eigen::VectorXd half = 0.5 * pair.K.diagonal(), half_hat = 0.5 * pair.K_hat.diagonal();
  std::vector<double> lo(reps), hi(reps), diff(reps);
  auto rng = stream.engine();
  std::normal_distribution<double> normal;
  Eigen::VectorXd xi(n);
  for (std::size_t r = 0; r < reps; ++r) {
    for (Eigen::Index i = 0; i < n; ++i) xi[i] = normal(rng);
    const double s = pair.p.dot(((a * xi) - half).array().exp().matrix());
    const double s_hat = pair.p.dot(((a_hat * xi) - half_hat).array().exp().matrix());
    lo[r] = f(s);
    hi[r] = f(s_hat);
    diff[r] = lo[r] - hi[r];
  }
  return {stats::mean_estimate(lo), stats::mean_estimate(hi), stats::mean_estimate(diff)};
}

// ---------------------------------------------------------------------------
// Tube energy

void TubeSolution::export_csv(std::ostream& os, const PathD& w) const {
  os << "step,time,coordinate,w,phi\n";
  os.precision(17);
  for (Eigen::Index k = 0; k < phi.cols(); ++k)
    for (Eigen::Index i = 0; i < phi.rows(); ++i)
      os << k << ',' << static_cast<double>(k) * dt << ',' << i << ',' << w.positions(i, k) << ',' << phi(i, k)
         << '\n';
}

namespace {

double dirichlet_energy(const PointMatrix<double>& phi, double dt) {
  double e = 0.0;
  for (Eigen::Index k = 0; k + 1 < phi.cols(); ++k) e += (phi.col(k + 1) - phi.col(k)).squaredNorm();
  return e / dt;
}

// Gradient of the energy with respect to the interior points, as a d x (n-1) block.
Eigen::MatrixXd energy_gradient(const PointMatrix<double>& phi, double dt) {
  const Eigen::Index n = phi.cols() - 1;
  Eigen::MatrixXd g(phi.rows(), n - 1);
  for (Eigen::Index k = 1; k < n; ++k)
    g.col(k - 1) = (2.0 / dt) * (2 * phi.col(k) - phi.col(k - 1) - phi.col(k + 1));
  return g;
}

// Primal-dual path following on
//   min f(phi) = sum |phi_{k+1} - phi_k|^2 / dt  s.t.  g_k = |phi_k - W_k|^2 - r^2 <= 0,
// with the reduced Newton system H_f + sum lambda_k grad^2 g_k + (lambda_k / s_k) grad g_k grad g_k^T,
// block tridiagonal and solved by sparse LDL^T.
TubeSolution tube_interior_point(const PathD& w, double delta, double tol) {
  const int d = w.dim;
  const Eigen::Index n = w.steps();
  const double dt = w.dt;
  const Eigen::Index m = n - 1, size = m * d;
  const bool constrained = std::isfinite(delta);
  const double r2 = constrained ? 0.25 * delta * delta : 0.0;

  TubeSolution out;
  out.dt = dt;
  out.solver = QpSolver::interior_point;
  out.phi = w.positions;
  if (m == 0) {
    out.energy = dirichlet_energy(out.phi, dt);
    return out;
  }

  // Diagonal blocks a_k I + b_k u_k u_k^T on top of the energy Hessian.
  auto assemble = [&](const Eigen::VectorXd& a, const Eigen::VectorXd& b, const Eigen::MatrixXd& u) {
    std::vector<Eigen::Triplet<double>> t;
    t.reserve(static_cast<std::size_t>(size * (d + 2)));
    const double c = 2.0 / dt;
    for (Eigen::Index k = 0; k < m; ++k) {
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
          double v = b[k] * u(i, k) * u(j, k);
          if (i == j) v += 2 * c + a[k];
          t.emplace_back(k * d + i, k * d + j, v);
        }
      if (k + 1 < m)
        for (int i = 0; i < d; ++i) {
          t.emplace_back(k * d + i, (k + 1) * d + i, -c);
          t.emplace_back((k + 1) * d + i, k * d + i, -c);
        }
    }
    Eigen::SparseMatrix<double> h(size, size);
    h.setFromTriplets(t.begin(), t.end());
    return h;
  };

  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver;
  bool analyzed = false;
  auto solve = [&](const Eigen::SparseMatrix<double>& h, const Eigen::MatrixXd& rhs) {
    if (!analyzed) {
      solver.analyzePattern(h);
      analyzed = true;
    }
    solver.factorize(h);
    if (solver.info() != Eigen::Success) throw NumericalError("tube_energy: Newton system factorization failed");
    Eigen::VectorXd x = solver.solve(Eigen::Map<const Eigen::VectorXd>(rhs.data(), size));
    return Eigen::MatrixXd(Eigen::Map<Eigen::MatrixXd>(x.data(), d, m));
  };

  const Eigen::VectorXd zeros = Eigen::VectorXd::Zero(m);
  if (!constrained) {
    // Quadratic objective: one Newton step from any point is exact.
    const Eigen::MatrixXd u = Eigen::MatrixXd::Zero(d, m);
    out.phi.middleCols(1, m) += solve(assemble(zeros, zeros, u), -energy_gradient(out.phi, dt));
    out.energy = dirichlet_energy(out.phi, dt);
    out.kkt_residual = energy_gradient(out.phi, dt).cwiseAbs().maxCoeff() / (1.0 + out.energy / dt);
    out.iterations = 1;
    return out;
  }

  auto offsets = [&](const PointMatrix<double>& phi) {
    return Eigen::MatrixXd(phi.middleCols(1, m) - w.positions.middleCols(1, m));
  };
  auto slacks = [&](const Eigen::MatrixXd& u) {
    return Eigen::VectorXd(r2 - u.colwise().squaredNorm().transpose().array());
  };
  auto dual_residual = [&](const PointMatrix<double>& phi, const Eigen::MatrixXd& u, const Eigen::VectorXd& lambda) {
    Eigen::MatrixXd r = energy_gradient(phi, dt);
    for (Eigen::Index k = 0; k < m; ++k) r.col(k) += 2 * lambda[k] * u.col(k);
    return r;
  };

  Eigen::MatrixXd u = offsets(out.phi);
  Eigen::VectorXd s = slacks(u);
  Eigen::VectorXd lambda = Eigen::VectorXd::Constant(m, std::max(1.0, dirichlet_energy(w.positions, dt)) /
                                                            (static_cast<double>(m) * r2));
  const double mu = 10.0;
  for (int it = 1; it <= 500; ++it) {
    const double gap = lambda.dot(s);
    const double tau = mu * static_cast<double>(m) / gap;
    Eigen::MatrixXd rd = dual_residual(out.phi, u, lambda);
    out.energy = dirichlet_energy(out.phi, dt);
    const double grad_scale = 1.0 + energy_gradient(out.phi, dt).cwiseAbs().maxCoeff();
    out.kkt_residual = std::max(rd.cwiseAbs().maxCoeff() / grad_scale, gap / std::max(1.0, out.energy));
    out.iterations = it - 1;
    if (out.kkt_residual <= tol) return out;

    // H dx = -(grad f + sum (1 / (tau s_k)) grad g_k).
    Eigen::VectorXd a = 2 * lambda, b = (4 * lambda.array() / s.array()).matrix();
    Eigen::MatrixXd rhs = -energy_gradient(out.phi, dt);
    for (Eigen::Index k = 0; k < m; ++k) rhs.col(k) -= (2.0 / (tau * s[k])) * u.col(k);
    const Eigen::MatrixXd dx = solve(assemble(a, b, u), rhs);
    // ds_k = -grad g_k . dx; dlambda_k = (1/tau - lambda_k s_k - lambda_k ds_k) / s_k.
    Eigen::VectorXd dlambda(m);
    for (Eigen::Index k = 0; k < m; ++k) {
      const double ds = -2 * u.col(k).dot(dx.col(k));
      dlambda[k] = (1.0 / tau - lambda[k] * s[k] - lambda[k] * ds) / s[k];
    }
    double alpha = 1.0;
    for (Eigen::Index k = 0; k < m; ++k)
      if (dlambda[k] < 0) alpha = std::min(alpha, -lambda[k] / dlambda[k]);
    alpha *= 0.99;
    const double r_norm = std::hypot(rd.norm(), (lambda.array() * s.array() - 1.0 / tau).matrix().norm());
    bool moved = false;
    for (int ls = 0; ls < 80; ++ls, alpha *= 0.5) {
      PointMatrix<double> trial = out.phi;
      trial.middleCols(1, m) += alpha * dx;
      const Eigen::MatrixXd tu = offsets(trial);
      const Eigen::VectorXd ts = slacks(tu);
      if ((ts.array() <= 0).any()) continue;
      const Eigen::VectorXd tl = lambda + alpha * dlambda;
      const double t_norm = std::hypot(dual_residual(trial, tu, tl).norm(),
                                       (tl.array() * ts.array() - 1.0 / tau).matrix().norm());
      if (t_norm <= (1 - 0.01 * alpha) * r_norm) {
        out.phi = std::move(trial);
        u = tu;
        s = ts;
        lambda = tl;
        moved = true;
        break;
      }
    }
    if (!moved) break;
  }
  std::ostringstream msg;
  msg << "tube_energy: interior point did not converge (KKT residual " << out.kkt_residual << ")";
  throw NumericalError(msg.str());
}

TubeSolution tube_projected_gradient(const PathD& w, double delta, double tol, int max_iterations) {
  const Eigen::Index n = w.steps();
  const double dt = w.dt;
  const double radius = 0.5 * delta;
  const double step = dt / 8.0;  // 1 / L with L = 8 / dt bounding the Hessian
  auto project = [&](PointMatrix<double>& phi) {
    phi.col(0) = w.positions.col(0);
    phi.col(n) = w.positions.col(n);
    if (!std::isfinite(delta)) return;
    for (Eigen::Index k = 1; k < n; ++k) {
      const Eigen::VectorXd u = phi.col(k) - w.positions.col(k);
      const double norm = u.norm();
      if (norm > radius) phi.col(k) = w.positions.col(k) + u * (radius / norm);
    }
  };
  TubeSolution out;
  out.dt = dt;
  out.solver = QpSolver::projected_gradient;
  out.phi = w.positions;
  if (n <= 1) {
    out.energy = dirichlet_energy(out.phi, dt);
    return out;
  }
  PointMatrix<double> y = out.phi, prev = out.phi;
  double t = 1.0, energy = dirichlet_energy(out.phi, dt);
  for (int it = 1; it <= max_iterations; ++it) {
    PointMatrix<double> next = y;
    next.middleCols(1, n - 1) -= step * energy_gradient(y, dt);
    project(next);
    const double next_energy = dirichlet_energy(next, dt);
    // Gradient mapping at x: L (x - P(x - grad / L)).
    PointMatrix<double> probe = next;
    const Eigen::MatrixXd g = energy_gradient(next, dt);
    probe.middleCols(1, n - 1) -= step * g;
    project(probe);
    const double residual = (next - probe).cwiseAbs().maxCoeff() / step / (1.0 + g.cwiseAbs().maxCoeff());
    if (next_energy > energy) {
      t = 1.0;  // adaptive restart
      y = out.phi;
      continue;
    }
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    y = next + ((t - 1.0) / t_next) * (next - out.phi);
    prev = out.phi;
    out.phi = std::move(next);
    energy = next_energy;
    t = t_next;
    out.iterations = it;
    out.kkt_residual = residual;
    if (residual <= tol) {
      out.energy = energy;
      return out;
    }
  }
  std::ostringstream msg;
  msg << "tube_energy: projected gradient did not converge (KKT residual " << out.kkt_residual << ")";
  throw NumericalError(msg.str());
}

}  // namespace

TubeSolution tube_energy(const PathD& w, double delta, double tol, QpSolver solver, int max_iterations) {
  require(delta > 0, "tube width delta must be positive");
  require(tol > 0, "solver tolerance must be positive");
  require(w.steps() >= 1 && w.dt > 0, "tube_energy needs a path with at least one step");
  if (solver == QpSolver::projected_gradient) return tube_projected_gradient(w, delta, tol, max_iterations);
  return tube_interior_point(w, delta, tol);
}

Kappa2Estimate kingman_kappa2(int d, double delta, std::span<const double> horizons, std::size_t reps,
                              const SeedStream& stream, double coarse_dt, int refinements, double tol) {
  require(horizons.size() >= 3, "kingman_kappa2 needs three or more horizons");
  require(std::is_sorted(horizons.begin(), horizons.end()), "horizons must be increasing");
  require(reps >= 2, "kingman_kappa2 needs two or more repetitions");
  require(refinements >= 0, "refinements must be nonnegative");
  const double top = horizons.back();
  double dt = coarse_dt;
  for (int l = 0; l < refinements; ++l) dt /= 2;
  std::vector<Eigen::Index> marks;
  for (double t : horizons) marks.push_back(step_count(t, dt));

  std::vector<std::vector<double>> rates(horizons.size(), std::vector<double>(reps));
  std::vector<double> violation(reps, -std::numeric_limits<double>::infinity());
  parallel_for(reps, [&](std::size_t r) {
    const auto s = stream.child("path", r);
    PathD w = sample_path(d, top, coarse_dt, s);
    for (int l = 0; l < refinements; ++l) w = refine(w, s.child("refine", static_cast<std::uint64_t>(l)));
    for (std::size_t j = 0; j < marks.size(); ++j) {
      const Eigen::Index nj = marks[j];
      const double y = tube_energy(segment(w, 0, nj), delta, tol).energy;
      rates[j][r] = y / horizons[j];
      if (nj % 2 == 0) {
        const double a = tube_energy(segment(w, 0, nj / 2), delta, tol).energy;
        const double b = tube_energy(segment(w, nj / 2, nj), delta, tol).energy;
        violation[r] = std::max(violation[r], y - a - b);
      }
    }
  });

  Kappa2Estimate out;
  out.horizons.assign(horizons.begin(), horizons.end());
  out.dt = dt;
  std::vector<double> x, y, wts;
  for (std::size_t j = 0; j < horizons.size(); ++j) {
    out.rates.push_back(stats::mean_estimate(rates[j]));
    x.push_back(1.0 / horizons[j]);
    y.push_back(out.rates.back().mean);
    wts.push_back(1.0 / std::max(1e-300, out.rates.back().stderr_ * out.rates.back().stderr_));
  }
  const auto fit = stats::weighted_linear_fit(x, y, wts);
  out.plateau = fit.intercept;
  out.plateau_stderr = fit.intercept_stderr;
  out.trend = stats::monotone_trend(out.rates, 0.05).trend;
  out.max_violation = *std::max_element(violation.begin(), violation.end());
  out.subadditive = out.max_violation <= 1e-6;
  return out;
}

KappaReference kappa_references(double delta, int d) {
  require(delta > 0, "delta must be positive");
  require(d >= 1, "dimension must be >= 1");
  KappaReference out;
  out.radius = 0.5 * delta;
  // J_{-1/2}(x) is proportional to cos(x) / sqrt(x), first zero pi / 2.
  out.bessel_zero = d == 1 ? std::numbers::pi / 2 : boost::math::cyl_bessel_j_zero(0.5 * (d - 2), 1);
  out.lambda1 = out.bessel_zero * out.bessel_zero / (2 * out.radius * out.radius);
  return out;
}

// ---------------------------------------------------------------------------
// Conditional proximity rate

void TubeRateEstimate::export_csv(std::ostream& os) const {
  os << "spine,time,survival\n";
  os.precision(17);
  for (std::size_t s = 0; s < survival.size(); ++s)
    for (std::size_t j = 0; j < times.size(); ++j) os << s << ',' << times[j] << ',' << survival[s][j] << '\n';
}

namespace {

std::size_t row_count_floor(std::size_t spines) { return std::min<std::size_t>(spines, 2); }

struct CommonSlopeFit {
  double slope = 0.0, slope_stderr = 0.0, r_squared = 0.0;
  std::vector<double> intercepts;
  std::vector<double> spine_slopes;
};

// Weighted least squares log S_sj = a_s + b t_j on columns [first, last].
CommonSlopeFit common_slope_fit(const std::vector<double>& t, const std::vector<std::vector<double>>& y,
                                const std::vector<std::vector<double>>& w, std::size_t first, std::size_t last) {
  CommonSlopeFit out;
  double sxy = 0.0, sxx = 0.0;
  std::vector<double> tbar(y.size()), ybar(y.size());
  std::vector<bool> active(y.size(), true);
  for (std::size_t s = 0; s < y.size(); ++s) {
    double sw = 0.0, st = 0.0, sy = 0.0;
    for (std::size_t j = first; j <= last; ++j) {
      sw += w[s][j];
      st += w[s][j] * t[j];
      sy += w[s][j] * y[s][j];
    }
    std::size_t used = 0;
    for (std::size_t j = first; j <= last; ++j) used += w[s][j] > 0 ? 1 : 0;
    if (used < 2) {
      active[s] = false;
      continue;
    }
    tbar[s] = st / sw;
    ybar[s] = sy / sw;
    double ps = 0.0, pxx = 0.0;
    for (std::size_t j = first; j <= last; ++j) {
      const double dx = t[j] - tbar[s];
      sxy += w[s][j] * dx * (y[s][j] - ybar[s]);
      sxx += w[s][j] * dx * dx;
      ps += w[s][j] * dx * (y[s][j] - ybar[s]);
      pxx += w[s][j] * dx * dx;
    }
    out.spine_slopes.push_back(ps / pxx);
  }
  if (!(sxx > 0)) throw NumericalError("proximity rate: degenerate fit window");
  out.slope = sxy / sxx;
  double ssr = 0.0, sst = 0.0;
  for (std::size_t s = 0; s < y.size(); ++s) {
    if (!active[s]) {
      out.intercepts.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    out.intercepts.push_back(ybar[s] - out.slope * tbar[s]);
    for (std::size_t j = first; j <= last; ++j) {
      const double fit = out.intercepts[s] + out.slope * t[j];
      ssr += w[s][j] * (y[s][j] - fit) * (y[s][j] - fit);
      sst += w[s][j] * (y[s][j] - ybar[s]) * (y[s][j] - ybar[s]);
    }
  }
  out.r_squared = sst > 0 ? 1.0 - ssr / sst : 1.0;
  out.slope_stderr = std::sqrt(1.0 / sxx);
  if (out.spine_slopes.size() >= 2) {
    const auto e = stats::mean_estimate(out.spine_slopes);
    out.slope_stderr = std::max(out.slope_stderr, e.stderr_);
  }
  return out;
}

TubeRateEstimate proximity_from_spines(const std::vector<PathD>& spines, double delta,
                                       std::span<const double> horizons, std::size_t partner_reps,
                                       const SeedStream& stream) {
  const int d = spines.front().dim;
  const double dt = spines.front().dt;
  std::vector<Eigen::Index> marks;
  for (double t : horizons) marks.push_back(step_count(t, dt));
  const Eigen::Index top = marks.back();
  const double d2 = delta * delta;
  TubeRateEstimate out;
  out.delta = delta;
  out.dt = dt;
  out.lambda1 = kappa_references(2 * delta, d).lambda1;
  out.times.assign(horizons.begin(), horizons.end());
  out.survival.assign(spines.size(), std::vector<double>(horizons.size(), 0.0));

  parallel_for(spines.size(), [&](std::size_t s) {
    const PathD& spine = spines[s];
    require(spine.steps() >= top, "spine shorter than the horizon grid");
    auto rng = stream.child("partners", s).engine();
    std::normal_distribution<double> normal(0.0, std::sqrt(dt));
    std::vector<std::size_t> alive(marks.size(), 0);
    Eigen::VectorXd x(d);
    for (std::size_t q = 0; q < partner_reps; ++q) {
      x = spine.positions.col(0);
      Eigen::Index exit = top + 1;
      for (Eigen::Index k = 1; k <= top; ++k) {
        for (int i = 0; i < d; ++i) x[i] += normal(rng);
        if ((x - spine.positions.col(k)).squaredNorm() >= d2) {
          exit = k;
          break;
        }
      }
      for (std::size_t j = 0; j < marks.size(); ++j)
        if (exit > marks[j]) ++alive[j];
    }
    for (std::size_t j = 0; j < marks.size(); ++j)
      out.survival[s][j] = static_cast<double>(alive[j]) / static_cast<double>(partner_reps);
  });

  // Zero-survivor points carry no weight; the window ends at the last horizon
  // where at least two spines still have survivors.
  std::size_t last = 0;
  for (std::size_t j = 0; j < horizons.size(); ++j) {
    std::size_t alive = 0;
    for (const auto& row : out.survival) alive += row[j] > 0.0 ? 1 : 0;
    if (alive < row_count_floor(out.survival.size())) break;
    last = j + 1;
  }
  for (const auto& row : out.survival)
    for (double v : row) out.truncated = out.truncated || v <= 0.0;
  if (last < 3) return out;
  --last;

  const double n = static_cast<double>(partner_reps);
  std::vector<std::vector<double>> y(spines.size()), w(spines.size());
  for (std::size_t s = 0; s < spines.size(); ++s)
    for (std::size_t j = 0; j < horizons.size(); ++j) {
      const double p = out.survival[s][j];
      y[s].push_back(p > 0 ? std::log(p) : 0.0);
      // Delta-method variance of log p, regularized at p = 1.
      w[s].push_back(p > 0 ? n * p / (1.0 - p + 1.0 / n) : 0.0);
    }

  for (std::size_t first = 0; last >= first + 2; ++first) {
    const auto fit = common_slope_fit(out.times, y, w, first, last);
    out.kappa = -fit.slope;
    out.kappa_stderr = fit.slope_stderr;
    out.r_squared = fit.r_squared;
    out.window_first = first;
    out.window_last = last;
    out.log_chi = fit.intercepts;
    out.slope_spread = fit.spine_slopes.size() >= 2
                           ? stats::mean_estimate(fit.spine_slopes).stderr_ *
                                 std::sqrt(static_cast<double>(fit.spine_slopes.size()))
                           : 0.0;
    if (fit.r_squared >= 0.98) {
      out.determined = true;
      break;
    }
  }
  return out;
}

std::vector<PathD> make_spines(int d, double top, std::size_t count, const SeedStream& stream, double dt,
                               bool frozen) {
  std::vector<PathD> spines;
  for (std::size_t s = 0; s < count; ++s) {
    if (frozen)
      spines.push_back(frozen_path(Eigen::VectorXd::Zero(d), top, dt));
    else
      spines.push_back(sample_path(d, top, dt, stream.child("spine", s)));
  }
  return spines;
}

void require_rate_arguments(int d, double delta, std::span<const double> horizons, std::size_t spines,
                            std::size_t partners) {
  require(d >= 1, "dimension must be >= 1");
  require(delta > 0, "delta must be positive");
  require(horizons.size() >= 3, "proximity rate needs three or more horizons");
  require(std::is_sorted(horizons.begin(), horizons.end()) && horizons.front() > 0, "horizons must be increasing");
  require(spines >= 1 && partners >= 1, "proximity rate needs spines and partners");
}

}  // namespace

TubeRateEstimate conditional_proximity_rate(int d, double delta, std::span<const double> horizons,
                                            std::size_t spine_reps, std::size_t partner_reps,
                                            const SeedStream& stream, double dt, bool frozen_spine) {
  require_rate_arguments(d, delta, horizons, spine_reps, partner_reps);
  const auto spines = make_spines(d, horizons.back(), spine_reps, stream, dt, frozen_spine);
  return proximity_from_spines(spines, delta, horizons, partner_reps, stream.child("level", 0));
}

TubeRateEstimate refined_proximity_rate(int d, double delta, std::span<const double> horizons,
                                        std::size_t spine_reps, std::size_t partner_reps,
                                        const SeedStream& stream, double coarse_dt, int max_levels,
                                        double rel_tol, bool frozen_spine) {
  require_rate_arguments(d, delta, horizons, spine_reps, partner_reps);
  require(max_levels >= 1, "max_levels must be positive");
  auto spines = make_spines(d, horizons.back(), spine_reps, stream, coarse_dt, frozen_spine);
  auto best = proximity_from_spines(spines, delta, horizons, partner_reps, stream.child("level", 0));
  for (int level = 1; level < max_levels; ++level) {
    for (std::size_t s = 0; s < spines.size(); ++s)
      spines[s] = frozen_spine ? frozen_path(Eigen::VectorXd::Zero(d), horizons.back(), spines[s].dt / 2)
                               : refine(spines[s], stream.child("refine", s).child("level", static_cast<std::uint64_t>(level)));
    auto next = proximity_from_spines(spines, delta, horizons, partner_reps,
                                      stream.child("level", static_cast<std::uint64_t>(level)));
    const bool converged = std::abs(next.kappa - best.kappa) <= rel_tol * std::abs(next.kappa);
    best = std::move(next);
    if (converged) break;
  }
  return best;
}

// ---------------------------------------------------------------------------
// Overlap lower bound

DeltaCalibration calibrate_delta(const KernelD& k, double fraction, int points) {
  require(fraction > 0 && fraction < 1, "fraction must lie in (0, 1)");
  require(points >= 2, "calibration grid needs two or more points");
  DeltaCalibration out;
  out.fraction = fraction;
  out.kernel_at_zero = k.at_zero();
  out.kernel_at_delta = out.kernel_at_zero;
  const double top = k.effective_radius();
  double running_min = out.kernel_at_zero;
  for (int i = 1; i < points; ++i) {
    const double r = top * i / (points - 1);
    running_min = std::min(running_min, k.radial(r));
    if (running_min < fraction * out.kernel_at_zero) break;
    out.delta = r;
    out.kernel_at_delta = running_min;
  }
  return out;
}

OverlapBoundCheck overlap_lower_bound_check(const KernelD& k, const DeltaCalibration& cal, double horizon,
                                            std::size_t pairs, const SeedStream& stream, double dt) {
  require(cal.delta > 0, "calibrated delta must be positive");
  std::vector<double> ratio(pairs, std::numeric_limits<double>::quiet_NaN());
  parallel_for(pairs, [&](std::size_t r) {
    const auto a = sample_path(k.dim(), horizon, dt, stream.child("a", r));
    const auto b = sample_path(k.dim(), horizon, dt, stream.child("b", r));
    if (!proximity_time(a, b, cal.delta).exceeded_horizon()) return;
    ratio[r] = overlap(a, b, k) / (cal.kernel_at_zero * horizon);
  });
  OverlapBoundCheck out;
  out.pairs = pairs;
  for (double q : ratio) {
    if (std::isnan(q)) continue;
    ++out.survivors;
    out.min_ratio = std::min(out.min_ratio, q);
    if (q < cal.fraction * (1 - 1e-12)) ++out.violations;
  }
  return out;
}

}  // namespace polymerlab
