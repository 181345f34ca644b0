#pragma once

#include "polymerlab/core.hpp"

#include <boost/math/interpolators/cardinal_cubic_b_spline.hpp>
#include <boost/math/quadrature/gauss.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/quadrature/tanh_sinh.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <ostream>
#include <utility>
#include <vector>

namespace polymerlab {

enum class MollifierKind { compact_bump, gaussian };

enum class KernelEvaluation { analytic, tabulated };

inline const char* to_string(MollifierKind k) {
  return k == MollifierKind::compact_bump ? "compact-bump" : "gaussian";
}

namespace detail {

/// Unnormalized unit bump profile exp(-1/(1-r^2)) on r < 1.
inline double bump_profile(double r) {
  if (r >= 1.0) return 0.0;
  const double q = 1.0 - r * r;
  return std::exp(-1.0 / q);
}

/// Normalizing constant c_d with c_d * int_{R^d} bump_profile(|x|) dx = 1.
inline double bump_normalization(int d) {
  static std::mutex mutex;
  static std::map<int, double> cache;
  std::lock_guard lock(mutex);
  if (auto it = cache.find(d); it != cache.end()) return it->second;
  boost::math::quadrature::tanh_sinh<double> integrator;
  const double radial = integrator.integrate(
      [d](double r) { return std::pow(r, d - 1) * bump_profile(r); }, 0.0, 1.0);
  const double c = 1.0 / (unit_sphere_area<double>(d) * radial);
  cache.emplace(d, c);
  return c;
}

/// Radial table of U(R) = (p * p_rho)(R) where p is the normalized unit bump
/// in R^d and p_rho(x) = rho^{-d} p(x/rho), rho >= 1. Support is [0, 1+rho].
class RadialTable {
 public:
  static constexpr int kKnots = 4096;

  RadialTable(int d, double rho);

  double operator()(double r) const {
    if (r >= range_) return 0.0;
    return std::max(0.0, spline_(r));
  }
  double at_zero() const { return values_.front(); }
  double range() const { return range_; }
  double spacing() const { return range_ / (kKnots - 1); }
  const std::vector<double>& knots() const { return values_; }

 private:
  static std::vector<double> tabulate(int d, double rho, double range);

  double range_;
  std::vector<double> values_;
  boost::math::interpolators::cardinal_cubic_b_spline<double> spline_;
};

inline RadialTable::RadialTable(int d, double rho)
    : range_(1.0 + rho),
      values_(tabulate(d, rho, 1.0 + rho)),
      spline_(values_.data(), values_.size(), 0.0, range_ / (kKnots - 1), 0.0, 0.0) {}

/// Composite Gauss-Legendre rule; the bump profiles are C-infinity with flat
/// edges, where fixed panels converge faster than adaptive error control.
template <typename F>
double panel_integrate(F&& f, double a, double b, int panels) {
  if (!(b > a)) return 0.0;
  const double w = (b - a) / panels;
  double total = 0.0;
  for (int i = 0; i < panels; ++i)
    total += boost::math::quadrature::gauss<double, 20>::integrate(f, a + i * w, a + (i + 1) * w);
  return total;
}

inline std::vector<double> RadialTable::tabulate(int d, double rho, double range) {
  const double c = bump_normalization(d);
  const double c_rho = c * std::pow(rho, -d);
  auto p = [c](double r) { return c * bump_profile(r); };
  auto p_rho = [c_rho, rho](double s) { return c_rho * bump_profile(s / rho); };

  std::vector<double> out(kKnots, 0.0);
  const double h = range / (kKnots - 1);
  out[0] = unit_sphere_area<double>(d) *
           panel_integrate([&](double r) { return std::pow(r, d - 1) * p(r) * p_rho(r); }, 0.0, 1.0, 32);

  if (d == 3) {
    // Shell reduction: int_{S^2} g(|r w - R e|) dw = (2 pi / (r R)) int_{|r-R|}^{r+R} s g(s) ds,
    // with the cumulative G(x) = int_0^x s p_rho(s) ds held as a cubic Hermite table.
    constexpr int cells = 8192;
    const double hg = rho / cells;
    std::vector<double> cum(cells + 1, 0.0);
    auto g = [&](double s) { return s * p_rho(s); };
    for (int j = 0; j < cells; ++j)
      cum[j + 1] = cum[j] + boost::math::quadrature::gauss<double, 20>::integrate(g, j * hg, (j + 1) * hg);
    auto cumulative = [&](double x) {
      if (x <= 0.0) return 0.0;
      if (x >= rho) return cum[cells];
      const int j = std::min(cells - 1, static_cast<int>(x / hg));
      const double x0 = j * hg, t = (x - x0) / hg;
      const double h00 = (1 + 2 * t) * (1 - t) * (1 - t), h10 = t * (1 - t) * (1 - t);
      const double h01 = t * t * (3 - 2 * t), h11 = t * t * (t - 1);
      return h00 * cum[j] + h10 * hg * g(x0) + h01 * cum[j + 1] + h11 * hg * g(x0 + hg);
    };
    for (int k = 1; k < kKnots - 1; ++k) {
      const double R = k * h;
      auto integrand = [&](double r) {
        return r * p(r) * (cumulative(std::min(r + R, rho)) - cumulative(std::abs(r - R)));
      };
      std::vector<double> cuts{std::max(0.0, R - rho), 1.0};
      for (double x : {R, rho - R})
        if (x > cuts.front() && x < 1.0) cuts.push_back(x);
      std::sort(cuts.begin(), cuts.end());
      double value = 0.0;
      for (std::size_t i = 0; i + 1 < cuts.size(); ++i)
        value += panel_integrate(integrand, cuts[i], cuts[i + 1], 8);
      out[k] = std::max(0.0, 2.0 * std::numbers::pi / R * value);
    }
  } else if (d == 1) {
    for (int k = 1; k < kKnots - 1; ++k) {
      const double R = k * h;
      const double lo = std::max(-1.0, R - rho), hi = std::min(1.0, R + rho);
      out[k] = panel_integrate([&](double y) { return p(std::abs(y)) * p_rho(std::abs(y - R)); },
                               lo, hi, 16);
    }
  } else {
    // Spherical coordinates around the origin; theta is the angle to the shift.
    const double sphere = unit_sphere_area<double>(d - 1);
    for (int k = 1; k < kKnots - 1; ++k) {
      const double R = k * h;
      auto inner = [&](double r) {
        if (r <= 0.0) return 0.0;
        const double cmin = (r * r + R * R - rho * rho) / (2 * r * R);
        if (cmin >= 1.0) return 0.0;
        const double theta_max = cmin <= -1.0 ? std::numbers::pi : std::acos(cmin);
        return panel_integrate(
            [&](double th) {
              const double s2 = std::max(0.0, r * r + R * R - 2 * r * R * std::cos(th));
              return p_rho(std::sqrt(s2)) * std::pow(std::sin(th), d - 2);
            },
            0.0, theta_max, 3);
      };
      auto integrand = [&](double r) { return std::pow(r, d - 1) * p(r) * inner(r); };
      std::vector<double> cuts{std::max(0.0, R - rho), 1.0};
      if (rho - R > cuts.front() && rho - R < 1.0) cuts.push_back(rho - R);
      std::sort(cuts.begin(), cuts.end());
      double value = 0.0;
      for (std::size_t i = 0; i + 1 < cuts.size(); ++i)
        value += panel_integrate(integrand, cuts[i], cuts[i + 1], 6);
      out[k] = std::max(0.0, sphere * value);
    }
  }
  out[kKnots - 1] = 0.0;
  return out;
}

inline std::shared_ptr<const RadialTable> bump_table(int d, double rho) {
  static std::mutex mutex;
  static std::map<std::pair<int, double>, std::shared_ptr<const RadialTable>> cache;
  {
    std::lock_guard lock(mutex);
    if (auto it = cache.find({d, rho}); it != cache.end()) return it->second;
  }
  auto table = std::make_shared<const RadialTable>(d, rho);
  std::lock_guard lock(mutex);
  return cache.try_emplace({d, rho}, std::move(table)).first->second;
}

}  // namespace detail

/// Smooth, nonnegative, even profile of unit mass at length `scale`:
/// phi_scale(x) = scale^{-d} phi(x / scale).
template <typename Scalar>
class Mollifier {
 public:
  Mollifier(MollifierKind kind, Scalar scale, int dim) : kind_(kind), scale_(scale), dim_(dim) {
    require(scale > 0, "mollifier scale must be positive");
    require(dim >= 1, "mollifier dimension must be >= 1");
    if (kind == MollifierKind::compact_bump)
      peak_ = Scalar(detail::bump_normalization(dim)) * std::pow(scale, -Scalar(dim));
    else
      peak_ = std::pow(Scalar(2) * std::numbers::pi_v<Scalar> * scale * scale, -Scalar(dim) / 2);
  }

  MollifierKind kind() const { return kind_; }
  Scalar scale() const { return scale_; }
  int dim() const { return dim_; }

  /// phi_scale evaluated at a point of norm r.
  Scalar radial(Scalar r) const {
    const Scalar u = r / scale_;
    if (kind_ == MollifierKind::compact_bump) {
      if (u >= 1) return Scalar(0);
      return peak_ * std::exp(-Scalar(1) / (Scalar(1) - u * u));
    }
    return peak_ * std::exp(-u * u / 2);
  }

  /// Same as radial(sqrt(r2)); avoids the square root in hot loops.
  Scalar radial_squared(Scalar r2) const {
    const Scalar u2 = r2 / (scale_ * scale_);
    if (kind_ == MollifierKind::compact_bump) {
      if (u2 >= 1) return Scalar(0);
      return peak_ * std::exp(-Scalar(1) / (Scalar(1) - u2));
    }
    return peak_ * std::exp(-u2 / 2);
  }

  template <typename Derived>
  Scalar operator()(const Eigen::MatrixBase<Derived>& x) const {
    require(x.size() == dim_, "phi_value: point dimension does not match mollifier");
    return radial(x.norm());
  }

  /// Value at the origin.
  Scalar peak() const {
    return kind_ == MollifierKind::compact_bump ? peak_ * std::exp(-Scalar(1)) : peak_;
  }

  /// Radius outside which phi vanishes (infinite for the Gaussian kind).
  Scalar support_radius() const {
    return kind_ == MollifierKind::compact_bump ? scale_ : std::numeric_limits<Scalar>::infinity();
  }

  /// Radius used when a discretized field must truncate the profile.
  Scalar truncation_radius() const {
    return kind_ == MollifierKind::compact_bump ? scale_ : Scalar(4) * scale_;
  }

  Mollifier rescaled(Scalar scale) const { return Mollifier(kind_, scale, dim_); }

 private:
  MollifierKind kind_;
  Scalar scale_;
  int dim_;
  Scalar peak_;  // bump: c_d scale^{-d}; gaussian: density at 0
};

template <typename Scalar, typename Derived>
Scalar phi_value(const Mollifier<Scalar>& m, const Eigen::MatrixBase<Derived>& x) {
  return m(x);
}

/// V_{a,b} = phi_a * phi_b for two mollifiers of the same kind and dimension.
template <typename Scalar>
class CovarianceKernel {
 public:
  explicit CovarianceKernel(const Mollifier<Scalar>& m) : CovarianceKernel(m, m) {}

  CovarianceKernel(const Mollifier<Scalar>& a, const Mollifier<Scalar>& b)
      : kind_(a.kind()), dim_(a.dim()) {
    require(a.kind() == b.kind(), "kernel: mollifier kinds differ");
    require(a.dim() == b.dim(), "kernel: mollifier dimensions differ");
    eps_ = std::min(a.scale(), b.scale());
    delta_ = std::max(a.scale(), b.scale());
    if (kind_ == MollifierKind::compact_bump) {
      table_ = detail::bump_table(dim_, static_cast<double>(delta_ / eps_));
      prefactor_ = std::pow(eps_, -Scalar(dim_));
    } else {
      variance_ = eps_ * eps_ + delta_ * delta_;
      prefactor_ = std::pow(Scalar(2) * std::numbers::pi_v<Scalar> * variance_, -Scalar(dim_) / 2);
    }
  }

  MollifierKind kind() const { return kind_; }
  int dim() const { return dim_; }
  Scalar eps() const { return eps_; }
  Scalar delta() const { return delta_; }
  Scalar amplitude() const { return amplitude_; }
  KernelEvaluation evaluation() const {
    return kind_ == MollifierKind::compact_bump ? KernelEvaluation::tabulated
                                                : KernelEvaluation::analytic;
  }

  /// Kernel at a separation of norm r.
  Scalar radial(Scalar r) const {
    if (kind_ == MollifierKind::compact_bump)
      return amplitude_ * prefactor_ * Scalar((*table_)(static_cast<double>(r / eps_)));
    return amplitude_ * prefactor_ * std::exp(-r * r / (2 * variance_));
  }

  template <typename Derived>
  Scalar operator()(const Eigen::MatrixBase<Derived>& x) const {
    require(x.size() == dim_, "kernel_value: point dimension does not match kernel");
    return radial(x.norm());
  }

  Scalar at_zero() const {
    if (kind_ == MollifierKind::compact_bump)
      return amplitude_ * prefactor_ * Scalar(table_->at_zero());
    return amplitude_ * prefactor_;
  }

  Scalar support_radius() const {
    return kind_ == MollifierKind::compact_bump ? eps_ + delta_
                                                : std::numeric_limits<Scalar>::infinity();
  }

  /// Radius beyond which the kernel is negligible (exactly zero for the bump).
  Scalar effective_radius() const {
    return kind_ == MollifierKind::compact_bump ? eps_ + delta_ : Scalar(12) * std::sqrt(variance_);
  }

  /// Same kernel multiplied by a constant (unnormalized test kernels).
  CovarianceKernel scaled(Scalar factor) const {
    CovarianceKernel copy = *this;
    copy.amplitude_ *= factor;
    return copy;
  }

  /// Writes the radial profile as CSV rows "radius,value".
  void export_csv(std::ostream& os, int rows = 512) const {
    os << "radius,value\n";
    const Scalar top = effective_radius();
    os.precision(17);
    for (int k = 0; k < rows; ++k) {
      const Scalar r = top * Scalar(k) / Scalar(rows - 1);
      os << r << ',' << radial(r) << '\n';
    }
  }

 private:
  MollifierKind kind_;
  int dim_;
  Scalar eps_ = 1, delta_ = 1;
  Scalar amplitude_ = 1;
  Scalar prefactor_ = 1;
  Scalar variance_ = 2;
  std::shared_ptr<const detail::RadialTable> table_;
};

template <typename Scalar, typename Derived>
Scalar kernel_value(const CovarianceKernel<Scalar>& k, const Eigen::MatrixBase<Derived>& x) {
  return k(x);
}

/// int_{R^d} V(x) dx by radial quadrature.
template <typename Scalar>
Scalar kernel_integral(const CovarianceKernel<Scalar>& k) {
  using boost::math::quadrature::gauss_kronrod;
  const int d = k.dim();
  const double top = static_cast<double>(k.effective_radius());
  auto f = [&](double r) { return std::pow(r, d - 1) * static_cast<double>(k.radial(Scalar(r))); };
  // Split at many points so the piecewise-cubic table is integrated accurately.
  constexpr int pieces = 64;
  double total = 0.0;
  for (int i = 0; i < pieces; ++i)
    total += gauss_kronrod<double, 31>::integrate(f, top * i / pieces, top * (i + 1) / pieces, 10,
                                                  1e-14);
  return Scalar(unit_sphere_area<double>(d) * total);
}

using MollifierD = Mollifier<double>;
using KernelD = CovarianceKernel<double>;

}  // namespace polymerlab
