#include "polymerlab/cli.hpp"

#include "polymerlab/analysis.hpp"
#include "polymerlab/gmc.hpp"
#include "polymerlab/parallel.hpp"
#include "polymerlab/paths.hpp"
#include "polymerlab/random.hpp"
#include "polymerlab/stats.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <functional>
#include <iomanip>
#include <set>
#include <sstream>

namespace polymerlab::cli {

namespace {

constexpr ExperimentKind all_kinds[] = {
    ExperimentKind::partition,     ExperimentKind::martingale,        ExperimentKind::size_biased,
    ExperimentKind::second_moment, ExperimentKind::threshold,         ExperimentKind::smoothed_variance,
    ExperimentKind::tube,          ExperimentKind::kahane,            ExperimentKind::phase_scan,
};

const std::set<std::string> experiment_keys{"kind", "id", "seed", "threads", "out", "level"};

std::set<std::string> param_keys(ExperimentKind kind) {
  const std::set<std::string> polymer{"betas", "beta_multiples", "horizons", "dim", "mollifier", "dt", "replicas", "reps"};
  auto with = [](std::set<std::string> base, std::initializer_list<const char*> extra) {
    for (const char* k : extra) base.insert(k);
    return base;
  };
  switch (kind) {
    case ExperimentKind::partition: return with(polymer, {"method"});
    case ExperimentKind::martingale: return polymer;
    case ExperimentKind::size_biased: return with(polymer, {"method", "spine_mode"});
    case ExperimentKind::second_moment: return with(polymer, {"method"});
    case ExperimentKind::threshold:
      return {"betas", "beta_multiples", "horizons", "dim", "mollifier", "dt", "reps"};
    case ExperimentKind::smoothed_variance:
      return {"betas", "beta_multiples", "eps", "dim", "mollifier", "dt", "reps", "nodes", "mixture_weights",
              "mixture_widths"};
    case ExperimentKind::tube:
      return {"dim", "deltas", "horizons", "reps", "dt", "refinements", "spines", "partners", "proximity_horizons"};
    case ExperimentKind::kahane: return {"atoms", "pairs", "alphas", "reps"};
    case ExperimentKind::phase_scan: return with(polymer, {"method", "alphas"});
  }
  return {};
}

bool uses_beta(ExperimentKind k) {
  return k != ExperimentKind::tube && k != ExperimentKind::kahane;
}

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> items;
  if (trim(value).empty()) return items;
  std::size_t start = 0;
  for (;;) {
    const auto comma = value.find(',', start);
    items.push_back(trim(std::string_view(value).substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return items;
}

std::string canonical(const std::string& value) {
  const auto items = split_list(value);
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? ", " : "") + items[i];
  return out;
}

double parse_double(const std::string& key, const std::string& text) {
  double v = 0.0;
  const auto t = trim(text);
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty())
    throw ConfigError(key, "expected a number, got '" + t + "'");
  if (!std::isfinite(v)) throw ConfigError(key, "value must be finite");
  return v;
}

std::uint64_t parse_unsigned(const std::string& key, const std::string& text) {
  std::uint64_t v = 0;
  const auto t = trim(text);
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty())
    throw ConfigError(key, "expected a nonnegative integer, got '" + t + "'");
  return v;
}

std::vector<double> parse_list(const std::string& key, const std::string& text) {
  std::vector<double> out;
  for (const auto& item : split_list(text)) out.push_back(parse_double(key, item));
  return out;
}

MollifierKind mollifier_from_string(const std::string& key, const std::string& name) {
  if (name == "compact-bump") return MollifierKind::compact_bump;
  if (name == "gaussian") return MollifierKind::gaussian;
  throw ConfigError(key, "unknown mollifier '" + name + "' (expected compact-bump or gaussian)");
}

SpineMode spine_mode_from_string(const std::string& key, const std::string& name) {
  if (name == "partners-only") return SpineMode::partners_only;
  if (name == "include-spine") return SpineMode::include_spine;
  throw ConfigError(key, "unknown spine mode '" + name + "' (expected partners-only or include-spine)");
}

// Runs `check` and rethrows library argument errors against `key`.
template <typename F>
void check_with(const std::string& key, F&& check) {
  try {
    check();
  } catch (const ConfigError&) {
    throw;
  } catch (const ArgumentError& e) {
    throw ConfigError(key, e.what());
  }
}

void require_key(bool ok, const std::string& key, const std::string& message) {
  if (!ok) throw ConfigError(key, message);
}

void require_increasing(const std::vector<double>& xs, const std::string& key) {
  for (std::size_t i = 0; i < xs.size(); ++i) {
    require_key(xs[i] > 0, key, "entries must be positive");
    if (i > 0) require_key(xs[i] > xs[i - 1], key, "entries must be increasing");
  }
}

KernelD kernel_of(const ExperimentConfig& c) { return KernelD(MollifierD(c.mollifier, 1.0, c.dim)); }

double beta_threshold(const ExperimentConfig& c) { return beta_star_bound(kernel_of(c)); }

std::string iso_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

// Grid coordinates of one beta: the absolute value and, when it came from a
// multiple of the threshold, that multiple.
struct BetaPoint {
  double beta = 0.0;
  double multiple = std::numeric_limits<double>::quiet_NaN();
};

std::vector<BetaPoint> beta_points(const ExperimentConfig& c) {
  std::vector<BetaPoint> out;
  for (double b : c.betas) out.push_back({b});
  if (!c.beta_multiples.empty()) {
    const double ref = beta_threshold(c);
    for (double m : c.beta_multiples) out.push_back({m * ref, m});
  }
  return out;
}

class Runner {
 public:
  Runner(const ExperimentConfig& c, const RunOptions& o, std::ostream* sink)
      : config_(c), options_(o), sink_(sink), hash_(c.hash()),
        root_(root_stream(c.seed).child(to_string(c.kind))) {}

  RunResult run() {
    switch (config_.kind) {
      case ExperimentKind::partition: partition(); break;
      case ExperimentKind::martingale: martingale(); break;
      case ExperimentKind::size_biased: size_biased(); break;
      case ExperimentKind::second_moment: second_moment(); break;
      case ExperimentKind::threshold: threshold(); break;
      case ExperimentKind::smoothed_variance: smoothed(); break;
      case ExperimentKind::tube: tube(); break;
      case ExperimentKind::kahane: kahane(); break;
      case ExperimentKind::phase_scan: phase_scan(); break;
    }
    return std::move(result_);
  }

 private:
  using json = nlohmann::ordered_json;

  ResultRecord make(const std::string& op, const SeedStream& stream, json params) const {
    ResultRecord r;
    r.experiment = config_.id;
    r.kind = to_string(config_.kind);
    r.timestamp = iso_timestamp();
    r.config_hash = hash_;
    r.op = op;
    r.params = std::move(params);
    r.seed = config_.seed;
    r.stream = hex(stream.id);
    return r;
  }

  static json beta_params(const BetaPoint& b) {
    json p = json::object();
    p["beta"] = b.beta;
    if (!std::isnan(b.multiple)) p["beta_multiple"] = b.multiple;
    return p;
  }

  void emit(std::vector<ResultRecord> records, double seconds) {
    for (auto& r : records) {
      r.wall_time = seconds;
      if (r.status != "ok") ++result_.failures;
      if (sink_) *sink_ << r.to_json().dump() << '\n';
      result_.records.push_back(std::move(r));
    }
    if (sink_) sink_->flush();
  }

  // One grid point: `body` fills records; numerical failures become a failed
  // record carrying the point's params unless strict.
  void point(const std::string& op, const SeedStream& stream, const json& params,
             const std::function<void(std::vector<ResultRecord>&)>& body) {
    const auto start = std::chrono::steady_clock::now();
    std::vector<ResultRecord> out;
    try {
      body(out);
    } catch (const NumericalError& e) {
      if (options_.strict) throw;
      out.clear();
      auto r = make(op, stream, params);
      r.status = "failed";
      r.error = e.what();
      out.push_back(std::move(r));
    } catch (const CoverageError& e) {
      if (options_.strict) throw NumericalError(e.what());
      out.clear();
      auto r = make(op, stream, params);
      r.status = "failed";
      r.error = e.what();
      out.push_back(std::move(r));
    }
    emit(std::move(out), std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  }

  static void put(ResultRecord& r, const std::string& name, double value, double se) {
    r.values[name] = value;
    r.stderrs[name] = se;
  }

  static void put(ResultRecord& r, const std::string& name, const stats::MeanEstimate& e) {
    put(r, name, e.mean, e.stderr_);
  }

  static void put_quantile(ResultRecord& r, const std::string& name, const std::vector<double>& xs, double q) {
    put(r, name, stats::quantile(xs, q), stats::quantile_stderr(xs, q));
  }

  static stats::MeanEstimate exp_mean(const std::vector<double>& logs) {
    std::vector<double> zs(logs.size());
    std::transform(logs.begin(), logs.end(), zs.begin(), [](double x) { return std::exp(x); });
    return stats::mean_estimate(zs);
  }

  void partition() {
    const auto betas = beta_points(config_);
    const auto& hs = config_.horizons;
    if (betas.empty() || hs.empty()) return;
    point("partition_estimate", root_, json::object(), [&](std::vector<ResultRecord>& out) {
      // One bank per repetition serves every beta and horizon.
      std::vector<std::vector<std::vector<double>>> logs(betas.size(),
                                                         std::vector<std::vector<double>>(hs.size(), std::vector<double>(config_.reps)));
      parallel_for(config_.reps, [&](std::size_t r) {
        const auto bank = sample_replica_bank(config_.polymer(0.0, hs.back()), config_.replicas, hs, config_.method,
                                              root_.child("rep", r));
        for (std::size_t b = 0; b < betas.size(); ++b)
          for (std::size_t j = 0; j < hs.size(); ++j)
            logs[b][j][r] = estimate_from_bank(bank, config_.polymer(betas[b].beta, hs[j]), j).log_value;
      });
      for (std::size_t b = 0; b < betas.size(); ++b)
        for (std::size_t j = 0; j < hs.size(); ++j) {
          auto params = beta_params(betas[b]);
          params["t"] = hs[j];
          auto rec = make("partition_estimate", root_, params);
          put(rec, "mean", exp_mean(logs[b][j]));
          put_quantile(rec, "log_median", logs[b][j], 0.5);
          out.push_back(std::move(rec));
        }
    });
  }

  void martingale() {
    const auto betas = beta_points(config_);
    const auto& hs = config_.horizons;
    if (betas.empty() || hs.empty()) return;
    for (std::size_t b = 0; b < betas.size(); ++b) {
      const auto stream = root_.child("beta", b);
      point("martingale", stream, beta_params(betas[b]), [&](std::vector<ResultRecord>& out) {
        std::vector<std::vector<double>> z(hs.size(), std::vector<double>(config_.reps));
        parallel_for(config_.reps, [&](std::size_t r) {
          // Common noise across betas: the stream depends only on the repetition.
          const auto traj = martingale_trajectory(config_.polymer(betas[b].beta, hs.front()), hs, config_.replicas,
                                                  root_.child("rep", r));
          for (std::size_t j = 0; j < hs.size(); ++j) z[j][r] = traj.values[j];
        });
        for (std::size_t j = 0; j < hs.size(); ++j) {
          auto params = beta_params(betas[b]);
          params["t"] = hs[j];
          auto rec = make("martingale_mean", stream, params);
          put(rec, "mean", stats::mean_estimate(z[j]));
          out.push_back(std::move(rec));
        }
        for (std::size_t j = 0; j + 1 < hs.size(); ++j) {
          std::vector<double> inc(config_.reps);
          for (std::size_t r = 0; r < config_.reps; ++r) inc[r] = z[j + 1][r] - z[j][r];
          const auto fit = stats::linear_fit(z[j], inc, true);
          auto params = beta_params(betas[b]);
          params["t"] = hs[j];
          params["t_next"] = hs[j + 1];
          auto rec = make("martingale_regression", stream, params);
          put(rec, "intercept", fit.intercept, fit.intercept_stderr);
          put(rec, "slope", fit.slope, fit.slope_stderr);
          const bool ok = std::abs(fit.intercept) <= 3 * fit.intercept_stderr &&
                          std::abs(fit.slope) <= 3 * fit.slope_stderr;
          rec.verdicts["martingale"] = ok ? "consistent" : "inconsistent";
          out.push_back(std::move(rec));
        }
      });
    }
  }

  void size_biased() {
    const auto betas = beta_points(config_);
    const auto& hs = config_.horizons;
    if (betas.empty() || hs.empty()) return;
    for (std::size_t j = 0; j < hs.size(); ++j) {
      const auto stream = root_.child("t", j);
      point("size_biased_partition", stream, json{{"t", hs[j]}}, [&](std::vector<ResultRecord>& out) {
        std::vector<std::vector<double>> logs(betas.size(), std::vector<double>(config_.reps));
        parallel_for(config_.reps, [&](std::size_t r) {
          for (std::size_t b = 0; b < betas.size(); ++b)
            logs[b][r] = size_biased_partition(config_.polymer(betas[b].beta, hs[j]), config_.replicas,
                                               stream.child("rep", r), config_.spine_mode, config_.method)
                             .log_value;
        });
        for (std::size_t b = 0; b < betas.size(); ++b) {
          auto params = beta_params(betas[b]);
          params["t"] = hs[j];
          auto rec = make("size_biased_partition", stream, params);
          put(rec, "mean", exp_mean(logs[b]));
          put_quantile(rec, "log_median", logs[b], 0.5);
          put_quantile(rec, "log_lower_decile", logs[b], 0.1);
          out.push_back(std::move(rec));
        }
      });
    }
  }

  void second_moment() {
    const auto betas = beta_points(config_);
    const auto& hs = config_.horizons;
    if (betas.empty() || hs.empty()) return;
    const KernelD k = kernel_of(config_);
    point("second_moment", root_, json::object(), [&](std::vector<ResultRecord>& out) {
      std::vector<ReplicaBank> banks(config_.reps);
      parallel_for(config_.reps, [&](std::size_t r) {
        banks[r] = sample_replica_bank(config_.polymer(0.0, hs.back()), config_.replicas, hs, config_.method,
                                       root_.child("bank", r));
      });
      for (std::size_t b = 0; b < betas.size(); ++b) {
        const auto formula =
            second_moment_profile(k, betas[b].beta, hs, config_.reps, root_.child("formula"), config_.dt);
        for (std::size_t j = 0; j < hs.size(); ++j) {
          std::vector<double> xs(config_.reps);
          for (std::size_t r = 0; r < config_.reps; ++r)
            xs[r] = replica_second_moment(banks[r], config_.polymer(betas[b].beta, hs[j]), j);
          const auto replica = stats::mean_estimate(xs);
          auto params = beta_params(betas[b]);
          params["t"] = hs[j];
          auto rec = make("second_moment", root_, params);
          put(rec, "formula", formula[j]);
          put(rec, "replica", replica);
          const double se = std::hypot(formula[j].stderr_, replica.stderr_);
          put(rec, "difference", replica.mean - formula[j].mean, se);
          rec.verdicts["agreement"] = std::abs(replica.mean - formula[j].mean) <= 3 * se ? "agree" : "disagree";
          out.push_back(std::move(rec));
        }
      }
    });
  }

  void threshold() {
    const auto betas = beta_points(config_);
    const KernelD k = kernel_of(config_);
    point("beta_star_bound", root_, json::object(), [&](std::vector<ResultRecord>& out) {
      auto rec = make("beta_star_bound", root_, json::object());
      rec.values["beta_star"] = beta_star_bound(k);
      rec.values["green_at_origin"] = green_potential(k, 0.0);
      out.push_back(std::move(rec));
    });
    for (std::size_t b = 0; b < betas.size(); ++b) {
      const auto stream = root_.child("beta", b);
      point("portenko", stream, beta_params(betas[b]), [&](std::vector<ResultRecord>& out) {
        const auto bound = portenko_eta(betas[b].beta, k);
        auto rec = make("portenko_eta", stream, beta_params(betas[b]));
        rec.values["eta"] = bound.eta;
        rec.values["bound"] = bound.bound;
        rec.verdicts["moment"] = bound.finite() ? "finite" : "unbounded";
        out.push_back(std::move(rec));
        if (!bound.finite()) return;
        for (std::size_t j = 0; j < config_.horizons.size(); ++j) {
          const auto e = exponential_occupation(k, betas[b].beta, config_.horizons[j], config_.reps,
                                                stream.child("t", j), config_.dt);
          auto params = beta_params(betas[b]);
          params["t"] = config_.horizons[j];
          auto occ = make("exponential_occupation", stream.child("t", j), params);
          put(occ, "mean", e);
          occ.values["bound"] = bound.bound;
          occ.verdicts["bound"] = e.mean <= bound.bound + 3 * e.stderr_ ? "holds" : "violated";
          out.push_back(std::move(occ));
        }
      });
    }
  }

  void smoothed() {
    const auto betas = beta_points(config_);
    if (betas.empty() || config_.eps.empty()) return;
    const KernelD k = kernel_of(config_);
    const GaussianMixture f{config_.mixture_weights, config_.mixture_widths};
    for (std::size_t b = 0; b < betas.size(); ++b) {
      const auto stream = root_.child("beta", b);
      point("smoothed_variance", stream, beta_params(betas[b]), [&](std::vector<ResultRecord>& out) {
        const auto est =
            smoothed_variance(f, k, betas[b].beta, config_.eps, config_.reps, stream, config_.dt, config_.nodes);
        for (std::size_t e = 0; e < est.size(); ++e) {
          auto params = beta_params(betas[b]);
          params["eps"] = config_.eps[e];
          auto rec = make("smoothed_variance", stream, params);
          put(rec, "variance", est[e]);
          out.push_back(std::move(rec));
        }
        auto rec = make("smoothed_variance_trend", stream, beta_params(betas[b]));
        rec.verdicts["trend"] = stats::to_string(stats::monotone_trend(est, config_.level).trend);
        out.push_back(std::move(rec));
      });
    }
  }

  void tube() {
    for (std::size_t i = 0; i < config_.deltas.size(); ++i) {
      const double delta = config_.deltas[i];
      const auto stream = root_.child("delta", i);
      point("kingman_kappa2", stream, json{{"delta", delta}}, [&](std::vector<ResultRecord>& out) {
        const auto k2 = kingman_kappa2(config_.dim, delta, config_.horizons, config_.reps, stream, config_.dt,
                                       config_.refinements);
        for (std::size_t j = 0; j < k2.horizons.size(); ++j) {
          auto rec = make("kingman_rate", stream, json{{"delta", delta}, {"t", k2.horizons[j]}});
          put(rec, "rate", k2.rates[j]);
          out.push_back(std::move(rec));
        }
        const auto ref = kappa_references(delta, config_.dim);
        auto rec = make("kappa2", stream, json{{"delta", delta}});
        put(rec, "plateau", k2.plateau, k2.plateau_stderr);
        rec.values["max_violation"] = k2.max_violation;
        rec.values["dt"] = k2.dt;
        rec.values["lambda1"] = ref.lambda1;
        rec.values["rate_bound"] = ref.rate_bound(k2.plateau);
        rec.verdicts["subadditive"] = k2.subadditive ? "holds" : "violated";
        rec.verdicts["trend"] = stats::to_string(k2.trend);
        out.push_back(std::move(rec));
        if (config_.spines == 0) return;
        const auto rate = conditional_proximity_rate(config_.dim, delta, config_.proximity_horizons, config_.spines,
                                                     config_.partners, stream.child("proximity"), config_.dt);
        auto prox = make("proximity_rate", stream.child("proximity"), json{{"delta", delta}});
        put(prox, "kappa", rate.kappa, rate.kappa_stderr);
        prox.values["r_squared"] = rate.r_squared;
        prox.values["slope_spread"] = rate.slope_spread;
        prox.values["lambda1"] = rate.lambda1;
        prox.verdicts["fit"] = rate.determined ? "determined" : "undetermined";
        prox.verdicts["bound"] = rate.within_bound(k2.plateau + 3 * k2.plateau_stderr) ? "holds" : "violated";
        out.push_back(std::move(prox));
      });
    }
  }

  void kahane() {
    for (std::size_t i = 0; i < config_.pairs; ++i) {
      const auto stream = root_.child("pair", i);
      point("kahane", stream, json{{"pair", i}}, [&](std::vector<ResultRecord>& out) {
        const auto pair = random_dominated_pair(static_cast<Eigen::Index>(config_.atoms), stream);
        for (std::size_t a = 0; a < config_.alphas.size(); ++a) {
          const auto c = kahane_compare(pair, ConcaveTestFunction(config_.alphas[a]), config_.reps,
                                        stream.child("alpha", a));
          auto rec = make("kahane", stream.child("alpha", a), json{{"pair", i}, {"alpha", config_.alphas[a]}});
          put(rec, "smaller", c.smaller);
          put(rec, "larger", c.larger);
          put(rec, "difference", c.difference);
          rec.verdicts["ordering"] = c.ordered(2.0) ? "holds" : "violated";
          out.push_back(std::move(rec));
        }
      });
    }
  }

  void phase_scan() {
    const auto betas = beta_points(config_);
    const auto& hs = config_.horizons;
    if (betas.empty() || hs.empty()) return;
    UiOptions ui;
    ui.alphas = config_.alphas;
    ui.level = config_.level;
    for (std::size_t b = 0; b < betas.size(); ++b) {
      const auto stream = root_.child("beta", b);
      point("ui_diagnostic", stream, beta_params(betas[b]), [&](std::vector<ResultRecord>& out) {
        std::vector<std::vector<double>> plain(hs.size(), std::vector<double>(config_.reps));
        auto biased = plain;
        for (std::size_t j = 0; j < hs.size(); ++j) {
          const auto p = config_.polymer(betas[b].beta, hs[j]);
          parallel_for(config_.reps, [&](std::size_t r) {
            const auto s = root_.child("t", j).child("rep", r);
            plain[j][r] = partition_estimate(p, config_.replicas, config_.method, s.child("plain")).log_value;
            biased[j][r] =
                size_biased_partition(p, config_.replicas, s.child("biased"), SpineMode::include_spine, config_.method)
                    .log_value;
          });
          auto params = beta_params(betas[b]);
          params["t"] = hs[j];
          auto rec = make("phase_point", root_.child("t", j), params);
          put_quantile(rec, "log_median", plain[j], 0.5);
          put_quantile(rec, "biased_log_lower_decile", biased[j], 0.1);
          out.push_back(std::move(rec));
        }
        const auto verdict = ui_diagnostic(plain, biased, ui);
        auto rec = make("ui_diagnostic", stream, beta_params(betas[b]));
        rec.verdicts["verdict"] = to_string(verdict.verdict);
        auto evidence = json::array();
        for (const auto& e : verdict.evidence)
          evidence.push_back(
              json{{"test", e.test}, {"outcome", e.outcome}, {"statistic", e.statistic}, {"p_value", e.p_value}});
        rec.verdicts["evidence"] = std::move(evidence);
        out.push_back(std::move(rec));
      });
    }
  }

  const ExperimentConfig& config_;
  RunOptions options_;
  std::ostream* sink_;
  std::uint64_t hash_;
  SeedStream root_;
  RunResult result_;
};

std::string format_number(double v, int precision = 12) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

std::string json_scalar(const nlohmann::json& v) {
  if (v.is_number()) return format_number(v.get<double>());
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

}  // namespace

const char* to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::partition: return "partition";
    case ExperimentKind::martingale: return "martingale";
    case ExperimentKind::size_biased: return "size-biased";
    case ExperimentKind::second_moment: return "second-moment";
    case ExperimentKind::threshold: return "threshold";
    case ExperimentKind::smoothed_variance: return "smoothed-variance";
    case ExperimentKind::tube: return "tube";
    case ExperimentKind::kahane: return "kahane";
    case ExperimentKind::phase_scan: return "phase-scan";
  }
  return "partition";
}

ExperimentKind kind_from_string(const std::string& name) {
  for (auto k : all_kinds)
    if (name == to_string(k)) return k;
  throw ConfigError("experiment.kind", "unknown experiment kind '" + name + "'");
}

ExperimentConfig ExperimentConfig::parse(std::istream& in) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("line " + std::to_string(e.line()), e.message());
  }

  ExperimentConfig c;
  for (const auto& [section, body] : tree) {
    if (section != "experiment" && section != "params") {
      if (body.empty()) throw ConfigError(section, "keys must sit inside [experiment] or [params]");
      throw ConfigError(section, "unknown section");
    }
    for (const auto& [key, value] : body) c.entries[section + "." + key] = canonical(value.data());
  }

  auto kind_it = c.entries.find("experiment.kind");
  if (kind_it == c.entries.end()) throw ConfigError("experiment.kind", "missing");
  c.kind = kind_from_string(kind_it->second);

  const auto allowed = param_keys(c.kind);
  for (const auto& [full, value] : c.entries) {
    const auto dot = full.find('.');
    const auto section = full.substr(0, dot), key = full.substr(dot + 1);
    const bool known = section == "experiment" ? experiment_keys.contains(key) : allowed.contains(key);
    if (!known) throw ConfigError(full, std::string("unknown key for kind ") + to_string(c.kind));

    if (full == "experiment.id") {
      require_key(!value.empty(), full, "must not be empty");
      c.id = value;
    } else if (full == "experiment.seed") c.seed = parse_unsigned(full, value);
    else if (full == "experiment.threads") c.threads = static_cast<unsigned>(parse_unsigned(full, value));
    else if (full == "experiment.out") c.output_dir = value;
    else if (full == "experiment.level") c.level = parse_double(full, value);
    else if (key == "betas") c.betas = parse_list(full, value);
    else if (key == "beta_multiples") c.beta_multiples = parse_list(full, value);
    else if (key == "horizons") c.horizons = parse_list(full, value);
    else if (key == "eps") c.eps = parse_list(full, value);
    else if (key == "deltas") c.deltas = parse_list(full, value);
    else if (key == "proximity_horizons") c.proximity_horizons = parse_list(full, value);
    else if (key == "alphas") c.alphas = parse_list(full, value);
    else if (key == "mixture_weights") c.mixture_weights = parse_list(full, value);
    else if (key == "mixture_widths") c.mixture_widths = parse_list(full, value);
    else if (key == "dim") c.dim = static_cast<int>(parse_unsigned(full, value));
    else if (key == "mollifier") c.mollifier = mollifier_from_string(full, value);
    else if (key == "replicas") c.replicas = parse_unsigned(full, value);
    else if (key == "reps") c.reps = parse_unsigned(full, value);
    else if (key == "atoms") c.atoms = parse_unsigned(full, value);
    else if (key == "pairs") c.pairs = parse_unsigned(full, value);
    else if (key == "spines") c.spines = parse_unsigned(full, value);
    else if (key == "partners") c.partners = parse_unsigned(full, value);
    else if (key == "refinements") c.refinements = static_cast<int>(parse_unsigned(full, value));
    else if (key == "nodes") c.nodes = static_cast<int>(parse_unsigned(full, value));
    else if (key == "dt") c.dt = parse_double(full, value);
    else if (key == "method") check_with(full, [&] { c.method = method_from_string(value); });
    else if (key == "spine_mode") c.spine_mode = spine_mode_from_string(full, value);
  }
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("--config", "cannot open " + file.string());
  return parse(in);
}

void ExperimentConfig::validate() const {
  require_key(level > 0 && level < 1, "experiment.level", "must lie in (0, 1)");
  const bool polymer_kind = kind == ExperimentKind::partition || kind == ExperimentKind::martingale ||
                            kind == ExperimentKind::size_biased || kind == ExperimentKind::second_moment ||
                            kind == ExperimentKind::phase_scan;

  if (uses_beta(kind)) {
    require_key(dim >= 3, "params.dim", "must be >= 3 (the Green potential needs a transient walk)");
    for (double b : betas) require_key(b >= 0, "params.betas", "entries must be nonnegative");
    for (double m : beta_multiples) require_key(m >= 0, "params.beta_multiples", "entries must be nonnegative");
    require_key(dt > 0 && dt <= 0.1 * (1 + 1e-12), "params.dt", "must satisfy 0 < dt <= 0.1");
  }
  const bool has_betas = !betas.empty() || !beta_multiples.empty();

  if (polymer_kind || kind == ExperimentKind::threshold) {
    require_increasing(horizons, "params.horizons");
    if (kind != ExperimentKind::threshold) require_key(reps >= 2, "params.reps", "must be >= 2");
  }
  if (polymer_kind && has_betas && !horizons.empty()) {
    const bool one_ok = kind == ExperimentKind::size_biased && spine_mode == SpineMode::partners_only;
    require_key(replicas >= (one_ok ? 1u : 2u), "params.replicas", one_ok ? "must be >= 1" : "must be >= 2");
    for (double t : horizons) check_with("params.horizons", [&] { polymer(0.0, t).validate(); });
  }

  switch (kind) {
    case ExperimentKind::martingale:
      for (std::size_t j = 1; j < horizons.size(); ++j)
        require_key(std::abs(horizons[j] - 2 * horizons[j - 1]) <= 1e-12 * horizons[j], "params.horizons",
                    "martingale grid must be dyadic (each horizon twice the previous)");
      break;
    case ExperimentKind::threshold:
      if (has_betas && !horizons.empty()) require_key(reps >= 2, "params.reps", "must be >= 2");
      break;
    case ExperimentKind::smoothed_variance: {
      require_key(reps >= 2, "params.reps", "must be >= 2");
      require_key(nodes >= 2, "params.nodes", "must be >= 2");
      for (double e : eps) require_key(e > 0, "params.eps", "entries must be positive");
      require_key(!mixture_weights.empty() && mixture_weights.size() == mixture_widths.size(), "params.mixture_widths",
                  "needs one width per weight");
      for (double s : mixture_widths) require_key(s > 0, "params.mixture_widths", "entries must be positive");
      if (has_betas) {
        const double ref = beta_threshold(*this);
        for (double b : betas)
          require_key(b < ref, "params.betas", "beta must lie below the L2 threshold " + format_number(ref, 8) +
                                                   " where eta = beta^2 sup G / 2 < 1");
        for (double m : beta_multiples)
          require_key(m < 1, "params.beta_multiples", "multiple must be < 1 so that eta = beta^2 sup G / 2 < 1");
      }
      break;
    }
    case ExperimentKind::tube:
      require_key(dim >= 1, "params.dim", "must be >= 1");
      require_key(dt > 0, "params.dt", "must be positive");
      for (double d : deltas) require_key(d > 0, "params.deltas", "entries must be positive");
      if (deltas.empty()) break;
      require_increasing(horizons, "params.horizons");
      require_key(horizons.size() >= 3, "params.horizons", "needs three or more horizons");
      require_key(reps >= 2, "params.reps", "must be >= 2");
      for (double t : horizons) check_with("params.horizons", [&] { step_count(t, dt); });
      if (spines > 0) {
        require_increasing(proximity_horizons, "params.proximity_horizons");
        for (double t : proximity_horizons) check_with("params.proximity_horizons", [&] { step_count(t, dt); });
        require_key(proximity_horizons.size() >= 3, "params.proximity_horizons", "needs three or more horizons");
        require_key(partners >= 1, "params.partners", "must be >= 1");
      }
      break;
    case ExperimentKind::kahane:
      require_key(atoms >= 1, "params.atoms", "must be >= 1");
      require_key(reps >= 10000, "params.reps", "must be >= 10000");
      for (double a : alphas) require_key(a > 0, "params.alphas", "entries must be positive");
      break;
    case ExperimentKind::phase_scan:
      require_key(!alphas.empty(), "params.alphas", "needs at least one alpha");
      for (double a : alphas) require_key(a > 0, "params.alphas", "entries must be positive");
      if (has_betas && !horizons.empty())
        require_key(horizons.size() >= 3, "params.horizons", "the diagnostic needs three or more horizons");
      break;
    default: break;
  }
}

std::uint64_t ExperimentConfig::hash() const {
  std::string text;
  for (const auto& [key, value] : entries) {
    if (key == "experiment.seed" || key == "experiment.threads" || key == "experiment.out") continue;
    text += key + "=" + value + "\n";
  }
  return fnv1a(text);
}

std::vector<double> ExperimentConfig::resolved_betas() const {
  std::vector<double> out;
  for (const auto& b : beta_points(*this)) out.push_back(b.beta);
  return out;
}

PolymerParams ExperimentConfig::polymer(double beta, double horizon) const {
  PolymerParams p;
  p.beta = beta;
  p.horizon = horizon;
  p.dim = dim;
  p.kind = mollifier;
  p.dt = dt;
  return p;
}

nlohmann::ordered_json ResultRecord::to_json() const {
  nlohmann::ordered_json j;
  j["experiment"] = experiment;
  j["kind"] = kind;
  j["timestamp"] = timestamp;
  j["config_hash"] = hex(config_hash);
  j["op"] = op;
  j["params"] = params;
  j["values"] = values;
  j["stderrs"] = stderrs;
  j["verdicts"] = verdicts;
  j["seed"] = seed;
  j["stream"] = stream;
  j["wall_time"] = wall_time;
  j["status"] = status;
  if (!error.empty()) j["error"] = error;
  return j;
}

ResultRecord ResultRecord::from_json(const nlohmann::ordered_json& j) {
  ResultRecord r;
  r.experiment = j.at("experiment").get<std::string>();
  r.kind = j.at("kind").get<std::string>();
  r.timestamp = j.value("timestamp", "");
  r.config_hash = std::stoull(j.at("config_hash").get<std::string>(), nullptr, 16);
  r.op = j.at("op").get<std::string>();
  r.params = j.at("params");
  r.values = j.at("values");
  r.stderrs = j.value("stderrs", nlohmann::ordered_json::object());
  r.verdicts = j.value("verdicts", nlohmann::ordered_json::object());
  r.seed = j.value("seed", std::uint64_t{0});
  r.stream = j.value("stream", "");
  r.wall_time = j.value("wall_time", 0.0);
  r.status = j.value("status", "ok");
  r.error = j.value("error", "");
  if (!r.params.is_object() || !r.values.is_object()) throw std::invalid_argument("params and values must be objects");
  return r;
}

std::string ResultRecord::value_fields() const {
  return nlohmann::ordered_json{{"op", op}, {"params", params}, {"values", values}, {"stderrs", stderrs},
                                {"verdicts", verdicts}, {"status", status}}
      .dump();
}

RunResult run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  config.validate();
  if (config.threads > 0) set_worker_count(config.threads);

  std::ofstream file;
  std::filesystem::path path;
  if (options.write) {
    std::error_code ec;
    std::filesystem::create_directories(config.output_dir, ec);
    if (ec) throw ResourceError("cannot create output directory " + config.output_dir.string() + ": " + ec.message(), 0);
    path = config.output_dir / (config.id + ".jsonl");
    file.open(path, std::ios::app);
    if (!file) throw ResourceError("cannot open " + path.string() + " for appending", 0);
  }
  Runner runner(config, options, options.write ? &file : nullptr);
  auto result = runner.run();
  result.file = path;
  if (options.write && !file) throw ResourceError("write to " + path.string() + " failed", 0);
  return result;
}

namespace {

struct Group {
  SummaryRow row;
  std::vector<double> values;
  std::vector<double> ses;
  std::set<std::string> verdicts;
};

std::string verdict_text(const nlohmann::ordered_json& verdicts) {
  std::string out;
  for (const auto& [key, value] : verdicts.items()) {
    if (!value.is_string()) continue;
    out += (out.empty() ? "" : " ") + key + "=" + value.get<std::string>();
  }
  return out;
}

}  // namespace

Report report(const std::filesystem::path& dir, const ReportFilter& filter) {
  Report out;
  if (!std::filesystem::is_directory(dir)) throw ResourceError("results directory " + dir.string() + " not found", 0);
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".jsonl") files.push_back(entry.path());
  std::sort(files.begin(), files.end());

  std::vector<Group> groups;
  std::map<std::string, std::size_t> index;
  std::vector<std::pair<std::string, std::set<std::string>>> phase;
  std::map<std::string, std::size_t> phase_index;

  for (const auto& f : files) {
    std::ifstream in(f);
    std::string line;
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      ResultRecord r;
      try {
        r = ResultRecord::from_json(nlohmann::ordered_json::parse(line));
      } catch (const std::exception&) {
        ++out.skipped;
        continue;
      }
      if (!filter.experiment.empty() && r.experiment != filter.experiment) continue;
      if (!filter.kind.empty() && r.kind != filter.kind) continue;
      ++out.records;
      if (r.status != "ok") {
        ++out.failed;
        continue;
      }

      std::string beta, t_or_eps, suffix;
      for (const auto& [key, value] : r.params.items()) {
        if (key == "beta") beta = json_scalar(value);
        else if (key == "t" || key == "eps") t_or_eps = json_scalar(value);
        else if (key != "beta_multiple") suffix += (suffix.empty() ? "[" : ",") + key + "=" + json_scalar(value);
      }
      if (!suffix.empty()) suffix += "]";
      const std::string verdict = verdict_text(r.verdicts);

      auto add = [&](const std::string& statistic, double value, double se) {
        const std::string key = r.experiment + '\x1f' + hex(r.config_hash) + '\x1f' + r.op + '\x1f' + beta + '\x1f' +
                                t_or_eps + '\x1f' + statistic;
        auto [it, fresh] = index.try_emplace(key, groups.size());
        if (fresh) {
          Group g;
          g.row = {r.experiment, r.op, beta, t_or_eps, statistic, 0.0, 0.0, 0, ""};
          groups.push_back(std::move(g));
        }
        auto& g = groups[it->second];
        g.values.push_back(value);
        g.ses.push_back(se);
        if (!verdict.empty()) g.verdicts.insert(verdict);
      };
      for (const auto& [name, value] : r.values.items()) {
        if (!value.is_number()) continue;
        const double se = r.stderrs.contains(name) && r.stderrs[name].is_number() ? r.stderrs[name].get<double>()
                                                                                    : std::numeric_limits<double>::quiet_NaN();
        add(r.op + "." + name + suffix, value.get<double>(), se);
      }
      if (r.values.empty() && !verdict.empty()) add(r.op + suffix, std::numeric_limits<double>::quiet_NaN(), 0.0);

      if (r.op == "ui_diagnostic" && r.verdicts.contains("verdict")) {
        const std::string key = r.experiment + '\x1f' + beta;
        auto [it, fresh] = phase_index.try_emplace(key, phase.size());
        if (fresh) phase.push_back({r.experiment + " beta=" + beta, {}});
        phase[it->second].second.insert(r.verdicts["verdict"].get<std::string>());
      }
    }
  }

  for (auto& g : groups) {
    const double n = static_cast<double>(g.values.size());
    double sum = 0.0, var = 0.0;
    for (double v : g.values) sum += v;
    for (double s : g.ses) var += s * s;
    g.row.value = sum / n;
    g.row.stderr_ = std::sqrt(var) / n;
    g.row.runs = g.values.size();
    if (g.verdicts.size() == 1) g.row.verdict = *g.verdicts.begin();
    else if (g.verdicts.size() > 1) g.row.verdict = "mixed";
    out.rows.push_back(std::move(g.row));
  }
  for (auto& [label, verdicts] : phase)
    out.phase_table.emplace_back(label, verdicts.size() == 1 ? *verdicts.begin() : "mixed");
  return out;
}

void Report::write_csv(std::ostream& os) const {
  os << "experiment,beta,t_or_eps,statistic,value,stderr\n";
  for (const auto& r : rows) {
    if (std::isnan(r.value)) continue;
    os << r.experiment << ',' << r.beta << ',' << r.t_or_eps << ",\"" << r.statistic << "\"," << format_number(r.value)
       << ',' << format_number(r.stderr_) << '\n';
  }
}

void Report::write_summary(std::ostream& os) const {
  os << "records " << records << ", failed " << failed << ", skipped (malformed) " << skipped << '\n';
  std::string current;
  for (const auto& r : rows) {
    if (r.experiment != current) {
      current = r.experiment;
      os << "\n[" << current << "]\n";
    }
    os << "  " << r.statistic;
    if (!r.beta.empty()) os << "  beta=" << r.beta;
    if (!r.t_or_eps.empty()) os << "  t/eps=" << r.t_or_eps;
    if (!std::isnan(r.value)) os << "  " << format_number(r.value, 6) << " +- " << format_number(r.stderr_, 3);
    if (r.runs > 1) os << "  (" << r.runs << " runs)";
    if (!r.verdict.empty()) os << "  " << r.verdict;
    os << '\n';
  }
  if (!phase_table.empty()) {
    os << "\nphase verdicts\n";
    for (const auto& [label, verdict] : phase_table) os << "  " << label << "  " << verdict << '\n';
  }
}

Report write_report(const std::filesystem::path& dir, const ReportFilter& filter) {
  auto r = report(dir, filter);
  std::ofstream csv(dir / "plot_data.csv", std::ios::trunc);
  std::ofstream summary(dir / "summary.txt", std::ios::trunc);
  if (!csv || !summary) throw ResourceError("cannot write report files into " + dir.string(), 0);
  r.write_csv(csv);
  r.write_summary(summary);
  return r;
}

ExitCode exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ArgumentError*>(&e)) return ExitCode::config_error;
  if (dynamic_cast<const ResourceError*>(&e) || dynamic_cast<const std::filesystem::filesystem_error*>(&e) ||
      dynamic_cast<const std::bad_alloc*>(&e))
    return ExitCode::resource_error;
  return ExitCode::internal_error;
}

}  // namespace polymerlab::cli
