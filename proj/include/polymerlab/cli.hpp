#pragma once

#include "polymerlab/core.hpp"
#include "polymerlab/mollifier.hpp"
#include "polymerlab/polymer.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace polymerlab::cli {

enum class ExitCode : int { success = 0, config_error = 2, resource_error = 3, internal_error = 4 };

/// A configuration problem; `key()` is the offending "section.key".
class ConfigError : public ArgumentError {
 public:
  ConfigError(std::string key, const std::string& message)
      : ArgumentError(key + ": " + message), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

enum class ExperimentKind {
  partition,
  martingale,
  size_biased,
  second_moment,
  threshold,
  smoothed_variance,
  tube,
  kahane,
  phase_scan,
};

const char* to_string(ExperimentKind k);
ExperimentKind kind_from_string(const std::string& name);

/// Sectioned key = value configuration. [experiment] holds kind, id, seed,
/// threads, out and level; [params] holds the kind's parameter block. Lists
/// are comma separated. Betas are absolute (`betas`) or multiples of the
/// L2 threshold of the configured kernel (`beta_multiples`).
struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::partition;
  std::string id = "experiment";
  std::uint64_t seed = 0;
  unsigned threads = 0;  // 0 defers to POLYMERLAB_THREADS, then hardware
  std::filesystem::path output_dir = "results";
  double level = 0.05;

  std::vector<double> betas;
  std::vector<double> beta_multiples;
  std::vector<double> horizons;
  std::vector<double> eps;
  std::vector<double> deltas;
  std::vector<double> proximity_horizons;
  std::vector<double> alphas{2.0, 8.0, 32.0};
  std::vector<double> mixture_weights{0.7, 0.3};
  std::vector<double> mixture_widths{0.5, 1.5};
  int dim = 3;
  MollifierKind mollifier = MollifierKind::compact_bump;
  std::size_t replicas = 4;
  std::size_t reps = 100;
  std::size_t atoms = 5;
  std::size_t pairs = 20;
  std::size_t spines = 0;
  std::size_t partners = 2000;
  int refinements = 0;
  int nodes = 24;
  double dt = 0.1;
  Method method = Method::replica_gaussian;
  SpineMode spine_mode = SpineMode::include_spine;

  /// Canonical "section.key" -> trimmed value, as read.
  std::map<std::string, std::string> entries;

  static ExperimentConfig parse(std::istream& in);
  static ExperimentConfig load(const std::filesystem::path& file);

  /// Checks every static parameter against the preconditions of the module
  /// functions the kind will call. Throws ConfigError.
  void validate() const;

  /// FNV-1a over the sorted entries, excluding seed, threads and out, so the
  /// hash is stable under key reordering and shared by runs that differ only
  /// in seed or scheduling.
  std::uint64_t hash() const;

  /// Absolute betas: `betas` followed by `beta_multiples` times the threshold.
  std::vector<double> resolved_betas() const;

  PolymerParams polymer(double beta, double horizon) const;
};

struct ResultRecord {
  std::string experiment;
  std::string kind;
  std::string timestamp;
  std::uint64_t config_hash = 0;
  std::string op;
  nlohmann::ordered_json params = nlohmann::ordered_json::object();
  nlohmann::ordered_json values = nlohmann::ordered_json::object();
  nlohmann::ordered_json stderrs = nlohmann::ordered_json::object();
  nlohmann::ordered_json verdicts = nlohmann::ordered_json::object();
  std::uint64_t seed = 0;
  std::string stream;  // seed provenance: hex id of the SeedStream
  double wall_time = 0.0;
  std::string status = "ok";
  std::string error;

  nlohmann::ordered_json to_json() const;
  static ResultRecord from_json(const nlohmann::ordered_json& j);

  /// params, values, stderrs and verdicts only: the part that must be
  /// byte-identical across reruns.
  std::string value_fields() const;
};

struct RunOptions {
  bool strict = false;
  bool write = true;  // append to <out>/<id>.jsonl
};

struct RunResult {
  std::vector<ResultRecord> records;
  std::size_t failures = 0;
  std::filesystem::path file;
};

/// Executes the kind's pipeline over its parameter grid. Grid points run in
/// order; repetitions within a point run on the worker pool. Numerical
/// failures become records with status "failed" unless strict, in which case
/// the NumericalError propagates.
RunResult run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

struct ReportFilter {
  std::string experiment;  // empty matches every id
  std::string kind;        // empty matches every kind
};

struct SummaryRow {
  std::string experiment;
  std::string op;
  std::string beta;
  std::string t_or_eps;
  std::string statistic;
  double value = 0.0;
  double stderr_ = 0.0;
  std::size_t runs = 0;
  std::string verdict;
};

struct Report {
  std::vector<SummaryRow> rows;
  std::vector<std::pair<std::string, std::string>> phase_table;  // (beta, verdict) per experiment and beta
  std::size_t records = 0;
  std::size_t skipped = 0;
  std::size_t failed = 0;

  void write_csv(std::ostream& os) const;
  void write_summary(std::ostream& os) const;
};

/// Reads every *.jsonl file in `dir`, groups records of one config hash
/// across seeds and pools them: mean of values, s.e. sqrt(sum se^2) / n.
/// Malformed lines are counted in `skipped`.
Report report(const std::filesystem::path& dir, const ReportFilter& filter = {});

/// Writes summary.txt and plot_data.csv into `dir`; rerunning rewrites the same bytes.
Report write_report(const std::filesystem::path& dir, const ReportFilter& filter = {});

/// Maps an exception from the library or the runner to its exit code.
ExitCode exit_code_for(const std::exception& e);

}  // namespace polymerlab::cli
