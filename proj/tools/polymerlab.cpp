// Batch driver: run an experiment config, validate it, or summarize results.

#include "polymerlab/cli.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>

using namespace polymerlab;
using namespace polymerlab::cli;

namespace {

int fail(const std::exception& e) {
  const ExitCode code = exit_code_for(e);
  std::cerr << "polymerlab: " << e.what() << '\n';
  return static_cast<int>(code);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Directed polymer and chaos experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  std::optional<std::string> out;
  bool strict = false;
  std::string experiment_filter, kind_filter;

  auto* run = app.add_subcommand("run", "Execute an experiment and append JSON-lines records");
  run->add_option("--config", config_path, "Experiment config (INI)")->required()->check(CLI::ExistingFile);
  run->add_option("--seed", seed, "Master seed, overrides [experiment] seed");
  run->add_option("--threads", threads, "Worker count; POLYMERLAB_THREADS is the fallback")
      ->check(CLI::PositiveNumber);
  run->add_option("--out", out, "Output directory, overrides [experiment] out");
  run->add_flag("--strict", strict, "Abort on the first numerical failure");

  auto* validate = app.add_subcommand("validate", "Check a config without running it");
  validate->add_option("--config", config_path, "Experiment config (INI)")->required()->check(CLI::ExistingFile);

  auto* rep = app.add_subcommand("report", "Summarize a results directory into summary.txt and plot_data.csv");
  rep->add_option("--out", out, "Results directory")->required();
  rep->add_option("--experiment", experiment_filter, "Only this experiment id");
  rep->add_option("--kind", kind_filter, "Only this experiment kind");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ExitCode::config_error);
  }

  try {
    if (*validate) {
      const auto config = ExperimentConfig::load(config_path);
      config.validate();
      std::cout << "ok " << to_string(config.kind) << " " << std::hex << config.hash() << '\n';
      return 0;
    }
    if (*run) {
      auto config = ExperimentConfig::load(config_path);
      if (seed) config.seed = *seed;
      if (threads) config.threads = *threads;
      if (out) config.output_dir = *out;
      const auto result = run_experiment(config, {.strict = strict});
      std::cout << result.records.size() << " records (" << result.failures << " failed) appended to "
                << result.file.string() << '\n';
      return 0;
    }
    const auto summary = write_report(*out, {experiment_filter, kind_filter});
    summary.write_summary(std::cout);
    if (summary.skipped > 0) std::cerr << "warning: skipped " << summary.skipped << " malformed records\n";
    return 0;
  } catch (const NumericalError& e) {
    std::cerr << "polymerlab: numerical failure in strict mode: " << e.what() << '\n';
    return static_cast<int>(ExitCode::internal_error);
  } catch (const std::exception& e) {
    return fail(e);
  }
}
