#include <doctest.h>

#include "polymerlab/cli.hpp"
#include "polymerlab/parallel.hpp"

#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>
#include <sys/wait.h>

using namespace polymerlab;
using namespace polymerlab::cli;
namespace fs = std::filesystem;

namespace {

ExperimentConfig parse(const std::string& text) {
  std::istringstream in(text);
  return ExperimentConfig::parse(in);
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("polymerlab_test_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::string key_of(const std::string& text) {
  try {
    parse(text).validate();
  } catch (const ConfigError& e) {
    return e.key();
  }
  return "";
}

const char* small_partition = R"(
[experiment]
kind = partition
id = small
seed = 11

[params]
betas = 0.3, 0.6
horizons = 1, 2
replicas = 3
reps = 24
)";

int run_tool(const std::string& args) {
  const int status = std::system((std::string(POLYMERLAB_TOOL) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config hash is stable under key reordering and spacing, and ignores seed and scheduling") {
  const auto a = parse("[experiment]\nkind = partition\nseed = 1\n[params]\nbetas = 0.1,0.2\nreps = 10\n");
  const auto b = parse("[params]\nreps=10\nbetas =  0.1 , 0.2\n[experiment]\nthreads = 4\nseed = 99\nkind=partition\n");
  CHECK(a.hash() == b.hash());
  CHECK(a.betas == std::vector<double>{0.1, 0.2});
  const auto c = parse("[experiment]\nkind = partition\n[params]\nbetas = 0.1, 0.3\nreps = 10\n");
  CHECK(c.hash() != a.hash());
}

TEST_CASE("unknown keys, sections, kinds and malformed values name the key") {
  auto key = [](const std::string& text) {
    try {
      parse(text);
    } catch (const ConfigError& e) {
      return e.key();
    }
    return std::string();
  };
  CHECK(key("[experiment]\nkind = partition\n[params]\nbogus = 1\n") == "params.bogus");
  CHECK(key("[experiment]\nkind = kahane\n[params]\nhorizons = 1\n") == "params.horizons");
  CHECK(key("[experiment]\nkind = partition\n[extra]\nx = 1\n") == "extra");
  CHECK(key("[experiment]\nkind = nonsense\n") == "experiment.kind");
  CHECK(key("[params]\nreps = 3\n") == "experiment.kind");
  CHECK(key("[experiment]\nkind = partition\n[params]\nreps = ten\n") == "params.reps");
  CHECK(key("[experiment]\nkind = partition\n[params]\nbetas = 0.1, x\n") == "params.betas");
  CHECK(key("[experiment]\nkind = partition\n[params]\nmethod = magic\n") == "params.method");
  CHECK(key("[experiment]\nkind = tube\n[params]\ndim = -1\n") == "params.dim");
}

TEST_CASE("validation catches module preconditions before any work") {
  const std::string head = "[experiment]\nkind = ";
  CHECK(key_of(head + "smoothed-variance\n[params]\nbeta_multiples = 0.5, 1.01\neps = 1\n") == "params.beta_multiples");
  CHECK(key_of(head + "smoothed-variance\n[params]\nbetas = 2.9\neps = 1\n") == "params.betas");
  CHECK(key_of(head + "smoothed-variance\n[params]\nbeta_multiples = 0.5\neps = 1, 0\n") == "params.eps");
  CHECK(key_of(head + "martingale\n[params]\nbetas = 0.5\nhorizons = 1, 3\n") == "params.horizons");
  CHECK(key_of(head + "kahane\n[params]\nreps = 500\n") == "params.reps");
  CHECK(key_of(head + "partition\n[params]\nbetas = 0.5\nhorizons = 1\ndt = 0.2\n") == "params.dt");
  CHECK(key_of(head + "partition\n[params]\nbetas = 0.5\nhorizons = 2, 1\n") == "params.horizons");
  CHECK(key_of(head + "partition\n[params]\nbetas = 0.5\nhorizons = 1\nreplicas = 1\n") == "params.replicas");
  CHECK(key_of(head + "partition\n[params]\nbetas = -0.5\n") == "params.betas");
  CHECK(key_of(head + "phase-scan\n[params]\nbetas = 1\nhorizons = 4, 8\n") == "params.horizons");
  CHECK(key_of(head + "tube\n[params]\ndeltas = 1\nhorizons = 0.5, 1\n") == "params.horizons");
  CHECK(key_of(head + "threshold\n[params]\ndim = 2\n") == "params.dim");
  CHECK(key_of(head + "tube\n[params]\ndeltas = 1\nhorizons = 0.05, 0.1, 0.15\n") == "params.horizons");
  CHECK(key_of(head + "partition\nlevel = 1.5\n") == "experiment.level");
  CHECK(key_of(std::string(small_partition)).empty());
}

TEST_CASE("empty grid gives zero records") {
  auto c = parse("[experiment]\nkind = partition\nid = empty\n[params]\nhorizons = 1, 2\n");
  c.output_dir = scratch("empty");
  const auto r = run_experiment(c);
  CHECK(r.records.empty());
  CHECK(r.failures == 0);
  CHECK(fs::exists(r.file));
  CHECK(fs::file_size(r.file) == 0);
}

TEST_CASE("value fields are byte-identical across reruns and worker counts") {
  auto c = parse(small_partition);
  c.output_dir = scratch("determinism");
  auto values = [](const RunResult& r) {
    std::string all;
    for (const auto& rec : r.records) all += rec.value_fields() + "\n";
    return all;
  };
  c.threads = 1;
  const auto one = run_experiment(c);
  c.threads = 3;
  const auto three = run_experiment(c);
  set_worker_count(0);
  CHECK(one.records.size() == 4);
  CHECK(values(one) == values(three));

  c.seed = 12;
  const auto other = run_experiment(c, {.write = false});
  CHECK(values(other) != values(one));

  // Append-only: both runs are in the file, the first one untouched.
  const std::string text = slurp(one.file);
  std::istringstream lines(text);
  std::string line;
  std::vector<std::string> all;
  while (std::getline(lines, line)) all.push_back(line);
  REQUIRE(all.size() == 8);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto a = ResultRecord::from_json(nlohmann::ordered_json::parse(all[i]));
    CHECK(a.value_fields() == one.records[i].value_fields());
    CHECK(a.config_hash == c.hash());
  }
}

TEST_CASE("records round-trip through JSON") {
  auto c = parse(small_partition);
  const auto r = run_experiment(c, {.write = false});
  for (const auto& rec : r.records) {
    const auto back = ResultRecord::from_json(nlohmann::ordered_json::parse(rec.to_json().dump()));
    CHECK(back.value_fields() == rec.value_fields());
    CHECK(back.stream == rec.stream);
    CHECK(back.seed == rec.seed);
  }
  CHECK(r.records.front().values.contains("mean"));
  CHECK(r.records.front().params.contains("beta"));
}

TEST_CASE("phase scan emits one verdict per beta and the report covers every beta") {
  auto c = parse(R"(
[experiment]
kind = phase-scan
id = scan
seed = 5

[params]
beta_multiples = 0.25, 0.5, 1, 2, 4
horizons = 4, 8, 16
replicas = 4
reps = 24
)");
  const auto dir = scratch("phase");
  c.output_dir = dir;
  const auto r = run_experiment(c);
  std::vector<double> seen;
  for (const auto& rec : r.records)
    if (rec.op == "ui_diagnostic") {
      seen.push_back(rec.params["beta_multiple"].get<double>());
      CHECK(rec.verdicts["evidence"].size() >= 3);
      const auto v = rec.verdicts["verdict"].get<std::string>();
      CHECK((v == "weak-like" || v == "strong-like" || v == "undetermined"));
    }
  CHECK(seen == std::vector<double>{0.25, 0.5, 1, 2, 4});
  const auto rep = report(dir);
  CHECK(rep.phase_table.size() == 5);
}

TEST_CASE("report: empty directory, pooled seeds, malformed lines, idempotent output") {
  const auto empty = scratch("report_empty");
  const auto e = write_report(empty);
  CHECK(e.rows.empty());
  CHECK(e.records == 0);
  CHECK(slurp(empty / "plot_data.csv") == "experiment,beta,t_or_eps,statistic,value,stderr\n");

  const auto dir = scratch("report_pool");
  {
    std::ofstream f(dir / "pool.jsonl");
    for (int seed : {1, 2}) {
      ResultRecord r;
      r.experiment = "pool";
      r.kind = "partition";
      r.config_hash = 42;
      r.op = "partition_estimate";
      r.params = {{"beta", 0.5}, {"t", 4.0}};
      r.values["mean"] = seed == 1 ? 1.0 : 1.2;
      r.stderrs["mean"] = 0.2;
      r.seed = static_cast<std::uint64_t>(seed);
      f << r.to_json().dump() << '\n';
    }
    f << "{not json\n";
    f << R"({"experiment": "pool"})" << '\n';
  }
  const auto first = write_report(dir);
  REQUIRE(first.rows.size() == 1);
  CHECK(first.rows[0].runs == 2);
  CHECK(first.rows[0].value == doctest::Approx(1.1));
  CHECK(first.rows[0].stderr_ == doctest::Approx(0.2 / std::sqrt(2.0)));
  CHECK(first.skipped == 2);
  const std::string csv = slurp(dir / "plot_data.csv"), summary = slurp(dir / "summary.txt");
  CHECK(csv.find("pool,0.5,4,\"partition_estimate.mean\",1.1,") != std::string::npos);
  write_report(dir);
  CHECK(slurp(dir / "plot_data.csv") == csv);
  CHECK(slurp(dir / "summary.txt") == summary);
  CHECK(report(dir, {.experiment = "other"}).rows.empty());
}

TEST_CASE("every experiment kind runs a tiny grid") {
  const std::vector<std::string> configs = {
      "kind = martingale\n[params]\nbetas = 0.5\nhorizons = 1, 2\nreplicas = 2\nreps = 12\n",
      "kind = size-biased\n[params]\nbeta_multiples = 0.5\nhorizons = 1\nreplicas = 3\nreps = 12\n",
      "kind = second-moment\n[params]\nbetas = 0.5\nhorizons = 1, 2\nreplicas = 3\nreps = 12\n",
      "kind = threshold\n[params]\nbetas = 0.5, 5\nhorizons = 2\nreps = 20\n",
      "kind = smoothed-variance\n[params]\nbeta_multiples = 0.5\neps = 1, 0.5\nreps = 20\nnodes = 8\n",
      "kind = tube\n[params]\ndeltas = 1\nhorizons = 0.1, 0.2, 0.4\nreps = 4\ndt = 0.01\nspines = 2\npartners = 200\n"
      "proximity_horizons = 0.05, 0.1, 0.15\n",
      "kind = kahane\n[params]\natoms = 3\npairs = 2\nalphas = 1\nreps = 10000\n",
  };
  for (const auto& body : configs) {
    auto c = parse("[experiment]\nid = tiny\n" + body);
    INFO(body);
    const auto r = run_experiment(c, {.write = false});
    CHECK(!r.records.empty());
    CHECK(r.failures == 0);
  }
  auto t = parse("[experiment]\nkind = threshold\n[params]\nbetas = 5\nhorizons = 2\nreps = 20\n");
  const auto r = run_experiment(t, {.write = false});
  bool unbounded = false;
  for (const auto& rec : r.records)
    if (rec.op == "portenko_eta") unbounded = rec.verdicts["moment"] == "unbounded";
  CHECK(unbounded);
}

TEST_CASE("exit codes") {
  CHECK(exit_code_for(ConfigError("params.x", "bad")) == ExitCode::config_error);
  CHECK(exit_code_for(ResourceError("disk", 0)) == ExitCode::resource_error);
  CHECK(exit_code_for(std::logic_error("bug")) == ExitCode::internal_error);

  const auto dir = scratch("tool");
  {
    std::ofstream(dir / "bad.ini") << "[experiment]\nkind = partition\n[params]\nbogus = 1\n";
    std::ofstream(dir / "good.ini") << small_partition;
    std::ofstream(dir / "blocked") << "a file where a directory is expected";
  }
  CHECK(run_tool("validate --config " + (dir / "bad.ini").string()) == 2);
  CHECK(run_tool("validate --config " + (dir / "good.ini").string()) == 0);
  CHECK(run_tool("run --config " + (dir / "good.ini").string() + " --out " + (dir / "blocked").string()) == 3);
  CHECK(run_tool("run --config " + (dir / "good.ini").string() + " --threads 2 --out " + (dir / "res").string()) == 0);
  CHECK(run_tool("report --out " + (dir / "res").string()) == 0);
  CHECK(fs::exists(dir / "res" / "plot_data.csv"));
  CHECK(run_tool("frobnicate") == 2);
}
