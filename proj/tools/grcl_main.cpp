#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "grcl/errors.hpp"
#include "grcl/experiment.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;
constexpr int kReportError = 3;

bool trace_enabled() {
  const char* v = std::getenv("GRCL_TRACE");
  return v != nullptr && std::string(v) == "1";
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("grcl"));

  CLI::App app{"Continual domain adaptation with gradient-regularized contrastive learning"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Only log warnings and errors");

  std::string config_path, out_path, in_path, method_name = "grcl";
  unsigned jobs = 1;
  std::uint64_t seed = 0;
  std::size_t steps = 5;

  auto* gen = app.add_subcommand("gen-data", "Write one CSV per domain");
  gen->add_option("--config", config_path, "Experiment config")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", out_path, "Output directory")->required();

  auto* run = app.add_subcommand("run", "Run every (method, seed) cell of a config");
  run->add_option("--config", config_path, "Experiment config")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out_path, "Results directory")->required();
  run->add_option("--jobs", jobs, "Cells to run in parallel")->check(CLI::PositiveNumber);

  auto* report = app.add_subcommand("report", "Summarize a results directory");
  report->add_option("--in", in_path, "Results directory written by run")->required();

  auto* qp = app.add_subcommand("debug-qp", "Dump g_t, G, u* and the projected update per step as CSV");
  qp->add_option("--config", config_path, "Experiment config")->required()->check(CLI::ExistingFile);
  qp->add_option("--out", out_path, "Output CSV file")->required();
  qp->add_option("--method", method_name, "grcl, grcl-noforget or grcl-exact");
  qp->add_option("--seed", seed, "Seed of the cell to trace");
  qp->add_option("--steps", steps, "Constrained steps to dump")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }
  spdlog::set_level(quiet ? spdlog::level::warn : spdlog::level::info);

  if (report->parsed()) return grcl::cmd_report(in_path, std::cout, std::cerr);

  grcl::ExperimentConfig cfg;
  try {
    cfg = grcl::ExperimentConfig::load(config_path);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  }

  try {
    if (gen->parsed()) {
      for (const auto& p : grcl::cmd_gen_data(cfg, out_path)) std::cout << p.string() << '\n';
      return kOk;
    }
    if (run->parsed()) {
      grcl::RunOptions opts;
      opts.jobs = jobs;
      opts.trace = trace_enabled();
      const auto cells = grcl::cmd_run(cfg, out_path, opts);
      int failed = 0;
      for (const auto& c : cells) failed += c.ok ? 0 : 1;
      if (failed > 0) {
        std::cerr << failed << " of " << cells.size() << " cells failed; see error.txt in their directories\n";
        return kRuntimeError;
      }
      return kOk;
    }
    if (qp->parsed()) {
      if (!trace_enabled()) spdlog::info("debug-qp writes its dump regardless of GRCL_TRACE");
      grcl::cmd_debug_qp(cfg, grcl::parse_method(method_name), seed, steps, out_path);
      return kOk;
    }
  } catch (const grcl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kOk;
}
