#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "grcl/domains.hpp"
#include "grcl/model.hpp"
#include "grcl/trainer.hpp"

namespace grcl {

/// Everything one `grcl run` needs. Parsed from a flat `key = value` file;
/// `#` starts a comment, unknown keys are errors, and `<method>.<key>`
/// overrides a training key for one method only.
struct ExperimentConfig {
  DomainSequenceSpec data;  // seed is taken from data_seed or the run seed
  std::optional<std::uint64_t> data_seed;
  std::vector<std::filesystem::path> dataset_files;
  ModelSpec model;
  TrainConfig train;
  std::map<Method, std::map<std::string, std::string>> method_overrides;
  std::vector<Method> methods{Method::Grcl};
  std::vector<std::uint64_t> seeds{0};
  std::vector<double> lambda_grid;
  bool acc_paper_literal = false;

  static ExperimentConfig parse(const std::string& text, const std::string& origin = "<config>");
  static ExperimentConfig load(const std::filesystem::path& path);

  /// Training configuration of one (method, seed) cell, overrides applied.
  TrainConfig train_config(Method method, std::uint64_t seed) const;
  /// Generated or loaded datasets for one seed; datasets[0] is the source.
  std::vector<DomainDataset> datasets(std::uint64_t seed) const;
  void validate() const;
};

/// Writes domain_<k>.csv for k = 0..N and returns their paths.
std::vector<std::filesystem::path> cmd_gen_data(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);

struct CellResult {
  Method method = Method::Grcl;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  std::optional<AccuracyMatrix> accuracy;
};

struct RunOptions {
  unsigned jobs = 1;
  bool trace = false;
};

/// Runs every (method, seed) cell, writing <out>/<method>/seed_<s>/ and
/// <out>/summary.csv. Failed cells are recorded and skipped.
std::vector<CellResult> cmd_run(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                                const RunOptions& opts = {});

/// Prints the method x (ACC, BWT) table and writes evolution_domain1.csv and
/// source_target.csv into the results directory. Returns 0, or 3 on bad input.
int cmd_report(const std::filesystem::path& results_dir, std::ostream& out, std::ostream& err);

/// Dumps g_t, the constraint rows, u* and the projected update of the first
/// `max_steps` constrained steps as CSV, one vector per line.
void cmd_debug_qp(const ExperimentConfig& cfg, Method method, std::uint64_t seed, std::size_t max_steps,
                  const std::filesystem::path& out_file);

/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
double sample_std(const std::vector<double>& v);

}  // namespace grcl
