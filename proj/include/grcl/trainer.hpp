#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "grcl/contrast.hpp"
#include "grcl/domains.hpp"
#include "grcl/gradproj.hpp"
#include "grcl/memory.hpp"
#include "grcl/metrics.hpp"
#include "grcl/model.hpp"

namespace grcl {

enum class Method { SourceOnly, SeqFinetune, MultiTask, GrclNoForget, Grcl, GrclExact };

std::string_view to_string(Method m);
/// Accepts the hyphenated names used in configs: source-only, seq-finetune,
/// multi-task, grcl-noforget, grcl, grcl-exact.
Method parse_method(std::string_view name);

struct TrainConfig {
  Method method = Method::Grcl;
  double learning_rate = 0.05;
  bool cosine_decay = true;
  /// Source pretraining schedule, separate from the adaptation steps.
  double pretrain_learning_rate = 0.2;
  std::size_t pretrain_epochs = 60;
  std::size_t pretrain_batch = 64;
  std::size_t epochs = 30;  // per adaptation task
  std::size_t source_batch = 64;
  std::size_t contrast_batch = 64;
  std::size_t memory_batch = 64;
  double lambda = 1.0;  // multi-task weight only
  double temperature = 0.07;
  double momentum = 0.5;
  std::optional<std::size_t> negatives = 256;  // nullopt: full bank
  std::size_t memory_capacity = 256;
  SelectionMode selection = SelectionMode::ClassBalanced;
  /// One constraint per episodic memory instead of one for the union.
  bool exact_per_domain = false;
  double ridge = 1e-3;
  AugmentStrength augment;
  std::uint64_t seed = 0;

  void validate() const;
  /// grcl with exact_per_domain behaves as grcl-exact.
  Method effective_method() const;
};

/// One training step, as written to the trace log.
struct StepTrace {
  std::size_t task = 0;
  std::size_t step = 0;
  double lr = 0.0;
  double contrast_loss = 0.0;
  std::optional<double> source_ce;
  std::optional<double> memory_ce;
  std::vector<std::string> constraints;
  std::vector<bool> violated;
  bool projected = false;
  double distortion = 0.0;
  std::vector<double> multipliers;
  /// <g_hat, g_k> after projection (equal to <g_t, g_k> when nothing was violated).
  std::vector<double> constraint_dots;
  double feasibility_tolerance = 0.0;
};

struct TrainHooks {
  std::function<void(const StepTrace&)> on_step;
  std::function<void(std::size_t task, std::size_t step, const ParamVector&)> on_params;
  /// Called for every constrained step, violated or not.
  std::function<void(std::size_t task, std::size_t step, const ConstraintSet&, const ProjectionResult&)> on_projection;
};

struct TaskReport {
  std::size_t task = 0;
  std::size_t steps = 0;
  std::size_t violated_steps = 0;
  std::size_t projections = 0;
  std::size_t degenerate_keys = 0;
  double max_distortion = 0.0;
};

/// Training state carried from task to task.
struct AdaptationState {
  ParamVector params;
  DomainMemory memory;
  std::optional<FeatureBank> bank;
  std::size_t completed_domains = 0;
  ParamVector frozen_prev_params;

  explicit AdaptationState(ParamVector source_params)
      : params(source_params), frozen_prev_params(std::move(source_params)) {}
};

/// A task aborted mid-way; carries the step index.
class TaskFailure : public std::runtime_error {
 public:
  TaskFailure(std::size_t task, std::size_t step, const std::string& what)
      : std::runtime_error("task " + std::to_string(task) + " step " + std::to_string(step) + ": " + what),
        task_(task), step_(step) {}
  std::size_t task() const { return task_; }
  std::size_t step() const { return step_; }

 private:
  std::size_t task_;
  std::size_t step_;
};

/// Mini-batch SGD on the source cross-entropy from a seeded initialization.
ParamVector train_source(const ModelSpec& spec, const Batch& source, const TrainConfig& cfg);

/// One adaptation task: contrastive training on source, memory and target
/// under the method's update rule, then memory selection on the target.
AdaptationState adapt_domain(AdaptationState state, const Batch& source, const UnlabeledSet& target,
                             const TrainConfig& cfg, const TrainHooks& hooks = {}, TaskReport* report = nullptr);

struct SequenceResult {
  AccuracyMatrix accuracy;
  std::vector<TaskReport> tasks;
  ParamVector final_params;
};

/// Source training followed by adaptation through every target in order.
/// Row i of the accuracy matrix is filled right after task i.
SequenceResult run_sequence(const ModelSpec& spec, const std::vector<DomainDataset>& datasets,
                            const TrainConfig& cfg, const TrainHooks& hooks = {});

/// Multi-task weight chosen from `grid` by final mean target accuracy
/// (first best wins).
double select_multitask_lambda(const ModelSpec& spec, const std::vector<DomainDataset>& datasets,
                               TrainConfig cfg, const std::vector<double>& grid);

}  // namespace grcl
