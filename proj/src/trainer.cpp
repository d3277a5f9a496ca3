#include "grcl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include <spdlog/spdlog.h>

#include "grcl/errors.hpp"
#include "grcl/rng.hpp"

namespace grcl {

namespace {

// Stream tags for derive_seed.
enum : std::uint64_t {
  kInitTag = 11,
  kSourceShuffleTag,
  kEpochShuffleTag,
  kAugTag,
  kNegTag,
  kSourceBatchTag,
  kMemoryBatchTag,
  kSelectTag,
};

double cosine_lr(double base, const TrainConfig& cfg, std::size_t step, std::size_t total) {
  if (!cfg.cosine_decay || total == 0) return base;
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

Batch gather(const Matrix& inputs, const std::vector<int>* labels, std::span<const std::size_t> rows) {
  Batch b;
  b.inputs.resize(static_cast<Eigen::Index>(rows.size()), inputs.cols());
  std::vector<int> y;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    b.inputs.row(static_cast<Eigen::Index>(i)) = inputs.row(static_cast<Eigen::Index>(rows[i]));
    if (labels) y.push_back((*labels)[rows[i]]);
  }
  if (labels) b.labels = std::move(y);
  return b;
}

// b distinct rows out of n (all of them, shuffled, when b >= n).
std::vector<std::size_t> draw_rows(std::size_t n, std::size_t b, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  const std::size_t take = std::min(b, n);
  for (std::size_t i = 0; i < take; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(take);
  return idx;
}

bool uses_contrast(Method m) { return m != Method::SourceOnly; }


void check_finite(double v, std::size_t task, std::size_t step, const char* what) {
  if (!std::isfinite(v)) {
    throw TrainingDivergence("task " + std::to_string(task) + " step " + std::to_string(step) + ": " + what +
                             " is not finite");
  }
}

}  // namespace

std::string_view to_string(Method m) {
  switch (m) {
    case Method::SourceOnly: return "source-only";
    case Method::SeqFinetune: return "seq-finetune";
    case Method::MultiTask: return "multi-task";
    case Method::GrclNoForget: return "grcl-noforget";
    case Method::Grcl: return "grcl";
    case Method::GrclExact: return "grcl-exact";
  }
  return "unknown";
}

Method parse_method(std::string_view name) {
  for (auto m : {Method::SourceOnly, Method::SeqFinetune, Method::MultiTask, Method::GrclNoForget, Method::Grcl,
                 Method::GrclExact}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown method '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (!(pretrain_learning_rate > 0.0)) throw ConfigError("pretrain_learning_rate must be > 0");
  if (pretrain_batch < 1) throw ConfigError("pretrain_batch must be >= 1");
  if (source_batch < 1 || contrast_batch < 1 || memory_batch < 1) throw ConfigError("batch sizes must be >= 1");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  validate_contrast_params(momentum, temperature);
  if (memory_capacity < 1) throw ConfigError("memory_capacity must be >= 1");
  if (!(ridge >= 0.0)) throw ConfigError("ridge must be >= 0");
  if (!(augment.noise_sigma >= 0.0) || !(augment.scale_lo > 0.0) || augment.scale_hi < augment.scale_lo) {
    throw ConfigError("augmentation needs noise >= 0 and 0 < scale_lo <= scale_hi");
  }
  if (exact_per_domain && method != Method::Grcl && method != Method::GrclExact) {
    throw ConfigError("exact_per_domain only applies to grcl");
  }
}

Method TrainConfig::effective_method() const {
  if (method == Method::Grcl && exact_per_domain) return Method::GrclExact;
  return method;
}

ParamVector train_source(const ModelSpec& spec, const Batch& source, const TrainConfig& cfg) {
  cfg.validate();
  source.validate(spec.num_classes);
  if (!source.labeled()) throw InvalidInput("source training data must be labeled");
  ParamVector params = ParamVector::initialize(spec, derive_seed(cfg.seed, {kInitTag}));

  const std::size_t n = source.rows();
  const std::size_t per_epoch = (n + cfg.pretrain_batch - 1) / cfg.pretrain_batch;
  const std::size_t total = per_epoch * cfg.pretrain_epochs;
  std::vector<std::size_t> order(n);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(cfg.seed, {kSourceShuffleTag, epoch}));
    rng.shuffle(order);
    for (std::size_t start = 0; start < n; start += cfg.pretrain_batch, ++step) {
      const auto end = std::min(n, start + cfg.pretrain_batch);
      const Batch b = gather(source.inputs, &*source.labels, std::span(order).subspan(start, end - start));
      const auto lg = ce_loss_and_gradient(params, b.inputs, *b.labels);
      if (!std::isfinite(lg.loss)) {
        throw TrainingDivergence("source training diverged at epoch " + std::to_string(epoch) + ", step " +
                                 std::to_string(step) + " (loss " + std::to_string(lg.loss) + ")");
      }
      params = sgd_step(params, lg.gradient, cosine_lr(cfg.pretrain_learning_rate, cfg, step, total));
    }
  }
  return params;
}

AdaptationState adapt_domain(AdaptationState state, const Batch& source, const UnlabeledSet& target,
                             const TrainConfig& cfg, const TrainHooks& hooks, TaskReport* report) {
  cfg.validate();
  const ModelSpec& spec = state.params.spec();
  source.validate(spec.num_classes);
  if (!source.labeled()) throw InvalidInput("source batch must be labeled");
  if (target.inputs.rows() < 1) throw InvalidInput("target domain is empty");
  const Method method = cfg.effective_method();
  const std::size_t task = state.completed_domains + 1;

  TaskReport rep;
  rep.task = task;

  if (uses_contrast(method)) {
    // Bank over D_s, M and D_t, keyed with the frozen parameters of the previous task.
    std::vector<BankSource> sources;
    sources.push_back({0, &source.inputs, {}});
    for (const auto& m : state.memory.episodic()) sources.push_back({m.domain_id, &m.samples, m.sample_ids});
    sources.push_back({target.domain_id, &target.inputs, {}});
    state.bank.emplace(build_feature_bank(state.frozen_prev_params, sources, cfg.momentum, cfg.temperature));
    FeatureBank& bank = *state.bank;

    // Bank row i is pool sample i.
    Matrix pool(static_cast<Eigen::Index>(bank.size()), static_cast<Eigen::Index>(spec.input_dim));
    {
      Eigen::Index cursor = 0;
      for (const auto& s : sources) {
        pool.middleRows(cursor, s.inputs->rows()) = *s.inputs;
        cursor += s.inputs->rows();
      }
    }
    const std::size_t n_pool = bank.size();
    const std::size_t per_epoch = (n_pool + cfg.contrast_batch - 1) / cfg.contrast_batch;
    const std::size_t total = per_epoch * cfg.epochs;

    ContrastiveOptions copts;
    copts.augment = cfg.augment;
    copts.negatives = cfg.negatives;

    std::vector<std::size_t> order(n_pool);
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng rng(derive_seed(cfg.seed, {kEpochShuffleTag, task, epoch}));
      rng.shuffle(order);
      for (std::size_t start = 0; start < n_pool; start += cfg.contrast_batch, ++step) {
        try {
          const auto end = std::min(n_pool, start + cfg.contrast_batch);
          const std::span<const std::size_t> rows(order.data() + start, end - start);
          ContrastiveBatch cb{gather(pool, nullptr, rows).inputs, {rows.begin(), rows.end()}};
          const double lr = cosine_lr(cfg.learning_rate, cfg, step, total);
          StepTrace tr;
          tr.task = task;
          tr.step = step;
          tr.lr = lr;

          // g_t
          copts.aug_seed = derive_seed(cfg.seed, {kAugTag, task, step});
          copts.negative_seed = derive_seed(cfg.seed, {kNegTag, task, step});
          auto contrast = contrastive_batch_loss(state.params, bank, cb, copts);
          check_finite(contrast.loss, task, step, "contrastive loss");
          tr.contrast_loss = contrast.loss;
          rep.degenerate_keys += contrast.degenerate_keys;

          // g_s
          std::optional<LossAndGradient> source_grad;
          if (method != Method::SeqFinetune) {
            const auto srows = draw_rows(source.rows(), cfg.source_batch, derive_seed(cfg.seed, {kSourceBatchTag, task, step}));
            const Batch sb = gather(source.inputs, &*source.labels, srows);
            source_grad = ce_loss_and_gradient(state.params, sb.inputs, *sb.labels);
            check_finite(source_grad->loss, task, step, "source cross-entropy");
            tr.source_ce = source_grad->loss;
          }

          // UpdateKey
          for (std::size_t i = 0; i < rows.size(); ++i) {
            if (!bank.update_key(rows[i], contrast.fresh_keys.row(static_cast<Eigen::Index>(i)).transpose())) {
              ++rep.degenerate_keys;
            }
          }

          FlatGradient update;
          if (method == Method::SeqFinetune) {
            update = std::move(contrast.gradient);
          } else if (method == Method::MultiTask) {
            update = source_grad->gradient + cfg.lambda * contrast.gradient;
          } else {
            ConstraintSet cs;
            cs.proposed = std::move(contrast.gradient);
            cs.add(source_grad->gradient, {ConstraintKind::Source});
            const auto mseed = derive_seed(cfg.seed, {kMemoryBatchTag, task, step});
            if (method == Method::Grcl && !state.memory.empty()) {
              const auto mb = sample_memory_batch(state.memory, cfg.memory_batch, mseed);
              auto lg = ce_loss_and_gradient(state.params, mb.batch.inputs, *mb.batch.labels);
              check_finite(lg.loss, task, step, "memory cross-entropy");
              tr.memory_ce = lg.loss;
              cs.add(std::move(lg.gradient), {ConstraintKind::DomainMemory});
            } else if (method == Method::GrclExact) {
              double mce = 0.0;
              for (std::size_t k = 0; k < state.memory.episodic().size(); ++k) {
                const auto& em = state.memory.episodic()[k];
                const auto mb = sample_episodic_batch(em, cfg.memory_batch, derive_seed(mseed, {k}));
                auto lg = ce_loss_and_gradient(state.params, mb.batch.inputs, *mb.batch.labels);
                check_finite(lg.loss, task, step, "memory cross-entropy");
                mce += lg.loss / static_cast<double>(state.memory.episodic().size());
                cs.add(std::move(lg.gradient), {ConstraintKind::Memory, em.domain_id});
              }
              if (!state.memory.empty()) tr.memory_ce = mce;
            }
            ProjectOptions popts;
            popts.ridge = cfg.ridge;
            const double eps = default_feasibility_tolerance(cs.proposed);
            tr.feasibility_tolerance = eps;
            tr.violated = check_violation(cs, eps);
            for (const auto& t : cs.tags) tr.constraints.push_back(to_string(t));
            const bool any = std::any_of(tr.violated.begin(), tr.violated.end(), [](bool v) { return v; });
            ProjectionResult pr = project(cs, popts);
            if (hooks.on_projection) hooks.on_projection(task, step, cs, pr);
            for (const auto& row : cs.rows) {
              const double dot = pr.projected.dot(row);
              if (dot < -eps) {
                throw std::logic_error("projected update violates a constraint (dot " + std::to_string(dot) + ")");
              }
              tr.constraint_dots.push_back(dot);
            }
            if (any) {
              ++rep.violated_steps;
              ++rep.projections;
              rep.max_distortion = std::max(rep.max_distortion, pr.distortion);
            }
            tr.projected = pr.changed;
            tr.distortion = pr.distortion;
            tr.multipliers.assign(pr.multipliers.data(), pr.multipliers.data() + pr.multipliers.size());
            update = std::move(pr.projected);
          }

          state.params = sgd_step(state.params, update, lr);
          ++rep.steps;
          if (hooks.on_step) hooks.on_step(tr);
          if (hooks.on_params) hooks.on_params(task, step, state.params);
        } catch (const TrainingDivergence&) {
          throw;
        } catch (const TaskFailure&) {
          throw;
        } catch (const std::exception& e) {
          throw TaskFailure(task, step, e.what());
        }
      }
    }
  }

  // UpdateMemory: pseudo-labelled top-confidence samples of D_t under the new params.
  state.memory.append(select_episodic(state.params, target, cfg.memory_capacity,
                                      derive_seed(cfg.seed, {kSelectTag, task}), cfg.selection));
  state.frozen_prev_params = state.params;
  state.completed_domains = task;
  if (report) *report = rep;
  if (rep.degenerate_keys > 0) spdlog::warn("task {}: {} degenerate keys", task, rep.degenerate_keys);
  return state;
}

SequenceResult run_sequence(const ModelSpec& spec, const std::vector<DomainDataset>& datasets,
                            const TrainConfig& cfg, const TrainHooks& hooks) {
  if (datasets.empty()) throw InvalidInput("run_sequence needs at least the source dataset");
  if (!datasets.front().labeled_for_training()) throw InvalidInput("datasets[0] must be the labeled source");
  const std::size_t n_targets = datasets.size() - 1;
  const Batch& source = datasets.front().labeled_train();

  AdaptationState state(train_source(spec, source, cfg));
  SequenceResult result{AccuracyMatrix(n_targets), {}, state.params};

  auto evaluate_row = [&](std::size_t i) {
    for (std::size_t k = 0; k <= i; ++k) result.accuracy.set(i, k, evaluate_accuracy(state.params, datasets[k].test()));
  };
  evaluate_row(0);
  for (std::size_t t = 1; t <= n_targets; ++t) {
    TaskReport rep;
    state = adapt_domain(std::move(state), source, datasets[t].unlabeled_train(), cfg, hooks, &rep);
    result.tasks.push_back(rep);
    evaluate_row(t);
  }
  result.final_params = state.params;
  return result;
}

double select_multitask_lambda(const ModelSpec& spec, const std::vector<DomainDataset>& datasets, TrainConfig cfg,
                               const std::vector<double>& grid) {
  if (grid.empty()) throw ConfigError("lambda grid is empty");
  cfg.method = Method::MultiTask;
  double best_lambda = grid.front();
  double best = -1.0;
  for (double lambda : grid) {
    cfg.lambda = lambda;
    const auto res = run_sequence(spec, datasets, cfg);
    const double acc = mean_target_accuracy(res.accuracy);
    if (acc > best) {
      best = acc;
      best_lambda = lambda;
    }
  }
  return best_lambda;
}

}  // namespace grcl
