// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "grcl/contrast.hpp"
#include "grcl/experiment.hpp"
#include "grcl/gradproj.hpp"
#include "grcl/metrics.hpp"
#include "metric_fixtures.hpp"
#include "test_support.hpp"

using namespace grcl;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// Tolerances.
constexpr double kQpAgreement = 1e-6;
constexpr double kQpTimeLimit = 10.0;  // s
constexpr double kHalfspaceTol = 1e-12;
constexpr double kOrthantTol = 1e-10;
constexpr double kGradRelError = 1e-4;
constexpr double kInfoNceTol = 1e-9;
constexpr double kMetricTol = 1e-12;
constexpr double kSeqBwtMax = -0.05;
constexpr double kGrclBwtMin = -0.02;
constexpr double kBenchTimeLimit = 300.0;  // s
constexpr double kAdaptationGain = 0.10;
constexpr double kMultiTaskDrop = 0.02;
constexpr double kNoForgetBand = 0.01;
constexpr double kMemorySlack = 0.005;
// Accuracies are multiples of 1/|test|; differences of them carry rounding.
constexpr double kFloatSlack = 1e-12;

int failures = 0;

void report(int id, bool pass, const std::string& what, const std::string& detail) {
  std::printf("%s criterion %d: %s (%s)\n", pass ? "PASS" : "FAIL", id, what.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

FlatGradient vec2(double a, double b) {
  FlatGradient v(2);
  v << a, b;
  return v;
}

void criterion_qp_oracle() {
  const Eigen::Index dims[] = {2, 8, 32, 64};
  const std::size_t ks[] = {1, 2, 5};
  double worst_diff = 0.0, worst_dist = 0.0, worst_slack = 0.0;
  std::size_t errors = 0;
  const auto t0 = Clock::now();
  for (std::uint64_t i = 0; i < 1000; ++i) {
    const Eigen::Index p = dims[i % 4];
    const std::size_t k = ks[(i / 4) % 3];
    ConstraintSet cs;
    cs.proposed = grcl::testing::random_vector(p, derive_seed(1, {i, 0}));
    for (std::size_t r = 0; r < k; ++r) cs.add(grcl::testing::random_vector(p, derive_seed(1, {i, r + 1})), {});
    try {
      const auto res = project(cs);
      const auto oracle = oracle_project(cs);
      worst_diff = std::max(worst_diff, (res.projected - oracle).cwiseAbs().maxCoeff());
      worst_dist = std::max(worst_dist, std::abs(res.distortion - (cs.proposed - oracle).norm()));
      for (std::size_t r = 0; r < k; ++r) {
        worst_slack = std::max(worst_slack, std::abs(res.multipliers(static_cast<Eigen::Index>(r)) *
                                                     res.projected.dot(cs.rows[r])));
      }
    } catch (const std::exception&) {
      ++errors;
    }
  }
  const double secs = seconds_since(t0);
  const bool pass = errors == 0 && worst_diff <= kQpAgreement && worst_dist <= kQpAgreement &&
                    worst_slack <= kQpAgreement && secs < kQpTimeLimit;
  report(1, pass, "QP matches the active-set oracle on 1000 random sets",
         "max |dg|=" + sci(worst_diff) + " max |d distortion|=" + sci(worst_dist) +
             " max slackness=" + sci(worst_slack) + " errors=" + std::to_string(errors) + " time=" + fmt(secs, 2) +
             "s");
}

void criterion_projection_fixtures() {
  ConstraintSet half;
  half.proposed = vec2(1.0, -2.0);
  half.add(vec2(0.0, 1.0), {});
  const auto h = project(half);
  const double h_err = (h.projected - vec2(1.0, 0.0)).cwiseAbs().maxCoeff();

  ConstraintSet orth;
  orth.proposed = vec2(1.0, -1.0);
  orth.add(vec2(0.0, 1.0), {ConstraintKind::Source});
  orth.add(vec2(1.0, 0.0), {ConstraintKind::DomainMemory});
  const auto o = project(orth);
  const double o_err = std::max((o.projected - vec2(1.0, 0.0)).cwiseAbs().maxCoeff(),
                                (o.multipliers - vec2(1.0, 0.0)).cwiseAbs().maxCoeff());
  report(2, h_err <= kHalfspaceTol && o_err <= kOrthantTol, "hand-derived projection fixtures",
         "halfspace err=" + sci(h_err) + " orthant err=" + sci(o_err));
}

void criterion_gradients() {
  const auto spec = grcl::testing::small_spec();
  double ce_worst = 0.0, con_worst = 0.0;
  for (std::uint64_t inst = 0; inst < 50; ++inst) {
    const auto params = grcl::testing::random_params(spec, derive_seed(3, {inst, 0}));
    const Matrix x = grcl::testing::random_matrix(5, 3, derive_seed(3, {inst, 1}));
    std::vector<int> y;
    for (std::size_t r = 0; r < 5; ++r) y.push_back(static_cast<int>((r + inst) % spec.num_classes));
    const auto lg = ce_loss_and_gradient(params, x, y);
    ce_worst = std::max(ce_worst, grcl::testing::finite_difference_check(
                                      [&](const ParamVector& p) { return ce_loss(forward(p, x).logits, y); }, params,
                                      lg.gradient)
                                      .max_rel_error);

    Matrix keys = grcl::testing::random_matrix(24, static_cast<Eigen::Index>(spec.key_dim), derive_seed(3, {inst, 2}));
    for (Eigen::Index r = 0; r < keys.rows(); ++r) keys.row(r).normalize();
    std::vector<SampleKey> ids;
    for (std::size_t r = 0; r < 24; ++r) ids.push_back({0, r});
    const FeatureBank bank(keys, ids, 0.5, 0.5);
    ContrastiveBatch batch{grcl::testing::random_matrix(4, 3, derive_seed(3, {inst, 3})), {1, 5, 9, 13}};
    ContrastiveOptions opts;
    opts.negatives = 10;
    opts.aug_seed = inst;
    opts.negative_seed = inst + 100;
    const auto res = contrastive_batch_loss(params, bank, batch, opts);
    opts.compute_gradient = false;
    con_worst = std::max(con_worst, grcl::testing::finite_difference_check(
                                        [&](const ParamVector& p) { return contrastive_batch_loss(p, bank, batch, opts).loss; },
                                        params, res.gradient)
                                        .max_rel_error);
  }
  report(3, ce_worst <= kGradRelError && con_worst <= kGradRelError,
         "analytic gradients match central differences (P=" + std::to_string(spec.param_count()) + ", 50 instances each)",
         "CE max rel err=" + sci(ce_worst) + " contrastive max rel err=" + sci(con_worst));
}

void criterion_info_nce() {
  double worst = 0.0;
  for (int k : {1, 15, 255}) {
    for (double tau : {0.07, 0.5, 1.0}) {
      Vector q = Vector::Zero(8);
      q(2) = 1.0;
      ContrastItem item{q, q, Matrix(k, 8)};
      for (int r = 0; r < k; ++r) item.negatives.row(r) = q.transpose();
      worst = std::max(worst, std::abs(info_nce(item, tau) - std::log(k + 1.0)));
    }
  }
  Vector q = Vector::Zero(4);
  q(0) = 1.0;
  Vector kp = Vector::Zero(4);
  kp(1) = 1.0;
  const double zero = info_nce({q, kp, Matrix(0, 4)}, 0.07);
  report(4, worst <= kInfoNceTol && zero == 0.0, "InfoNCE closed forms",
         "max |L - ln(K+1)|=" + sci(worst) + " zero-negative value=" + fmt(zero, 1));
}

void criterion_metrics() {
  double worst = 0.0;
  bool bwt_ok = true;
  for (const auto& f : grcl::testing::metric_fixtures()) {
    const auto m = f.matrix();
    worst = std::max(worst, std::abs(compute_acc(m, AccNormalization::TrueMean) - f.acc_true_mean));
    worst = std::max(worst, std::abs(compute_acc(m, AccNormalization::PaperLiteral) - f.acc_paper_literal));
    if (f.bwt) {
      worst = std::max(worst, std::abs(compute_bwt(m) - *f.bwt));
    } else {
      try {
        compute_bwt(m);
        bwt_ok = false;
      } catch (const std::exception&) {
      }
    }
  }
  report(5, worst <= kMetricTol && bwt_ok, "ACC/BWT on 5 hand-computed fixtures",
         "max err=" + sci(worst) + (bwt_ok ? "" : ", BWT accepted N<2"));
}

using Results = std::map<Method, std::vector<AccuracyMatrix>>;

Results collect(const std::vector<CellResult>& cells, bool& all_ok) {
  Results r;
  for (const auto& c : cells) {
    if (!c.ok || !c.accuracy) {
      all_ok = false;
      std::printf("  cell %s seed %llu failed: %s\n", std::string(to_string(c.method)).c_str(),
                  static_cast<unsigned long long>(c.seed), c.error.c_str());
      continue;
    }
    r[c.method].push_back(*c.accuracy);
  }
  return r;
}

std::vector<double> per_seed(const Results& r, Method m, double (*f)(const AccuracyMatrix&)) {
  std::vector<double> out;
  if (auto it = r.find(m); it != r.end())
    for (const auto& a : it->second) out.push_back(f(a));
  return out;
}

double acc_of(const AccuracyMatrix& a) { return compute_acc(a); }
double bwt_of(const AccuracyMatrix& a) { return compute_bwt(a); }
double target_of(const AccuracyMatrix& a) { return mean_target_accuracy(a); }
double source_after_first(const AccuracyMatrix& a) { return a.at(1, 0); }

std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "/" : "") + fmt(v[i], 3);
  return s;
}

std::map<std::string, std::string> metrics_files(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.path().filename() != "metrics.json") continue;
    std::ifstream is(e.path(), std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    out[fs::relative(e.path(), root).string()] = ss.str();
  }
  return out;
}

void benchmark_criteria() {
  const fs::path config = fs::path(GRCL_SOURCE_DIR) / "configs/default.cfg";
  const auto cfg = ExperimentConfig::load(config);
  grcl::testing::TempDir run_a("accept_a"), run_b("accept_b"), run_mem("accept_mem");

  std::size_t violated_steps = 0;
  auto t0 = Clock::now();
  const auto cells = cmd_run(cfg, run_a.path());
  const double secs = seconds_since(t0);
  bool ok = true;
  const auto res = collect(cells, ok);

  // Violated-step counts come from the written metrics.
  for (const auto& [rel, text] : metrics_files(run_a.path())) {
    if (rel.rfind("grcl/", 0) != 0) continue;
    for (std::size_t pos = text.find("\"violated_steps\""); pos != std::string::npos;
         pos = text.find("\"violated_steps\"", pos + 1)) {
      violated_steps += std::stoul(text.substr(text.find(':', pos) + 1));
    }
  }

  // 6
  const auto seq_bwt = per_seed(res, Method::SeqFinetune, bwt_of);
  const auto grcl_bwt = per_seed(res, Method::Grcl, bwt_of);
  const auto seq_acc = per_seed(res, Method::SeqFinetune, acc_of);
  const auto grcl_acc = per_seed(res, Method::Grcl, acc_of);
  const bool pass6 = ok && seq_bwt.size() == 3 && grcl_bwt.size() == 3 && mean(seq_bwt) <= kSeqBwtMax &&
                     mean(grcl_bwt) >= kGrclBwtMin && mean(grcl_acc) > mean(seq_acc) && secs < kBenchTimeLimit;
  report(6, pass6, "forgetting: seq-finetune BWT <= -0.05, grcl BWT >= -0.02, grcl ACC > seq-finetune ACC (seed means)",
         "seq BWT=" + fmt(mean(seq_bwt)) + " [" + join(seq_bwt) + "] grcl BWT=" + fmt(mean(grcl_bwt)) + " [" +
             join(grcl_bwt) + "] ACC grcl=" + fmt(mean(grcl_acc)) + " seq=" + fmt(mean(seq_acc)) +
             " grcl violated steps=" + std::to_string(violated_steps) + " run time=" + fmt(secs, 1) + "s");

  // 7
  const auto grcl_t = per_seed(res, Method::Grcl, target_of);
  const auto src_t = per_seed(res, Method::SourceOnly, target_of);
  const double gain = mean(grcl_t) - mean(src_t);
  report(7, ok && grcl_t.size() == 3 && src_t.size() == 3 && gain >= kAdaptationGain - kFloatSlack,
         "grcl mean target accuracy exceeds source-only by >= 0.10",
         "grcl=" + fmt(mean(grcl_t)) + " [" + join(grcl_t) + "] source-only=" + fmt(mean(src_t)) + " [" +
             join(src_t) + "] gain=" + fmt(gain));

  // 8
  const auto src1 = per_seed(res, Method::SourceOnly, source_after_first);
  const auto mt1 = per_seed(res, Method::MultiTask, source_after_first);
  const auto nf1 = per_seed(res, Method::GrclNoForget, source_after_first);
  bool mt_ok = src1.size() == 3 && mt1.size() == 3, nf_ok = src1.size() == 3 && nf1.size() == 3;
  for (std::size_t s = 0; s < std::min({src1.size(), mt1.size(), nf1.size()}); ++s) {
    mt_ok = mt_ok && src1[s] - mt1[s] >= kMultiTaskDrop - kFloatSlack;
    nf_ok = nf_ok && std::abs(nf1[s] - src1[s]) <= kNoForgetBand + kFloatSlack;
  }
  report(8, ok && mt_ok && nf_ok,
         "after one task: multi-task source accuracy drops >= 0.02, grcl-noforget within 0.01 (every seed)",
         "source-only [" + join(src1) + "] multi-task [" + join(mt1) + "]" + (mt_ok ? "" : " drop too small") +
             " grcl-noforget [" + join(nf1) + "]" + (nf_ok ? "" : " outside band"));

  // 9
  std::map<std::size_t, double> acc_by_capacity{{cfg.train.memory_capacity, mean(grcl_acc)}};
  bool mem_ok = ok;
  for (std::size_t cap : {64u, 128u, 256u}) {
    if (acc_by_capacity.count(cap)) continue;
    auto c = cfg;
    c.methods = {Method::Grcl};
    c.train.memory_capacity = cap;
    c.method_overrides[Method::Grcl].erase("memory_capacity");
    const auto r = collect(cmd_run(c, run_mem.path() / std::to_string(cap)), mem_ok);
    acc_by_capacity[cap] = mean(per_seed(r, Method::Grcl, acc_of));
  }
  const bool mono = acc_by_capacity[64] <= acc_by_capacity[128] + kMemorySlack + kFloatSlack &&
                    acc_by_capacity[128] <= acc_by_capacity[256] + kMemorySlack + kFloatSlack;
  report(9, mem_ok && mono, "grcl ACC non-decreasing in memory capacity 64/128/256 (slack 0.005)",
         "ACC " + fmt(acc_by_capacity[64]) + " / " + fmt(acc_by_capacity[128]) + " / " + fmt(acc_by_capacity[256]));

  // 10
  cmd_run(cfg, run_b.path());
  const auto a = metrics_files(run_a.path());
  const auto b = metrics_files(run_b.path());
  std::size_t differing = 0;
  for (const auto& [rel, text] : a) {
    auto it = b.find(rel);
    if (it == b.end() || it->second != text) ++differing;
  }
  report(10, !a.empty() && a.size() == b.size() && differing == 0, "two identical runs write byte-identical metrics.json",
         std::to_string(a.size()) + " files compared, " + std::to_string(differing) + " differ");
}

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::warn);
  criterion_qp_oracle();
  criterion_projection_fixtures();
  criterion_gradients();
  criterion_info_nce();
  criterion_metrics();
  benchmark_criteria();
  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
