#include "grcl/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numbers>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "grcl/errors.hpp"

namespace grcl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

struct BadValue : std::runtime_error {
  using std::runtime_error::runtime_error;
};

double to_double(const std::string& v) {
  double out = 0.0;
  const auto* end = v.data() + v.size();
  const auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end || !std::isfinite(out)) throw BadValue("expected a number, got '" + v + "'");
  return out;
}

std::uint64_t to_u64(const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  const auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw BadValue("expected a non-negative integer, got '" + v + "'");
  return out;
}

std::size_t to_size(const std::string& v) { return static_cast<std::size_t>(to_u64(v)); }

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw BadValue("expected true or false, got '" + v + "'");
}

template <class F>
auto to_list(const std::string& v, F&& conv) {
  std::vector<decltype(conv(std::string{}))> out;
  if (v.empty()) return out;
  for (const auto& item : split(v, ',')) out.push_back(conv(item));
  return out;
}

// Returns false for keys that are not training keys.
bool apply_train_key(TrainConfig& t, const std::string& key, const std::string& v) {
  if (key == "learning_rate") t.learning_rate = to_double(v);
  else if (key == "pretrain_learning_rate") t.pretrain_learning_rate = to_double(v);
  else if (key == "pretrain_epochs") t.pretrain_epochs = to_size(v);
  else if (key == "pretrain_batch") t.pretrain_batch = to_size(v);
  else if (key == "cosine_decay") t.cosine_decay = to_bool(v);
  else if (key == "epochs") t.epochs = to_size(v);
  else if (key == "source_batch") t.source_batch = to_size(v);
  else if (key == "contrast_batch") t.contrast_batch = to_size(v);
  else if (key == "memory_batch") t.memory_batch = to_size(v);
  else if (key == "lambda") t.lambda = to_double(v);
  else if (key == "temperature") t.temperature = to_double(v);
  else if (key == "momentum") t.momentum = to_double(v);
  else if (key == "negatives") t.negatives = v == "all" ? std::nullopt : std::optional<std::size_t>(to_size(v));
  else if (key == "memory_capacity") t.memory_capacity = to_size(v);
  else if (key == "selection") {
    if (v == "class-balanced") t.selection = SelectionMode::ClassBalanced;
    else if (v == "global-top") t.selection = SelectionMode::GlobalTop;
    else throw BadValue("selection must be class-balanced or global-top");
  } else if (key == "exact_per_domain") t.exact_per_domain = to_bool(v);
  else if (key == "ridge") t.ridge = to_double(v);
  else if (key == "aug_noise") t.augment.noise_sigma = to_double(v);
  else if (key == "aug_scale_lo") t.augment.scale_lo = to_double(v);
  else if (key == "aug_scale_hi") t.augment.scale_hi = to_double(v);
  else return false;
  return true;
}

std::string cell_dir_name(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

json step_json(const StepTrace& tr) {
  json j;
  j["task"] = tr.task;
  j["step"] = tr.step;
  j["lr"] = tr.lr;
  j["contrast_loss"] = tr.contrast_loss;
  j["source_ce"] = tr.source_ce ? json(*tr.source_ce) : json(nullptr);
  j["memory_ce"] = tr.memory_ce ? json(*tr.memory_ce) : json(nullptr);
  j["constraints"] = tr.constraints;
  j["violated"] = tr.violated;
  j["projected"] = tr.projected;
  j["distortion"] = tr.distortion;
  j["multipliers"] = tr.multipliers;
  j["constraint_dots"] = tr.constraint_dots;
  j["feasibility_tolerance"] = tr.feasibility_tolerance;
  return j;
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << text;
}

}  // namespace

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

ExperimentConfig ExperimentConfig::parse(const std::string& text, const std::string& origin) {
  ExperimentConfig cfg;
  cfg.data = default_benchmark_spec(0);

  std::optional<std::vector<double>> rotations, scales, noise;
  std::optional<std::vector<Vector>> translations;
  std::set<std::string> seen;

  std::istringstream is(text);
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(is, raw)) {
    ++lineno;
    const auto hash = raw.find('#');
    const std::string line = trim(std::string_view(raw).substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(origin, lineno, "expected 'key = value'");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string v = trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) throw ParseError(origin, lineno, "empty key");
    if (!seen.insert(key).second) throw ParseError(origin, lineno, "duplicate key '" + key + "'");

    try {
      if (const auto dot = key.find('.'); dot != std::string::npos) {
        Method m;
        try {
          m = parse_method(key.substr(0, dot));
        } catch (const ConfigError&) {
          throw ParseError(origin, lineno, "unknown key '" + key + "'");
        }
        const std::string sub = key.substr(dot + 1);
        TrainConfig probe;
        if (!apply_train_key(probe, sub, v)) throw ParseError(origin, lineno, "unknown key '" + key + "'");
        cfg.method_overrides[m][sub] = v;
      } else if (apply_train_key(cfg.train, key, v)) {
      } else if (key == "methods") {
        cfg.methods.clear();
        for (const auto& name : split(v, ',')) cfg.methods.push_back(parse_method(name));
      } else if (key == "seeds") {
        cfg.seeds = to_list(v, to_u64);
      } else if (key == "lambda_grid") {
        cfg.lambda_grid = to_list(v, to_double);
      } else if (key == "acc_normalization") {
        if (v == "true-mean") cfg.acc_paper_literal = false;
        else if (v == "paper-literal") cfg.acc_paper_literal = true;
        else throw BadValue("acc_normalization must be true-mean or paper-literal");
      } else if (key == "num_classes") {
        cfg.data.num_classes = cfg.model.num_classes = to_size(v);
      } else if (key == "input_dim") {
        cfg.data.input_dim = cfg.model.input_dim = to_size(v);
      } else if (key == "train_per_domain") {
        cfg.data.train_per_domain = to_size(v);
      } else if (key == "test_per_domain") {
        cfg.data.test_per_domain = to_size(v);
      } else if (key == "class_radius") {
        cfg.data.class_radius = to_double(v);
      } else if (key == "source_noise") {
        cfg.data.source.noise_sigma = to_double(v);
      } else if (key == "target_rotations_deg") {
        rotations = to_list(v, to_double);
      } else if (key == "target_scales") {
        scales = to_list(v, to_double);
      } else if (key == "target_noise") {
        noise = to_list(v, to_double);
      } else if (key == "target_translations") {
        std::vector<Vector> tr;
        for (const auto& item : split(v, ',')) {
          const auto parts = split(item, ':');
          Vector t(static_cast<Eigen::Index>(parts.size()));
          for (std::size_t k = 0; k < parts.size(); ++k) t(static_cast<Eigen::Index>(k)) = to_double(parts[k]);
          tr.push_back(std::move(t));
        }
        translations = std::move(tr);
      } else if (key == "data_seed") {
        cfg.data_seed = to_u64(v);
      } else if (key == "dataset_files") {
        cfg.dataset_files.clear();
        for (const auto& p : split(v, ',')) cfg.dataset_files.emplace_back(p);
      } else if (key == "hidden_dims") {
        cfg.model.hidden_dims = to_list(v, to_size);
      } else if (key == "feature_dim") {
        cfg.model.feature_dim = to_size(v);
      } else if (key == "head_hidden_dim") {
        cfg.model.head_hidden_dim = to_size(v);
      } else if (key == "key_dim") {
        cfg.model.key_dim = to_size(v);
      } else {
        throw ParseError(origin, lineno, "unknown key '" + key + "'");
      }
    } catch (const BadValue& e) {
      throw ParseError(origin, lineno, key + ": " + e.what());
    } catch (const ConfigError& e) {
      throw ParseError(origin, lineno, e.what());
    }
  }

  if (rotations || scales || noise || translations) {
    const std::size_t n = rotations ? rotations->size() : cfg.data.targets.size();
    auto pick = [&](const std::optional<std::vector<double>>& list, const char* name, double fallback, std::size_t k) {
      if (!list) return fallback;
      if (list->size() == 1) return list->front();
      if (list->size() != n) throw ConfigError(std::string(name) + " needs 1 or " + std::to_string(n) + " entries");
      return (*list)[k];
    };
    std::vector<DomainTransform> targets(n);
    for (std::size_t k = 0; k < n; ++k) {
      const auto& base = k < cfg.data.targets.size() ? cfg.data.targets[k] : DomainTransform{};
      targets[k].rotation = rotations ? (*rotations)[k] * std::numbers::pi / 180.0 : base.rotation;
      targets[k].scale = pick(scales, "target_scales", base.scale, k);
      targets[k].noise_sigma = pick(noise, "target_noise", base.noise_sigma, k);
      if (translations) {
        if (translations->size() != n) throw ConfigError("target_translations needs one entry per target");
        targets[k].translation = (*translations)[k];
      }
    }
    cfg.data.targets = std::move(targets);
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str(), path.string());
}

void ExperimentConfig::validate() const {
  model.validate();
  if (dataset_files.empty()) {
    data.validate();
    if (data.num_classes != model.num_classes || data.input_dim != model.input_dim) {
      throw ConfigError("data and model disagree on num_classes or input_dim");
    }
  } else if (dataset_files.size() < 2) {
    throw ConfigError("dataset_files needs the source and at least one target");
  }
  if (methods.empty()) throw ConfigError("no methods selected");
  if (seeds.empty()) throw ConfigError("no seeds selected");
  for (double l : lambda_grid)
    if (!(l >= 0.0)) throw ConfigError("lambda_grid entries must be >= 0");
  for (Method m : methods) train_config(m, 0).validate();
}

TrainConfig ExperimentConfig::train_config(Method method, std::uint64_t seed) const {
  TrainConfig t = train;
  t.method = method;
  t.seed = seed;
  if (const auto it = method_overrides.find(method); it != method_overrides.end()) {
    for (const auto& [k, v] : it->second) apply_train_key(t, k, v);
  }
  // exact_per_domain is a grcl knob; a global setting must not break other methods.
  if (method != Method::Grcl && method != Method::GrclExact) t.exact_per_domain = false;
  return t;
}

std::vector<DomainDataset> ExperimentConfig::datasets(std::uint64_t seed) const {
  if (!dataset_files.empty()) {
    std::vector<DomainDataset> out;
    for (std::size_t k = 0; k < dataset_files.size(); ++k) {
      out.push_back(load_dataset(dataset_files[k], model.num_classes));
      if (out.back().domain_id() != static_cast<int>(k)) {
        throw InvalidInput(dataset_files[k].string() + ": expected domain_id " + std::to_string(k));
      }
      if (static_cast<std::size_t>(out.back().train_inputs().cols()) != model.input_dim) {
        throw InvalidInput(dataset_files[k].string() + ": input dimension does not match the model");
      }
    }
    return out;
  }
  DomainSequenceSpec spec = data;
  spec.seed = data_seed.value_or(seed);
  return generate_sequence(spec);
}

std::vector<fs::path> cmd_gen_data(const ExperimentConfig& cfg, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const auto datasets = cfg.datasets(cfg.seeds.front());
  std::vector<fs::path> paths;
  for (const auto& ds : datasets) {
    paths.push_back(out_dir / ("domain_" + std::to_string(ds.domain_id()) + ".csv"));
    save_dataset(ds, paths.back());
  }
  return paths;
}

namespace {

CellResult run_cell(const ExperimentConfig& cfg, Method method, std::uint64_t seed, const fs::path& dir,
                    bool trace) {
  CellResult cell;
  cell.method = method;
  cell.seed = seed;
  try {
    fs::create_directories(dir);
    const auto datasets = cfg.datasets(seed);
    TrainConfig tc = cfg.train_config(method, seed);
    std::optional<double> chosen_lambda;
    if (method == Method::MultiTask && !cfg.lambda_grid.empty()) {
      tc.lambda = select_multitask_lambda(cfg.model, datasets, tc, cfg.lambda_grid);
      chosen_lambda = tc.lambda;
    }

    std::ofstream trace_os;
    TrainHooks hooks;
    if (trace) {
      trace_os.open(dir / "trace.jsonl");
      hooks.on_step = [&](const StepTrace& tr) { trace_os << step_json(tr).dump() << '\n'; };
    }
    const auto res = run_sequence(cfg.model, datasets, tc, hooks);
    const auto& r = res.accuracy;
    r.save_csv(dir / "accuracy_matrix.csv");

    const std::size_t n = r.num_targets();
    json m;
    m["seed"] = seed;
    m["acc"] = compute_acc(r, cfg.acc_paper_literal ? AccNormalization::PaperLiteral : AccNormalization::TrueMean);
    m["acc_true_mean"] = compute_acc(r, AccNormalization::TrueMean);
    m["acc_paper_literal"] = n >= 1 ? json(compute_acc(r, AccNormalization::PaperLiteral)) : json(nullptr);
    m["bwt"] = n >= 2 ? json(compute_bwt(r)) : json(nullptr);
    m["mean_target_acc"] = n >= 1 ? json(mean_target_accuracy(r)) : json(nullptr);
    m["source_acc"] = r.at(n, 0);
    json rows = json::array();
    for (std::size_t i = 0; i <= n; ++i) rows.push_back(r.row(i));
    m["rows"] = rows;
    if (chosen_lambda) m["lambda"] = *chosen_lambda;
    json tasks = json::array();
    for (const auto& t : res.tasks) {
      tasks.push_back({{"task", t.task},
                       {"steps", t.steps},
                       {"violated_steps", t.violated_steps},
                       {"projections", t.projections},
                       {"max_distortion", t.max_distortion},
                       {"degenerate_keys", t.degenerate_keys}});
    }
    m["tasks"] = tasks;
    json top;
    top[std::string(to_string(method))] = m;
    write_text(dir / "metrics.json", top.dump(2) + "\n");
    cell.accuracy = r;
    cell.ok = true;
  } catch (const std::exception& e) {
    cell.error = e.what();
    spdlog::error("{} seed {} failed: {}", to_string(method), seed, e.what());
    try {
      write_text(dir / "error.txt", cell.error + "\n");
    } catch (const std::exception&) {
    }
  }
  return cell;
}

}  // namespace

std::vector<CellResult> cmd_run(const ExperimentConfig& cfg, const fs::path& out_dir, const RunOptions& opts) {
  cfg.validate();
  fs::create_directories(out_dir);
  struct Job {
    Method method;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (Method m : cfg.methods)
    for (auto s : cfg.seeds) jobs.push_back({m, s});

  std::vector<CellResult> results(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      const auto& j = jobs[i];
      spdlog::info("running {} seed {}", to_string(j.method), j.seed);
      results[i] = run_cell(cfg, j.method, j.seed, out_dir / std::string(to_string(j.method)) / cell_dir_name(j.seed),
                            opts.trace);
    }
  };
  const unsigned k = std::max(1u, std::min<unsigned>(opts.jobs, static_cast<unsigned>(jobs.size())));
  if (k == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < k; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::ostringstream sum;
  sum << "method,seeds,failed,acc_mean,acc_std,bwt_mean,bwt_std,target_mean,target_std,source_mean,source_std\n";
  for (Method m : cfg.methods) {
    std::vector<double> acc, bwt, tgt, src;
    std::size_t failed = 0;
    for (const auto& c : results) {
      if (c.method != m) continue;
      if (!c.ok) {
        ++failed;
        continue;
      }
      const auto& r = *c.accuracy;
      const std::size_t n = r.num_targets();
      acc.push_back(compute_acc(r, cfg.acc_paper_literal ? AccNormalization::PaperLiteral : AccNormalization::TrueMean));
      if (n >= 2) bwt.push_back(compute_bwt(r));
      if (n >= 1) tgt.push_back(mean_target_accuracy(r));
      src.push_back(r.at(n, 0));
    }
    auto cell = [](const std::vector<double>& v, bool std_dev) {
      if (v.empty()) return std::string();
      return format_double(std_dev ? sample_std(v) : mean_of(v));
    };
    sum << to_string(m) << ',' << acc.size() << ',' << failed << ',' << cell(acc, false) << ',' << cell(acc, true)
        << ',' << cell(bwt, false) << ',' << cell(bwt, true) << ',' << cell(tgt, false) << ',' << cell(tgt, true)
        << ',' << cell(src, false) << ',' << cell(src, true) << '\n';
  }
  write_text(out_dir / "summary.csv", sum.str());
  return results;
}

int cmd_report(const fs::path& results_dir, std::ostream& out, std::ostream& err) {
  struct MethodRows {
    std::string method;
    std::vector<double> acc, bwt, source, target;
    std::vector<std::vector<std::vector<double>>> rows;  // per seed
  };
  std::vector<MethodRows> table;
  try {
    if (!fs::is_directory(results_dir)) {
      err << "error: " << results_dir.string() << " is not a directory\n";
      return 3;
    }
    std::vector<fs::path> method_dirs;
    for (const auto& e : fs::directory_iterator(results_dir))
      if (e.is_directory()) method_dirs.push_back(e.path());
    std::sort(method_dirs.begin(), method_dirs.end());
    for (const auto& md : method_dirs) {
      std::vector<fs::path> seeds;
      for (const auto& e : fs::directory_iterator(md))
        if (e.is_directory() && fs::exists(e.path() / "metrics.json")) seeds.push_back(e.path());
      if (seeds.empty()) continue;
      std::sort(seeds.begin(), seeds.end());
      MethodRows mr;
      mr.method = md.filename().string();
      for (const auto& sd : seeds) {
        std::ifstream is(sd / "metrics.json");
        json j;
        try {
          j = json::parse(is);
        } catch (const json::exception& e) {
          throw std::runtime_error((sd / "metrics.json").string() + ": " + e.what());
        }
        if (!j.contains(mr.method)) throw std::runtime_error((sd / "metrics.json").string() + ": missing key " + mr.method);
        const auto& m = j.at(mr.method);
        if (!m.contains("acc") || !m.contains("bwt") || !m.contains("rows") || !m.contains("source_acc") ||
            !m.contains("mean_target_acc")) {
          throw std::runtime_error((sd / "metrics.json").string() + ": missing metric fields");
        }
        mr.acc.push_back(m.at("acc").get<double>());
        if (!m.at("bwt").is_null()) mr.bwt.push_back(m.at("bwt").get<double>());
        mr.source.push_back(m.at("source_acc").get<double>());
        if (!m.at("mean_target_acc").is_null()) mr.target.push_back(m.at("mean_target_acc").get<double>());
        mr.rows.push_back(m.at("rows").get<std::vector<std::vector<double>>>());
      }
      table.push_back(std::move(mr));
    }
    if (table.empty()) {
      err << "error: no metrics.json found under " << results_dir.string() << "\n";
      return 3;
    }

    out << std::left << std::setw(16) << "method" << std::setw(7) << "seeds" << std::setw(22) << "ACC"
        << "BWT\n";
    out << std::fixed << std::setprecision(6);
    for (const auto& mr : table) {
      std::ostringstream acc, bwt;
      acc << std::fixed << std::setprecision(6) << mean_of(mr.acc) << " +- " << sample_std(mr.acc);
      if (mr.bwt.empty()) bwt << "n/a";
      else bwt << std::fixed << std::setprecision(6) << mean_of(mr.bwt) << " +- " << sample_std(mr.bwt);
      out << std::left << std::setw(16) << mr.method << std::setw(7) << mr.acc.size() << std::setw(22) << acc.str()
          << bwt.str() << '\n';
    }
    out.unsetf(std::ios::floatfield);

    const std::size_t n = table.front().rows.front().size() - 1;
    std::ostringstream evo;
    evo << "task";
    for (const auto& mr : table) evo << ',' << mr.method;
    evo << '\n';
    for (std::size_t t = 1; t <= n; ++t) {
      evo << t;
      for (const auto& mr : table) {
        std::vector<double> v;
        for (const auto& rows : mr.rows)
          if (rows.size() == n + 1 && rows[t].size() > 1) v.push_back(rows[t][1]);
        evo << ',' << (v.empty() ? std::string() : format_double(mean_of(v)));
      }
      evo << '\n';
    }
    write_text(results_dir / "evolution_domain1.csv", evo.str());

    std::ostringstream st;
    st << "method,source_acc,target_acc\n";
    for (const auto& mr : table) {
      st << mr.method << ',' << format_double(mean_of(mr.source)) << ','
         << (mr.target.empty() ? std::string() : format_double(mean_of(mr.target))) << '\n';
    }
    write_text(results_dir / "source_target.csv", st.str());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}

namespace {
struct StopTraining {};
}  // namespace

void cmd_debug_qp(const ExperimentConfig& cfg, Method method, std::uint64_t seed, std::size_t max_steps,
                  const fs::path& out_file) {
  if (method == Method::SourceOnly || method == Method::SeqFinetune || method == Method::MultiTask) {
    throw ConfigError("debug-qp needs a projected method (grcl, grcl-noforget or grcl-exact)");
  }
  const auto datasets = cfg.datasets(seed);
  if (datasets.size() < 2) throw InvalidInput("debug-qp needs at least one target domain");
  const TrainConfig tc = cfg.train_config(method, seed);
  std::ofstream os(out_file);
  if (!os) throw std::runtime_error("cannot open " + out_file.string() + " for writing");
  os << "step,quantity,values\n";
  auto emit = [&](std::size_t step, const std::string& name, const Vector& v) {
    os << step << ',' << name;
    for (Eigen::Index i = 0; i < v.size(); ++i) os << ',' << format_double(v(i));
    os << '\n';
  };

  const Batch& source = datasets.front().labeled_train();
  AdaptationState state(train_source(cfg.model, source, tc));
  std::size_t dumped = 0;
  TrainHooks hooks;
  hooks.on_projection = [&](std::size_t, std::size_t step, const ConstraintSet& cs, const ProjectionResult& pr) {
    emit(step, "g_t", cs.proposed);
    for (std::size_t k = 0; k < cs.size(); ++k) emit(step, "G[" + to_string(cs.tags[k]) + "]", cs.rows[k]);
    emit(step, "u", pr.multipliers);
    emit(step, "g_hat", pr.projected);
    os << step << ",distortion," << format_double(pr.distortion) << '\n';
    if (++dumped >= max_steps) throw StopTraining{};
  };
  // Later tasks carry memory constraints; walk forward until enough steps are dumped.
  try {
    for (std::size_t t = 1; t < datasets.size(); ++t) {
      state = adapt_domain(std::move(state), source, datasets[t].unlabeled_train(), tc, hooks);
    }
  } catch (const StopTraining&) {
  }
}

}  // namespace grcl
