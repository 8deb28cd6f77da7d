#pragma once

// Experiment orchestration: the versioned JSON config, the on-disk
// workspace written by `generate`, and the run / sweep pipelines.

#include "lamedit/container.hpp"
#include "lamedit/merging.hpp"
#include "lamedit/metrics.hpp"
#include "lamedit/parallel.hpp"
#include "lamedit/random.hpp"
#include "lamedit/solvers.hpp"
#include "lamedit/synthdata.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace lamedit {

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr const char* kLamEditVersion = "0.1.0";

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  std::uint64_t seed = 20240601;
  std::string output_dir = "out";
  GenConfig dataset;  // dataset.seed mirrors seed
  SolverSettings solver = SolverSettings::defaults_for(SolverMethod::kMemit);
  std::vector<MergeConfig> merges;
  bool mono = true;
  std::vector<double> alpha_grid{0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0};
  std::vector<double> rank_grid{0.0625, 0.125, 0.1875, 0.25, 0.375, 0.5, 0.75, 1.0};

  void validate() const {
    dataset.validate();
    if (dataset.seed != seed) throw ConfigError("dataset seed must equal the experiment seed");
    if (!(solver.lambda > 0.0) || !std::isfinite(solver.lambda)) throw ConfigError("solver lambda must be positive");
    if (!(solver.rel_tol > 0.0 && solver.rel_tol < 1.0)) throw ConfigError("solver rel_tol must lie in (0, 1)");
    if (merges.empty()) throw ConfigError("merges must list at least one merge method");
    for (const auto& m : merges) m.validate();
    if (output_dir.empty()) throw ConfigError("output_dir must be nonempty");
    check_grid(alpha_grid, "alpha_grid");
    check_grid(rank_grid, "rank_grid");
    if (std::find(alpha_grid.begin(), alpha_grid.end(), 1.0) == alpha_grid.end())
      throw ConfigError("alpha_grid must contain 1.0");
    if (!(alpha_grid.front() > 0.0)) throw ConfigError("alpha_grid values must be positive");
    if (!(rank_grid.front() > 0.0 && rank_grid.back() <= 1.0)) throw ConfigError("rank_grid values must lie in (0, 1]");
  }

 private:
  static void check_grid(const std::vector<double>& g, const char* name) {
    if (g.empty()) throw ConfigError(std::string(name) + " must be nonempty");
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i])) throw ConfigError(std::string(name) + " values must be finite");
      if (i > 0 && !(g[i] > g[i - 1])) throw ConfigError(std::string(name) + " must be strictly increasing");
    }
  }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : j.items())
    if (std::none_of(known.begin(), known.end(), [&](const char* n) { return k == n; }))
      throw ConfigError("unknown field '" + k + "' in " + where);
}

inline const nlohmann::json& require(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw ConfigError("missing field '" + std::string(key) + "' in " + where);
  return j.at(key);
}

template <typename T>
T get_as(const nlohmann::json& v, const std::string& what) {
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("field " + what + " has the wrong type");
  }
}

}  // namespace detail

// Fields the dataset section must spell out; the remaining GenConfig knobs
// shape the synthetic world and fall back to their defaults.
inline constexpr const char* kRequiredDatasetFields[] = {"n_facts",     "m_languages", "model_dim",      "ffn_dim",
                                                         "num_layers",  "edit_layers", "overlap",        "rephrase_noise",
                                                         "n_preserved", "vocab_size"};

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  using detail::get_as;
  using detail::require;
  detail::reject_unknown(j, {"$schema", "schema_version", "seed", "output_dir", "dataset", "solver", "merges", "mono", "sweep"},
                         "config");
  const int version = get_as<int>(require(j, "schema_version", "config"), "schema_version");
  if (version != kConfigSchemaVersion)
    throw ConfigError("unsupported config schema_version " + std::to_string(version) + " (expected " +
                      std::to_string(kConfigSchemaVersion) + ")");
  ExperimentConfig c;
  c.seed = get_as<std::uint64_t>(require(j, "seed", "config"), "seed");
  c.output_dir = get_as<std::string>(require(j, "output_dir", "config"), "output_dir");

  const auto& ds = require(j, "dataset", "config");
  if (!ds.is_object()) throw ConfigError("dataset must be an object");
  for (const char* f : kRequiredDatasetFields) require(ds, f, "dataset");
  if (ds.contains("seed")) throw ConfigError("dataset.seed is not allowed; the seed lives at the top level");
  try {
    c.dataset = ds.get<GenConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("dataset: ") + e.what());
  }
  c.dataset.seed = c.seed;

  const auto& sv = require(j, "solver", "config");
  detail::reject_unknown(sv, {"method", "lambda", "rel_tol"}, "solver");
  c.solver = SolverSettings::defaults_for(parse_solver_method(get_as<std::string>(require(sv, "method", "solver"), "solver.method")));
  if (sv.contains("lambda")) c.solver.lambda = get_as<double>(sv.at("lambda"), "solver.lambda");
  if (sv.contains("rel_tol")) c.solver.rel_tol = get_as<double>(sv.at("rel_tol"), "solver.rel_tol");

  const auto& ms = require(j, "merges", "config");
  if (!ms.is_array()) throw ConfigError("merges must be an array");
  for (const auto& m : ms) {
    detail::reject_unknown(m, {"method", "alpha", "rank_ratio"}, "merge entry");
    MergeConfig mc;
    mc.method = parse_merge_method(get_as<std::string>(require(m, "method", "merge entry"), "merges[].method"));
    if (m.contains("alpha")) mc.alpha = get_as<double>(m.at("alpha"), "merges[].alpha");
    if (m.contains("rank_ratio")) mc.rank_ratio = get_as<double>(m.at("rank_ratio"), "merges[].rank_ratio");
    c.merges.push_back(mc);
  }
  if (j.contains("mono")) c.mono = get_as<bool>(j.at("mono"), "mono");
  if (j.contains("sweep")) {
    const auto& sw = j.at("sweep");
    detail::reject_unknown(sw, {"alpha_grid", "rank_grid"}, "sweep");
    if (sw.contains("alpha_grid")) c.alpha_grid = get_as<std::vector<double>>(sw.at("alpha_grid"), "sweep.alpha_grid");
    if (sw.contains("rank_grid")) c.rank_grid = get_as<std::vector<double>>(sw.at("rank_grid"), "sweep.rank_grid");
  }
  c.validate();
  return c;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json ds = c.dataset;
  ds.erase("seed");
  nlohmann::json merges = nlohmann::json::array();
  for (const auto& m : c.merges)
    merges.push_back({{"method", to_string(m.method)}, {"alpha", m.alpha}, {"rank_ratio", m.rank_ratio}});
  return {{"schema_version", kConfigSchemaVersion},
          {"seed", c.seed},
          {"output_dir", c.output_dir},
          {"dataset", ds},
          {"solver", {{"method", to_string(c.solver.method)}, {"lambda", c.solver.lambda}, {"rel_tol", c.solver.rel_tol}}},
          {"merges", merges},
          {"mono", c.mono},
          {"sweep", {{"alpha_grid", c.alpha_grid}, {"rank_grid", c.rank_grid}}}};
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read " + path.string());
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("cannot write " + path.string());
  f << text;
  if (!f) throw ConfigError("write failed for " + path.string());
}

inline nlohmann::json parse_json_file(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  return experiment_config_from_json(parse_json_file(path));
}

// ---------------------------------------------------------------------------
// workspace: dataset, fitted model and their manifest
// ---------------------------------------------------------------------------

struct Workspace {
  MultilingualDataset dataset;
  ToyModel model;
  FitReport fit;
};

struct WorkspacePaths {
  std::filesystem::path dir;

  std::filesystem::path manifest() const { return dir / "manifest.json"; }
  std::filesystem::path dataset() const { return dir / "dataset.lamc"; }
  std::filesystem::path model() const { return dir / "model.lamc"; }
  std::filesystem::path cache() const { return dir / "cache"; }
};

inline Workspace build_workspace(const ExperimentConfig& cfg) {
  Workspace ws;
  ws.dataset = generate_dataset(cfg.dataset);
  ws.model = fit_initial_model(cfg.dataset, ws.dataset, &ws.fit);
  return ws;
}

inline nlohmann::json workspace_manifest(const Workspace& ws) {
  return {{"schema_version", kDatasetSchemaVersion},
          {"dataset", ws.dataset.manifest()},
          {"fit",
           {{"old_token_recall", ws.fit.old_token_recall},
            {"preserved_recall", ws.fit.preserved_recall},
            {"per_language", ws.fit.per_language}}},
          {"files", {{"dataset", "dataset.lamc"}, {"model", "model.lamc"}}}};
}

inline void write_workspace(const Workspace& ws, const WorkspacePaths& paths, bool force) {
  if (!force) {
    for (const auto& p : {paths.manifest(), paths.dataset(), paths.model()})
      if (std::filesystem::exists(p)) throw ConfigError(p.string() + " already exists; pass --force to overwrite");
  }
  std::filesystem::create_directories(paths.dir);
  ws.dataset.to_container().save(paths.dataset());
  ws.model.to_container().save(paths.model());
  write_text_file(paths.manifest(), workspace_manifest(ws).dump(2) + "\n");
  // stale editing matrices belong to the old dataset
  std::filesystem::remove_all(paths.cache());
}

inline Workspace load_workspace(const ExperimentConfig& cfg, const WorkspacePaths& paths) {
  if (!std::filesystem::exists(paths.manifest()))
    throw ConfigError("no dataset in " + paths.dir.string() + "; run `lamedit generate` first");
  const auto manifest = parse_json_file(paths.manifest());
  if (manifest.value("schema_version", -1) != kDatasetSchemaVersion)
    throw ConfigError(paths.manifest().string() + " has an unsupported schema version");
  Workspace ws;
  try {
    ws.dataset = MultilingualDataset::from_files(manifest.at("dataset"), MatrixContainer::load(paths.dataset()));
    ws.model = ToyModel::from_container(MatrixContainer::load(paths.model()));
    const auto& fit = manifest.at("fit");
    ws.fit.old_token_recall = fit.at("old_token_recall").get<double>();
    ws.fit.preserved_recall = fit.at("preserved_recall").get<double>();
    ws.fit.per_language = fit.at("per_language").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(paths.manifest().string() + ": " + e.what());
  }
  if (nlohmann::json(ws.dataset.config) != nlohmann::json(cfg.dataset))
    throw ConfigError("dataset in " + paths.dir.string() +
                      " was generated from a different config; rerun `lamedit generate --force`");
  return ws;
}

// ---------------------------------------------------------------------------
// experiment pipeline
// ---------------------------------------------------------------------------

struct SweepResult {
  std::string axis;  // "alpha" or "rank_ratio"
  std::string method;
  std::vector<double> grid;
  std::vector<double> values;  // cross-language averaged accuracy per grid point
  std::size_t argmax = 0;      // ties go to the smallest grid point

  double best_point() const { return grid.at(argmax); }
  double best_value() const { return values.at(argmax); }
};

inline std::size_t argmax_first(const std::vector<double>& v) {
  if (v.empty()) throw ConfigError("argmax of an empty sweep");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

struct SweepOutput {
  std::vector<SweepResult> results;
  std::vector<MetricsReport> reports;  // every (method, grid point), method-major
};

inline std::string merge_label(MergeMethod m) { return std::string(to_string(m)); }

class Experiment {
 public:
  // languages = 0 uses every language of the dataset; otherwise the first
  // `languages` of them.
  Experiment(ExperimentConfig cfg, Workspace ws, std::size_t workers = 1, std::size_t languages = 0)
      : cfg_(std::move(cfg)), ws_(std::move(ws)), workers_(std::max<std::size_t>(workers, 1)) {
    const std::size_t m = ws_.dataset.num_languages();
    languages_ = languages == 0 ? m : languages;
    if (languages_ > m)
      throw ConfigError("--languages " + std::to_string(languages_) + " exceeds the dataset's " + std::to_string(m));
    preserved_ = PreservedStats::compute(ws_.model, ws_.dataset.preserved_all(), ws_.dataset.request_fact_ids());
  }

  const ExperimentConfig& config() const { return cfg_; }
  const Workspace& workspace() const { return ws_; }
  std::size_t languages() const { return languages_; }

  // Editing matrices are cached on disk under this directory; a mismatching
  // cache is recomputed after a warning on `log`.
  void enable_cache(std::filesystem::path dir, std::ostream* log) {
    cache_dir_ = std::move(dir);
    log_ = log;
  }

  const DeltaSet& deltas(CovMode mode) {
    auto& slot = mode == CovMode::kShared ? shared_ : per_language_;
    if (!slot) slot = load_or_compute(mode);
    return *slot;
  }

  MetricsReport run_merge(const MergeConfig& mc) {
    mc.validate();
    const auto merged = merge(mc, deltas(required_cov_mode(mc.method)));
    return evaluate_report(merge_label(mc.method), required_cov_mode(mc.method), mc.alpha, mc.rank_ratio,
                           apply_update(ws_.model, merged, mc.alpha), true);
  }

  // Each language edited alone. With per-language covariance the language's
  // slice of the multilingual DeltaSet is exactly its own edit.
  MetricsReport run_mono(double alpha) {
    const auto& ds = deltas(CovMode::kPerLanguage);
    MetricsReport r = blank_report("Mono", CovMode::kPerLanguage, alpha, 1.0);
    r.rows.resize(languages_);
    parallel_for(languages_, workers_, [&](std::size_t i) {
      std::vector<MergedDelta> own;
      for (std::size_t l = 0; l < ds.layers().size(); ++l)
        own.push_back({ds.layers()[l], ds.at(l, i).d, MergeMethod::kSum, 1.0, {ds.languages()[i]}});
      r.rows[i] = evaluate(apply_update(ws_.model, own, alpha), ws_.dataset, ds.languages()[i]);
    });
    return r;
  }

  // Configured merges (and Mono when enabled), sorted by method label.
  std::vector<MetricsReport> run(const std::vector<MergeConfig>& merges, bool mono, double mono_alpha = 1.0) {
    std::vector<MetricsReport> out;
    if (mono) out.push_back(run_mono(mono_alpha));
    for (const auto& mc : merges) out.push_back(run_merge(mc));
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.method < b.method; });
    return out;
  }

  // alpha sweep: one merge per method, rescaled per grid point.
  SweepOutput sweep_alpha(const std::vector<MergeConfig>& merges, const std::vector<double>& grid) {
    std::vector<std::vector<MergedDelta>> merged;
    for (const auto& mc : merges) {
      mc.validate();
      merged.push_back(merge(mc, deltas(required_cov_mode(mc.method))));
    }
    return run_grid("alpha", merges, grid, [&](std::size_t mi, double a) {
      const auto& mc = merges[mi];
      return evaluate_report(merge_label(mc.method), required_cov_mode(mc.method), a, mc.rank_ratio,
                             apply_update(ws_.model, merged[mi], a));
    });
  }

  // rank sweep: the merge is recomputed per grid point from cached deltas.
  SweepOutput sweep_rank(const std::vector<MergeConfig>& merges, const std::vector<double>& grid) {
    for (const auto& mc : merges) {
      if (!is_tsvm(mc.method))
        throw ConfigError("rank sweeps apply to TSVM merges only, got " + std::string(to_string(mc.method)));
      deltas(required_cov_mode(mc.method));
    }
    return run_grid("rank_ratio", merges, grid, [&](std::size_t mi, double r) {
      MergeConfig mc = merges[mi];
      mc.rank_ratio = r;
      const auto merged = merge(mc, deltas(required_cov_mode(mc.method)));
      return evaluate_report(merge_label(mc.method), required_cov_mode(mc.method), mc.alpha, r,
                             apply_update(ws_.model, merged, mc.alpha));
    });
  }

  // Digest of the dataset and model bytes; keys the on-disk delta cache.
  std::string workspace_digest() const {
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << fnv1a(ws_.dataset.to_container().serialize()) << "-"
      << std::setw(16) << fnv1a(ws_.model.to_container().serialize());
    return s.str();
  }

 private:
  MetricsReport blank_report(std::string method, CovMode mode, double alpha, double r) const {
    MetricsReport rep;
    rep.method = std::move(method);
    rep.solver = cfg_.solver.method;
    rep.cov_mode = mode;
    rep.alpha = alpha;
    rep.rank_ratio = r;
    rep.seed = cfg_.seed;
    return rep;
  }

  // Rows are serial here: grid-level callers already run in parallel.
  MetricsReport evaluate_report(std::string method, CovMode mode, double alpha, double r, const ToyModel& edited,
                                bool parallel = false) const {
    MetricsReport rep = blank_report(std::move(method), mode, alpha, r);
    rep.rows.resize(languages_);
    parallel_for(languages_, parallel ? workers_ : 1, [&](std::size_t i) {
      rep.rows[i] = evaluate(edited, ws_.dataset, LanguageId{static_cast<std::uint32_t>(i)});
    });
    return rep;
  }

  template <typename PointFn>
  SweepOutput run_grid(const std::string& axis, const std::vector<MergeConfig>& merges, const std::vector<double>& grid,
                       PointFn&& point) {
    if (grid.empty()) throw ConfigError(axis + " grid must be nonempty");
    SweepOutput out;
    out.reports.resize(merges.size() * grid.size());
    parallel_for(out.reports.size(), workers_, [&](std::size_t t) {
      out.reports[t] = point(t / grid.size(), grid[t % grid.size()]);
    });
    for (std::size_t mi = 0; mi < merges.size(); ++mi) {
      SweepResult res;
      res.axis = axis;
      res.method = merge_label(merges[mi].method);
      res.grid = grid;
      for (std::size_t g = 0; g < grid.size(); ++g) res.values.push_back(out.reports[mi * grid.size() + g].mean().averaged);
      res.argmax = argmax_first(res.values);
      out.results.push_back(std::move(res));
    }
    return out;
  }

  std::vector<LanguageId> language_ids() const {
    std::vector<LanguageId> ids;
    for (std::size_t i = 0; i < languages_; ++i) ids.push_back(LanguageId{static_cast<std::uint32_t>(i)});
    return ids;
  }

  DeltaSet compute(CovMode mode) const {
    const std::span<const std::vector<EditRequest>> reqs(ws_.dataset.requests.data(), languages_);
    return edit_model(ws_.model, reqs, cfg_.solver, mode, preserved_, workers_);
  }

  nlohmann::json cache_key(CovMode mode) const {
    return {{"solver", to_string(cfg_.solver.method)},
            {"lambda", cfg_.solver.lambda},
            {"rel_tol", cfg_.solver.rel_tol},
            {"cov_mode", to_string(mode)},
            {"languages", languages_},
            {"workspace", workspace_digest()}};
  }

  DeltaSet load_or_compute(CovMode mode) {
    if (cache_dir_.empty()) return compute(mode);
    const auto stem = cache_dir_ / ("deltas-" + lower(to_string(cfg_.solver.method)) + "-" + std::string(to_string(mode)) + "-m" +
                                    std::to_string(languages_));
    const auto key_path = std::filesystem::path(stem.string() + ".json");
    const auto data_path = std::filesystem::path(stem.string() + ".lamc");
    const auto key = cache_key(mode);
    if (std::filesystem::exists(key_path) || std::filesystem::exists(data_path)) {
      try {
        if (parse_json_file(key_path) != key) throw ConfigError("cache key mismatch");
        return DeltaSet::read_from(MatrixContainer::load(data_path), cfg_.solver.method, mode, ws_.model.edit_layers(),
                                   language_ids());
      } catch (const std::exception& e) {
        if (log_) *log_ << "warning: delta cache " << data_path.string() << " is inconsistent (" << e.what()
                        << "); recomputing\n";
      }
    }
    DeltaSet ds = compute(mode);
    MatrixContainer c;
    ds.append_to(c);
    std::filesystem::create_directories(cache_dir_);
    c.save(data_path);
    write_text_file(key_path, key.dump(2) + "\n");
    return ds;
  }

  ExperimentConfig cfg_;
  Workspace ws_;
  std::size_t workers_ = 1;
  std::size_t languages_ = 0;
  PreservedStats preserved_;
  std::optional<DeltaSet> per_language_;
  std::optional<DeltaSet> shared_;
  std::filesystem::path cache_dir_;
  std::ostream* log_ = nullptr;
};

// ---------------------------------------------------------------------------
// run / sweep files
// ---------------------------------------------------------------------------

inline constexpr int kRunSchemaVersion = 1;

inline nlohmann::json run_json(const ExperimentConfig& cfg, std::span<const MetricsReport> reports) {
  nlohmann::json rs = nlohmann::json::array();
  for (const auto& r : reports) rs.push_back(metrics_json(r));
  return {{"schema_version", kRunSchemaVersion},
          {"kind", "run"},
          {"seed", cfg.seed},
          {"config", to_json(cfg)},
          {"reports", rs}};
}

inline std::vector<MetricsReport> reports_from_run_json(const nlohmann::json& j) {
  if (j.value("kind", std::string()) != "run") throw ConfigError("not a run file");
  if (j.value("schema_version", -1) != kRunSchemaVersion) throw ConfigError("unsupported run file schema version");
  std::vector<MetricsReport> out;
  for (const auto& r : j.at("reports")) out.push_back(metrics_from_json(r));
  return out;
}

inline nlohmann::json sweep_json(const ExperimentConfig& cfg, const SweepOutput& so) {
  nlohmann::json results = nlohmann::json::array();
  for (const auto& r : so.results)
    results.push_back({{"axis", r.axis},
                       {"method", r.method},
                       {"grid", r.grid},
                       {"values", r.values},
                       {"argmax", r.best_point()},
                       {"best", r.best_value()}});
  nlohmann::json reports = nlohmann::json::array();
  for (const auto& r : so.reports) reports.push_back(metrics_json(r));
  return {{"schema_version", kRunSchemaVersion},
          {"kind", "sweep"},
          {"seed", cfg.seed},
          {"config", to_json(cfg)},
          {"results", results},
          {"reports", reports}};
}

}  // namespace lamedit
