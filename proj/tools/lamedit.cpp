// lamedit: generate a synthetic multilingual editing benchmark, edit, merge,
// sweep and report.
//
// Exit codes: 0 success, 2 config error, 3 numerical failure.

#include "lamedit/harness.hpp"
#include "lamedit/report.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace lamedit;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct Common {
  std::string config;
  std::string out;

  ExperimentConfig load() const {
    auto cfg = load_experiment_config(config);
    if (!out.empty()) cfg.output_dir = out;
    return cfg;
  }
};

void print_summary(const std::vector<MetricsReport>& reports) {
  std::cout << "method        eff     gen     spe     por     avg\n";
  for (const auto& r : reports) {
    const auto m = r.mean();
    std::string name = r.method;
    name.resize(std::max<std::size_t>(name.size(), 12), ' ');
    std::cout << name << "  " << fixed4(m.efficacy) << "  " << fixed4(m.generalization) << "  " << fixed4(m.specificity)
              << "  " << fixed4(m.portability) << "  " << fixed4(m.averaged) << "\n";
  }
}

int cmd_generate(const Common& c, bool force) {
  const auto cfg = c.load();
  const WorkspacePaths paths{cfg.output_dir};
  if (!force) {
    for (const auto& p : {paths.manifest(), paths.dataset(), paths.model()})
      if (fs::exists(p)) throw ConfigError(p.string() + " already exists; pass --force to overwrite");
  }
  const auto ws = build_workspace(cfg);
  write_workspace(ws, paths, force);
  const auto& d = cfg.dataset;
  std::cout << "dataset: " << d.m_languages << " languages x " << d.n_facts << " edits, " << d.n_preserved
            << " preserved facts per language, d=" << d.model_dim << " h=" << d.ffn_dim << " L=" << d.num_layers
            << " |V|=" << d.vocab_size << " overlap=" << format_number(d.overlap) << " seed=" << cfg.seed << "\n";
  std::cout << "fit: old-token recall " << fixed4(ws.fit.old_token_recall) << ", preserved recall "
            << fixed4(ws.fit.preserved_recall) << "\n";
  std::cout << "wrote " << paths.manifest().string() << ", " << paths.dataset().string() << ", "
            << paths.model().string() << "\n";
  return 0;
}

struct RunFlags {
  std::optional<std::string> method;
  std::vector<std::string> merges;
  std::optional<double> alpha;
  std::optional<double> rank_ratio;
  std::optional<double> lambda;
  std::size_t languages = 0;
  bool mono = false;
  std::string name;
};

// Solver overrides: switching the method resets lambda to that method's
// default unless --lambda is given.
void apply_solver_flags(ExperimentConfig& cfg, const RunFlags& f) {
  if (f.method) {
    const auto m = parse_solver_method(*f.method);
    if (m != cfg.solver.method) cfg.solver = SolverSettings::defaults_for(m);
  }
  if (f.lambda) cfg.solver.lambda = *f.lambda;
  if (!(cfg.solver.lambda > 0.0)) throw ConfigError("--lambda must be positive");
}

// Merge list from --merge (names, "all", "mono") or the config.
std::vector<MergeConfig> selected_merges(const ExperimentConfig& cfg, const RunFlags& f, bool& mono) {
  std::vector<MergeConfig> out;
  mono = f.mono;
  if (f.merges.empty()) {
    out = cfg.merges;
    mono = mono || cfg.mono;
  } else {
    auto defaults_for = [&](MergeMethod m) {
      for (const auto& mc : cfg.merges)
        if (mc.method == m) return mc;
      return MergeConfig{m, 1.0, 1.0};
    };
    for (const auto& name : f.merges) {
      if (lower(name) == "mono") {
        mono = true;
      } else if (lower(name) == "all") {
        for (auto m : {MergeMethod::kSum, MergeMethod::kMean, MergeMethod::kTsvm, MergeMethod::kSumCov,
                       MergeMethod::kMeanCov, MergeMethod::kTsvmCov})
          out.push_back(defaults_for(m));
      } else {
        out.push_back(defaults_for(parse_merge_method(name)));
      }
    }
  }
  for (auto& mc : out) {
    if (f.alpha) mc.alpha = *f.alpha;
    if (f.rank_ratio) mc.rank_ratio = *f.rank_ratio;
    mc.validate();
  }
  return out;
}

Experiment open_experiment(const ExperimentConfig& cfg, std::size_t languages) {
  const WorkspacePaths paths{cfg.output_dir};
  Experiment ex(cfg, load_workspace(cfg, paths), workers_from_env(), languages);
  ex.enable_cache(paths.cache(), &std::cerr);
  return ex;
}

int cmd_run(const Common& c, const RunFlags& f) {
  auto cfg = c.load();
  apply_solver_flags(cfg, f);
  bool mono = false;
  const auto merges = selected_merges(cfg, f, mono);
  if (merges.empty() && !mono) throw ConfigError("nothing to run: no merges selected");
  if (f.alpha && !(*f.alpha >= 0.0)) throw ConfigError("--alpha must be non-negative");
  auto ex = open_experiment(cfg, f.languages);
  const auto reports = ex.run(merges, mono, f.alpha.value_or(1.0));
  const fs::path dir = cfg.output_dir;
  const std::string name = f.name.empty() ? "run" : f.name;
  write_text_file(dir / (name + ".csv"), metrics_csv(std::span<const MetricsReport>(reports)));
  write_text_file(dir / (name + ".json"), run_json(cfg, reports).dump(2) + "\n");
  print_summary(reports);
  std::cout << "wrote " << (dir / (name + ".csv")).string() << " and " << (dir / (name + ".json")).string() << "\n";
  return 0;
}

int cmd_sweep(const Common& c, const RunFlags& f, const std::string& axis_flag) {
  auto cfg = c.load();
  apply_solver_flags(cfg, f);
  const std::string axis = lower(axis_flag) == "rank_ratio" || lower(axis_flag) == "r" ? "rank" : lower(axis_flag);
  if (axis != "alpha" && axis != "rank") throw ConfigError("--axis must be alpha or rank, got '" + axis_flag + "'");
  bool mono = false;
  RunFlags sf = f;
  sf.alpha.reset();
  sf.rank_ratio.reset();
  auto merges = selected_merges(cfg, sf, mono);
  if (axis == "rank") {
    if (f.merges.empty()) std::erase_if(merges, [](const MergeConfig& m) { return !is_tsvm(m.method); });
    if (merges.empty()) throw ConfigError("rank sweep needs at least one TSVM merge");
  }
  if (merges.empty()) throw ConfigError("sweep needs at least one merge");
  auto ex = open_experiment(cfg, f.languages);
  const auto out = axis == "alpha" ? ex.sweep_alpha(merges, cfg.alpha_grid) : ex.sweep_rank(merges, cfg.rank_grid);

  const fs::path dir = cfg.output_dir;
  const std::string name = f.name.empty() ? "sweep_" + axis : f.name;
  write_text_file(dir / (name + ".csv"), metrics_csv(std::span<const MetricsReport>(out.reports)));
  write_text_file(dir / (name + ".json"), sweep_json(cfg, out).dump(2) + "\n");
  const std::string title = axis == "alpha" ? "Averaged accuracy vs weight scale" : "Averaged accuracy vs rank ratio";
  write_text_file(dir / (name + ".svg"), sweep_svg(out.results, title));
  for (const auto& r : out.results)
    std::cout << r.method << ": best " << (axis == "alpha" ? "alpha" : "r") << " = " << format_number(r.best_point())
              << " (averaged " << fixed4(r.best_value()) << ")\n";
  std::cout << "wrote " << (dir / name).string() << ".{csv,json,svg}\n";
  return 0;
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& out, const std::string& name,
               bool allow_mixed) {
  std::vector<fs::path> files;
  for (const auto& in : inputs) {
    const fs::path p = in;
    if (fs::is_directory(p)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(p))
        if (e.path().extension() == ".json" && e.path().filename() != "manifest.json") found.push_back(e.path());
      std::sort(found.begin(), found.end());
      for (const auto& f : found)
        if (parse_json_file(f).value("kind", std::string()) == "run") files.push_back(f);
    } else if (fs::exists(p)) {
      files.push_back(p);
    } else {
      throw ConfigError("no such run file or directory: " + in);
    }
  }
  if (files.empty()) throw ConfigError("no run files found");
  std::vector<MetricsReport> reports;
  for (const auto& f : files) {
    try {
      for (auto& r : reports_from_run_json(parse_json_file(f))) reports.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(f.string() + ": " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError(f.string() + ": " + e.what());
    }
  }
  const auto table = build_report(std::move(reports), allow_mixed);
  const fs::path dir = out.empty() ? fs::path(".") : fs::path(out);
  write_text_file(dir / (name + ".csv"), report_csv(table));
  const auto md = report_markdown(table);
  write_text_file(dir / (name + ".md"), md);
  std::cout << md;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lamedit: locate-then-edit knowledge editing with multilingual merging"};
  app.require_subcommand(1);

  Common common;
  bool force = false;
  RunFlags flags;
  std::string axis;
  std::vector<std::string> inputs;
  std::string report_out;
  std::string report_name = "report";
  bool allow_mixed = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("config", common.config, "experiment config (JSON)")->required();
    sub->add_option("--out", common.out, "output directory (overrides output_dir)");
  };
  auto add_edit_flags = [&](CLI::App* sub) {
    sub->add_option("--method", flags.method, "solver: MEMIT or AlphaEdit");
    sub->add_option("--lambda", flags.lambda, "solver regularization weight");
    sub->add_option("--merge", flags.merges, "merge method(s): Sum, Mean, TSVM, Sum-Cov, Mean-Cov, TSVM-Cov, Mono, all");
    sub->add_option("--languages", flags.languages, "use only the first N languages (0 = all)");
    sub->add_option("--name", flags.name, "base name of the output files");
  };

  auto* gen = app.add_subcommand("generate", "generate the dataset and fit the initial model");
  add_common(gen);
  gen->add_flag("--force", force, "overwrite an existing dataset");

  auto* run = app.add_subcommand("run", "edit, merge and evaluate");
  add_common(run);
  add_edit_flags(run);
  run->add_option("--alpha", flags.alpha, "weight scale applied to every merge");
  run->add_option("--rank-ratio", flags.rank_ratio, "TSVM rank ratio");
  run->add_flag("--mono", flags.mono, "also run the per-language Mono baseline");

  auto* sweep = app.add_subcommand("sweep", "sweep alpha or the rank ratio over the config grid");
  add_common(sweep);
  add_edit_flags(sweep);
  sweep->add_option("--axis", axis, "alpha or rank")->required();

  auto* report = app.add_subcommand("report", "combine run files into a method x language table");
  report->add_option("runs", inputs, "run JSON files or directories holding them")->required();
  report->add_option("--out", report_out, "output directory (default: current directory)");
  report->add_option("--name", report_name, "base name of the output files");
  report->add_flag("--allow-mixed", allow_mixed, "combine runs from different seeds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_generate(common, force);
    if (run->parsed()) return cmd_run(common, flags);
    if (sweep->parsed()) return cmd_sweep(common, flags, axis);
    if (report->parsed()) return cmd_report(inputs, report_out, report_name, allow_mixed);
  } catch (const NumericalError& e) {
    std::cerr << "lamedit: numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const Error& e) {
    std::cerr << "lamedit: error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "lamedit: error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "lamedit: error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "lamedit: internal error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
