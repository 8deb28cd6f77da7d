// Acceptance checks: one PASS/FAIL line per criterion, nonzero exit if any
// criterion fails.

#include "lamedit/harness.hpp"
#include "lamedit/merging.hpp"
#include "lamedit/solvers.hpp"
#include "test_support.hpp"

#include <sys/wait.h>

#include <cstdlib>
#include <iostream>
#include <sstream>

using namespace lamedit;
using testing_support::rel_diff;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int n, bool ok, const std::string& detail) {
  std::cout << "criterion " << n << ": " << (ok ? "PASS" : "FAIL") << "  " << detail << std::endl;
  if (!ok) ++failures;
}

std::string sci(double v) {
  std::ostringstream s;
  s.precision(3);
  s << std::scientific << v;
  return s.str();
}

std::string fix(double v) {
  std::ostringstream s;
  s.precision(4);
  s << std::fixed << v;
  return s.str();
}

int cli(const std::string& args, const fs::path& log, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + "'" + std::string(LAMEDIT_CLI_PATH) + "' " + args + " >'" +
                          log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string quoted(const fs::path& p) { return "'" + p.string() + "'"; }

Matrix random_weights(Rng& rng, Index d, Index h) { return rng.normal_matrix(d, h, 1.0 / std::sqrt(static_cast<double>(h))); }

// MEMIT closed form against gradient descent on the same objective.
void criterion1() {
  Rng rng(101);
  double worst_d = 0.0, worst_f = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix w = random_weights(rng, 16, 32), k = rng.normal_matrix(32, 8), v = rng.normal_matrix(16, 8),
                 k_c = rng.normal_matrix(32, 64);
    const double lambda = 0.5 + 0.5 * trial;
    const Matrix d = solve_memit(w, k, v, k_c * k_c.transpose(), k * k.transpose(), lambda);
    const Matrix d_gd = testing_support::gradient_descent_oracle(w, k, v, k_c, lambda);
    const double f = testing_support::memit_objective(w, d, k, v, k_c, lambda);
    const double f_gd = testing_support::memit_objective(w, d_gd, k, v, k_c, lambda);
    worst_d = std::max(worst_d, rel_diff(d, d_gd));
    worst_f = std::max(worst_f, std::abs(f - f_gd) / f_gd);
  }
  report(1, worst_d <= 1e-6 && worst_f <= 1e-6,
         "MEMIT vs gradient descent, 20 instances: max rel |D| diff " + sci(worst_d) + ", objective " + sci(worst_f));
}

// AlphaEdit update leaves the preserved keys' outputs untouched.
void criterion2() {
  Rng rng(102);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix w = random_weights(rng, 16, 32), k = rng.normal_matrix(32, 8), v = rng.normal_matrix(16, 8),
                 k_c = rng.normal_matrix(32, 12 + trial);
    const auto proj = nullspace_projector(k_c * k_c.transpose(), 1e-6);
    const Matrix d = solve_alphaedit(w, k, v, proj, k * k.transpose(), 0.1 + 0.1 * trial);
    worst = std::max(worst, (d * k_c).norm() / (d.norm() * k_c.norm()));
  }
  report(2, worst <= 1e-8, "AlphaEdit max |D K_c| / (|D| |K_c|) over 20 instances: " + sci(worst));
}

void criterion3() {
  Rng rng(103);
  double mean_err = 0.0, recon = 0.0, ortho = 0.0;
  for (int m = 1; m <= 5; ++m) {
    std::vector<Matrix> ds;
    for (int i = 0; i < m; ++i) ds.push_back(rng.normal_matrix(8, 20));
    const Matrix sum = merge_sum(ds);
    mean_err = std::max(mean_err, (merge_mean(ds) - sum / m).norm() / (sum / m).norm());
  }
  for (int t = 0; t < 5; ++t) {
    const Matrix d = rng.normal_matrix(6 + t, 12 + 3 * t);
    recon = std::max(recon, (merge_tsvm(std::vector<Matrix>{d}, 1.0) - d).norm() / d.norm());
  }
  for (int t = 0; t < 5; ++t) {
    std::vector<Matrix> ds;
    for (int i = 0; i < 3; ++i) ds.push_back(rng.normal_matrix(16, 40));
    const auto f = tsvm_factors(ds, 0.25);
    const Index k = f.sigma.size();
    ortho = std::max(ortho, (f.u_merged.transpose() * f.u_merged - Matrix::Identity(k, k)).norm());
    ortho = std::max(ortho, (f.v_merged * f.v_merged.transpose() - Matrix::Identity(k, k)).norm());
  }
  report(3, mean_err <= 1e-15 && recon <= 1e-6 && ortho <= 1e-8,
         "Mean vs Sum/m " + sci(mean_err) + ", TSVM m=1 r=1 reconstruction " + sci(recon) + ", orthonormality " +
             sci(ortho));
}

void criterion4() {
  Rng rng(104);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const Index rows = 8 + trial, cols = 12 + 3 * trial;
    const Matrix d = rng.normal_matrix(rows, cols);
    const double r = 0.2 + 0.07 * trial;
    const auto t = truncate_svd(d, r);
    const Vector sv = testing_support::jacobi_singular_values(d);
    const Index k = t.sigma.size();
    const double oracle = std::sqrt(sv.tail(sv.size() - k).squaredNorm());
    const double err = (d - t.u * t.sigma.asDiagonal() * t.vt).norm();
    worst = std::max(worst, std::abs(err - oracle));
  }
  report(4, worst <= 1e-8, "truncation error vs Jacobi SVD, 10 matrices: max |err - oracle| " + sci(worst));
}

double mean_averaged(const std::vector<MetricsReport>& rs, const std::string& method) {
  for (const auto& r : rs)
    if (r.method == method) return r.mean().averaged;
  throw ConfigError("run has no " + method + " report");
}

const nlohmann::json& sweep_result(const nlohmann::json& sweep, const std::string& method) {
  for (const auto& r : sweep.at("results"))
    if (r.at("method") == method) return r;
  throw ConfigError("sweep has no " + method + " result");
}

bool compare_runs(const fs::path& a, const fs::path& b, double tol, double& worst) {
  const auto ra = reports_from_run_json(parse_json_file(a));
  const auto rb = reports_from_run_json(parse_json_file(b));
  if (ra.size() != rb.size()) return false;
  worst = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    if (ra[i].method != rb[i].method || ra[i].rows.size() != rb[i].rows.size()) return false;
    for (std::size_t k = 0; k < ra[i].rows.size(); ++k) {
      const auto &x = ra[i].rows[k], &y = rb[i].rows[k];
      for (double d : {x.efficacy - y.efficacy, x.generalization - y.generalization, x.specificity - y.specificity,
                       x.portability - y.portability, x.averaged - y.averaged})
        worst = std::max(worst, std::abs(d));
    }
  }
  return worst <= tol;
}

void benchmark_criteria() {
  const testing_support::TempDir tmp("acceptance");
  const fs::path out = tmp.path / "out";
  const fs::path log = tmp.path / "log.txt";
  const fs::path config = testing_support::source_dir() / "configs" / "default.json";
  const std::string base = quoted(config) + " --out " + quoted(out);

  auto step = [&](const std::string& args, const std::string& env = "") {
    const int code = cli(args, log, env);
    if (code != 0) {
      std::cout << "lamedit " << args << " exited with " << code << ":\n" << read_text_file(log);
      return false;
    }
    return true;
  };
  if (!step("generate " + base + " --force") || !step("run " + base) || !step("sweep " + base + " --axis alpha") ||
      !step("sweep " + base + " --axis rank")) {
    for (int n : {5, 6, 7, 8, 9, 10}) report(n, false, "benchmark pipeline failed");
    return;
  }
  const auto reports = reports_from_run_json(parse_json_file(out / "run.json"));
  const double sum = mean_averaged(reports, "Sum"), mean = mean_averaged(reports, "Mean"),
               sum_cov = mean_averaged(reports, "Sum-Cov"), mono = mean_averaged(reports, "Mono");
  report(5, sum < mean && mean < sum_cov && sum < 0.1 && sum_cov >= mean + 0.05,
         "averaged accuracy Sum " + fix(sum) + " < Mean " + fix(mean) + " < Sum-Cov " + fix(sum_cov));

  double best = -1.0;
  std::string best_name;
  for (const auto& r : reports)
    if (r.method != "Mono" && r.mean().averaged > best) best = r.mean().averaged, best_name = r.method;
  report(6, mono > best, "Mono " + fix(mono) + " > best merge " + best_name + " " + fix(best));

  const auto alpha = parse_json_file(out / "sweep_alpha.json");
  bool ok7 = true;
  std::string detail7;
  for (const char* m : {"Sum-Cov", "TSVM"}) {
    const auto& r = sweep_result(alpha, m);
    const auto grid = r.at("grid").get<std::vector<double>>();
    const auto values = r.at("values").get<std::vector<double>>();
    const std::size_t i = argmax_first(values);
    const std::size_t one = static_cast<std::size_t>(std::find(grid.begin(), grid.end(), 1.0) - grid.begin());
    const bool interior = i > 0 && i + 1 < grid.size();
    ok7 = ok7 && interior && one < grid.size() && values[i] >= values[one];
    detail7 += std::string(m) + " alpha* = " + format_number(grid[i]) + " (" + fix(values[i]) + "); ";
  }
  report(7, ok7, detail7 + "grid " + format_number(sweep_result(alpha, "TSVM").at("grid").front().get<double>()) +
                     ".." + format_number(sweep_result(alpha, "TSVM").at("grid").back().get<double>()));

  const auto rank = parse_json_file(out / "sweep_rank.json");
  const double r_star = sweep_result(rank, "TSVM").at("argmax").get<double>();
  report(8, r_star <= 0.5, "TSVM r* = " + format_number(r_star));

  // every run recomputes its editing matrices
  fs::remove_all(out / "cache");
  bool ok9 = step("run " + base + " --name again");
  fs::remove_all(out / "cache");
  ok9 = ok9 && step("run " + base + " --name parallel", "LAMEDIT_WORKERS=4");
  double worst = 0.0;
  const bool ident = ok9 && read_text_file(out / "run.csv") == read_text_file(out / "again.csv") &&
                     read_text_file(out / "run.json") == read_text_file(out / "again.json");
  const bool close = ok9 && compare_runs(out / "run.json", out / "parallel.json", 1e-10, worst);
  report(9, ident && close,
         std::string("repeat run ") + (ident ? "byte-identical" : "differs") + ", workers=4 max diff " + sci(worst));

  const auto ws = load_workspace(load_experiment_config(config), WorkspacePaths{out});
  double min_specificity = 1.0;
  for (std::uint32_t i = 0; i < ws.dataset.num_languages(); ++i)
    min_specificity = std::min(min_specificity, evaluate(ws.model, ws.dataset, LanguageId{i}).specificity);
  const double recall = measure_recall(ws.model, ws.dataset).old_token_recall;
  report(10, recall >= 0.95 && min_specificity >= 0.95,
         "pre-edit old-token recall " + fix(recall) + ", min per-language specificity " + fix(min_specificity));
}

}  // namespace

int main() {
  try {
    criterion1();
    criterion2();
    criterion3();
    criterion4();
    benchmark_criteria();
  } catch (const std::exception& e) {
    std::cout << "acceptance aborted: " << e.what() << std::endl;
    return 2;
  }
  std::cout << (failures == 0 ? "all criteria PASS" : std::to_string(failures) + " criteria FAIL") << std::endl;
  return failures == 0 ? 0 : 1;
}
