#pragma once

// Efficacy, generalization, specificity and portability with single-token
// answers, their average, and the monolingual baseline.

#include "lamedit/merging.hpp"
#include "lamedit/model.hpp"
#include "lamedit/parallel.hpp"
#include "lamedit/solvers.hpp"
#include "lamedit/synthdata.hpp"

#include <nlohmann/json.hpp>

#include <iomanip>
#include <iterator>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace lamedit {

struct Probe {
  Vector input;
  TokenId expected = 0;
};

inline double accuracy(const ToyModel& model, std::span<const Probe> probes) {
  if (probes.empty()) throw InvalidRequestError("accuracy: empty probe list");
  std::size_t hits = 0;
  for (const auto& p : probes) hits += model.predict(p.input) == p.expected;
  return static_cast<double>(hits) / static_cast<double>(probes.size());
}

struct MetricsRow {
  LanguageId language_id;
  double efficacy = 0.0;
  double generalization = 0.0;
  double specificity = 0.0;
  double portability = 0.0;
  double averaged = 0.0;

  static MetricsRow from_components(LanguageId lang, double eff, double gen, double spe, double por) {
    return {lang, eff, gen, spe, por, (eff + gen + spe + por) / 4.0};
  }
};

// Expected answers: o' for requests, rephrases and one-hop probes; the
// ground-truth token of the preserved fact for unrelated probes.
inline MetricsRow evaluate(const ToyModel& model, const MultilingualDataset& ds, LanguageId lang) {
  if (lang.value >= ds.num_languages()) throw ConfigError("evaluate: unknown language " + std::to_string(lang.value));
  const auto& reqs = ds.requests[lang.value];
  const auto& probes = ds.probes[lang.value];
  std::vector<Probe> eff, gen, spe, por;
  for (std::size_t f = 0; f < reqs.size(); ++f) {
    eff.push_back({reqs[f].input, reqs[f].new_token});
    gen.push_back({probes[f].rephrase, reqs[f].new_token});
    if (!ds.preserved[lang.value].empty()) spe.push_back({probes[f].unrelated.input, probes[f].unrelated.token});
    por.push_back({probes[f].one_hop, probes[f].one_hop_token});
  }
  if (spe.empty()) throw ConfigError("evaluate: dataset has no preserved facts for specificity probes");
  return MetricsRow::from_components(lang, accuracy(model, eff), accuracy(model, gen), accuracy(model, spe),
                                     accuracy(model, por));
}

struct MetricsReport {
  std::string method;  // merge label or "Mono"
  SolverMethod solver = SolverMethod::kMemit;
  CovMode cov_mode = CovMode::kPerLanguage;
  double alpha = 1.0;
  double rank_ratio = 1.0;
  std::uint64_t seed = 0;
  std::vector<MetricsRow> rows;

  MetricsRow mean() const {
    MetricsRow m;
    if (rows.empty()) return m;
    for (const auto& r : rows) {
      m.efficacy += r.efficacy;
      m.generalization += r.generalization;
      m.specificity += r.specificity;
      m.portability += r.portability;
      m.averaged += r.averaged;
    }
    const auto n = static_cast<double>(rows.size());
    m.efficacy /= n, m.generalization /= n, m.specificity /= n, m.portability /= n, m.averaged /= n;
    return m;
  }
};

inline std::vector<MetricsRow> evaluate_all(const ToyModel& model, const MultilingualDataset& ds,
                                            std::size_t workers = 1) {
  std::vector<MetricsRow> rows(ds.num_languages());
  parallel_for(rows.size(), workers, [&](std::size_t i) {
    rows[i] = evaluate(model, ds, LanguageId{static_cast<std::uint32_t>(i)});
  });
  return rows;
}

// Edit with one language alone (own covariance), apply at scale alpha and
// evaluate in that language.
inline MetricsRow run_mono(const ToyModel& model, const MultilingualDataset& ds, LanguageId lang,
                           const SolverSettings& settings, double alpha, const PreservedStats& preserved) {
  if (lang.value >= ds.num_languages()) throw ConfigError("run_mono: unknown language " + std::to_string(lang.value));
  const std::vector<std::vector<EditRequest>> one{ds.requests[lang.value]};
  const auto deltas = edit_model(model, one, settings, CovMode::kPerLanguage, preserved);
  std::vector<MergedDelta> own;
  for (std::size_t l = 0; l < deltas.layers().size(); ++l)
    own.push_back({deltas.layers()[l], deltas.at(l, 0).d, MergeMethod::kSum, 1.0, {lang}});
  return evaluate(apply_update(model, own, alpha), ds, lang);
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

inline const char* kMetricsCsvHeader =
    "method,cov_mode,alpha,rank_ratio,language,efficacy,generalization,specificity,portability,averaged";

inline constexpr const char* kLanguageCodes[] = {"en", "zh", "cz", "vi", "tr", "fr", "es", "de", "ru", "du", "pt", "th"};

inline std::string language_code(std::uint32_t i) {
  return i < std::size(kLanguageCodes) ? kLanguageCodes[i] : "l" + std::to_string(i);
}

inline std::uint32_t language_index(const std::string& code) {
  for (std::uint32_t i = 0; i < std::size(kLanguageCodes); ++i)
    if (code == kLanguageCodes[i]) return i;
  if (code.size() > 1 && code[0] == 'l' && code.find_first_not_of("0123456789", 1) == std::string::npos) {
    const auto i = std::stoul(code.substr(1));
    if (i >= std::size(kLanguageCodes)) return static_cast<std::uint32_t>(i);
  }
  throw ConfigError("unknown language code '" + code + "'");
}

// Shortest decimal that round-trips the double.
inline std::string format_number(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  std::string text = s.str();
  for (int prec = 1; prec <= 17; ++prec) {
    std::ostringstream t;
    t << std::setprecision(prec) << v;
    if (std::stod(t.str()) == v) return t.str();
  }
  return text;
}

inline void append_csv_rows(std::ostringstream& s, const MetricsReport& r) {
  for (const auto& row : r.rows) {
    s << r.method << "," << to_string(r.cov_mode) << "," << format_number(r.alpha) << ","
      << format_number(r.rank_ratio) << "," << language_code(row.language_id.value) << ","
      << format_number(row.efficacy) << "," << format_number(row.generalization) << ","
      << format_number(row.specificity) << "," << format_number(row.portability) << ","
      << format_number(row.averaged) << "\n";
  }
}

inline std::string metrics_csv(const MetricsReport& r) {
  std::ostringstream s;
  s << kMetricsCsvHeader << "\n";
  append_csv_rows(s, r);
  return s.str();
}

inline std::string metrics_csv(std::span<const MetricsReport> reports) {
  std::ostringstream s;
  s << kMetricsCsvHeader << "\n";
  for (const auto& r : reports) append_csv_rows(s, r);
  return s.str();
}

inline nlohmann::json row_json(const MetricsRow& row) {
  return {{"language", language_code(row.language_id.value)},
          {"efficacy", row.efficacy},
          {"generalization", row.generalization},
          {"specificity", row.specificity},
          {"portability", row.portability},
          {"averaged", row.averaged}};
}

inline nlohmann::json metrics_json(const MetricsReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) rows.push_back(row_json(row));
  auto mean = row_json(r.mean());
  mean.erase("language");
  return {{"method", r.method},
          {"solver", to_string(r.solver)},
          {"cov_mode", to_string(r.cov_mode)},
          {"alpha", r.alpha},
          {"rank_ratio", r.rank_ratio},
          {"seed", r.seed},
          {"rows", rows},
          {"mean", mean}};
}

inline MetricsReport metrics_from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.method = j.at("method").get<std::string>();
  r.solver = parse_solver_method(j.at("solver").get<std::string>());
  r.cov_mode = parse_cov_mode(j.at("cov_mode").get<std::string>());
  r.alpha = j.at("alpha").get<double>();
  r.rank_ratio = j.at("rank_ratio").get<double>();
  r.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& row : j.at("rows")) {
    r.rows.push_back({LanguageId{language_index(row.at("language").get<std::string>())}, row.at("efficacy").get<double>(), row.at("generalization").get<double>(),
                      row.at("specificity").get<double>(), row.at("portability").get<double>(),
                      row.at("averaged").get<double>()});
  }
  return r;
}

}  // namespace lamedit
