#pragma once

// Synthetic multilingual editing benchmark.
//
// Each fact has an embedding s_f near the codebook vector of its old token.
// Language i presents the fact as x = A_i s_f, where A_i is an orthogonal
// matrix on the geodesic between a shared rotation (weight kappa) and a
// language-private one (weight 1 - kappa). Every edit request carries three
// probes: a rephrase (x plus gaussian noise), an unrelated preserved fact of
// the same language, and a one-hop input H x whose expected answer is the
// new token. Edits are never fitted to the one-hop inputs.

#include "lamedit/container.hpp"
#include "lamedit/model.hpp"
#include "lamedit/random.hpp"
#include "lamedit/solvers.hpp"

#include <unsupported/Eigen/MatrixFunctions>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

namespace lamedit {

inline constexpr int kDatasetSchemaVersion = 1;

struct GenConfig {
  int n_facts = 64;
  int m_languages = 12;
  int model_dim = 32;
  int ffn_dim = 64;
  int num_layers = 6;
  std::vector<int> edit_layers{2, 3, 4};
  double overlap = 0.8;
  double rephrase_noise = 0.3;
  int n_preserved = 640;
  int vocab_size = 256;
  std::uint64_t seed = 20240601;

  // Shape of the synthetic world; not part of the headline configuration.
  double fact_noise = 0.4;       // spread of s_f around its token embedding
  double hop_strength = 0.3;     // geodesic fraction from I toward a random rotation
  double init_w_out_scale = 0.1; // stddev scale of the random W_out of every layer
  int fit_sweeps = 6;
  double fit_ridge = 1e-3;       // ridge added to the fit's normal equations, relative to mean key energy

  void validate() const {
    if (n_facts < 1) throw ConfigError("n_facts must be >= 1");
    if (m_languages < 1) throw ConfigError("m_languages must be >= 1");
    if (model_dim < 2 || ffn_dim < model_dim) throw ConfigError("need ffn_dim >= model_dim >= 2");
    if (num_layers < 1) throw ConfigError("num_layers must be >= 1");
    if (edit_layers.empty()) throw ConfigError("edit_layers must be nonempty");
    for (std::size_t i = 0; i < edit_layers.size(); ++i) {
      if (edit_layers[i] < 1 || edit_layers[i] > num_layers) throw ConfigError("edit layer out of range");
      if (i > 0 && edit_layers[i] <= edit_layers[i - 1]) throw ConfigError("edit_layers must be strictly increasing");
    }
    if (!(overlap >= 0.0 && overlap <= 1.0)) throw ConfigError("overlap must lie in [0, 1]");
    if (!(rephrase_noise >= 0.0)) throw ConfigError("rephrase_noise must be >= 0");
    if (n_preserved < 0) throw ConfigError("n_preserved must be >= 0");
    if (vocab_size < 2) throw ConfigError("vocabulary must hold at least two tokens (old and new object differ)");
    if (!(fact_noise >= 0.0) || !(hop_strength >= 0.0 && hop_strength <= 1.0))
      throw ConfigError("fact_noise must be >= 0 and hop_strength in [0, 1]");
    if (fit_sweeps < 1 || !(fit_ridge > 0.0)) throw ConfigError("fit_sweeps must be >= 1 and fit_ridge > 0");
  }
};

inline void to_json(nlohmann::json& j, const GenConfig& c) {
  j = nlohmann::json{{"n_facts", c.n_facts},
                     {"m_languages", c.m_languages},
                     {"model_dim", c.model_dim},
                     {"ffn_dim", c.ffn_dim},
                     {"num_layers", c.num_layers},
                     {"edit_layers", c.edit_layers},
                     {"overlap", c.overlap},
                     {"rephrase_noise", c.rephrase_noise},
                     {"n_preserved", c.n_preserved},
                     {"vocab_size", c.vocab_size},
                     {"seed", c.seed},
                     {"fact_noise", c.fact_noise},
                     {"hop_strength", c.hop_strength},
                     {"init_w_out_scale", c.init_w_out_scale},
                     {"fit_sweeps", c.fit_sweeps},
                     {"fit_ridge", c.fit_ridge}};
}

// Every field is optional and falls back to its default; unknown keys are
// rejected so typos surface as config errors.
inline void from_json(const nlohmann::json& j, GenConfig& c) {
  if (!j.is_object()) throw ConfigError("dataset config must be an object");
  static const std::vector<std::string> known{"n_facts",      "m_languages",  "model_dim",   "ffn_dim",
                                              "num_layers",   "edit_layers",  "overlap",     "rephrase_noise",
                                              "n_preserved",  "vocab_size",   "seed",        "fact_noise",
                                              "hop_strength", "init_w_out_scale", "fit_sweeps", "fit_ridge"};
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("unknown dataset field '" + k + "'");
  auto opt = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  opt("n_facts", c.n_facts);
  opt("m_languages", c.m_languages);
  opt("model_dim", c.model_dim);
  opt("ffn_dim", c.ffn_dim);
  opt("num_layers", c.num_layers);
  opt("edit_layers", c.edit_layers);
  opt("overlap", c.overlap);
  opt("rephrase_noise", c.rephrase_noise);
  opt("n_preserved", c.n_preserved);
  opt("vocab_size", c.vocab_size);
  opt("seed", c.seed);
  opt("fact_noise", c.fact_noise);
  opt("hop_strength", c.hop_strength);
  opt("init_w_out_scale", c.init_w_out_scale);
  opt("fit_sweeps", c.fit_sweeps);
  opt("fit_ridge", c.fit_ridge);
}

struct FactRecord {
  FactId id;
  TokenId old_token = 0;
  TokenId new_token = 0;  // equals old_token for preserved facts
  bool edited = false;
};

struct ProbeSet {
  Vector rephrase;
  KnownFact unrelated;
  Vector one_hop;
  TokenId one_hop_token = 0;
};

struct MultilingualDataset {
  GenConfig config;
  Matrix codebook;                          // d x |V|
  std::vector<Matrix> language_transforms;  // m, each d x d orthogonal
  Matrix hop_transform;                     // d x d orthogonal
  Matrix fact_embeddings;                   // d x (n_facts + n_preserved)
  std::vector<FactRecord> facts;
  std::vector<std::uint32_t> unrelated_partner;  // per edited fact, index into the preserved facts
  std::vector<std::vector<EditRequest>> requests;  // [language][fact]
  std::vector<std::vector<ProbeSet>> probes;       // [language][fact]
  std::vector<std::vector<KnownFact>> preserved;   // [language][preserved fact]

  std::size_t num_languages() const { return requests.size(); }

  std::vector<FactId> request_fact_ids() const {
    std::vector<FactId> ids;
    for (const auto& f : facts)
      if (f.edited) ids.push_back(f.id);
    return ids;
  }

  // Preserved sample over all languages, ascending language order.
  std::vector<KnownFact> preserved_all() const {
    std::vector<KnownFact> out;
    for (const auto& p : preserved) out.insert(out.end(), p.begin(), p.end());
    return out;
  }

  MatrixContainer to_container() const;
  nlohmann::json manifest() const;
  static MultilingualDataset from_files(const nlohmann::json& manifest, const MatrixContainer& c);
};

namespace detail {

inline Matrix random_rotation(Rng& rng, Index n) {
  const Matrix g = rng.normal_matrix(n, n);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(n, n);
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Index i = 0; i < n; ++i)
    if (r(i, i) < 0) q.col(i) = -q.col(i);
  if (q.determinant() < 0) q.col(0) = -q.col(0);
  return q;
}

inline Matrix reorthogonalize(const Matrix& a) {
  Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
  return svd.matrixU() * svd.matrixV().transpose();
}

// Point at fraction t along the geodesic from rotation a to rotation b.
inline Matrix rotation_geodesic(const Matrix& a, const Matrix& b, double t) {
  if (t == 0.0) return a;
  const Matrix rel = a.transpose() * b;
  Matrix log_rel = rel.log();
  log_rel = 0.5 * (log_rel - log_rel.transpose()).eval();
  const Matrix step = (t * log_rel).exp();
  return reorthogonalize(a * step);
}

}  // namespace detail

inline MultilingualDataset generate_dataset(const GenConfig& cfg) {
  cfg.validate();
  const Index d = cfg.model_dim;
  const int n = cfg.n_facts;
  const int m = cfg.m_languages;
  const int p = cfg.n_preserved;
  const int total = n + p;

  MultilingualDataset ds;
  ds.config = cfg;

  Rng cb_rng(derive_seed(cfg.seed, "codebook"));
  ds.codebook.resize(d, cfg.vocab_size);
  for (int j = 0; j < cfg.vocab_size; ++j) ds.codebook.col(j) = cb_rng.unit_vector(d);

  Rng lang_rng(derive_seed(cfg.seed, "languages"));
  const Matrix shared = detail::random_rotation(lang_rng, d);
  for (int i = 0; i < m; ++i) {
    const Matrix own = detail::random_rotation(lang_rng, d);
    ds.language_transforms.push_back(detail::rotation_geodesic(shared, own, 1.0 - cfg.overlap));
  }
  Rng hop_rng(derive_seed(cfg.seed, "hop"));
  ds.hop_transform = detail::rotation_geodesic(Matrix::Identity(d, d), detail::random_rotation(hop_rng, d),
                                               cfg.hop_strength);

  // Facts: ids [0, n) are edited, [n, n + p) preserved. The embedding is
  // resampled until its nearest token is the old token.
  Rng fact_rng(derive_seed(cfg.seed, "facts"));
  ds.fact_embeddings.resize(d, total);
  for (int f = 0; f < total; ++f) {
    FactRecord rec;
    rec.id = FactId{static_cast<std::uint32_t>(f)};
    rec.old_token = static_cast<TokenId>(fact_rng.below(static_cast<std::uint64_t>(cfg.vocab_size)));
    Vector s;
    for (int attempt = 0;; ++attempt) {
      s = ds.codebook.col(rec.old_token) + cfg.fact_noise * fact_rng.unit_vector(d);
      s /= s.norm();
      Index best;
      (ds.codebook.transpose() * s).maxCoeff(&best);
      if (static_cast<TokenId>(best) == rec.old_token) break;
      if (attempt > 1000) throw ConfigError("fact_noise too large: cannot place facts near their tokens");
    }
    ds.fact_embeddings.col(f) = s;
    rec.edited = f < n;
    rec.new_token = rec.old_token;
    if (rec.edited) {
      do rec.new_token = static_cast<TokenId>(fact_rng.below(static_cast<std::uint64_t>(cfg.vocab_size)));
      while (rec.new_token == rec.old_token);
    }
    ds.facts.push_back(rec);
  }

  Rng pair_rng(derive_seed(cfg.seed, "unrelated"));
  if (p > 0) {
    std::vector<std::uint32_t> order(static_cast<std::size_t>(p));
    std::iota(order.begin(), order.end(), 0u);
    for (int f = 0; f < n; ++f) {
      // partial Fisher-Yates; wraps when there are fewer preserved facts than edits
      const auto slot = static_cast<std::size_t>(f % p);
      const auto pick = slot + pair_rng.below(static_cast<std::uint64_t>(p) - slot);
      std::swap(order[slot], order[pick]);
      ds.unrelated_partner.push_back(order[slot]);
    }
  }

  Rng probe_rng(derive_seed(cfg.seed, "probes"));
  ds.requests.resize(static_cast<std::size_t>(m));
  ds.probes.resize(static_cast<std::size_t>(m));
  ds.preserved.resize(static_cast<std::size_t>(m));
  const double noise_sd = cfg.rephrase_noise / std::sqrt(static_cast<double>(d));
  for (int i = 0; i < m; ++i) {
    const auto& a = ds.language_transforms[static_cast<std::size_t>(i)];
    const LanguageId lang{static_cast<std::uint32_t>(i)};
    for (int g = 0; g < p; ++g) {
      const auto& rec = ds.facts[static_cast<std::size_t>(n + g)];
      ds.preserved[static_cast<std::size_t>(i)].push_back({rec.id, lang, a * ds.fact_embeddings.col(n + g), rec.old_token});
    }
    for (int f = 0; f < n; ++f) {
      const auto& rec = ds.facts[static_cast<std::size_t>(f)];
      const Vector x = a * ds.fact_embeddings.col(f);
      ds.requests[static_cast<std::size_t>(i)].push_back({rec.id, lang, x, rec.old_token, rec.new_token});
      ProbeSet probe;
      probe.rephrase = x + probe_rng.normal_vector(d, noise_sd);
      if (p > 0) probe.unrelated = ds.preserved[static_cast<std::size_t>(i)][ds.unrelated_partner[static_cast<std::size_t>(f)]];
      probe.one_hop = ds.hop_transform * x;
      probe.one_hop_token = rec.new_token;
      ds.probes[static_cast<std::size_t>(i)].push_back(std::move(probe));
    }
  }
  return ds;
}

struct FitReport {
  double old_token_recall = 0.0;     // edited facts, all languages
  double preserved_recall = 0.0;     // preserved facts, all languages
  std::vector<double> per_language;  // recall over both kinds
};

inline FitReport measure_recall(const ToyModel& model, const MultilingualDataset& ds) {
  FitReport r;
  std::size_t req_ok = 0, req_n = 0, pre_ok = 0, pre_n = 0;
  for (std::size_t i = 0; i < ds.num_languages(); ++i) {
    std::size_t ok = 0, cnt = 0;
    for (const auto& q : ds.requests[i]) {
      const bool hit = model.predict(q.input) == q.old_token;
      req_ok += hit, ok += hit, ++req_n, ++cnt;
    }
    for (const auto& f : ds.preserved[i]) {
      const bool hit = model.predict(f.input) == f.token;
      pre_ok += hit, ok += hit, ++pre_n, ++cnt;
    }
    r.per_language.push_back(cnt ? static_cast<double>(ok) / static_cast<double>(cnt) : 1.0);
  }
  r.old_token_recall = req_n ? static_cast<double>(req_ok) / static_cast<double>(req_n) : 1.0;
  r.preserved_recall = pre_n ? static_cast<double>(pre_ok) / static_cast<double>(pre_n) : 1.0;
  return r;
}

inline constexpr double kFitRecallFloor = 0.95;

// Random layers, then the edit-layer W_out are solved bottom-to-top with the
// MEMIT normal equations so that every fact in every language recalls its
// old token. Repeated sweeps reduce the error left by the nonlinear layers.
inline ToyModel fit_initial_model(const GenConfig& cfg, const MultilingualDataset& ds, FitReport* report = nullptr) {
  cfg.validate();
  const Index d = cfg.model_dim;
  const Index h = cfg.ffn_dim;
  Rng rng(derive_seed(cfg.seed, "model-init"));
  std::vector<LamLayer> layers;
  for (int l = 0; l < cfg.num_layers; ++l) {
    LamLayer layer;
    layer.w_in = rng.normal_matrix(h, d, 1.0 / std::sqrt(static_cast<double>(d)));
    layer.w_out = rng.normal_matrix(d, h, cfg.init_w_out_scale / std::sqrt(static_cast<double>(h)));
    layer.norm_scale = Vector::Ones(d);
    layer.norm_bias = Vector::Zero(d);
    layers.push_back(std::move(layer));
  }
  ToyModel model(std::move(layers), ds.codebook, cfg.edit_layers);

  std::vector<EditRequest> train;
  for (std::size_t i = 0; i < ds.num_languages(); ++i) {
    for (const auto& q : ds.requests[i]) train.push_back({q.fact_id, q.language_id, q.input, q.old_token, q.old_token});
    for (const auto& f : ds.preserved[i]) train.push_back({f.fact_id, f.language_id, f.input, f.token, f.token});
  }

  for (int sweep = 0; sweep < cfg.fit_sweeps; ++sweep) {
    for (int layer : cfg.edit_layers) {
      const auto [k, v] = model.compute_keys_and_targets(train, layer);
      const Matrix c_req = k * k.transpose();
      const double energy = c_req.trace() / static_cast<double>(h);
      const Matrix ridge = Matrix::Identity(h, h) * energy;
      model.add_to_w_out(layer, solve_memit(model.layer(layer).w_out, k, v, ridge, c_req, cfg.fit_ridge));
    }
  }

  const auto r = measure_recall(model, ds);
  if (report) *report = r;
  if (r.old_token_recall < kFitRecallFloor || r.preserved_recall < kFitRecallFloor) {
    std::ostringstream msg;
    msg << "initial model fit missed the recall floor " << kFitRecallFloor << ": old-token recall "
        << r.old_token_recall << ", preserved recall " << r.preserved_recall << ", per language [";
    for (std::size_t i = 0; i < r.per_language.size(); ++i) msg << (i ? " " : "") << r.per_language[i];
    msg << "]";
    throw NumericalError(msg.str());
  }
  return model;
}

inline MatrixContainer MultilingualDataset::to_container() const {
  MatrixContainer c;
  c.put("dataset/codebook", codebook);
  c.put("dataset/hop_transform", hop_transform);
  c.put("dataset/fact_embeddings", fact_embeddings);
  const Index d = codebook.rows();
  for (std::size_t i = 0; i < num_languages(); ++i) {
    const auto pre = "dataset/lang" + std::to_string(i) + "/";
    c.put(pre + "transform", language_transforms[i]);
    Matrix req(d, static_cast<Index>(requests[i].size()));
    Matrix reph(d, req.cols());
    Matrix hop(d, req.cols());
    for (std::size_t f = 0; f < requests[i].size(); ++f) {
      req.col(static_cast<Index>(f)) = requests[i][f].input;
      reph.col(static_cast<Index>(f)) = probes[i][f].rephrase;
      hop.col(static_cast<Index>(f)) = probes[i][f].one_hop;
    }
    c.put(pre + "requests", req);
    c.put(pre + "rephrase", reph);
    c.put(pre + "one_hop", hop);
    Matrix kept(d, static_cast<Index>(preserved[i].size()));
    for (std::size_t g = 0; g < preserved[i].size(); ++g) kept.col(static_cast<Index>(g)) = preserved[i][g].input;
    c.put(pre + "preserved", kept);
  }
  return c;
}

inline nlohmann::json MultilingualDataset::manifest() const {
  nlohmann::json facts_json = nlohmann::json::array();
  for (const auto& f : facts)
    facts_json.push_back({{"id", f.id.value}, {"old", f.old_token}, {"new", f.new_token}, {"edited", f.edited}});
  return {{"schema_version", kDatasetSchemaVersion},
          {"config", config},
          {"num_languages", num_languages()},
          {"facts", facts_json},
          {"unrelated_partner", unrelated_partner}};
}

inline MultilingualDataset MultilingualDataset::from_files(const nlohmann::json& manifest, const MatrixContainer& c) {
  if (manifest.value("schema_version", -1) != kDatasetSchemaVersion)
    throw ConfigError("dataset manifest has unsupported schema version");
  MultilingualDataset ds;
  ds.config = manifest.at("config").get<GenConfig>();
  ds.codebook = c.get("dataset/codebook");
  ds.hop_transform = c.get("dataset/hop_transform");
  ds.fact_embeddings = c.get("dataset/fact_embeddings");
  for (const auto& f : manifest.at("facts"))
    ds.facts.push_back({FactId{f.at("id").get<std::uint32_t>()}, f.at("old").get<TokenId>(), f.at("new").get<TokenId>(),
                        f.at("edited").get<bool>()});
  ds.unrelated_partner = manifest.at("unrelated_partner").get<std::vector<std::uint32_t>>();
  const auto m = manifest.at("num_languages").get<std::size_t>();
  std::vector<const FactRecord*> edited, kept;
  for (const auto& f : ds.facts) (f.edited ? edited : kept).push_back(&f);
  ds.requests.resize(m);
  ds.probes.resize(m);
  ds.preserved.resize(m);
  for (std::size_t i = 0; i < m; ++i) {
    const auto pre = "dataset/lang" + std::to_string(i) + "/";
    const LanguageId lang{static_cast<std::uint32_t>(i)};
    ds.language_transforms.push_back(c.get(pre + "transform"));
    const auto& req = c.get(pre + "requests");
    const auto& reph = c.get(pre + "rephrase");
    const auto& hop = c.get(pre + "one_hop");
    const auto& kp = c.get(pre + "preserved");
    require_shape(static_cast<std::size_t>(req.cols()) == edited.size() &&
                      static_cast<std::size_t>(kp.cols()) == kept.size(),
                  "dataset matrices do not match the manifest");
    for (std::size_t g = 0; g < kept.size(); ++g)
      ds.preserved[i].push_back({kept[g]->id, lang, kp.col(static_cast<Index>(g)), kept[g]->old_token});
    for (std::size_t f = 0; f < edited.size(); ++f) {
      ds.requests[i].push_back({edited[f]->id, lang, req.col(static_cast<Index>(f)), edited[f]->old_token,
                                edited[f]->new_token});
      ProbeSet probe;
      probe.rephrase = reph.col(static_cast<Index>(f));
      if (!kept.empty()) probe.unrelated = ds.preserved[i][ds.unrelated_partner.at(f)];
      probe.one_hop = hop.col(static_cast<Index>(f));
      probe.one_hop_token = edited[f]->new_token;
      ds.probes[i].push_back(std::move(probe));
    }
  }
  return ds;
}

}  // namespace lamedit
