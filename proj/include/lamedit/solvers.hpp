#pragma once

// Closed-form editing matrices.
//
//   MEMIT:      D = R K^T (lambda C_const + C_req)^{-1}
//   AlphaEdit:  D = R K^T P (lambda I + C_req P)^{-1}
//
// with R = V_req - W_out K_req and P the projector onto the null space of
// C_const. Both are computed by solving symmetric systems; nothing is
// explicitly inverted.

#include "lamedit/covariance.hpp"
#include "lamedit/container.hpp"
#include "lamedit/model.hpp"
#include "lamedit/parallel.hpp"

#include <Eigen/Eigenvalues>

#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace lamedit {

// Reciprocal condition estimates below this are treated as singular.
inline constexpr double kMinRcond = 1e-13;

struct DeltaMatrix {
  int layer = 0;
  LanguageId language_id;
  Matrix d;  // d x h
  SolverMethod method = SolverMethod::kMemit;
  CovMode cov_mode = CovMode::kPerLanguage;
};

struct NullProjector {
  Matrix p;  // h x h
  double rel_tol = 0.0;
  Index null_dim = 0;
};

namespace detail {

// Solves A X = B for symmetric positive semidefinite A.
inline Matrix solve_spd(const Matrix& a, const Matrix& b, const char* what) {
  Eigen::LDLT<Matrix> ldlt(a);
  const double rcond = ldlt.info() == Eigen::Success ? ldlt.rcond() : 0.0;
  if (!(rcond >= kMinRcond)) {
    throw IllConditionedError(std::string(what) + ": system matrix is singular or ill-conditioned",
                              rcond > 0.0 ? 1.0 / rcond : std::numeric_limits<double>::infinity());
  }
  Matrix x = ldlt.solve(b);
  if (!x.allFinite()) throw NumericalError(std::string(what) + ": non-finite solution");
  return x;
}

inline void check_edit_shapes(const Matrix& w_out, const Matrix& k_req, const Matrix& v_req, const Matrix& c_req) {
  require_shape(k_req.rows() == w_out.cols(), "K_req must have h rows");
  require_shape(v_req.rows() == w_out.rows(), "V_req must have d rows");
  require_shape(v_req.cols() == k_req.cols(), "K_req and V_req must have the same number of columns");
  require_shape(c_req.rows() == w_out.cols() && c_req.cols() == w_out.cols(), "C_req must be h x h");
}

}  // namespace detail

inline Matrix solve_memit(const Matrix& w_out, const Matrix& k_req, const Matrix& v_req, const Matrix& c_const,
                          const Matrix& c_req, double lambda) {
  detail::check_edit_shapes(w_out, k_req, v_req, c_req);
  require_shape(c_const.rows() == w_out.cols() && c_const.cols() == w_out.cols(), "C_const must be h x h");
  const Matrix residual = v_req - w_out * k_req;
  const Matrix a = lambda * c_const + c_req;
  // A D^T = K R^T, A symmetric.
  return detail::solve_spd(a, k_req * residual.transpose(), "solve_memit").transpose();
}

inline NullProjector nullspace_projector(const Matrix& c_const, double rel_tol) {
  require_shape(c_const.rows() == c_const.cols(), "C_const must be square");
  const double scale = c_const.norm();
  if ((c_const - c_const.transpose()).norm() > 1e-9 * std::max(scale, 1e-300))
    throw NumericalError("nullspace_projector: C_const is not symmetric");
  const Index h = c_const.rows();
  if (scale == 0.0) return {Matrix::Identity(h, h), rel_tol, h};

  Eigen::SelfAdjointEigenSolver<Matrix> eig(c_const);
  if (eig.info() != Eigen::Success) throw NumericalError("nullspace_projector: eigendecomposition failed");
  const Vector& values = eig.eigenvalues();  // ascending
  const double cutoff = rel_tol * values.maxCoeff();
  Index null_dim = 0;
  while (null_dim < h && values(null_dim) <= cutoff) ++null_dim;
  const Matrix basis = eig.eigenvectors().leftCols(null_dim);
  return {basis * basis.transpose(), rel_tol, null_dim};
}

// Uses P (lambda I + C P)^{-1} = (lambda I + P C P)^{-1} P, which turns the
// system symmetric; see the dual-route test for the direct form.
inline Matrix solve_alphaedit(const Matrix& w_out, const Matrix& k_req, const Matrix& v_req, const NullProjector& proj,
                              const Matrix& c_req, double lambda) {
  detail::check_edit_shapes(w_out, k_req, v_req, c_req);
  const Index h = w_out.cols();
  require_shape(proj.p.rows() == h && proj.p.cols() == h, "null projector must be h x h");
  const Matrix& p = proj.p;
  const Matrix residual = v_req - w_out * k_req;
  Matrix m = p * c_req * p;
  m.diagonal().array() += lambda;
  const Matrix y = detail::solve_spd(m, k_req * residual.transpose(), "solve_alphaedit");
  return (p * y).transpose();
}

// ---------------------------------------------------------------------------
// delta sets
// ---------------------------------------------------------------------------

class DeltaSet {
 public:
  DeltaSet() = default;
  DeltaSet(SolverMethod method, CovMode cov_mode, std::vector<int> layers, std::vector<LanguageId> languages)
      : method_(method), cov_mode_(cov_mode), layers_(std::move(layers)), languages_(std::move(languages)) {
    entries_.resize(layers_.size() * languages_.size());
  }

  SolverMethod method() const { return method_; }
  CovMode cov_mode() const { return cov_mode_; }
  const std::vector<int>& layers() const { return layers_; }
  const std::vector<LanguageId>& languages() const { return languages_; }
  std::size_t num_languages() const { return languages_.size(); }

  DeltaMatrix& at(std::size_t layer_pos, std::size_t lang_pos) { return entries_[layer_pos * languages_.size() + lang_pos]; }
  const DeltaMatrix& at(std::size_t layer_pos, std::size_t lang_pos) const {
    return entries_[layer_pos * languages_.size() + lang_pos];
  }

  // Deltas of one layer in ascending language order.
  std::vector<Matrix> layer_deltas(std::size_t layer_pos) const {
    std::vector<Matrix> out;
    out.reserve(languages_.size());
    for (std::size_t i = 0; i < languages_.size(); ++i) out.push_back(at(layer_pos, i).d);
    return out;
  }

  // Restriction to a prefix of languages; used by the m=1 identity checks.
  DeltaSet first_languages(std::size_t m) const {
    if (m == 0 || m > languages_.size()) throw ConfigError("first_languages: bad language count");
    DeltaSet out(method_, cov_mode_, layers_, {languages_.begin(), languages_.begin() + static_cast<std::ptrdiff_t>(m)});
    for (std::size_t l = 0; l < layers_.size(); ++l)
      for (std::size_t i = 0; i < m; ++i) out.at(l, i) = at(l, i);
    return out;
  }

  static std::string entry_name(SolverMethod method, CovMode mode, int layer, LanguageId lang) {
    return "delta/" + lower(to_string(method)) + "/" + std::string(to_string(mode)) + "/layer" +
           std::to_string(layer) + "/lang" + std::to_string(lang.value);
  }

  void append_to(MatrixContainer& c) const {
    for (std::size_t l = 0; l < layers_.size(); ++l)
      for (std::size_t i = 0; i < languages_.size(); ++i)
        c.put(entry_name(method_, cov_mode_, layers_[l], languages_[i]), at(l, i).d);
  }

  static DeltaSet read_from(const MatrixContainer& c, SolverMethod method, CovMode mode, std::vector<int> layers,
                            std::vector<LanguageId> languages) {
    DeltaSet out(method, mode, std::move(layers), std::move(languages));
    for (std::size_t l = 0; l < out.layers_.size(); ++l)
      for (std::size_t i = 0; i < out.languages_.size(); ++i)
        out.at(l, i) = {out.layers_[l], out.languages_[i],
                        c.get(entry_name(method, mode, out.layers_[l], out.languages_[i])), method, mode};
    return out;
  }

 private:
  SolverMethod method_ = SolverMethod::kMemit;
  CovMode cov_mode_ = CovMode::kPerLanguage;
  std::vector<int> layers_;
  std::vector<LanguageId> languages_;
  std::vector<DeltaMatrix> entries_;
};

struct SolverSettings {
  SolverMethod method = SolverMethod::kMemit;
  double lambda = 1.0;
  double rel_tol = 1e-6;

  static constexpr double kDefaultMemitLambda = 1.0;
  static constexpr double kDefaultAlphaEditLambda = 0.1;

  static SolverSettings defaults_for(SolverMethod m) {
    return {m, m == SolverMethod::kMemit ? kDefaultMemitLambda : kDefaultAlphaEditLambda, 1e-6};
  }
};

// Preserved-knowledge statistics of every edit layer, measured on the
// unedited model.
struct PreservedStats {
  std::vector<int> layers;
  std::vector<ConstStats> per_layer;

  const ConstStats& for_layer(int layer) const {
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i] == layer) return per_layer[i];
    throw ConfigError("no preserved statistics for layer " + std::to_string(layer));
  }

  static PreservedStats compute(const ToyModel& model, std::span<const KnownFact> preserved,
                                std::span<const FactId> request_ids) {
    PreservedStats s;
    s.layers = model.edit_layers();
    for (int l : s.layers) s.per_layer.push_back(const_stats(model, preserved, l, request_ids));
    return s;
  }
};

// Language-wise editing matrices for every edit layer, bottom to top.
//
// The model is never mutated. Each language starts from the original
// weights. Keys and targets at layer l are taken on a working state that
// already carries the lower-layer deltas: with per-language covariance that
// state holds only the language's own deltas; with shared covariance (which
// poses one joint problem over all languages) it holds the sum of every
// language's deltas.
//
// preserved holds either one statistics set used by every language or one
// set per language, in the order of per_language.
inline DeltaSet edit_model(const ToyModel& model, std::span<const std::vector<EditRequest>> per_language,
                           const SolverSettings& settings, CovMode cov_mode,
                           std::span<const PreservedStats> preserved, std::size_t workers = 1) {
  if (per_language.empty()) throw InvalidRequestError("edit_model: no languages");
  if (preserved.size() != 1 && preserved.size() != per_language.size())
    throw ConfigError("edit_model: need one preserved statistics set or one per language");
  std::vector<LanguageId> langs;
  for (const auto& batch : per_language) {
    if (batch.empty()) throw InvalidRequestError("edit_model: empty request batch");
    for (const auto& r : batch)
      if (r.language_id != batch.front().language_id) throw InvalidRequestError("edit_model: batch mixes languages");
    langs.push_back(batch.front().language_id);
  }
  const auto& layers = model.edit_layers();
  DeltaSet out(settings.method, cov_mode, layers, langs);
  const std::size_t m = per_language.size();

  std::vector<ToyModel> states(cov_mode == CovMode::kShared ? 1 : m, model);
  auto state_of = [&](std::size_t i) -> ToyModel& { return cov_mode == CovMode::kShared ? states[0] : states[i]; };

  for (std::size_t lp = 0; lp < layers.size(); ++lp) {
    const int layer = layers[lp];
    auto stats_of = [&](std::size_t i) -> const ConstStats& {
      return preserved[preserved.size() == 1 ? 0 : i].for_layer(layer);
    };

    std::vector<KeyBatch> keys(m);
    std::vector<Matrix> values(m);
    parallel_for(m, workers, [&](std::size_t i) {
      auto kt = state_of(i).compute_keys_and_targets(per_language[i], layer);
      keys[i] = {langs[i], layer, std::move(kt.keys)};
      values[i] = std::move(kt.values);
    });

    std::optional<CovStats> shared;
    if (cov_mode == CovMode::kShared) shared = cov_shared(keys);

    parallel_for(m, workers, [&](std::size_t i) {
      const auto& cs = stats_of(i);
      const Matrix& w = state_of(i).layer(layer).w_out;
      const Matrix c_req = shared ? shared->c : cov_per_language(keys[i]).c;
      Matrix d = settings.method == SolverMethod::kMemit
                     ? solve_memit(w, keys[i].keys, values[i], cs.stats.normalized(), c_req, settings.lambda)
                     : solve_alphaedit(w, keys[i].keys, values[i], nullspace_projector(cs.stats.c, settings.rel_tol),
                                       c_req, settings.lambda);
      out.at(lp, i) = {layer, langs[i], std::move(d), settings.method, cov_mode};
    });

    // Ascending language order keeps the shared state bit-reproducible.
    for (std::size_t i = 0; i < m; ++i) state_of(i).add_to_w_out(layer, out.at(lp, i).d);
  }
  return out;
}

inline DeltaSet edit_model(const ToyModel& model, std::span<const std::vector<EditRequest>> per_language,
                           const SolverSettings& settings, CovMode cov_mode, const PreservedStats& preserved,
                           std::size_t workers = 1) {
  return edit_model(model, per_language, settings, cov_mode, std::span<const PreservedStats>(&preserved, 1), workers);
}

}  // namespace lamedit
