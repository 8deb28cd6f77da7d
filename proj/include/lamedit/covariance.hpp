#pragma once

// Request-key matrices and their second-moment statistics, per language or
// pooled across languages, plus the preserved-knowledge statistics.

#include "lamedit/model.hpp"

#include <set>
#include <span>
#include <vector>

namespace lamedit {

struct KeyBatch {
  LanguageId language_id;
  int layer = 0;
  Matrix keys;  // h x n
};

struct CovStats {
  Matrix c;  // h x h
  std::size_t sample_count = 0;
  CovMode mode = CovMode::kPerLanguage;

  bool empty() const { return sample_count == 0; }

  // C divided by its sample count; zero matrix when there are no samples.
  Matrix normalized() const {
    if (sample_count == 0) return Matrix::Zero(c.rows(), c.cols());
    return c / static_cast<double>(sample_count);
  }
};

struct ConstStats {
  CovStats stats;
  Matrix keys;  // h x p, p may be zero
};

namespace detail {

inline Matrix key_matrix(const ToyModel& model, std::span<const Vector> inputs, int layer) {
  model.check_layer(layer);
  Matrix k(model.ffn_dim(), static_cast<Index>(inputs.size()));
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto trace = model.forward(inputs[i]);
    k.col(static_cast<Index>(i)) = trace.keys[static_cast<std::size_t>(layer - 1)];
  }
  return k;
}

}  // namespace detail

// Keys of arbitrary requests at one layer, no language grouping.
inline Matrix key_matrix_of(const ToyModel& model, std::span<const EditRequest> requests, int layer) {
  std::vector<Vector> inputs;
  inputs.reserve(requests.size());
  for (const auto& r : requests) inputs.push_back(r.input);
  return detail::key_matrix(model, inputs, layer);
}

inline KeyBatch request_keys(const ToyModel& model, std::span<const EditRequest> requests, int layer) {
  if (requests.empty()) throw InvalidRequestError("request_keys: empty request batch");
  std::vector<Vector> inputs;
  inputs.reserve(requests.size());
  for (const auto& r : requests) {
    if (r.language_id != requests.front().language_id)
      throw InvalidRequestError("request_keys: batch mixes languages");
    inputs.push_back(r.input);
  }
  return {requests.front().language_id, layer, detail::key_matrix(model, inputs, layer)};
}

inline CovStats cov_per_language(const KeyBatch& kb) {
  return {kb.keys * kb.keys.transpose(), static_cast<std::size_t>(kb.keys.cols()), CovMode::kPerLanguage};
}

// Sum over batches, accumulated in the order given (callers pass ascending
// language index).
inline CovStats cov_shared(std::span<const KeyBatch> kbs) {
  if (kbs.empty()) throw InvalidRequestError("cov_shared: no key batches");
  const Index h = kbs.front().keys.rows();
  CovStats out{Matrix::Zero(h, h), 0, CovMode::kShared};
  for (const auto& kb : kbs) {
    if (kb.layer != kbs.front().layer) throw InvalidRequestError("cov_shared: key batches come from different layers");
    require_shape(kb.keys.rows() == h, "cov_shared: key batches differ in key dimension");
    out.c.noalias() += kb.keys * kb.keys.transpose();
    out.sample_count += static_cast<std::size_t>(kb.keys.cols());
  }
  return out;
}

inline ConstStats const_stats_from_keys(Matrix keys) {
  ConstStats s;
  s.stats.c = keys * keys.transpose();
  s.stats.sample_count = static_cast<std::size_t>(keys.cols());
  s.stats.mode = CovMode::kShared;
  s.keys = std::move(keys);
  return s;
}

inline ConstStats const_stats(const ToyModel& model, std::span<const KnownFact> preserved, int layer,
                              std::span<const FactId> request_fact_ids) {
  const std::set<FactId> edited(request_fact_ids.begin(), request_fact_ids.end());
  std::vector<Vector> inputs;
  inputs.reserve(preserved.size());
  for (const auto& f : preserved) {
    if (edited.count(f.fact_id) != 0)
      throw InvalidRequestError("const_stats: preserved fact " + std::to_string(f.fact_id.value) +
                                " is also an edit request");
    inputs.push_back(f.input);
  }
  if (inputs.empty()) {
    model.check_layer(layer);
    return const_stats_from_keys(Matrix::Zero(model.ffn_dim(), 0));
  }
  return const_stats_from_keys(detail::key_matrix(model, inputs, layer));
}

}  // namespace lamedit
