#pragma once

// Merging of language-wise editing matrices and the scaled weight update
//
//   W_new = W_old + alpha * f(D^1, ..., D^m)
//
// f is Sum, Mean or TSVM; the -Cov variants use the same arithmetic on deltas
// solved with the shared covariance.

#include "lamedit/core.hpp"
#include "lamedit/model.hpp"
#include "lamedit/solvers.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <span>
#include <vector>

namespace lamedit {

struct MergeConfig {
  MergeMethod method = MergeMethod::kSumCov;
  double alpha = 1.0;
  double rank_ratio = 1.0;

  void validate() const {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("merge alpha must be positive");
    if (!(rank_ratio > 0.0 && rank_ratio <= 1.0)) throw ConfigError("rank ratio must lie in (0, 1]");
  }
};

struct MergedDelta {
  int layer = 0;
  Matrix d;  // d x h
  MergeMethod method = MergeMethod::kSum;
  double rank_ratio = 1.0;
  std::vector<LanguageId> languages;
};

struct TruncatedSvd {
  Matrix u;      // d x k, orthonormal columns
  Vector sigma;  // k, descending
  Matrix vt;     // k x h, orthonormal rows
};

namespace detail {

inline void check_uniform(std::span<const Matrix> deltas) {
  if (deltas.empty()) throw ShapeError("merge needs at least one delta");
  for (const auto& d : deltas)
    require_shape(d.rows() == deltas.front().rows() && d.cols() == deltas.front().cols(),
                  "merge: deltas differ in shape");
}

// Nearest matrix with orthonormal columns (or rows, when wide): P Q^T from
// the thin SVD P D Q^T.
inline Matrix polar_factor(const Matrix& a) {
  Eigen::BDCSVD<Matrix> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  return svd.matrixU() * svd.matrixV().transpose();
}

}  // namespace detail

inline Matrix merge_sum(std::span<const Matrix> deltas) {
  detail::check_uniform(deltas);
  Matrix out = deltas.front();
  for (std::size_t i = 1; i < deltas.size(); ++i) out += deltas[i];
  return out;
}

inline Matrix merge_mean(std::span<const Matrix> deltas) {
  return merge_sum(deltas) / static_cast<double>(deltas.size());
}

// k = floor(r * rows), capped at min(rows, cols). The 1e-9 nudge keeps
// products such as 0.29 * 100 from flooring one short.
inline Index truncation_rank(Index rows, Index cols, double rank_ratio) {
  if (!(rank_ratio > 0.0 && rank_ratio <= 1.0)) throw ConfigError("rank ratio must lie in (0, 1]");
  const auto k = static_cast<Index>(std::floor(rank_ratio * static_cast<double>(rows) + 1e-9));
  return std::min({k, rows, cols});
}

inline TruncatedSvd truncate_svd(const Matrix& d, double rank_ratio) {
  const Index k = truncation_rank(d.rows(), d.cols(), rank_ratio);
  if (k < 1)
    throw ConfigError("rank ratio " + std::to_string(rank_ratio) + " keeps no singular values for " +
                      std::to_string(d.rows()) + " rows");
  Eigen::BDCSVD<Matrix> svd(d, Eigen::ComputeThinU | Eigen::ComputeThinV);
  return {svd.matrixU().leftCols(k), svd.singularValues().head(k), svd.matrixV().leftCols(k).transpose()};
}

struct TsvmFactors {
  Matrix u_merged;  // d x c
  Vector sigma;     // c
  Matrix v_merged;  // c x h
};

// Truncate each delta, concatenate the factors in language order, replace
// the concatenated singular-vector blocks by their polar factors and
// reconstruct. Components with zero singular value carry no update and are
// left out of the concatenation.
inline TsvmFactors tsvm_factors(std::span<const Matrix> deltas, double rank_ratio) {
  detail::check_uniform(deltas);
  std::vector<TruncatedSvd> parts;
  parts.reserve(deltas.size());
  double top = 0.0;
  for (const auto& d : deltas) {
    parts.push_back(truncate_svd(d, rank_ratio));
    if (parts.back().sigma.size() > 0) top = std::max(top, parts.back().sigma(0));
  }
  const double floor = top * 1e-14;
  Index total = 0;
  for (const auto& p : parts)
    for (Index j = 0; j < p.sigma.size(); ++j)
      if (p.sigma(j) > floor) ++total;

  const Index rows = deltas.front().rows();
  const Index cols = deltas.front().cols();
  TsvmFactors f;
  if (total == 0) {
    f.u_merged = Matrix::Zero(rows, 0);
    f.sigma = Vector::Zero(0);
    f.v_merged = Matrix::Zero(0, cols);
    return f;
  }
  Matrix u_concat(rows, total);
  Matrix v_concat(total, cols);
  f.sigma.resize(total);
  Index c = 0;
  for (const auto& p : parts) {
    for (Index j = 0; j < p.sigma.size(); ++j) {
      if (p.sigma(j) <= floor) continue;
      u_concat.col(c) = p.u.col(j);
      v_concat.row(c) = p.vt.row(j);
      f.sigma(c) = p.sigma(j);
      ++c;
    }
  }
  f.u_merged = detail::polar_factor(u_concat);
  f.v_merged = detail::polar_factor(v_concat);
  return f;
}

inline Matrix merge_tsvm(std::span<const Matrix> deltas, double rank_ratio) {
  const auto f = tsvm_factors(deltas, rank_ratio);
  if (f.sigma.size() == 0) return Matrix::Zero(deltas.front().rows(), deltas.front().cols());
  return f.u_merged * f.sigma.asDiagonal() * f.v_merged;
}

// Relative Frobenius change of the TSVM merge when the language order is
// reversed. Sum and Mean are order-free; TSVM need not be.
inline double tsvm_order_sensitivity(std::span<const Matrix> deltas, double rank_ratio) {
  std::vector<Matrix> reversed(deltas.rbegin(), deltas.rend());
  const Matrix a = merge_tsvm(deltas, rank_ratio);
  const Matrix b = merge_tsvm(reversed, rank_ratio);
  const double n = a.norm();
  return n == 0.0 ? (b.norm() == 0.0 ? 0.0 : 1.0) : (a - b).norm() / n;
}

inline Matrix merge_matrices(MergeMethod method, std::span<const Matrix> deltas, double rank_ratio) {
  switch (method) {
    case MergeMethod::kSum:
    case MergeMethod::kSumCov: return merge_sum(deltas);
    case MergeMethod::kMean:
    case MergeMethod::kMeanCov: return merge_mean(deltas);
    case MergeMethod::kTsvm:
    case MergeMethod::kTsvmCov: return merge_tsvm(deltas, rank_ratio);
  }
  throw ConfigError("unknown merge method");
}

inline std::vector<MergedDelta> merge(const MergeConfig& config, const DeltaSet& delta_set) {
  config.validate();
  if (delta_set.cov_mode() != required_cov_mode(config.method))
    throw ConfigError(std::string(to_string(config.method)) + " needs deltas solved with " +
                      std::string(to_string(required_cov_mode(config.method))) + " covariance, got " +
                      std::string(to_string(delta_set.cov_mode())));
  std::vector<MergedDelta> out;
  out.reserve(delta_set.layers().size());
  for (std::size_t l = 0; l < delta_set.layers().size(); ++l) {
    const auto deltas = delta_set.layer_deltas(l);
    out.push_back({delta_set.layers()[l], merge_matrices(config.method, deltas, config.rank_ratio), config.method,
                   config.rank_ratio, delta_set.languages()});
  }
  return out;
}

// Copy of the model with W_out^l += alpha * D_merged^l. alpha = 0 returns
// the original weights untouched.
inline ToyModel apply_update(const ToyModel& model, std::span<const MergedDelta> merged, double alpha) {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("apply_update: alpha must be non-negative");
  ToyModel out = model;
  if (alpha == 0.0) return out;
  for (const auto& md : merged) {
    if (!model.is_edit_layer(md.layer))
      throw ConfigError("apply_update: layer " + std::to_string(md.layer) + " is not an edit layer");
    out.add_to_w_out(md.layer, md.d, alpha);
  }
  return out;
}

inline std::string merged_entry_name(const MergedDelta& md) {
  return "merged/" + lower(to_string(md.method)) + "/layer" + std::to_string(md.layer);
}

inline void append_merged(MatrixContainer& c, std::span<const MergedDelta> merged) {
  for (const auto& md : merged) c.put(merged_entry_name(md), md.d);
}

}  // namespace lamedit
