#pragma once

// Shared vocabulary for the lamedit library: matrix aliases, enums for the
// editing/merging configuration space, and the exception hierarchy.

#include <Eigen/Dense>

#include <cctype>
#include <cstdint>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace lamedit {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

// ---------------------------------------------------------------------------
// errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class InvalidRequestError : public Error {
 public:
  using Error::Error;
};

// Anything that goes wrong inside the numerics: singular systems, fits that
// miss their floor, non-finite results.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class IllConditionedError : public NumericalError {
 public:
  IllConditionedError(const std::string& what, double condition_estimate)
      : NumericalError(what + " (condition estimate " + std::to_string(condition_estimate) + ")"),
        condition_estimate_(condition_estimate) {}

  double condition_estimate() const noexcept { return condition_estimate_; }

 private:
  double condition_estimate_;
};

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

// ---------------------------------------------------------------------------
// strong ids
// ---------------------------------------------------------------------------

struct LanguageId {
  std::uint32_t value = 0;
  friend auto operator<=>(const LanguageId&, const LanguageId&) = default;
};

struct FactId {
  std::uint32_t value = 0;
  friend auto operator<=>(const FactId&, const FactId&) = default;
};

using TokenId = std::uint32_t;

// ---------------------------------------------------------------------------
// configuration enums
// ---------------------------------------------------------------------------

enum class SolverMethod { kMemit, kAlphaEdit };
enum class CovMode { kPerLanguage, kShared };
enum class MergeMethod { kSum, kMean, kTsvm, kSumCov, kMeanCov, kTsvmCov };

inline constexpr std::string_view to_string(SolverMethod m) {
  return m == SolverMethod::kMemit ? "MEMIT" : "AlphaEdit";
}

inline constexpr std::string_view to_string(CovMode c) {
  return c == CovMode::kPerLanguage ? "per-language" : "shared";
}

inline constexpr std::string_view to_string(MergeMethod m) {
  switch (m) {
    case MergeMethod::kSum: return "Sum";
    case MergeMethod::kMean: return "Mean";
    case MergeMethod::kTsvm: return "TSVM";
    case MergeMethod::kSumCov: return "Sum-Cov";
    case MergeMethod::kMeanCov: return "Mean-Cov";
    case MergeMethod::kTsvmCov: return "TSVM-Cov";
  }
  return "?";
}

inline std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline SolverMethod parse_solver_method(std::string_view s) {
  const auto l = lower(s);
  if (l == "memit") return SolverMethod::kMemit;
  if (l == "alphaedit" || l == "alpha-edit") return SolverMethod::kAlphaEdit;
  throw ConfigError("unknown solver method '" + std::string(s) + "' (expected memit|alphaedit)");
}

inline CovMode parse_cov_mode(std::string_view s) {
  const auto l = lower(s);
  if (l == "per-language" || l == "per_language") return CovMode::kPerLanguage;
  if (l == "shared") return CovMode::kShared;
  throw ConfigError("unknown cov mode '" + std::string(s) + "' (expected per-language|shared)");
}

inline MergeMethod parse_merge_method(std::string_view s) {
  const auto l = lower(s);
  if (l == "sum") return MergeMethod::kSum;
  if (l == "mean") return MergeMethod::kMean;
  if (l == "tsvm") return MergeMethod::kTsvm;
  if (l == "sum-cov" || l == "sum_cov") return MergeMethod::kSumCov;
  if (l == "mean-cov" || l == "mean_cov") return MergeMethod::kMeanCov;
  if (l == "tsvm-cov" || l == "tsvm_cov") return MergeMethod::kTsvmCov;
  throw ConfigError("unknown merge method '" + std::string(s) + "'");
}

// The -Cov suffix selects deltas solved against the covariance shared by all
// languages; the merge arithmetic itself is the same.
inline constexpr CovMode required_cov_mode(MergeMethod m) {
  switch (m) {
    case MergeMethod::kSumCov:
    case MergeMethod::kMeanCov:
    case MergeMethod::kTsvmCov: return CovMode::kShared;
    default: return CovMode::kPerLanguage;
  }
}

inline constexpr bool is_tsvm(MergeMethod m) {
  return m == MergeMethod::kTsvm || m == MergeMethod::kTsvmCov;
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace lamedit
