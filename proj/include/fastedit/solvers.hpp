#pragma once

// Closed-form weight updates for a single linear layer W (d x d_k).
//
//   MEMIT:  delta = (V - W0 K) K^T (lambda C0 + K K^T + rho I)^-1
//   EMMET:  argmin tr(delta C delta^T)  s.t.  (W0 + delta) K = V
//           with C = C0 + rho I, giving
//           delta = (V - W0 K) (K^T C^-1 K)^-1 K^T C^-1
//   ROME:   EMMET restricted to a single edit.
//
// K holds edit keys as columns (d_k x B), V the target values (d x B), and
// C0 the sum of outer products of preserved keys.

#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "fastedit/errors.hpp"
#include "fastedit/linalg.hpp"

namespace fastedit {

enum class Method { kMemit, kEmmet };

inline std::string_view to_string(Method m) { return m == Method::kMemit ? "MEMIT" : "EMMET"; }

inline Method parse_method(std::string_view s) {
  if (s == "MEMIT" || s == "memit") return Method::kMemit;
  if (s == "EMMET" || s == "emmet") return Method::kEmmet;
  reject("unknown method '" + std::string(s) + "' (expected MEMIT or EMMET)");
}

struct SolverConfig {
  Method method = Method::kMemit;
  double lambda = 1.0;
  double rho = 0.0;
  double rank_tolerance = kDefaultRankTolerance;

  void validate() const {
    if (!(lambda > 0.0) || !std::isfinite(lambda)) reject("SolverConfig: lambda must be positive");
    if (!(rho >= 0.0) || !std::isfinite(rho)) reject("SolverConfig: rho must be nonnegative");
    if (!(rank_tolerance >= 0.0)) reject("SolverConfig: rank_tolerance must be nonnegative");
  }
};

struct EditRequest {
  Matrix keys;    // d_k x B
  Matrix values;  // d x B
  std::vector<std::string> fact_ids;

  std::size_t batch_size() const { return static_cast<std::size_t>(keys.cols()); }

  void validate() const {
    if (keys.cols() < 1) reject("EditRequest: batch must contain at least one edit");
    if (values.cols() != keys.cols()) reject("EditRequest: keys and values disagree on batch size");
    if (!fact_ids.empty() && fact_ids.size() != batch_size()) {
      reject("EditRequest: fact_ids length does not match batch size");
    }
    if (!keys.allFinite() || !values.allFinite()) throw Error(ErrorKind::kData, "EditRequest: non-finite entry");
  }
};

struct EditSolution {
  Matrix delta;
  double memorization_residual = 0.0;  // ||(W0 + delta) K - V||_F
  double preservation_drift = 0.0;     // sqrt(tr(delta C0 delta^T))
  RankReport rank_report;              // of the matrix the solver inverted
  double rho_used = 0.0;
};

// The "theoretical minimum" generalizes the batch-size-one bound d_k - 1 to
// d_k - B: C_eff is a sum of P + B rank-one terms and needs d_k independent
// ones.
struct SolvabilityReport {
  std::size_t d_k = 0;
  std::size_t batch_size = 0;
  std::uint64_t preserved_count = 0;
  std::size_t theoretical_minimum = 0;
  bool meets_minimum = false;
  std::size_t effective_rank = 0;
  bool invertible = false;
};

class SolvabilityError : public Error {
 public:
  SolvabilityError(const std::string& message, SolvabilityReport report)
      : Error(ErrorKind::kSingularSystem, message), report_(report) {}

  const SolvabilityReport& report() const noexcept { return report_; }

 private:
  SolvabilityReport report_;
};

inline std::size_t min_preserved_keys(std::size_t d_k, std::size_t batch_size) {
  return d_k > batch_size ? d_k - batch_size : 0;
}

namespace detail {

inline void check_shapes(const Matrix& w0, const CovarianceAccumulator& cov, const EditRequest& edit) {
  edit.validate();
  const auto d_k = static_cast<Eigen::Index>(cov.dim());
  if (w0.cols() != d_k) reject("edit: W0 column count does not match key dimension");
  if (edit.keys.rows() != d_k) reject("edit: key length does not match covariance dimension");
  if (edit.values.rows() != w0.rows()) reject("edit: value length does not match W0 row count");
}

inline void symmetrize_lower(Matrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < i; ++j) m(j, i) = m(i, j);
  }
}

inline Matrix gram_of_columns(const Matrix& k) {
  Matrix g = k * k.transpose();
  symmetrize_lower(g);
  return g;
}

inline EditSolution finish(const Matrix& w0, const CovarianceAccumulator& cov, const EditRequest& edit,
                           Matrix delta, RankReport rank, double rho) {
  EditSolution sol;
  sol.memorization_residual = ((w0 + delta) * edit.keys - edit.values).norm();
  const Matrix c0 = cov.sum_outer();
  const double drift2 = (delta * c0).cwiseProduct(delta).sum();
  sol.preservation_drift = std::sqrt(std::max(0.0, drift2));
  sol.delta = std::move(delta);
  sol.rank_report = rank;
  sol.rho_used = rho;
  return sol;
}

}  // namespace detail

/// lambda * C0 + K K^T + rho * I, exactly symmetric.
inline Matrix effective_matrix(const CovarianceAccumulator& cov, double lambda, const EditRequest& edit,
                               double rho) {
  if (edit.keys.rows() != static_cast<Eigen::Index>(cov.dim())) {
    reject("effective_matrix: key length does not match covariance dimension");
  }
  Matrix c = lambda * cov.sum_outer();
  c += detail::gram_of_columns(edit.keys);
  c.diagonal().array() += rho;
  detail::symmetrize_lower(c);
  return c;
}

inline SolvabilityReport check_solvability(const CovarianceAccumulator& cov, const EditRequest& edit,
                                           double lambda, double rho, double tol = kDefaultRankTolerance) {
  SolvabilityReport r;
  r.d_k = cov.dim();
  r.batch_size = edit.batch_size();
  r.preserved_count = cov.sample_count();
  r.theoretical_minimum = min_preserved_keys(r.d_k, r.batch_size);
  r.meets_minimum = r.preserved_count >= r.theoretical_minimum;
  const RankReport rank = numeric_rank(effective_matrix(cov, lambda, edit, rho), tol);
  r.effective_rank = rank.numeric_rank;
  r.invertible = rank.invertible;
  return r;
}

inline EditSolution memit_delta(const Matrix& w0, const CovarianceAccumulator& cov, const EditRequest& edit,
                                const SolverConfig& config) {
  config.validate();
  if (config.method != Method::kMemit) reject("memit_delta: config.method must be MEMIT");
  detail::check_shapes(w0, cov, edit);

  const Matrix c_eff = effective_matrix(cov, config.lambda, edit, config.rho);
  const Matrix predicted = w0 * edit.keys;
  const Matrix residual = edit.values - predicted;  // d x B
  Matrix x;
  try {
    // C_eff X = K R^T, so delta = X^T = R K^T C_eff^-1.
    x = solve_spd(c_eff, edit.keys * residual.transpose());
  } catch (const SingularSystemError& e) {
    throw SolvabilityError(std::string("memit_delta: C_eff is singular (") + e.what() + ")",
                           check_solvability(cov, edit, config.lambda, config.rho, config.rank_tolerance));
  }
  Matrix delta = x.transpose();
  return detail::finish(w0, cov, edit, std::move(delta), numeric_rank(c_eff, config.rank_tolerance),
                        config.rho);
}

inline EditSolution emmet_delta(const Matrix& w0, const CovarianceAccumulator& cov, const EditRequest& edit,
                                const SolverConfig& config) {
  config.validate();
  detail::check_shapes(w0, cov, edit);

  const RankReport key_rank =
      numeric_rank(detail::gram_of_columns(edit.keys.transpose()), config.rank_tolerance);
  if (!key_rank.invertible) {
    throw Error(ErrorKind::kInfeasibleConstraint,
                "emmet_delta: edit keys are linearly dependent (rank " + std::to_string(key_rank.numeric_rank) +
                    " of " + std::to_string(edit.batch_size()) + ")");
  }

  Matrix c = cov.sum_outer();
  c.diagonal().array() += config.rho;
  const Matrix predicted = w0 * edit.keys;
  const Matrix residual = edit.values - predicted;  // d x B

  Matrix y;  // C^-1 K, d_k x B
  try {
    y = solve_spd(c, edit.keys);
  } catch (const SingularSystemError& e) {
    throw SolvabilityError(std::string("emmet_delta: preserved covariance is singular (") + e.what() + ")",
                           check_solvability(cov, edit, config.lambda, config.rho, config.rank_tolerance));
  }
  Matrix g = edit.keys.transpose() * y;  // K^T C^-1 K, B x B
  detail::symmetrize_lower(g);
  Matrix z;  // G^-1 R^T, B x d
  try {
    z = solve_spd(g, residual.transpose());
  } catch (const SingularSystemError& e) {
    throw SolvabilityError(std::string("emmet_delta: constraint Gram matrix is singular (") + e.what() + ")",
                           check_solvability(cov, edit, config.lambda, config.rho, config.rank_tolerance));
  }
  Matrix delta = z.transpose() * y.transpose();
  return detail::finish(w0, cov, edit, std::move(delta), numeric_rank(c, config.rank_tolerance), config.rho);
}

inline EditSolution rome_delta(const Matrix& w0, const CovarianceAccumulator& cov, const EditRequest& single_edit,
                               const SolverConfig& config) {
  if (single_edit.keys.cols() != 1) reject("rome_delta: exactly one edit required");
  return emmet_delta(w0, cov, single_edit, config);
}

inline EditSolution solve_edit(const Matrix& w0, const CovarianceAccumulator& cov, const EditRequest& edit,
                               const SolverConfig& config) {
  return config.method == Method::kMemit ? memit_delta(w0, cov, edit, config)
                                         : emmet_delta(w0, cov, edit, config);
}

struct ObjectiveTerms {
  double preservation = 0.0;  // lambda * tr(delta C0 delta^T)
  double memorization = 0.0;  // ||W_hat K - V||_F^2
};

/// Both terms of the editing objective. The preservation term uses the
/// trace identity ||delta K0||_F^2 = tr(delta C0 delta^T), so only C0 is
/// needed.
inline ObjectiveTerms objective_value(const Matrix& w_hat, const Matrix& w0, const CovarianceAccumulator& cov,
                                      const EditRequest& edit, double lambda) {
  if (w_hat.rows() != w0.rows() || w_hat.cols() != w0.cols()) reject("objective_value: W_hat and W0 differ in shape");
  detail::check_shapes(w0, cov, edit);
  const Matrix delta = w_hat - w0;
  ObjectiveTerms t;
  t.preservation = lambda * (delta * cov.sum_outer()).cwiseProduct(delta).sum();
  t.memorization = (w_hat * edit.keys - edit.values).squaredNorm();
  return t;
}

}  // namespace fastedit
