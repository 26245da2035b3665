#pragma once

// Dense linear-algebra substrate: outer-product covariance accumulation,
// symmetric positive-definite solves, numeric rank, and a pseudo-inverse
// reference used by the tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fastedit/errors.hpp"

namespace fastedit {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

inline constexpr double kDefaultRankTolerance = 1e-10;
inline constexpr double kSymmetryTolerance = 1e-12;
inline constexpr double kSolveResidualTolerance = 1e-8;

struct RankReport {
  std::size_t dim = 0;
  std::size_t numeric_rank = 0;
  double tolerance = kDefaultRankTolerance;
  double smallest_retained_singular_value = 0.0;
  bool invertible = false;
};

/// Thrown when a system matrix is numerically singular. Carries the rank
/// diagnosis of the matrix that failed to factor.
class SingularSystemError : public Error {
 public:
  SingularSystemError(const std::string& message, RankReport report)
      : Error(ErrorKind::kSingularSystem, message), report_(report) {}

  const RankReport& rank_report() const noexcept { return report_; }

 private:
  RankReport report_;
};

namespace detail {

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

inline double max_asymmetry(const Matrix& a) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < i; ++j) {
      worst = std::max(worst, std::abs(a(i, j) - a(j, i)));
    }
  }
  return worst;
}

inline void require_symmetric(const Matrix& a, const char* who) {
  if (a.rows() != a.cols()) {
    reject(std::string(who) + ": matrix must be square");
  }
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  if (a.size() > 0 && max_asymmetry(a) > kSymmetryTolerance * scale) {
    reject(std::string(who) + ": matrix is not symmetric");
  }
}

}  // namespace detail

/// Counts singular values above tol * (largest singular value). The input
/// must be symmetric, so singular values are the absolute eigenvalues.
inline RankReport numeric_rank(const Matrix& a, double tol = kDefaultRankTolerance) {
  if (!(tol >= 0.0)) reject("numeric_rank: tolerance must be nonnegative");
  detail::require_symmetric(a, "numeric_rank");
  if (!detail::all_finite(a)) throw Error(ErrorKind::kData, "numeric_rank: non-finite entry");

  RankReport report;
  report.dim = static_cast<std::size_t>(a.rows());
  report.tolerance = tol;
  if (a.rows() == 0) {
    report.invertible = true;
    return report;
  }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(Eigen::MatrixXd(a), Eigen::EigenvaluesOnly);
  const Eigen::VectorXd sv = eig.eigenvalues().cwiseAbs();
  const double largest = sv.maxCoeff();
  double smallest_kept = 0.0;
  std::size_t rank = 0;
  if (largest > 0.0) {
    smallest_kept = largest;
    for (Eigen::Index i = 0; i < sv.size(); ++i) {
      if (sv[i] > tol * largest) {
        ++rank;
        smallest_kept = std::min(smallest_kept, sv[i]);
      }
    }
  }
  report.numeric_rank = rank;
  report.smallest_retained_singular_value = smallest_kept;
  report.invertible = rank == report.dim;
  return report;
}

/// Solves (A + rho*I) X = B by Cholesky factorization. A numerically
/// singular system is reported, never silently regularized: a pivot below
/// the floor or a residual above ||·||_F tolerance raises
/// SingularSystemError with the rank diagnosis of A + rho*I.
inline Matrix solve_spd(const Matrix& a, const Matrix& b, double rho = 0.0) {
  if (!(rho >= 0.0) || !std::isfinite(rho)) reject("solve_spd: rho must be finite and nonnegative");
  detail::require_symmetric(a, "solve_spd");
  if (b.rows() != a.rows()) reject("solve_spd: right-hand side has wrong row count");
  if (!detail::all_finite(a) || !detail::all_finite(b)) {
    throw Error(ErrorKind::kData, "solve_spd: non-finite entry");
  }

  const Eigen::Index n = a.rows();
  Matrix system = a;
  system.diagonal().array() += rho;

  auto singular = [&](const std::string& why) -> SingularSystemError {
    return SingularSystemError("solve_spd: " + why, numeric_rank(system));
  };

  const double max_diag = n > 0 ? system.diagonal().cwiseAbs().maxCoeff() : 0.0;
  constexpr double kPivotFloor = 1e-12;

  // In-place lower Cholesky factor.
  Matrix l = Matrix::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double d = system(j, j);
    for (Eigen::Index p = 0; p < j; ++p) d -= l(j, p) * l(j, p);
    if (!(d > kPivotFloor * max_diag) || !(d > 0.0)) {
      throw singular("pivot " + std::to_string(j) + " below floor");
    }
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (Eigen::Index i = j + 1; i < n; ++i) {
      double s = system(i, j);
      for (Eigen::Index p = 0; p < j; ++p) s -= l(i, p) * l(j, p);
      l(i, j) = s / ljj;
    }
  }

  // Forward then backward substitution, all right-hand sides at once.
  Matrix x = b;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index p = 0; p < i; ++p) x.row(i) -= l(i, p) * x.row(p);
    x.row(i) /= l(i, i);
  }
  for (Eigen::Index i = n - 1; i >= 0; --i) {
    for (Eigen::Index p = i + 1; p < n; ++p) x.row(i) -= l(p, i) * x.row(p);
    x.row(i) /= l(i, i);
  }

  if (!detail::all_finite(x)) throw singular("solution is not finite");
  const double residual = (system * x - b).norm() / std::max(1.0, b.norm());
  if (residual > kSolveResidualTolerance) {
    throw singular("relative residual " + std::to_string(residual) + " exceeds tolerance");
  }
  return x;
}

/// Moore-Penrose pseudo-inverse by a full SVD. Test oracle only; the edit
/// solvers never call it.
inline Matrix pinv_oracle(const Matrix& a) {
  if (!detail::all_finite(a)) throw Error(ErrorKind::kData, "pinv_oracle: non-finite entry");
  if (a.size() == 0) return Matrix::Zero(a.cols(), a.rows());
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(Eigen::MatrixXd(a), Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::VectorXd& s = svd.singularValues();
  const double cutoff = static_cast<double>(std::max(a.rows(), a.cols())) *
                        std::numeric_limits<double>::epsilon() * (s.size() ? s[0] : 0.0);
  Eigen::VectorXd inv = Eigen::VectorXd::Zero(s.size());
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (s[i] > cutoff) inv[i] = 1.0 / s[i];
  }
  const auto k = s.size();
  Matrix result = svd.matrixV().leftCols(k) * inv.asDiagonal() * svd.matrixU().leftCols(k).transpose();
  return result;
}

// Running sum of k k^T over a key stream.
//
// Entries are held as signed 128-bit fixed point with a 2^-64 quantum. Each
// outer-product term is rounded onto that grid once, after which every
// addition is exact integer arithmetic: the accumulated state is independent
// of key order, shard boundaries, and merge tree shape. sum_outer() returns
// the nearest doubles.
class CovarianceAccumulator {
 public:
  __extension__ typedef __int128 Fixed;

  static constexpr int kFractionBits = 64;
  // Keys above this magnitude could overflow the fixed-point range.
  static constexpr double kMaxKeyMagnitude = 1048576.0;  // 2^20

  CovarianceAccumulator() = default;
  explicit CovarianceAccumulator(std::size_t dim) : dim_(dim), packed_(dim * (dim + 1) / 2, 0) {}

  std::size_t dim() const noexcept { return dim_; }
  std::uint64_t sample_count() const noexcept { return count_; }

  void add(std::span<const double> key) {
    if (key.size() != dim_) {
      reject("accumulate_key: key length " + std::to_string(key.size()) +
             " does not match dim " + std::to_string(dim_));
    }
    for (double v : key) {
      if (!std::isfinite(v)) throw Error(ErrorKind::kData, "accumulate_key: non-finite entry");
      if (std::abs(v) > kMaxKeyMagnitude) {
        throw Error(ErrorKind::kData, "accumulate_key: entry magnitude exceeds fixed-point range");
      }
    }
    std::size_t idx = 0;
    for (std::size_t i = 0; i < dim_; ++i) {
      const double ki = key[i];
      for (std::size_t j = 0; j <= i; ++j) {
        add_checked(packed_[idx++], to_fixed(ki * key[j]));
      }
    }
    ++count_;
  }

  void add(const Vector& key) { add(std::span<const double>(key.data(), static_cast<std::size_t>(key.size()))); }

  void merge_from(const CovarianceAccumulator& other) {
    if (other.dim_ != dim_) reject("merge: accumulator dimensions differ");
    for (std::size_t i = 0; i < packed_.size(); ++i) add_checked(packed_[i], other.packed_[i]);
    count_ += other.count_;
  }

  /// Full symmetric dim x dim view of the accumulated sum.
  Matrix sum_outer() const {
    Matrix m(static_cast<Eigen::Index>(dim_), static_cast<Eigen::Index>(dim_));
    std::size_t idx = 0;
    for (std::size_t i = 0; i < dim_; ++i) {
      for (std::size_t j = 0; j <= i; ++j) {
        const double v = to_double(packed_[idx++]);
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
        m(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = v;
      }
    }
    return m;
  }

  /// Packed lower triangle (row-major, j <= i) as doubles.
  std::vector<double> packed_lower() const {
    std::vector<double> out(packed_.size());
    std::transform(packed_.begin(), packed_.end(), out.begin(), to_double);
    return out;
  }

  /// Rebuilds an accumulator from a packed lower triangle. Values produced by
  /// packed_lower() map back onto the fixed-point grid exactly.
  static CovarianceAccumulator from_packed_lower(std::size_t dim, std::span<const double> packed,
                                                 std::uint64_t sample_count) {
    CovarianceAccumulator acc(dim);
    if (packed.size() != acc.packed_.size()) reject("from_packed_lower: wrong element count");
    for (std::size_t i = 0; i < packed.size(); ++i) {
      if (!std::isfinite(packed[i]) || std::abs(packed[i]) >= 0x1p62) {
        throw Error(ErrorKind::kData, "from_packed_lower: value out of range");
      }
      acc.packed_[i] = to_fixed(packed[i]);
    }
    acc.count_ = sample_count;
    return acc;
  }

  /// Copy whose fixed-point state is exactly the sum_outer() doubles, so it
  /// survives a round trip through packed_lower() unchanged.
  CovarianceAccumulator rounded() const { return from_packed_lower(dim_, packed_lower(), count_); }

  bool operator==(const CovarianceAccumulator&) const = default;

 private:
  static Fixed to_fixed(double v) {
    // Scaling by a power of two is exact; nearbyint rounds onto the grid.
    return static_cast<Fixed>(std::nearbyint(std::ldexp(v, kFractionBits)));
  }

  static double to_double(Fixed v) { return std::ldexp(static_cast<double>(v), -kFractionBits); }

  static void add_checked(Fixed& into, Fixed term) {
    if (__builtin_add_overflow(into, term, &into)) {
      throw Error(ErrorKind::kData, "covariance accumulator overflow");
    }
  }

  std::size_t dim_ = 0;
  std::uint64_t count_ = 0;
  std::vector<Fixed> packed_;
};

inline CovarianceAccumulator accumulate_key(CovarianceAccumulator acc, std::span<const double> key) {
  acc.add(key);
  return acc;
}

inline CovarianceAccumulator merge(CovarianceAccumulator a, const CovarianceAccumulator& b) {
  a.merge_from(b);
  return a;
}

}  // namespace fastedit
