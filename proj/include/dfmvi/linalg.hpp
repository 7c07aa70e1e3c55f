#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "dfmvi/errors.hpp"

namespace dfmvi {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace linalg {

inline constexpr double kJitter = 1e-10;
inline constexpr int kMaxJitterAttempts = 3;

inline MatrixXd symmetrize(const MatrixXd& m) { return 0.5 * (m + m.transpose()); }

inline void symmetrize_in_place(MatrixXd& m) { m = 0.5 * (m + m.transpose()).eval(); }

/// Cholesky factor of a symmetric matrix that should be positive definite.
/// Adds kJitter (scaled by the mean diagonal) to the diagonal at most
/// kMaxJitterAttempts times before giving up.
inline Eigen::LLT<MatrixXd> cholesky(const MatrixXd& m, const std::string& context) {
  Eigen::LLT<MatrixXd> llt(m);
  if (llt.info() == Eigen::Success) return llt;
  const double scale = m.rows() > 0 ? std::max(1.0, m.diagonal().cwiseAbs().mean()) : 1.0;
  MatrixXd work = m;
  for (int attempt = 0; attempt < kMaxJitterAttempts; ++attempt) {
    work.diagonal().array() += kJitter * scale;
    llt.compute(work);
    if (llt.info() == Eigen::Success) return llt;
  }
  throw NumericalError("matrix not positive definite after jitter: " + context);
}

inline MatrixXd spd_inverse(const MatrixXd& m, const std::string& context) {
  auto llt = cholesky(m, context);
  MatrixXd inv = llt.solve(MatrixXd::Identity(m.rows(), m.cols()));
  symmetrize_in_place(inv);
  return inv;
}

inline double logdet(const Eigen::LLT<MatrixXd>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

inline double spd_logdet(const MatrixXd& m, const std::string& context) {
  return logdet(cholesky(m, context));
}

/// True when the symmetric part of m has a Cholesky factorization (no jitter).
inline bool is_positive_definite(const MatrixXd& m) {
  Eigen::LLT<MatrixXd> llt(symmetrize(m));
  return llt.info() == Eigen::Success;
}

/// Positive semidefinite up to a tolerance relative to the largest |eigenvalue|.
inline bool is_positive_semidefinite(const MatrixXd& m, double rel_tol = 1e-12) {
  if (m.size() == 0) return true;
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(symmetrize(m), Eigen::EigenvaluesOnly);
  const double scale = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  return es.eigenvalues().minCoeff() >= -rel_tol * scale;
}

/// Extract rows/cols listed in idx.
inline MatrixXd select(const MatrixXd& m, const std::vector<int>& idx) {
  MatrixXd out(idx.size(), idx.size());
  for (std::size_t a = 0; a < idx.size(); ++a)
    for (std::size_t b = 0; b < idx.size(); ++b) out(a, b) = m(idx[a], idx[b]);
  return out;
}

inline VectorXd select(const VectorXd& v, const std::vector<int>& idx) {
  VectorXd out(idx.size());
  for (std::size_t a = 0; a < idx.size(); ++a) out(a) = v(idx[a]);
  return out;
}

/// Scatter a square block back into a zero matrix of size dim.
inline MatrixXd scatter(const MatrixXd& block, const std::vector<int>& idx, Eigen::Index dim) {
  MatrixXd out = MatrixXd::Zero(dim, dim);
  for (std::size_t a = 0; a < idx.size(); ++a)
    for (std::size_t b = 0; b < idx.size(); ++b) out(idx[a], idx[b]) = block(a, b);
  return out;
}

inline VectorXd scatter(const VectorXd& block, const std::vector<int>& idx, Eigen::Index dim) {
  VectorXd out = VectorXd::Zero(dim);
  for (std::size_t a = 0; a < idx.size(); ++a) out(idx[a]) = block(a);
  return out;
}

inline double max_asymmetry(const MatrixXd& m) { return (m - m.transpose()).cwiseAbs().maxCoeff(); }

}  // namespace linalg
}  // namespace dfmvi
