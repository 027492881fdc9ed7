#pragma once

#include "drqs/core.hpp"
#include "drqs/stats.hpp"

#include <Eigen/Eigenvalues>

#include <sstream>

namespace drqs {

inline Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

/// Square-root factor S with S S' = C for a covariance that should be PSD.
///
/// C is symmetrized first. A Cholesky factor is tried as is and then with a
/// jitter of at most 1e-8 * trace(C). If both fail the matrix is treated as
/// rank deficient: eigenvalues are clipped at 1e-12 * max eigenvalue, unless the
/// most negative eigenvalue exceeds the jitter budget, which is an error.
inline Matrix covariance_root(const Matrix& c, long where = -1) {
  const Matrix s = symmetrize(c);
  if (!s.allFinite()) throw NumericalError("non-finite covariance", where);
  Eigen::LLT<Matrix> llt(s);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  const double budget = 1e-8 * std::abs(s.trace());
  if (budget > 0.0) {
    llt.compute(s + budget * Matrix::Identity(s.rows(), s.cols()));
    if (llt.info() == Eigen::Success) return llt.matrixL();
  }
  Eigen::SelfAdjointEigenSolver<Matrix> eig(s);
  const Vector& ev = eig.eigenvalues();
  if (ev.minCoeff() < -budget) {
    std::ostringstream msg;
    msg << "covariance is not positive semidefinite (min eigenvalue " << ev.minCoeff() << ")";
    throw NumericalError(msg.str(), where);
  }
  const double floor = 1e-12 * std::max(ev.maxCoeff(), 0.0);
  const Vector clipped = ev.cwiseMax(floor).cwiseSqrt();
  return eig.eigenvectors() * clipped.asDiagonal();
}

inline Vector std_normal_vector(Eigen::Index n, Rng& rng) {
  Vector z(n);
  for (Eigen::Index i = 0; i < n; ++i) z(i) = sample_std_normal(rng);
  return z;
}

inline Vector sample_mvn(const Vector& mean, const Matrix& root, Rng& rng) {
  return mean + root * std_normal_vector(root.cols(), rng);
}

// Draw from N(P^{-1} b, P^{-1}) given a precision matrix P.
inline Vector sample_mvn_canonical(const Vector& b, const Matrix& precision, Rng& rng, long where = -1) {
  Eigen::LLT<Matrix> llt(symmetrize(precision));
  if (llt.info() != Eigen::Success) throw NumericalError("precision matrix is not positive definite", where);
  const Vector mean = llt.solve(b);
  const Vector z = std_normal_vector(b.size(), rng);
  return mean + llt.matrixU().solve(z);
}

inline double min_eigenvalue(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(m), Eigen::EigenvaluesOnly);
  return eig.eigenvalues().minCoeff();
}

}  // namespace drqs
