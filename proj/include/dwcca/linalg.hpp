#pragma once

#include <vector>

#include "dwcca/matrix.hpp"

namespace dwcca::linalg {

// Square matrix checked for symmetry at construction; positive definiteness
// is established indirectly, by Cholesky succeeding.
class SpdMatrix {
 public:
  explicit SpdMatrix(Matrix m);

  const Matrix& matrix() const { return m_; }
  std::size_t dim() const { return m_.rows(); }
  double operator()(std::size_t i, std::size_t j) const { return m_(i, j); }

 private:
  Matrix m_;
};

struct EigenDecomposition {
  std::vector<double> eigenvalues;  // sorted descending
  Matrix eigenvectors;              // orthonormal columns, matching order
};

// Lower-triangular L with L*L^T = a. Throws NotPositiveDefinite when a pivot
// falls at or below 1e-12.
Matrix cholesky_lower(const SpdMatrix& a);

// Inverse via Cholesky solve against the identity, explicitly symmetrized.
SpdMatrix spd_inverse(const SpdMatrix& a);

// Solve a*x = b using a precomputed Cholesky factor (b may have k columns).
Matrix cholesky_solve(const Matrix& l, const Matrix& b);

// Symmetric eigendecomposition by cyclic Jacobi rotations. Deterministic
// sign convention: each eigenvector's largest-magnitude component is
// positive (lowest index wins ties). Throws NoConvergence after 100 sweeps.
EigenDecomposition sym_eigen(const Matrix& a);

struct Pca {
  std::vector<double> mean;                 // d
  Matrix basis;                             // d x k, orthonormal columns
  std::vector<double> explained_variance;   // k, descending
};

// Fit on rows of x (>= 2 required); components are the top-k eigenvectors
// of the sample covariance (1/n normalization).
Pca pca_fit(const Matrix& x, std::size_t k);

// n x k coordinates of centered x against the basis columns.
Matrix pca_project(const Pca& pca, const Matrix& x);

// Sample covariance of rows (1/n normalization), symmetrized.
Matrix covariance(const Matrix& x);

}  // namespace dwcca::linalg
