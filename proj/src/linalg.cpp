#include "dwcca/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

#include "dwcca/errors.hpp"

namespace dwcca::linalg {

namespace {
constexpr double kPivotTol = 1e-12;
constexpr int kMaxJacobiSweeps = 100;
}  // namespace

SpdMatrix::SpdMatrix(Matrix m) : m_(std::move(m)) {
  if (m_.rows() != m_.cols())
    throw DimensionMismatch("SpdMatrix: not square (" +
                            std::to_string(m_.rows()) + "x" +
                            std::to_string(m_.cols()) + ")");
  const double scale = std::max(m_.max_abs(), 1e-300);
  for (std::size_t i = 0; i < m_.rows(); ++i)
    for (std::size_t j = i + 1; j < m_.cols(); ++j)
      if (std::abs(m_(i, j) - m_(j, i)) > 1e-10 * scale)
        throw NotSymmetric("SpdMatrix: asymmetry at (" + std::to_string(i) +
                           "," + std::to_string(j) + ")");
}

Matrix cholesky_lower(const SpdMatrix& a) {
  const std::size_t n = a.dim();
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (d <= kPivotTol) {
      throw NotPositiveDefinite("cholesky: pivot " + std::to_string(d) +
                                " at column " + std::to_string(j) +
                                " (raise the ridge epsilon)");
    }
    l(j, j) = std::sqrt(d);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / l(j, j);
    }
  }
  return l;
}

Matrix cholesky_solve(const Matrix& l, const Matrix& b) {
  const std::size_t n = l.rows();
  if (b.rows() != n) throw DimensionMismatch("cholesky_solve: rhs rows");
  Matrix x = b;
  // forward: L y = b
  for (std::size_t j = 0; j < b.cols(); ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = x(i, j);
      for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * x(k, j);
      x(i, j) = s / l(i, i);
    }
    // backward: L^T x = y
    for (std::size_t ii = n; ii-- > 0;) {
      double s = x(ii, j);
      for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * x(k, j);
      x(ii, j) = s / l(ii, ii);
    }
  }
  return x;
}

SpdMatrix spd_inverse(const SpdMatrix& a) {
  const Matrix l = cholesky_lower(a);
  Matrix inv = cholesky_solve(l, Matrix::identity(a.dim()));
  return SpdMatrix(symmetrize(inv));
}

namespace {

double off_diagonal_frobenius(const Matrix& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      if (i != j) s += a(i, j) * a(i, j);
  return std::sqrt(s);
}

}  // namespace

EigenDecomposition sym_eigen(const Matrix& a_in) {
  if (a_in.rows() != a_in.cols())
    throw DimensionMismatch("sym_eigen: not square");
  const std::size_t n = a_in.rows();
  Matrix a = symmetrize(a_in);
  Matrix v = Matrix::identity(n);
  const double norm = a.frobenius_norm();
  const double tol = 1e-12 * std::max(norm, 1e-300);

  int sweep = 0;
  while (off_diagonal_frobenius(a) > tol) {
    if (++sweep > kMaxJacobiSweeps)
      throw NoConvergence("sym_eigen: Jacobi exceeded " +
                          std::to_string(kMaxJacobiSweeps) + " sweeps");
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        const double tau = s / (1.0 + c);
        const double app = a(p, p), aqq = a(q, q);
        a(p, p) = app - t * apq;
        a(q, q) = aqq + t * apq;
        a(p, q) = a(q, p) = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
          if (r != p && r != q) {
            const double arp = a(r, p), arq = a(r, q);
            a(r, p) = a(p, r) = arp - s * (arq + tau * arp);
            a(r, q) = a(q, r) = arq + s * (arp - tau * arq);
          }
          const double vrp = v(r, p), vrq = v(r, q);
          v(r, p) = vrp - s * (vrq + tau * vrp);
          v(r, q) = vrq + s * (vrp - tau * vrq);
        }
      }
    }
  }

  // sort descending; stable so equal eigenvalues keep rotation order
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    return a(i, i) > a(j, j);
  });

  EigenDecomposition e;
  e.eigenvalues.resize(n);
  e.eigenvectors = Matrix(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t src = order[k];
    e.eigenvalues[k] = a(src, src);
    // sign fix: largest-magnitude component positive, lowest index on ties
    std::size_t arg = 0;
    double best = -1.0;
    for (std::size_t r = 0; r < n; ++r) {
      const double mag = std::abs(v(r, src));
      if (mag > best + 1e-15) {
        best = mag;
        arg = r;
      }
    }
    const double sign = v(arg, src) < 0.0 ? -1.0 : 1.0;
    for (std::size_t r = 0; r < n; ++r) e.eigenvectors(r, k) = sign * v(r, src);
  }
  return e;
}

Matrix covariance(const Matrix& x) {
  const std::size_t n = x.rows(), d = x.cols();
  if (n == 0) throw DegenerateInput("covariance: empty input");
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += x(i, j);
  for (auto& m : mean) m /= static_cast<double>(n);
  Matrix cov(d, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < d; ++a) {
      const double da = x(i, a) - mean[a];
      for (std::size_t b = a; b < d; ++b)
        cov(a, b) += da * (x(i, b) - mean[b]);
    }
  }
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = a; b < d; ++b) {
      cov(a, b) /= static_cast<double>(n);
      cov(b, a) = cov(a, b);
    }
  return cov;
}

Pca pca_fit(const Matrix& x, std::size_t k) {
  if (x.rows() < 2)
    throw DegenerateInput("pca_fit: need at least 2 rows, got " +
                          std::to_string(x.rows()));
  const std::size_t d = x.cols();
  if (k == 0 || k > d) throw DimensionMismatch("pca_fit: bad component count");

  Pca p;
  p.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < d; ++j) p.mean[j] += x(i, j);
  for (auto& m : p.mean) m /= static_cast<double>(x.rows());

  const EigenDecomposition e = sym_eigen(covariance(x));
  p.basis = Matrix(d, k);
  p.explained_variance.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    p.explained_variance[c] = e.eigenvalues[c];
    for (std::size_t r = 0; r < d; ++r) p.basis(r, c) = e.eigenvectors(r, c);
  }
  return p;
}

Matrix pca_project(const Pca& pca, const Matrix& x) {
  if (x.cols() != pca.mean.size())
    throw DimensionMismatch("pca_project: input dim " +
                            std::to_string(x.cols()) + " vs basis dim " +
                            std::to_string(pca.mean.size()));
  const std::size_t n = x.rows(), k = pca.basis.cols();
  Matrix out(n, k);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < x.cols(); ++j)
        s += (x(i, j) - pca.mean[j]) * pca.basis(j, c);
      out(i, c) = s;
    }
  return out;
}

}  // namespace dwcca::linalg
