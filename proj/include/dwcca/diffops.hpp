#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dwcca/linalg.hpp"
#include "dwcca/matrix.hpp"

namespace dwcca::diffops {

// Reverse-mode rules for the fixed operation chain of the DWCCA layer.
// No general tape/graph: the layer composes these by hand.
//
// Convention for symmetric inputs: cotangents are symmetrized, and the
// finite-difference oracle perturbs symmetric matrices symmetrically
// (both (i,j) and (j,i) move together; off-diagonal sensitivities are
// halved so <grad, dA> matches directional derivatives).

// Forward y = a*b. Returns (a_bar, b_bar) = (ybar*b^T, a^T*ybar).
std::pair<Matrix, Matrix> matmul_vjp(const Matrix& a, const Matrix& b,
                                     const Matrix& ybar);

// Forward y = a^-1 for SPD a. a_bar = -a^-1 * ybar * a^-1, symmetrized.
Matrix spd_inverse_vjp(const linalg::SpdMatrix& a, const Matrix& ybar);

// Same rule with the inverse already at hand (the layer caches it).
Matrix spd_inverse_vjp_from_inverse(const Matrix& a_inv, const Matrix& ybar);

// Forward l = cholesky_lower(a). Input is the factor l and the cotangent
// l_bar (only its lower triangle is read); returns the symmetric cotangent
// with respect to a. Unblocked reverse recurrence in the Smith (1995)
// lineage. Throws SingularFactor when a diagonal of l is below 1e-12.
Matrix cholesky_vjp(const Matrix& l, const Matrix& l_bar);

// Forward s = within_class_cov(w, labels): Eq-style two-level class average
// (1/C) sum_c (1/N_c) sum_i (w_i - mean_c)(w_i - mean_c)^T over the classes
// present in `labels`. Every present class needs >= 2 samples.
Matrix within_class_cov(const Matrix& w, const std::vector<int>& labels);

// Backward of within_class_cov, including the mean-subtraction path.
Matrix within_class_cov_vjp(const Matrix& w, const std::vector<int>& labels,
                            const Matrix& s_bar);

struct GradCheckReport {
  std::string op;
  double max_rel_err = 0.0;
  double tol = 0.0;
  bool pass = false;
};

// ---- finite-difference harness (test oracle, kept independent of the
// ---- vjp implementations above) ----

// Central differences of a scalar field over a flat parameter vector.
std::vector<double> fd_grad(const std::function<double(const std::vector<double>&)>& f,
                            std::vector<double> x, double h = 1e-5);

// Gradient of f over free matrix entries.
Matrix fd_grad_matrix(const std::function<double(const Matrix&)>& f,
                      const Matrix& x, double h = 1e-5);

// Gradient of f over a symmetric matrix in the symmetrized convention.
Matrix fd_grad_symmetric(const std::function<double(const Matrix&)>& f,
                         const Matrix& x, double h = 1e-5);

// max|g_ad - g_fd| / (max|g_fd| + 1e-12)
double relative_error(const Matrix& g_ad, const Matrix& g_fd);

// Named checks used by the `gradcheck` CLI subcommand; each draws a
// well-conditioned random point from `seed` and compares its vjp against
// central differences. Known ops: matmul, spd_inverse, cholesky,
// within_class_cov, dwcca_backward, composed_chain.
GradCheckReport finite_diff_check(const std::string& op, std::uint64_t seed);

const std::vector<std::string>& gradcheck_op_names();

}  // namespace dwcca::diffops
