#include "dwcca/diffops.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "dwcca/errors.hpp"
#include "dwcca/rng.hpp"

namespace dwcca::diffops {

std::pair<Matrix, Matrix> matmul_vjp(const Matrix& a, const Matrix& b,
                                     const Matrix& ybar) {
  if (ybar.rows() != a.rows() || ybar.cols() != b.cols() ||
      a.cols() != b.rows())
    throw DimensionMismatch("matmul_vjp: cotangent shape does not match a*b");
  return {matmul(ybar, b.transpose()), matmul(a.transpose(), ybar)};
}

Matrix spd_inverse_vjp_from_inverse(const Matrix& a_inv, const Matrix& ybar) {
  if (ybar.rows() != a_inv.rows() || ybar.cols() != a_inv.cols())
    throw DimensionMismatch("spd_inverse_vjp: cotangent shape");
  Matrix g = matmul(matmul(a_inv, ybar), a_inv);
  g *= -1.0;
  return symmetrize(g);
}

Matrix spd_inverse_vjp(const linalg::SpdMatrix& a, const Matrix& ybar) {
  return spd_inverse_vjp_from_inverse(linalg::spd_inverse(a).matrix(), ybar);
}

Matrix cholesky_vjp(const Matrix& l, const Matrix& l_bar) {
  const std::size_t n = l.rows();
  if (l.cols() != n || l_bar.rows() != n || l_bar.cols() != n)
    throw DimensionMismatch("cholesky_vjp: square factor expected");
  for (std::size_t i = 0; i < n; ++i)
    if (l(i, i) < 1e-12)
      throw SingularFactor("cholesky_vjp: factor diagonal " +
                           std::to_string(l(i, i)) + " at " +
                           std::to_string(i));

  // unblocked reverse recurrence over columns, high to low
  Matrix ab(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) ab(i, j) = l_bar(i, j);

  for (std::size_t kk = n; kk-- > 0;) {
    const std::size_t k = kk;
    double dot = 0.0;
    for (std::size_t i = k + 1; i < n; ++i) dot += l(i, k) * ab(i, k);
    ab(k, k) -= dot / l(k, k);
    for (std::size_t i = k; i < n; ++i) ab(i, k) /= l(k, k);
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0.0;
      for (std::size_t i = k; i < n; ++i) s += ab(i, k) * l(i, j);
      ab(k, j) -= s;
    }
    for (std::size_t i = k + 1; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) ab(i, j) -= ab(i, k) * l(k, j);
    ab(k, k) *= 0.5;
  }
  return symmetrize(ab);
}

namespace {

// index lists per present class, ascending label order
std::map<int, std::vector<std::size_t>> partition(const std::vector<int>& labels) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i)
    by_class[labels[i]].push_back(i);
  return by_class;
}

}  // namespace

Matrix within_class_cov(const Matrix& w, const std::vector<int>& labels) {
  if (w.rows() != labels.size())
    throw DimensionMismatch("within_class_cov: rows vs labels");
  const auto by_class = partition(labels);
  if (by_class.empty()) throw DegenerateClass("within_class_cov: empty batch");
  const std::size_t d = w.cols();
  Matrix s(d, d);
  for (const auto& [c, idx] : by_class) {
    if (idx.size() < 2)
      throw DegenerateClass("within_class_cov: class " + std::to_string(c) +
                            " has " + std::to_string(idx.size()) + " sample(s)");
    std::vector<double> mean(d, 0.0);
    for (std::size_t i : idx)
      for (std::size_t j = 0; j < d; ++j) mean[j] += w(i, j);
    for (auto& m : mean) m /= static_cast<double>(idx.size());
    const double inv_nc = 1.0 / static_cast<double>(idx.size());
    for (std::size_t i : idx) {
      for (std::size_t a = 0; a < d; ++a) {
        const double da = w(i, a) - mean[a];
        for (std::size_t b = a; b < d; ++b)
          s(a, b) += inv_nc * da * (w(i, b) - mean[b]);
      }
    }
  }
  const double inv_c = 1.0 / static_cast<double>(by_class.size());
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = a; b < d; ++b) {
      s(a, b) *= inv_c;
      s(b, a) = s(a, b);
    }
  return s;
}

Matrix within_class_cov_vjp(const Matrix& w, const std::vector<int>& labels,
                            const Matrix& s_bar) {
  if (w.rows() != labels.size())
    throw DimensionMismatch("within_class_cov_vjp: rows vs labels");
  const std::size_t d = w.cols();
  if (s_bar.rows() != d || s_bar.cols() != d)
    throw DimensionMismatch("within_class_cov_vjp: cotangent shape");
  const auto by_class = partition(labels);
  const double class_count = static_cast<double>(by_class.size());
  const Matrix m = s_bar + s_bar.transpose();

  Matrix wbar(w.rows(), d);
  for (const auto& [c, idx] : by_class) {
    if (idx.size() < 2)
      throw DegenerateClass("within_class_cov_vjp: class " + std::to_string(c) +
                            " has " + std::to_string(idx.size()) + " sample(s)");
    const double nc = static_cast<double>(idx.size());
    std::vector<double> mean(d, 0.0);
    for (std::size_t i : idx)
      for (std::size_t j = 0; j < d; ++j) mean[j] += w(i, j);
    for (auto& x : mean) x /= nc;

    // u_i = (s_bar + s_bar^T) (w_i - mean) / (C * N_c); grad_i = u_i - mean(u)
    std::vector<double> usum(d, 0.0);
    for (std::size_t i : idx) {
      for (std::size_t a = 0; a < d; ++a) {
        double s = 0.0;
        for (std::size_t b = 0; b < d; ++b)
          s += m(a, b) * (w(i, b) - mean[b]);
        const double u = s / (class_count * nc);
        wbar(i, a) = u;
        usum[a] += u;
      }
    }
    for (std::size_t i : idx)
      for (std::size_t a = 0; a < d; ++a) wbar(i, a) -= usum[a] / nc;
  }
  return wbar;
}

std::vector<double> fd_grad(const std::function<double(const std::vector<double>&)>& f,
                            std::vector<double> x, double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double fp = f(x);
    x[i] = x0 - h;
    const double fm = f(x);
    x[i] = x0;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

Matrix fd_grad_matrix(const std::function<double(const Matrix&)>& f,
                      const Matrix& x, double h) {
  Matrix g(x.rows(), x.cols());
  Matrix p = x;
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const double x0 = p(i, j);
      p(i, j) = x0 + h;
      const double fp = f(p);
      p(i, j) = x0 - h;
      const double fm = f(p);
      p(i, j) = x0;
      g(i, j) = (fp - fm) / (2.0 * h);
    }
  return g;
}

Matrix fd_grad_symmetric(const std::function<double(const Matrix&)>& f,
                         const Matrix& x, double h) {
  Matrix g(x.rows(), x.cols());
  Matrix p = x;
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      const double xij = p(i, j), xji = p(j, i);
      p(i, j) += h;
      if (i != j) p(j, i) += h;
      const double fp = f(p);
      p(i, j) = xij - h;
      if (i != j) p(j, i) = xji - h;
      const double fm = f(p);
      p(i, j) = xij;
      p(j, i) = xji;
      const double d = (fp - fm) / (2.0 * h);
      g(i, j) = g(j, i) = (i == j) ? d : 0.5 * d;
    }
  return g;
}

double relative_error(const Matrix& g_ad, const Matrix& g_fd) {
  return max_abs_diff(g_ad, g_fd) / (g_fd.max_abs() + 1e-12);
}

namespace {

double frob_inner(const Matrix& a, const Matrix& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i)
    s += a.data()[i] * b.data()[i];
  return s;
}

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c) {
  Matrix m(r, c);
  for (auto& x : m.data()) x = rng.uniform(-1.0, 1.0);
  return m;
}

// G^T G / d + 0.5 I: min eigenvalue >= 0.5, entries O(1)
Matrix random_spd(Rng& rng, std::size_t n) {
  const Matrix g = random_matrix(rng, n, n);
  Matrix a = matmul(g.transpose(), g);
  a *= 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) a(i, i) += 0.5;
  return a;
}

// 3 classes x 8 samples x 4 dims with spread class means; pooled
// within-class covariance is well-conditioned w.h.p.
std::pair<Matrix, std::vector<int>> random_batch(Rng& rng) {
  const std::size_t classes = 3, per = 8, d = 4;
  Matrix w(classes * per, d);
  std::vector<int> labels(classes * per);
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<double> mu(d);
    for (auto& x : mu) x = 2.0 * rng.normal();
    for (std::size_t i = 0; i < per; ++i) {
      const std::size_t r = c * per + i;
      labels[r] = static_cast<int>(c);
      for (std::size_t j = 0; j < d; ++j) w(r, j) = mu[j] + rng.normal();
    }
  }
  return {w, labels};
}

GradCheckReport make_report(const std::string& op, double err, double tol) {
  return {op, err, tol, err <= tol};
}

GradCheckReport check_matmul(std::uint64_t seed) {
  Rng rng(seed);
  const Matrix a = random_matrix(rng, 3, 4);
  const Matrix b = random_matrix(rng, 4, 2);
  const Matrix ybar = random_matrix(rng, 3, 2);
  const auto [abar, bbar] = matmul_vjp(a, b, ybar);
  const Matrix fd_a = fd_grad_matrix(
      [&](const Matrix& p) { return frob_inner(ybar, matmul(p, b)); }, a);
  const Matrix fd_b = fd_grad_matrix(
      [&](const Matrix& p) { return frob_inner(ybar, matmul(a, p)); }, b);
  const double err = std::max(relative_error(abar, fd_a), relative_error(bbar, fd_b));
  return make_report("matmul", err, 1e-7);
}

GradCheckReport check_spd_inverse(std::uint64_t seed) {
  Rng rng(seed);
  const Matrix a = random_spd(rng, 4);
  const Matrix ybar = random_matrix(rng, 4, 4);
  const Matrix g = spd_inverse_vjp(linalg::SpdMatrix(a), ybar);
  const Matrix fd = fd_grad_symmetric(
      [&](const Matrix& p) {
        return frob_inner(ybar, linalg::spd_inverse(linalg::SpdMatrix(p)).matrix());
      },
      a);
  return make_report("spd_inverse", relative_error(g, fd), 1e-6);
}

GradCheckReport check_cholesky(std::uint64_t seed) {
  Rng rng(seed);
  const Matrix a = random_spd(rng, 5);
  const Matrix lbar = random_matrix(rng, 5, 5);
  const Matrix l = linalg::cholesky_lower(linalg::SpdMatrix(a));
  const Matrix g = cholesky_vjp(l, lbar);
  const Matrix fd = fd_grad_symmetric(
      [&](const Matrix& p) {
        const Matrix lp = linalg::cholesky_lower(linalg::SpdMatrix(p));
        double s = 0.0;
        for (std::size_t i = 0; i < 5; ++i)
          for (std::size_t j = 0; j <= i; ++j) s += lbar(i, j) * lp(i, j);
        return s;
      },
      a);
  return make_report("cholesky", relative_error(g, fd), 1e-5);
}

GradCheckReport check_within_class_cov(std::uint64_t seed) {
  Rng rng(seed);
  auto [w, labels] = random_batch(rng);
  const Matrix sbar = random_matrix(rng, 4, 4);
  const Matrix g = within_class_cov_vjp(w, labels, sbar);
  const Matrix fd = fd_grad_matrix(
      [&](const Matrix& p) { return frob_inner(sbar, within_class_cov(p, labels)); },
      w);
  return make_report("within_class_cov", relative_error(g, fd), 1e-6);
}

// full statistics chain: w -> S_w -> +eps I -> inverse -> cholesky -> <R, .>
GradCheckReport check_composed_chain(std::uint64_t seed) {
  Rng rng(seed);
  auto [w, labels] = random_batch(rng);
  const std::size_t d = w.cols();
  const Matrix r = random_matrix(rng, d, d);
  const double eps = 1e-3;

  const auto forward = [&](const Matrix& p) {
    Matrix s = within_class_cov(p, labels);
    for (std::size_t i = 0; i < d; ++i) s(i, i) += eps;
    const linalg::SpdMatrix sr(s);
    const Matrix inv = linalg::spd_inverse(sr).matrix();
    const Matrix l = linalg::cholesky_lower(linalg::SpdMatrix(inv));
    double out = 0.0;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j <= i; ++j) out += r(i, j) * l(i, j);
    return out;
  };

  // reverse chain
  Matrix s = within_class_cov(w, labels);
  for (std::size_t i = 0; i < d; ++i) s(i, i) += eps;
  const Matrix inv = linalg::spd_inverse(linalg::SpdMatrix(s)).matrix();
  const Matrix l = linalg::cholesky_lower(linalg::SpdMatrix(inv));
  Matrix lbar(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j <= i; ++j) lbar(i, j) = r(i, j);
  const Matrix g_inv = cholesky_vjp(l, lbar);
  const Matrix g_s = spd_inverse_vjp_from_inverse(inv, g_inv);
  const Matrix g_w = within_class_cov_vjp(w, labels, g_s);

  const Matrix fd = fd_grad_matrix(forward, w);
  return make_report("composed_chain", relative_error(g_w, fd), 1e-5);
}

}  // namespace

const std::vector<std::string>& gradcheck_op_names() {
  static const std::vector<std::string> names = {
      "matmul", "spd_inverse", "cholesky", "within_class_cov", "composed_chain"};
  return names;
}

GradCheckReport finite_diff_check(const std::string& op, std::uint64_t seed) {
  if (op == "matmul") return check_matmul(seed);
  if (op == "spd_inverse") return check_spd_inverse(seed);
  if (op == "cholesky") return check_cholesky(seed);
  if (op == "within_class_cov") return check_within_class_cov(seed);
  if (op == "composed_chain") return check_composed_chain(seed);
  throw DegenerateInput("finite_diff_check: unknown op '" + op + "'");
}

}  // namespace dwcca::diffops
