#include <doctest.h>

#include <cmath>

#include "dwcca/diffops.hpp"
#include "dwcca/dwcca_layer.hpp"
#include "dwcca/errors.hpp"
#include "test_support.hpp"

using namespace dwcca;
using namespace dwcca::layer;
using testsupport::gaussian_batch;
using testsupport::random_matrix;

namespace {

// the worked four-point batch: class 0 = {(0,0),(2,0)}, class 1 = {(0,0),(0,2)}
// S_w = [[0.5,0],[0,0.5]] by Eq-style hand computation
Matrix four_point_batch() {
  Matrix w(4, 2);
  w(1, 0) = 2.0;
  w(3, 1) = 2.0;
  return w;
}
const std::vector<int> kFourPointLabels{0, 0, 1, 1};

}  // namespace

TEST_CASE("estimate_batch_wcc: four-point hand example") {
  DwccaConfig cfg{0.1, 1e-6, 2};
  const auto [s, stats] = estimate_batch_wcc(four_point_batch(), kFourPointLabels, cfg);
  CHECK(s(0, 0) == doctest::Approx(0.5 + 1e-6).epsilon(1e-14));
  CHECK(s(1, 1) == doctest::Approx(0.5 + 1e-6).epsilon(1e-14));
  CHECK(std::abs(s(0, 1)) < 1e-15);
  CHECK(stats.class_count() == 2);
  CHECK(stats.counts[0] == 2);
  CHECK(stats.means(0, 0) == doctest::Approx(1.0));
  CHECK(stats.means(1, 1) == doctest::Approx(1.0));
}

TEST_CASE("estimate_batch_wcc: constant classes give ridge only") {
  Matrix w(4, 2);
  for (std::size_t i = 0; i < 4; ++i) {
    w(i, 0) = i < 2 ? 3.0 : -1.0;
    w(i, 1) = i < 2 ? 2.0 : 5.0;
  }
  DwccaConfig cfg{0.1, 1e-4, 2};
  const auto [s, stats] = estimate_batch_wcc(w, kFourPointLabels, cfg);
  CHECK(s(0, 0) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(s(1, 1) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(std::abs(s(0, 1)) < 1e-18);
}

TEST_CASE("estimate_batch_wcc: one gaussian cloud under two labels is near identity") {
  // sampling oracle: 100000 unit-covariance points split across two labels
  Rng rng(7);
  const std::size_t n = 100000, d = 4;
  Matrix w(n, d);
  for (auto& x : w.data()) x = rng.normal();
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % 2);
  DwccaConfig cfg{0.1, 0.0, d};
  const auto [s, stats] = estimate_batch_wcc(w, labels, cfg);
  CHECK(max_abs_diff(s.matrix(), Matrix::identity(d)) < 0.05);
}

TEST_CASE("estimate_batch_wcc: degenerate batches rejected") {
  DwccaConfig cfg{0.1, 1e-4, 2};
  Matrix w(3, 2);
  CHECK_THROWS_AS(estimate_batch_wcc(w, {0, 0, 0}, cfg), DegenerateBatch);
  CHECK_THROWS_AS(estimate_batch_wcc(w, {0, 0, 1}, cfg), DegenerateBatch);
}

TEST_CASE("projection_from_wcc: diagonal cases") {
  Matrix quarter = Matrix::identity(2);
  quarter *= 0.25;
  const Matrix b1 = projection_from_wcc(linalg::SpdMatrix(quarter));
  CHECK(max_abs_diff(b1, Matrix::identity(2) * 2.0) < 1e-12);

  const Matrix b2 = projection_from_wcc(linalg::SpdMatrix(Matrix::identity(3)));
  CHECK(max_abs_diff(b2, Matrix::identity(3)) < 1e-12);
}

TEST_CASE("projection_from_wcc: whitens the four-point example") {
  // s = 0.5 I -> Bhat = sqrt(2) I, and B^T S_w B = I
  const auto s = linalg::SpdMatrix(Matrix::identity(2) * 0.5);
  const Matrix b = projection_from_wcc(s);
  CHECK(b(0, 0) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));
  CHECK(b(1, 1) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));

  const Matrix inv = linalg::spd_inverse(s).matrix();
  CHECK(max_abs_diff(matmul(b, b.transpose()), inv) < 1e-8);

  const Matrix w = four_point_batch();
  const Matrix projected = matmul(w, b);
  const Matrix sw_out = diffops::within_class_cov(projected, kFourPointLabels);
  CHECK(max_abs_diff(sw_out, Matrix::identity(2)) < 1e-12);
}

TEST_CASE("update_moving_average: direct formula and full replacement") {
  DwccaConfig cfg{0.1, 1e-4, 2};
  ProjectionState st = ProjectionState::initial(2);
  update_moving_average(st, Matrix::identity(2) * 2.0, cfg);
  CHECK(max_abs_diff(st.b_bar, Matrix::identity(2) * 1.1) < 1e-15);
  CHECK(st.update_count == 1);

  DwccaConfig full{1.0, 1e-4, 2};
  Rng rng(3);
  const Matrix bhat = random_matrix(rng, 2, 2);
  update_moving_average(st, bhat, full);
  CHECK(max_abs_diff(st.b_bar, bhat) == 0.0);
}

TEST_CASE("update_moving_average: geometric decay law over 50 steps") {
  // constant Bhat: ||Bbar_t - Bhat||_max = (1-alpha)^t ||Bbar_0 - Bhat||_max
  DwccaConfig cfg{0.1, 1e-4, 3};
  Rng rng(4);
  const Matrix bhat = random_matrix(rng, 3, 3, -2.0, 2.0);
  ProjectionState st = ProjectionState::initial(3);
  const double gap0 = max_abs_diff(st.b_bar, bhat);
  for (int t = 1; t <= 50; ++t) {
    update_moving_average(st, bhat, cfg);
    const double expected = std::pow(1.0 - cfg.alpha, t) * gap0;
    CHECK(std::abs(max_abs_diff(st.b_bar, bhat) - expected) < 1e-12);
  }
}

TEST_CASE("update_moving_average: frozen state refuses updates") {
  DwccaConfig cfg{0.1, 1e-4, 2};
  ProjectionState st = ProjectionState::initial(2);
  st.mode = Mode::kFrozen;
  CHECK_THROWS_AS(update_moving_average(st, Matrix::identity(2), cfg), FrozenState);
}

TEST_CASE("forward: frozen identity projection is a no-op") {
  DwccaConfig cfg{0.1, 1e-4, 3};
  ProjectionState st = ProjectionState::initial(3);
  st.mode = Mode::kFrozen;
  Rng rng(5);
  const Matrix w = random_matrix(rng, 6, 3);
  const Matrix out = forward(w, {}, st, cfg, Mode::kFrozen, nullptr);
  CHECK(max_abs_diff(out, w) == 0.0);
  CHECK(st.update_count == 0);
}

TEST_CASE("forward: alpha = 1 single whole-dataset batch whitens") {
  Rng rng(6);
  auto [w, labels] = gaussian_batch(rng, 4, 30, 8, 3.0);
  DwccaConfig cfg{1.0, 1e-6, 8};
  ProjectionState st = ProjectionState::initial(8);
  const Matrix out = forward(w, labels, st, cfg, Mode::kTraining, nullptr);
  const Matrix sw = diffops::within_class_cov(out, labels);
  CHECK(max_abs_diff(sw, Matrix::identity(8)) < 1e-4);
}

TEST_CASE("forward: moving-average composition on the four-point batch") {
  // B_1 = 0.9 I + 0.1 sqrt(1/(0.5+eps)) I, output = w * B_1
  const double eps = 1e-6;
  DwccaConfig cfg{0.1, eps, 2};
  ProjectionState st = ProjectionState::initial(2);
  const Matrix w = four_point_batch();
  const Matrix out = forward(w, kFourPointLabels, st, cfg, Mode::kTraining, nullptr);
  const double scale = 0.9 + 0.1 * std::sqrt(1.0 / (0.5 + eps));
  CHECK(max_abs_diff(out, w * scale) < 1e-12);
  CHECK(st.update_count == 1);
}

TEST_CASE("forward: training demands a valid batch") {
  DwccaConfig cfg{0.1, 1e-4, 2};
  ProjectionState st = ProjectionState::initial(2);
  Matrix w(3, 2);
  CHECK_THROWS_AS(forward(w, {0, 0, 0}, st, cfg, Mode::kTraining, nullptr),
                  DegenerateBatch);
}

TEST_CASE("backward: dead statistics path reduces to the linear rule") {
  // alpha = 0 tape built by hand (configs forbid 0; the limit case pins
  // down the data-path term in isolation)
  Rng rng(8);
  const Matrix w = random_matrix(rng, 5, 3);
  const Matrix ybar = random_matrix(rng, 5, 3);
  ForwardTape tape;
  tape.training = true;
  tape.input = w;
  tape.labels = {0, 0, 0, 1, 1};
  tape.b_used = random_matrix(rng, 3, 3);
  tape.alpha = 0.0;
  tape.state_version = 1;
  ProjectionState st = ProjectionState::initial(3);
  st.update_count = 1;
  const Matrix g = backward(tape, st, ybar);
  CHECK(max_abs_diff(g, matmul(ybar, tape.b_used.transpose())) == 0.0);
}

TEST_CASE("backward: frozen composition equals a fixed linear layer") {
  Rng rng(9);
  DwccaConfig cfg{0.1, 1e-4, 3};
  ProjectionState st = ProjectionState::initial(3);
  st.b_bar = random_matrix(rng, 3, 3);
  st.mode = Mode::kFrozen;
  const Matrix w = random_matrix(rng, 4, 3);
  const Matrix ybar = random_matrix(rng, 4, 3);
  ForwardTape tape;
  forward(w, {}, st, cfg, Mode::kFrozen, &tape);
  const Matrix g = backward(tape, st, ybar);
  CHECK(max_abs_diff(g, matmul(ybar, st.b_bar.transpose())) == 0.0);
}

TEST_CASE("backward: matches end-to-end finite differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto r = gradcheck_backward(seed);
    INFO("seed " << seed << " err " << r.max_rel_err);
    CHECK(r.pass);
  }
}

TEST_CASE("backward: linearity in the output cotangent") {
  Rng rng(10);
  auto [w, labels] = gaussian_batch(rng, 3, 8, 4);
  DwccaConfig cfg{0.3, 1e-3, 4};
  ProjectionState st = ProjectionState::initial(4);
  ForwardTape tape;
  forward(w, labels, st, cfg, Mode::kTraining, &tape);
  const Matrix y1 = random_matrix(rng, w.rows(), 4);
  const Matrix y2 = random_matrix(rng, w.rows(), 4);
  const double a = 1.7, b = -0.4;
  const Matrix lhs = backward(tape, st, y1 * a + y2 * b);
  Matrix rhs = backward(tape, st, y1) * a;
  rhs += backward(tape, st, y2) * b;
  CHECK(max_abs_diff(lhs, rhs) < 1e-10);
}

TEST_CASE("backward: stale tape detected") {
  Rng rng(11);
  auto [w, labels] = gaussian_batch(rng, 3, 8, 4);
  DwccaConfig cfg{0.3, 1e-3, 4};
  ProjectionState st = ProjectionState::initial(4);
  ForwardTape tape;
  forward(w, labels, st, cfg, Mode::kTraining, &tape);
  forward(w, labels, st, cfg, Mode::kTraining, nullptr);  // second update
  CHECK_THROWS_AS(backward(tape, st, Matrix(w.rows(), 4)), StaleTape);
}

TEST_CASE("frozen-mode determinism: identical inputs, identical bits") {
  Rng rng(12);
  DwccaConfig cfg{0.1, 1e-4, 4};
  ProjectionState st = ProjectionState::initial(4);
  st.b_bar = random_matrix(rng, 4, 4);
  st.mode = Mode::kFrozen;
  const Matrix w = random_matrix(rng, 10, 4);
  const Matrix o1 = forward(w, {}, st, cfg, Mode::kFrozen, nullptr);
  const Matrix o2 = forward(w, {}, st, cfg, Mode::kFrozen, nullptr);
  CHECK(o1 == o2);
}

TEST_CASE("translation invariance of batch statistics") {
  Rng rng(13);
  auto [w, labels] = gaussian_batch(rng, 3, 10, 5);
  DwccaConfig cfg{0.5, 1e-4, 5};
  const auto [s0, st0] = estimate_batch_wcc(w, labels, cfg);
  const Matrix b0 = projection_from_wcc(s0);

  Matrix shifted = w;
  for (std::size_t i = 0; i < w.rows(); ++i)
    if (labels[i] == 2)
      for (std::size_t j = 0; j < 5; ++j) shifted(i, j) += 4.0 + double(j);
  const auto [s1, st1] = estimate_batch_wcc(shifted, labels, cfg);
  CHECK(max_abs_diff(s0.matrix(), s1.matrix()) < 1e-12);
  CHECK(max_abs_diff(b0, projection_from_wcc(s1)) < 1e-10);
}

TEST_CASE("eigenvalue shrinkage with the single-batch projection") {
  // with Bbar = Bhat (alpha = 1), the spread of per-class covariance
  // eigenvalues across classes shrinks relative to the raw batch
  int held = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed + 500);
    const std::size_t classes = 4, per = 40, d = 6;
    Matrix w(classes * per, d);
    std::vector<int> labels(classes * per);
    for (std::size_t c = 0; c < classes; ++c) {
      std::vector<double> mu(d);
      for (auto& x : mu) x = 2.0 * rng.normal();
      const double scale = 0.25 + 1.25 * static_cast<double>(c);  // spread scales
      for (std::size_t i = 0; i < per; ++i) {
        const std::size_t r = c * per + i;
        labels[r] = static_cast<int>(c);
        for (std::size_t j = 0; j < d; ++j)
          w(r, j) = mu[j] + scale * rng.normal();
      }
    }
    DwccaConfig cfg{1.0, 1e-6, d};
    ProjectionState st = ProjectionState::initial(d);
    const Matrix out = forward(w, labels, st, cfg, Mode::kTraining, nullptr);

    const auto eig_range = [&](const Matrix& e) {
      double lo = 1e300, hi = -1e300;
      for (std::size_t c = 0; c < classes; ++c) {
        Matrix block(per, d);
        std::size_t r = 0;
        for (std::size_t i = 0; i < e.rows(); ++i)
          if (labels[i] == static_cast<int>(c)) {
            for (std::size_t j = 0; j < d; ++j) block(r, j) = e(i, j);
            ++r;
          }
        const auto dec = linalg::sym_eigen(linalg::covariance(block));
        hi = std::max(hi, dec.eigenvalues.front());
        lo = std::min(lo, dec.eigenvalues.back());
      }
      return hi - lo;
    };
    if (eig_range(out) <= eig_range(w)) ++held;
  }
  CHECK(held == 10);
}
