#include "dwcca/dwcca_layer.hpp"

#include <map>
#include <string>

#include "dwcca/diffops.hpp"
#include "dwcca/errors.hpp"
#include "dwcca/rng.hpp"

namespace dwcca::layer {

void DwccaConfig::validate() const {
  if (!(alpha > 0.0 && alpha <= 1.0))
    throw DegenerateInput("DwccaConfig: alpha must be in (0,1], got " +
                          std::to_string(alpha));
  if (ridge_epsilon < 0.0)
    throw DegenerateInput("DwccaConfig: ridge_epsilon must be >= 0");
  if (embedding_dim == 0)
    throw DegenerateInput("DwccaConfig: embedding_dim must be >= 1");
}

ProjectionState ProjectionState::initial(std::size_t dim) {
  ProjectionState s;
  s.b_bar = Matrix::identity(dim);
  return s;
}

std::pair<linalg::SpdMatrix, ClassStats> estimate_batch_wcc(
    const Matrix& w, const std::vector<int>& labels, const DwccaConfig& cfg) {
  cfg.validate();
  if (w.rows() != labels.size())
    throw DimensionMismatch("estimate_batch_wcc: rows vs labels");

  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i)
    by_class[labels[i]].push_back(i);
  if (by_class.size() < 2)
    throw DegenerateBatch("estimate_batch_wcc: need >= 2 classes, got " +
                          std::to_string(by_class.size()));
  for (const auto& [c, idx] : by_class)
    if (idx.size() < 2)
      throw DegenerateBatch("estimate_batch_wcc: class " + std::to_string(c) +
                            " has " + std::to_string(idx.size()) +
                            " sample(s), need >= 2");

  const std::size_t d = w.cols();
  ClassStats stats;
  stats.means = Matrix(by_class.size(), d);
  std::size_t row = 0;
  for (const auto& [c, idx] : by_class) {
    stats.class_ids.push_back(c);
    stats.counts.push_back(idx.size());
    for (std::size_t i : idx)
      for (std::size_t j = 0; j < d; ++j) stats.means(row, j) += w(i, j);
    for (std::size_t j = 0; j < d; ++j)
      stats.means(row, j) /= static_cast<double>(idx.size());
    ++row;
  }

  Matrix s = diffops::within_class_cov(w, labels);
  for (std::size_t i = 0; i < d; ++i) s(i, i) += cfg.ridge_epsilon;
  return {linalg::SpdMatrix(std::move(s)), std::move(stats)};
}

Matrix projection_from_wcc(const linalg::SpdMatrix& s) {
  return linalg::cholesky_lower(linalg::spd_inverse(s));
}

void update_moving_average(ProjectionState& state, const Matrix& b_hat,
                           const DwccaConfig& cfg) {
  cfg.validate();
  if (state.mode == Mode::kFrozen)
    throw FrozenState("update_moving_average: state is frozen");
  if (b_hat.rows() != state.b_bar.rows() || b_hat.cols() != state.b_bar.cols())
    throw DimensionMismatch("update_moving_average: shape mismatch");
  for (std::size_t i = 0; i < state.b_bar.data().size(); ++i)
    state.b_bar.data()[i] =
        (1.0 - cfg.alpha) * state.b_bar.data()[i] + cfg.alpha * b_hat.data()[i];
  ++state.update_count;
}

Matrix forward(const Matrix& w, const std::vector<int>& labels,
               ProjectionState& state, const DwccaConfig& cfg, Mode mode,
               ForwardTape* tape) {
  if (w.cols() != state.b_bar.rows())
    throw DimensionMismatch("dwcca forward: input dim " +
                            std::to_string(w.cols()) + " vs projection dim " +
                            std::to_string(state.b_bar.rows()));
  if (mode == Mode::kTraining) {
    if (state.mode == Mode::kFrozen)
      throw FrozenState("dwcca forward: training pass on a frozen state");
    auto [s, stats] = estimate_batch_wcc(w, labels, cfg);
    const Matrix inv = linalg::spd_inverse(s).matrix();
    const Matrix b_hat = linalg::cholesky_lower(linalg::SpdMatrix(inv));
    update_moving_average(state, b_hat, cfg);
    Matrix out = matmul(w, state.b_bar);
    if (tape) {
      tape->training = true;
      tape->input = w;
      tape->labels = labels;
      tape->inv = inv;
      tape->b_hat = b_hat;
      tape->b_used = state.b_bar;
      tape->alpha = cfg.alpha;
      tape->state_version = state.update_count;
    }
    return out;
  }

  Matrix out = matmul(w, state.b_bar);
  if (tape) {
    tape->training = false;
    tape->input = w;
    tape->labels.clear();
    tape->b_used = state.b_bar;
    tape->alpha = cfg.alpha;
    tape->state_version = state.update_count;
  }
  return out;
}

Matrix backward(const ForwardTape& tape, const ProjectionState& state,
                const Matrix& ybar) {
  if (tape.training && state.update_count != tape.state_version)
    throw StaleTape("dwcca backward: state updated since forward (" +
                    std::to_string(state.update_count) + " vs " +
                    std::to_string(tape.state_version) + ")");
  if (ybar.rows() != tape.input.rows() || ybar.cols() != tape.b_used.cols())
    throw DimensionMismatch("dwcca backward: cotangent shape");

  // data path
  Matrix wbar = matmul(ybar, tape.b_used.transpose());
  if (!tape.training || tape.alpha == 0.0) return wbar;

  // statistics path: alpha * Bhat <- cholesky <- inverse <- ridge <- S_w
  Matrix b_bar_cot = matmul(tape.input.transpose(), ybar);
  b_bar_cot *= tape.alpha;
  const Matrix g_inv = diffops::cholesky_vjp(tape.b_hat, b_bar_cot);
  const Matrix g_s = diffops::spd_inverse_vjp_from_inverse(tape.inv, g_inv);
  wbar += diffops::within_class_cov_vjp(tape.input, tape.labels, g_s);
  return wbar;
}

GradCheckResult gradcheck_backward(std::uint64_t seed) {
  Rng rng(seed);
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
  Matrix r(w.rows(), d);
  for (auto& x : r.data()) x = rng.uniform(-1.0, 1.0);

  DwccaConfig cfg{0.3, 1e-3, d};
  const ProjectionState start = ProjectionState::initial(d);

  ProjectionState st = start;
  ForwardTape tape;
  forward(w, labels, st, cfg, Mode::kTraining, &tape);
  Matrix g_ad = backward(tape, st, r);

  const auto loss = [&](const Matrix& p) {
    ProjectionState s2 = start;
    const Matrix out = forward(p, labels, s2, cfg, Mode::kTraining, nullptr);
    double acc = 0.0;
    for (std::size_t i = 0; i < out.data().size(); ++i)
      acc += r.data()[i] * out.data()[i];
    return acc;
  };
  const Matrix g_fd = diffops::fd_grad_matrix(loss, w);
  const double err = diffops::relative_error(g_ad, g_fd);
  return {err, 1e-5, err <= 1e-5};
}

}  // namespace dwcca::layer
