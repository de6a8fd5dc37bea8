#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "dwcca/linalg.hpp"
#include "dwcca/matrix.hpp"

namespace dwcca::layer {

// Within-class covariance normalization as a trainable layer.
//
// Training-mode forward, per mini-batch W_b:
//   S   = within-class covariance of W_b (class-averaged, mean-removed)
//   M   = (S + ridge_epsilon I)^-1
//   Bhat = cholesky_lower(M)                    -- batch projection
//   Bbar <- (1 - alpha) Bbar + alpha Bhat       -- moving average
//   out = W_b * Bbar                            -- post-update projection
//
// Backward propagates through both the data path (out = W*Bbar) and the
// current batch's statistics path (alpha * Bhat); the incoming moving
// average is treated as a constant, as with batchnorm running statistics.

struct DwccaConfig {
  double alpha = 0.1;
  double ridge_epsilon = 1e-4;
  std::size_t embedding_dim = 0;

  void validate() const;  // 0 < alpha <= 1, ridge_epsilon >= 0, dim >= 1
};

enum class Mode { kTraining, kFrozen };

struct ProjectionState {
  Matrix b_bar;  // d x d moving-average projection
  std::uint64_t update_count = 0;
  Mode mode = Mode::kTraining;

  // identity start: the layer is a no-op until statistics accumulate
  static ProjectionState initial(std::size_t dim);
};

struct ClassStats {
  std::vector<int> class_ids;        // ascending
  std::vector<std::size_t> counts;   // N_c per class
  Matrix means;                      // C x d class means
  std::size_t class_count() const { return class_ids.size(); }
};

// Ridge-stabilized mini-batch estimate. Requires >= 2 present classes and
// >= 2 samples in each; throws DegenerateBatch otherwise.
std::pair<linalg::SpdMatrix, ClassStats> estimate_batch_wcc(
    const Matrix& w, const std::vector<int>& labels, const DwccaConfig& cfg);

// Bhat = cholesky_lower(s^-1)
Matrix projection_from_wcc(const linalg::SpdMatrix& s);

// Bbar <- (1-alpha) Bbar + alpha Bhat; increments update_count.
// Throws FrozenState when the state is frozen.
void update_moving_average(ProjectionState& state, const Matrix& b_hat,
                           const DwccaConfig& cfg);

struct ForwardTape {
  bool training = false;
  Matrix input;               // W_b snapshot
  std::vector<int> labels;
  Matrix inv;                 // (S + eps I)^-1
  Matrix b_hat;
  Matrix b_used;              // Bbar actually applied to the batch
  double alpha = 0.0;
  std::uint64_t state_version = 0;  // update_count right after forward
};

// Training mode estimates statistics, updates the moving average and
// projects with the updated Bbar; frozen mode projects with the stored
// Bbar and leaves the state untouched. `tape` may be null when no
// backward pass will follow.
Matrix forward(const Matrix& w, const std::vector<int>& labels,
               ProjectionState& state, const DwccaConfig& cfg, Mode mode,
               ForwardTape* tape);

// Cotangent of the batch input. Throws StaleTape when the state has been
// updated since the recording forward.
Matrix backward(const ForwardTape& tape, const ProjectionState& state,
                const Matrix& ybar);

// gradcheck entry: end-to-end finite-difference comparison of backward
// on a random well-conditioned batch (see diffops::GradCheckReport).
struct GradCheckResult {
  double max_rel_err;
  double tol;
  bool pass;
};
GradCheckResult gradcheck_backward(std::uint64_t seed);

}  // namespace dwcca::layer
