#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "dwcca/dwcca_layer.hpp"
#include "dwcca/matrix.hpp"
#include "dwcca/rng.hpp"

namespace dwcca::nn {

// Activations travel as Matrix (one row per sample); image-shaped data is
// laid out row-major as c*h*w and reinterpreted by the spatial layers.
struct ActShape {
  bool image = false;
  std::size_t c = 0, h = 0, w = 0;  // flat inputs store the dim in c

  std::size_t flat() const { return image ? c * h * w : c; }
  bool operator==(const ActShape&) const = default;
  std::string str() const;
};

// ---- config-level layer specs ----

struct Conv2dSpec {
  std::size_t kh = 0, kw = 0;
  std::size_t channels = 0;
  std::size_t pad = 0, stride = 1;
};
struct DenseSpec {
  std::size_t units = 0;
};
struct BatchNormSpec {};
struct ReluSpec {};
struct MaxPoolSpec {
  std::size_t ph = 0, pw = 0;
};
struct DropoutSpec {
  double rate = 0.0;
};
struct GlobalAveragePoolSpec {};
struct DwccaSpec {
  double alpha = 0.1;
  double ridge_epsilon = 1e-4;
};
struct SoftmaxOutputSpec {
  std::size_t classes = 0;
};

using LayerSpec = std::variant<Conv2dSpec, DenseSpec, BatchNormSpec, ReluSpec,
                               MaxPoolSpec, DropoutSpec, GlobalAveragePoolSpec,
                               DwccaSpec, SoftmaxOutputSpec>;

// Declarative layer stack, line-oriented text format (see README for the
// grammar). Shape-checks statically; at most one dwcca layer, exactly one
// softmax as the final layer.
struct ModelConfig {
  ActShape input;
  std::vector<LayerSpec> layers;

  static ModelConfig parse(const std::string& text);
  static ModelConfig load(const std::string& path);
  std::string to_text() const;
  void validate() const;

  // vanilla variant: the same stack minus the dwcca row
  ModelConfig without_dwcca() const;
  bool has_dwcca() const;
  std::size_t class_count() const;
};

// ---- built model ----

enum class Mode { kTrain, kEval };

namespace detail {

struct Conv2dLayer {
  Conv2dSpec spec;
  ActShape in, out;
  Matrix w, b, gw, gb;  // w: channels x (cin*kh*kw), b: 1 x channels
  Matrix x_cache;
};
struct DenseLayer {
  std::size_t in = 0, units = 0;
  Matrix w, b, gw, gb;  // w: in x units
  Matrix x_cache;
};
struct BatchNormLayer {
  std::size_t channels = 0, spatial = 1;
  Matrix gamma, beta, ggamma, gbeta;   // 1 x channels
  Matrix run_mean, run_var;            // 1 x channels
  Matrix xmu_cache;                    // centered input
  std::vector<double> inv_std_cache;   // per channel
};
struct ReluLayer {
  Matrix x_cache;
};
struct MaxPoolLayer {
  MaxPoolSpec spec;
  ActShape in, out;
  std::vector<std::uint32_t> argmax;  // per output cell, flat input index
};
struct DropoutLayer {
  double rate = 0.0;
  Matrix mask;
};
struct GapLayer {
  ActShape in;
};
struct DwccaLayer {
  layer::DwccaConfig cfg;
  layer::ProjectionState state;
  layer::ForwardTape tape;
};
struct SoftmaxOutputLayer {
  std::size_t in = 0, classes = 0;
  Matrix w, b, gw, gb;
  Matrix x_cache, probs_cache;
};

using Layer = std::variant<Conv2dLayer, DenseLayer, BatchNormLayer, ReluLayer,
                           MaxPoolLayer, DropoutLayer, GapLayer, DwccaLayer,
                           SoftmaxOutputLayer>;

}  // namespace detail

// Value type: copying a Model snapshots every parameter and running
// statistic, which is how checkpoint-best and the finite-difference
// harness take their snapshots.
struct Model {
  ModelConfig config;
  std::vector<detail::Layer> layers;
  // shapes[0] = input, shapes[i+1] = activation after layer i
  std::vector<ActShape> shapes;
  // embedding = activation at shapes[tap_index]: after the dwcca layer when
  // present, else after global average pooling, else the softmax input
  std::size_t tap_index = 0;
  std::uint64_t forward_counter = 0;
  std::uint64_t last_train_tape = 0;  // 0 = none

  std::size_t embedding_dim() const { return shapes[tap_index].flat(); }
  std::size_t class_count() const { return shapes.back().flat(); }
};

// Deterministic initialization: fan-in-scaled uniform weights, zero biases,
// ones/zeros batchnorm scale/shift, identity dwcca projection.
Model build_model(const ModelConfig& cfg, std::uint64_t seed);

struct ForwardResult {
  Matrix probs;       // n x classes, rows sum to 1
  Matrix embeddings;  // n x embedding_dim, taken at the tap
  double loss = 0.0;  // mean categorical cross-entropy when labels given
  bool has_loss = false;
  std::uint64_t tape_id = 0;
};

// Train mode records a tape for backward (and needs labels for the dwcca
// statistics and a dropout rng when the stack has dropout). Eval mode is a
// pure function of (model parameters, x) and writes no caches.
ForwardResult forward(Model& m, const Matrix& x, Mode mode,
                      Rng* dropout_rng = nullptr,
                      const std::vector<int>* labels = nullptr);

// Gradient of mean cross-entropy for the taped train-mode forward; fills
// every layer's parameter gradients. Throws StaleTape when the tape is not
// the most recent one.
void backward(Model& m, std::uint64_t tape_id, const std::vector<int>& labels);

struct ParamRef {
  std::string name;
  Matrix* value;
  Matrix* grad;
};
std::vector<ParamRef> learnable_params(Model& m);

// learnables plus running statistics (batchnorm averages, dwcca b_bar):
// everything a checkpoint must carry
struct StateBlockRef {
  std::string name;
  Matrix* value;
};
std::vector<StateBlockRef> state_blocks(Model& m);

std::size_t parameter_count(Model& m);

// gradcheck entries comparing every learnable's gradient with central
// finite differences on tiny stacks
struct NetGradCheck {
  double max_rel_err;
  double tol;
  bool pass;
};
NetGradCheck gradcheck_dense_softmax(std::uint64_t seed);  // tol 1e-6
NetGradCheck gradcheck_tiny_conv_stack(std::uint64_t seed);  // conv-gap-dwcca-softmax, tol 1e-4

}  // namespace dwcca::nn
