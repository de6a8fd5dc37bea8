#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dwcca/matrix.hpp"

namespace dwcca::data {

struct LabeledBatch {
  Matrix features;           // n x d
  std::vector<int> labels;   // class ids in [0, class_count)
  std::size_t class_count = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.cols(); }
  void validate() const;

  LabeledBatch select(const std::vector<std::size_t>& rows) const;
};

// Synthetic matched-vs-shifted contrast. Class means sit on a sphere of
// radius 5; matched draws are unit-covariance Gaussians at those means,
// the shifted domain displaces each mean by shift_magnitude along a random
// unit direction and scales the covariance by covariance_scale.
struct ShiftSpec {
  std::size_t class_count = 8;
  std::size_t dim = 16;
  std::size_t samples_per_class = 200;  // per emitted split
  double shift_magnitude = 3.0;
  double covariance_scale = 2.0;
  std::uint64_t seed = 7;

  void validate() const;
  static ShiftSpec parse(const std::string& text);  // key = value lines
  static ShiftSpec load(const std::string& path);
  std::string to_text() const;
};

struct ShiftedDataset {
  LabeledBatch train;
  LabeledBatch val;
  LabeledBatch test_matched;
  LabeledBatch test_shifted;
};

ShiftedDataset make_shifted_gaussians(const ShiftSpec& spec);

// DWDS binary layout, little-endian: magic "DWDS", version u8, n u64,
// d u64, C u32, labels u32[n], features f64 row-major.
void save_dataset(const LabeledBatch& batch, const std::string& path);

// Reads DWDS when the magic matches, otherwise parses the CSV fallback
// (header "label,f0,...,f{d-1}").
LabeledBatch load_dataset(const std::string& path);

void save_dataset_csv(const LabeledBatch& batch, const std::string& path);

// k disjoint (train, val) pairs; val folds partition the data and class
// proportions per fold differ by at most one sample.
std::vector<std::pair<LabeledBatch, LabeledBatch>> stratified_folds(
    const LabeledBatch& dataset, std::size_t k, std::uint64_t seed);

}  // namespace dwcca::data
