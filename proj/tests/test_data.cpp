#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dwcca/data.hpp"
#include "dwcca/errors.hpp"
#include "dwcca/linalg.hpp"
#include "test_support.hpp"

using namespace dwcca;
using namespace dwcca::data;

namespace {

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

LabeledBatch random_batch(std::uint64_t seed, std::size_t n, std::size_t d,
                          std::size_t classes) {
  Rng rng(seed);
  LabeledBatch b;
  b.class_count = classes;
  b.features = Matrix(n, d);
  for (auto& v : b.features.data()) v = rng.normal();
  b.labels.resize(n);
  for (auto& l : b.labels) l = static_cast<int>(rng.index_below(classes));
  return b;
}

}  // namespace

TEST_CASE("dataset: binary round trip is bit exact") {
  const LabeledBatch b = random_batch(1, 37, 5, 4);
  const std::string path = tmp_path("dwcca_rt.dwds");
  save_dataset(b, path);
  const LabeledBatch r = load_dataset(path);
  CHECK(r.features == b.features);
  CHECK(r.labels == b.labels);
  CHECK(r.class_count == b.class_count);
  std::remove(path.c_str());
}

TEST_CASE("dataset: truncated file reports the byte offset") {
  const LabeledBatch b = random_batch(2, 10, 3, 2);
  const std::string path = tmp_path("dwcca_trunc.dwds");
  save_dataset(b, path);
  // chop the file mid-features
  std::ifstream in(path, std::ios::binary);
  std::string buf((std::istreambuf_iterator<char>(in)), {});
  in.close();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size() / 2));
  out.close();
  try {
    load_dataset(path);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("byte") != std::string::npos);
  }
  std::remove(path.c_str());
}

TEST_CASE("dataset: bad magic falls through to CSV and fails loudly") {
  const std::string path = tmp_path("dwcca_junk.dwds");
  std::ofstream(path) << "not a dataset\n";
  CHECK_THROWS_AS(load_dataset(path), FormatError);
  std::remove(path.c_str());
}

TEST_CASE("dataset: CSV fallback parses to the same values") {
  const LabeledBatch b = random_batch(3, 25, 4, 3);
  const std::string bin = tmp_path("dwcca_eq.dwds");
  const std::string csv = tmp_path("dwcca_eq.csv");
  save_dataset(b, bin);
  save_dataset_csv(b, csv);
  const LabeledBatch rb = load_dataset(bin);
  const LabeledBatch rc = load_dataset(csv);
  CHECK(rb.labels == rc.labels);
  CHECK(max_abs_diff(rb.features, rc.features) == 0.0);  // %.17g round-trips
  std::remove(bin.c_str());
  std::remove(csv.c_str());
}

TEST_CASE("generator: matched spec means matched distributions") {
  ShiftSpec spec;
  spec.class_count = 4;
  spec.dim = 6;
  spec.samples_per_class = 500;
  spec.shift_magnitude = 0.0;
  spec.covariance_scale = 1.0;
  spec.seed = 11;
  const ShiftedDataset ds = make_shifted_gaussians(spec);

  // per-class two-sample mean difference below 3 standard errors
  for (std::size_t c = 0; c < spec.class_count; ++c) {
    std::vector<double> m1(spec.dim, 0.0), m2(spec.dim, 0.0);
    std::size_t n1 = 0, n2 = 0;
    for (std::size_t i = 0; i < ds.test_matched.size(); ++i)
      if (ds.test_matched.labels[i] == int(c)) {
        ++n1;
        for (std::size_t j = 0; j < spec.dim; ++j)
          m1[j] += ds.test_matched.features(i, j);
      }
    for (std::size_t i = 0; i < ds.test_shifted.size(); ++i)
      if (ds.test_shifted.labels[i] == int(c)) {
        ++n2;
        for (std::size_t j = 0; j < spec.dim; ++j)
          m2[j] += ds.test_shifted.features(i, j);
      }
    const double stderr_2s = std::sqrt(1.0 / double(n1) + 1.0 / double(n2));
    for (std::size_t j = 0; j < spec.dim; ++j)
      CHECK(std::abs(m1[j] / double(n1) - m2[j] / double(n2)) < 3.0 * stderr_2s);
  }
}

TEST_CASE("generator: shift magnitude lands at the configured distance") {
  // sampling oracle: per-class centroid distance between the shifted test
  // split and train approximates shift_magnitude
  ShiftSpec spec;
  spec.class_count = 4;
  spec.dim = 16;
  spec.samples_per_class = 500;
  spec.shift_magnitude = 3.0;
  spec.covariance_scale = 1.0;
  spec.seed = 21;
  const ShiftedDataset ds = make_shifted_gaussians(spec);
  for (std::size_t c = 0; c < spec.class_count; ++c) {
    std::vector<double> mt(spec.dim, 0.0), ms(spec.dim, 0.0);
    std::size_t nt = 0, ns = 0;
    for (std::size_t i = 0; i < ds.train.size(); ++i)
      if (ds.train.labels[i] == int(c)) {
        ++nt;
        for (std::size_t j = 0; j < spec.dim; ++j) mt[j] += ds.train.features(i, j);
      }
    for (std::size_t i = 0; i < ds.test_shifted.size(); ++i)
      if (ds.test_shifted.labels[i] == int(c)) {
        ++ns;
        for (std::size_t j = 0; j < spec.dim; ++j)
          ms[j] += ds.test_shifted.features(i, j);
      }
    double dist2 = 0.0;
    for (std::size_t j = 0; j < spec.dim; ++j) {
      const double d = mt[j] / double(nt) - ms[j] / double(ns);
      dist2 += d * d;
    }
    CHECK(std::abs(std::sqrt(dist2) - 3.0) < 0.2);
  }
}

TEST_CASE("generator: deterministic under a fixed seed") {
  ShiftSpec spec;
  spec.samples_per_class = 20;
  const ShiftedDataset a = make_shifted_gaussians(spec);
  const ShiftedDataset b = make_shifted_gaussians(spec);
  CHECK(a.train.features == b.train.features);
  CHECK(a.val.features == b.val.features);
  CHECK(a.test_matched.features == b.test_matched.features);
  CHECK(a.test_shifted.features == b.test_shifted.features);
  CHECK(a.train.labels == b.train.labels);
}

TEST_CASE("generator: matched covariances agree within sampling error") {
  ShiftSpec spec;
  spec.class_count = 3;
  spec.dim = 4;
  spec.samples_per_class = 500;
  spec.seed = 31;
  const ShiftedDataset ds = make_shifted_gaussians(spec);
  for (std::size_t c = 0; c < spec.class_count; ++c) {
    std::vector<std::size_t> rt, rm;
    for (std::size_t i = 0; i < ds.train.size(); ++i)
      if (ds.train.labels[i] == int(c)) rt.push_back(i);
    for (std::size_t i = 0; i < ds.test_matched.size(); ++i)
      if (ds.test_matched.labels[i] == int(c)) rm.push_back(i);
    const Matrix ct = linalg::covariance(ds.train.select(rt).features);
    const Matrix cm = linalg::covariance(ds.test_matched.select(rm).features);
    CHECK((ct - cm).frobenius_norm() < 0.2);
  }
}

TEST_CASE("generator: invalid specs rejected") {
  ShiftSpec s;
  s.class_count = 1;
  CHECK_THROWS_AS(make_shifted_gaussians(s), InvalidSpec);
  s = ShiftSpec{};
  s.dim = 1;
  CHECK_THROWS_AS(make_shifted_gaussians(s), InvalidSpec);
  s = ShiftSpec{};
  s.covariance_scale = 0.0;
  CHECK_THROWS_AS(make_shifted_gaussians(s), InvalidSpec);
}

TEST_CASE("spec file: parse, serialize, reject unknown fields") {
  const ShiftSpec s = ShiftSpec::parse(
      "classes = 5\ndim = 8\nsamples_per_class = 50\n"
      "shift_magnitude = 2.5\ncovariance_scale = 1.5\nseed = 99\n");
  CHECK(s.class_count == 5);
  CHECK(s.shift_magnitude == 2.5);
  const ShiftSpec round = ShiftSpec::parse(s.to_text());
  CHECK(round.seed == 99);
  CHECK_THROWS_AS(ShiftSpec::parse("wibble = 3\n"), InvalidSpec);
  CHECK_THROWS_AS(ShiftSpec::parse("classes = banana\n"), InvalidSpec);
}

TEST_CASE("stratified_folds: balanced example") {
  // 4 classes x 8 samples, k = 4: every val fold holds 2 per class
  LabeledBatch b;
  b.class_count = 4;
  b.features = Matrix(32, 2);
  b.labels.resize(32);
  for (std::size_t i = 0; i < 32; ++i) {
    b.labels[i] = static_cast<int>(i % 4);
    b.features(i, 0) = double(i);
  }
  const auto folds = stratified_folds(b, 4, 5);
  REQUIRE(folds.size() == 4);
  for (const auto& [train, val] : folds) {
    CHECK(train.size() == 24);
    CHECK(val.size() == 8);
    std::vector<int> hist(4, 0);
    for (int l : val.labels) ++hist[std::size_t(l)];
    for (int h : hist) CHECK(h == 2);
  }
}

TEST_CASE("stratified_folds: val folds partition the dataset") {
  const LabeledBatch b = random_batch(7, 53, 3, 4);
  const auto folds = stratified_folds(b, 4, 9);
  std::vector<double> seen;
  for (const auto& [train, val] : folds) {
    CHECK(train.size() + val.size() == b.size());
    for (std::size_t i = 0; i < val.size(); ++i) seen.push_back(val.features(i, 0));
  }
  CHECK(seen.size() == b.size());
  std::vector<double> orig;
  for (std::size_t i = 0; i < b.size(); ++i) orig.push_back(b.features(i, 0));
  std::sort(seen.begin(), seen.end());
  std::sort(orig.begin(), orig.end());
  CHECK(seen == orig);

  // per-fold class histograms differ by at most one
  for (std::size_t c = 0; c < b.class_count; ++c) {
    std::size_t lo = b.size(), hi = 0;
    for (const auto& [train, val] : folds) {
      std::size_t n = 0;
      for (int l : val.labels)
        if (l == int(c)) ++n;
      lo = std::min(lo, n);
      hi = std::max(hi, n);
    }
    CHECK(hi - lo <= 1);
  }
}

TEST_CASE("stratified_folds: class smaller than k rejected") {
  LabeledBatch b;
  b.class_count = 2;
  b.features = Matrix(5, 2);
  b.labels = {0, 0, 0, 0, 1};
  CHECK_THROWS_AS(stratified_folds(b, 4, 1), InfeasibleSplit);
}
