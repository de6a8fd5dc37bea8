#include "dwcca/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dwcca/errors.hpp"
#include "dwcca/rng.hpp"

namespace dwcca::data {

void LabeledBatch::validate() const {
  if (features.rows() != labels.size())
    throw DimensionMismatch("LabeledBatch: " + std::to_string(features.rows()) +
                            " rows vs " + std::to_string(labels.size()) +
                            " labels");
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= class_count)
      throw DegenerateInput("LabeledBatch: label " + std::to_string(l) +
                            " outside [0," + std::to_string(class_count) + ")");
}

LabeledBatch LabeledBatch::select(const std::vector<std::size_t>& rows) const {
  LabeledBatch out;
  out.class_count = class_count;
  out.features = Matrix(rows.size(), features.cols());
  out.labels.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t j = 0; j < features.cols(); ++j)
      out.features(r, j) = features(rows[r], j);
    out.labels.push_back(labels[rows[r]]);
  }
  return out;
}

void ShiftSpec::validate() const {
  if (class_count < 2) throw InvalidSpec("ShiftSpec: class_count must be >= 2");
  if (dim < 2) throw InvalidSpec("ShiftSpec: dim must be >= 2");
  if (samples_per_class < 2)
    throw InvalidSpec("ShiftSpec: samples_per_class must be >= 2");
  if (shift_magnitude < 0.0)
    throw InvalidSpec("ShiftSpec: shift_magnitude must be >= 0");
  if (!(covariance_scale > 0.0))
    throw InvalidSpec("ShiftSpec: covariance_scale must be > 0");
}

ShiftSpec ShiftSpec::parse(const std::string& text) {
  ShiftSpec s;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ls(line);
    std::string key, eq;
    if (!(ls >> key)) continue;
    if (!(ls >> eq) || eq != "=")
      throw InvalidSpec("ShiftSpec line " + std::to_string(lineno) +
                        ": expected 'key = value'");
    std::string value;
    ls >> value;
    try {
      if (key == "classes")
        s.class_count = std::stoul(value);
      else if (key == "dim")
        s.dim = std::stoul(value);
      else if (key == "samples_per_class")
        s.samples_per_class = std::stoul(value);
      else if (key == "shift_magnitude")
        s.shift_magnitude = std::stod(value);
      else if (key == "covariance_scale")
        s.covariance_scale = std::stod(value);
      else if (key == "seed")
        s.seed = std::stoull(value);
      else
        throw InvalidSpec("ShiftSpec: unknown field '" + key + "'");
    } catch (const std::invalid_argument&) {
      throw InvalidSpec("ShiftSpec: bad value for field '" + key + "'");
    }
  }
  s.validate();
  return s;
}

ShiftSpec ShiftSpec::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open spec file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string ShiftSpec::to_text() const {
  std::ostringstream out;
  out << "classes = " << class_count << "\n"
      << "dim = " << dim << "\n"
      << "samples_per_class = " << samples_per_class << "\n"
      << "shift_magnitude = " << shift_magnitude << "\n"
      << "covariance_scale = " << covariance_scale << "\n"
      << "seed = " << seed << "\n";
  return out.str();
}

namespace {

std::vector<double> unit_vector(Rng& rng, std::size_t d) {
  std::vector<double> v(d);
  double norm = 0.0;
  do {
    norm = 0.0;
    for (auto& x : v) {
      x = rng.normal();
      norm += x * x;
    }
    norm = std::sqrt(norm);
  } while (norm < 1e-12);
  for (auto& x : v) x /= norm;
  return v;
}

LabeledBatch draw_split(Rng& rng, const std::vector<std::vector<double>>& means,
                        double cov_scale, std::size_t per_class, std::size_t d) {
  const std::size_t classes = means.size();
  LabeledBatch b;
  b.class_count = classes;
  b.features = Matrix(classes * per_class, d);
  b.labels.resize(classes * per_class);
  const double sd = std::sqrt(cov_scale);
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::size_t r = c * per_class + i;
      b.labels[r] = static_cast<int>(c);
      for (std::size_t j = 0; j < d; ++j)
        b.features(r, j) = means[c][j] + sd * rng.normal();
    }
  return b;
}

}  // namespace

ShiftedDataset make_shifted_gaussians(const ShiftSpec& spec) {
  spec.validate();
  const std::size_t d = spec.dim;

  Rng mean_rng(derive_seed(spec.seed, 0));
  std::vector<std::vector<double>> means(spec.class_count);
  for (auto& m : means) {
    m = unit_vector(mean_rng, d);
    for (auto& x : m) x *= 5.0;
  }

  Rng shift_rng(derive_seed(spec.seed, 1));
  std::vector<std::vector<double>> shifted_means = means;
  for (auto& m : shifted_means) {
    const auto dir = unit_vector(shift_rng, d);
    for (std::size_t j = 0; j < d; ++j) m[j] += spec.shift_magnitude * dir[j];
  }

  ShiftedDataset out;
  Rng r_train(derive_seed(spec.seed, 2));
  Rng r_val(derive_seed(spec.seed, 3));
  Rng r_matched(derive_seed(spec.seed, 4));
  Rng r_shifted(derive_seed(spec.seed, 5));
  out.train = draw_split(r_train, means, 1.0, spec.samples_per_class, d);
  out.val = draw_split(r_val, means, 1.0, spec.samples_per_class, d);
  out.test_matched = draw_split(r_matched, means, 1.0, spec.samples_per_class, d);
  out.test_shifted = draw_split(r_shifted, shifted_means, spec.covariance_scale,
                                spec.samples_per_class, d);
  return out;
}

namespace {

constexpr char kMagic[4] = {'D', 'W', 'D', 'S'};
constexpr std::uint8_t kVersion = 1;

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
void put_f64(std::string& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  put_u64(out, bits);
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;
  const std::string& path;

  void need(std::size_t n, const char* what) const {
    if (pos + n > buf.size())
      throw FormatError(path + ": truncated reading " + what + " at byte " +
                        std::to_string(pos));
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i)
      v = (v << 8) | std::uint8_t(buf[pos + std::size_t(i)]);
    pos += 8;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i)
      v = (v << 8) | std::uint8_t(buf[pos + std::size_t(i)]);
    pos += 4;
    return v;
  }
  double f64(const char* what) {
    const std::uint64_t bits = u64(what);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
  }
};

}  // namespace

void save_dataset(const LabeledBatch& batch, const std::string& path) {
  batch.validate();
  std::string out;
  out.reserve(17 + batch.size() * 4 + batch.features.size() * 8);
  out.append(kMagic, 4);
  out.push_back(char(kVersion));
  put_u64(out, batch.features.rows());
  put_u64(out, batch.features.cols());
  put_u32(out, static_cast<std::uint32_t>(batch.class_count));
  for (int l : batch.labels) put_u32(out, static_cast<std::uint32_t>(l));
  for (double v : batch.features.data()) put_f64(out, v);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failed: " + path);
}

namespace {

LabeledBatch load_csv(const std::string& text, const std::string& path) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line))
    throw FormatError(path + ": empty CSV");
  if (line.rfind("label", 0) != 0)
    throw FormatError(path + ": CSV header must start with 'label'");
  std::size_t d = 0;
  for (char c : line)
    if (c == ',') ++d;

  std::vector<int> labels;
  std::vector<double> values;
  std::size_t lineno = 1;
  int max_label = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    if (!std::getline(ls, cell, ','))
      throw FormatError(path + ": line " + std::to_string(lineno));
    const int lab = std::stoi(cell);
    labels.push_back(lab);
    max_label = std::max(max_label, lab);
    std::size_t got = 0;
    while (std::getline(ls, cell, ',')) {
      values.push_back(std::stod(cell));
      ++got;
    }
    if (got != d)
      throw FormatError(path + ": line " + std::to_string(lineno) + " has " +
                        std::to_string(got) + " features, expected " +
                        std::to_string(d));
  }
  LabeledBatch b;
  b.class_count = static_cast<std::size_t>(max_label + 1);
  b.labels = std::move(labels);
  b.features = Matrix(b.labels.size(), d, std::move(values));
  b.validate();
  return b;
}

}  // namespace

LabeledBatch load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string buf = ss.str();

  if (buf.size() < 4 || std::memcmp(buf.data(), kMagic, 4) != 0) {
    // CSV fallback
    return load_csv(buf, path);
  }

  Reader r{buf, 4, path};
  r.need(1, "version");
  const std::uint8_t version = std::uint8_t(buf[r.pos++]);
  if (version != kVersion)
    throw FormatError(path + ": unsupported version " + std::to_string(version) +
                      " at byte 4");
  const std::uint64_t n = r.u64("row count");
  const std::uint64_t d = r.u64("dim");
  const std::uint32_t classes = r.u32("class count");

  LabeledBatch b;
  b.class_count = classes;
  b.labels.resize(n);
  for (std::uint64_t i = 0; i < n; ++i)
    b.labels[i] = static_cast<int>(r.u32("labels"));
  std::vector<double> values(n * d);
  for (auto& v : values) v = r.f64("features");
  if (r.pos != buf.size())
    throw FormatError(path + ": " + std::to_string(buf.size() - r.pos) +
                      " trailing bytes at byte " + std::to_string(r.pos));
  b.features = Matrix(n, d, std::move(values));
  b.validate();
  return b;
}

void save_dataset_csv(const LabeledBatch& batch, const std::string& path) {
  batch.validate();
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  f << "label";
  for (std::size_t j = 0; j < batch.features.cols(); ++j) f << ",f" << j;
  f << "\n";
  char num[40];
  for (std::size_t i = 0; i < batch.size(); ++i) {
    f << batch.labels[i];
    for (std::size_t j = 0; j < batch.features.cols(); ++j) {
      std::snprintf(num, sizeof num, "%.17g", batch.features(i, j));
      f << ',' << num;
    }
    f << "\n";
  }
  if (!f) throw IoError("write failed: " + path);
}

std::vector<std::pair<LabeledBatch, LabeledBatch>> stratified_folds(
    const LabeledBatch& dataset, std::size_t k, std::uint64_t seed) {
  dataset.validate();
  if (k < 2) throw InfeasibleSplit("stratified_folds: k must be >= 2");

  std::vector<std::vector<std::size_t>> by_class(dataset.class_count);
  for (std::size_t i = 0; i < dataset.size(); ++i)
    by_class[static_cast<std::size_t>(dataset.labels[i])].push_back(i);
  for (std::size_t c = 0; c < by_class.size(); ++c)
    if (by_class[c].size() < k)
      throw InfeasibleSplit("stratified_folds: class " + std::to_string(c) +
                            " has " + std::to_string(by_class[c].size()) +
                            " samples, needs >= " + std::to_string(k));

  Rng rng(seed);
  std::vector<std::vector<std::size_t>> fold_rows(k);
  for (auto& idx : by_class) {
    rng.shuffle(idx);
    for (std::size_t i = 0; i < idx.size(); ++i)
      fold_rows[i % k].push_back(idx[i]);
  }

  std::vector<std::pair<LabeledBatch, LabeledBatch>> out;
  out.reserve(k);
  for (std::size_t f = 0; f < k; ++f) {
    std::vector<std::size_t> train_rows;
    for (std::size_t g = 0; g < k; ++g)
      if (g != f)
        train_rows.insert(train_rows.end(), fold_rows[g].begin(),
                          fold_rows[g].end());
    std::sort(train_rows.begin(), train_rows.end());
    std::vector<std::size_t> val_rows = fold_rows[f];
    std::sort(val_rows.begin(), val_rows.end());
    out.emplace_back(dataset.select(train_rows), dataset.select(val_rows));
  }
  return out;
}

}  // namespace dwcca::data
