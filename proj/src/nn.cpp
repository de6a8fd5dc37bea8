#include "dwcca/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "dwcca/errors.hpp"

namespace dwcca::nn {

namespace {
constexpr double kBatchNormEps = 1e-5;
constexpr double kBatchNormMomentum = 0.1;  // new = 0.9*old + 0.1*batch
constexpr double kLogFloor = 1e-12;
}  // namespace

std::string ActShape::str() const {
  if (image)
    return std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
  return std::to_string(c);
}

// ---------------------------------------------------------------------------
// config parsing
// ---------------------------------------------------------------------------

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::size_t parse_count(const std::string& tok, std::size_t lineno) {
  try {
    const long long v = std::stoll(tok);
    if (v <= 0) throw std::invalid_argument("");
    return static_cast<std::size_t>(v);
  } catch (...) {
    throw ConfigError("model config line " + std::to_string(lineno) +
                      ": expected a positive integer, got '" + tok + "'");
  }
}

double parse_real(const std::string& tok, std::size_t lineno) {
  try {
    return std::stod(tok);
  } catch (...) {
    throw ConfigError("model config line " + std::to_string(lineno) +
                      ": expected a number, got '" + tok + "'");
  }
}

// "AxB" or "AxBxC"
std::vector<std::size_t> parse_dims(const std::string& tok, std::size_t lineno) {
  std::vector<std::size_t> dims;
  std::string cur;
  for (char ch : tok + "x") {
    if (ch == 'x') {
      if (cur.empty())
        throw ConfigError("model config line " + std::to_string(lineno) +
                          ": bad dimension '" + tok + "'");
      dims.push_back(parse_count(cur, lineno));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  return dims;
}

}  // namespace

ModelConfig ModelConfig::parse(const std::string& text) {
  ModelConfig cfg;
  bool saw_input = false;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    if (tok.empty()) continue;
    const std::string& kind = tok[0];

    const auto want = [&](std::size_t n) {
      if (tok.size() != n)
        throw ConfigError("model config line " + std::to_string(lineno) +
                          ": '" + kind + "' takes " + std::to_string(n - 1) +
                          " argument(s)");
    };

    if (kind == "input") {
      want(2);
      const auto dims = parse_dims(tok[1], lineno);
      if (dims.size() == 1) {
        cfg.input = ActShape{false, dims[0], 0, 0};
      } else if (dims.size() == 3) {
        cfg.input = ActShape{true, dims[0], dims[1], dims[2]};
      } else {
        throw ConfigError("model config line " + std::to_string(lineno) +
                          ": input must be D or CxHxW");
      }
      saw_input = true;
    } else if (kind == "conv") {
      Conv2dSpec s;
      if (tok.size() < 4)
        throw ConfigError("model config line " + std::to_string(lineno) +
                          ": conv KHxKW channels N [pad P] [stride S]");
      const auto k = parse_dims(tok[1], lineno);
      if (k.size() != 2)
        throw ConfigError("model config line " + std::to_string(lineno) +
                          ": conv kernel must be KHxKW");
      s.kh = k[0];
      s.kw = k[1];
      std::size_t i = 2;
      while (i + 1 < tok.size() + 1 && i < tok.size()) {
        if (i + 1 >= tok.size())
          throw ConfigError("model config line " + std::to_string(lineno) +
                            ": dangling '" + tok[i] + "'");
        if (tok[i] == "channels")
          s.channels = parse_count(tok[i + 1], lineno);
        else if (tok[i] == "pad")
          s.pad = static_cast<std::size_t>(parse_real(tok[i + 1], lineno));
        else if (tok[i] == "stride")
          s.stride = parse_count(tok[i + 1], lineno);
        else
          throw ConfigError("model config line " + std::to_string(lineno) +
                            ": unknown conv option '" + tok[i] + "'");
        i += 2;
      }
      if (s.channels == 0)
        throw ConfigError("model config line " + std::to_string(lineno) +
                          ": conv needs 'channels N'");
      cfg.layers.emplace_back(s);
    } else if (kind == "dense") {
      want(2);
      cfg.layers.emplace_back(DenseSpec{parse_count(tok[1], lineno)});
    } else if (kind == "batchnorm") {
      want(1);
      cfg.layers.emplace_back(BatchNormSpec{});
    } else if (kind == "relu") {
      want(1);
      cfg.layers.emplace_back(ReluSpec{});
    } else if (kind == "maxpool") {
      want(2);
      const auto p = parse_dims(tok[1], lineno);
      if (p.size() != 2)
        throw ConfigError("model config line " + std::to_string(lineno) +
                          ": maxpool must be PHxPW");
      cfg.layers.emplace_back(MaxPoolSpec{p[0], p[1]});
    } else if (kind == "dropout") {
      want(2);
      const double r = parse_real(tok[1], lineno);
      if (r < 0.0 || r >= 1.0)
        throw ConfigError("model config line " + std::to_string(lineno) +
                          ": dropout rate must be in [0,1)");
      cfg.layers.emplace_back(DropoutSpec{r});
    } else if (kind == "global_average_pool") {
      want(1);
      cfg.layers.emplace_back(GlobalAveragePoolSpec{});
    } else if (kind == "dwcca") {
      DwccaSpec s;
      std::size_t i = 1;
      while (i < tok.size()) {
        if (i + 1 >= tok.size())
          throw ConfigError("model config line " + std::to_string(lineno) +
                            ": dangling '" + tok[i] + "'");
        if (tok[i] == "alpha")
          s.alpha = parse_real(tok[i + 1], lineno);
        else if (tok[i] == "ridge")
          s.ridge_epsilon = parse_real(tok[i + 1], lineno);
        else
          throw ConfigError("model config line " + std::to_string(lineno) +
                            ": unknown dwcca option '" + tok[i] + "'");
        i += 2;
      }
      cfg.layers.emplace_back(s);
    } else if (kind == "softmax") {
      want(2);
      cfg.layers.emplace_back(SoftmaxOutputSpec{parse_count(tok[1], lineno)});
    } else {
      throw ConfigError("model config line " + std::to_string(lineno) +
                        ": unknown layer kind '" + kind + "'");
    }
  }
  if (!saw_input) throw ConfigError("model config: missing 'input' line");
  cfg.validate();
  return cfg;
}

ModelConfig ModelConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open model config: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void ModelConfig::validate() const {
  if (layers.empty()) throw ConfigError("model config: no layers");
  std::size_t dwcca_count = 0, softmax_count = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (std::holds_alternative<DwccaSpec>(layers[i])) ++dwcca_count;
    if (std::holds_alternative<SoftmaxOutputSpec>(layers[i])) {
      ++softmax_count;
      if (i + 1 != layers.size())
        throw ConfigError("model config: softmax must be the final layer");
    }
  }
  if (dwcca_count > 1)
    throw ConfigError("model config: at most one dwcca layer allowed");
  if (softmax_count != 1)
    throw ConfigError("model config: exactly one softmax output required");
}

std::string ModelConfig::to_text() const {
  std::ostringstream out;
  out << "input " << input.str() << "\n";
  for (const auto& l : layers) {
    std::visit(
        [&](const auto& s) {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, Conv2dSpec>) {
            out << "conv " << s.kh << "x" << s.kw << " channels " << s.channels
                << " pad " << s.pad << " stride " << s.stride << "\n";
          } else if constexpr (std::is_same_v<T, DenseSpec>) {
            out << "dense " << s.units << "\n";
          } else if constexpr (std::is_same_v<T, BatchNormSpec>) {
            out << "batchnorm\n";
          } else if constexpr (std::is_same_v<T, ReluSpec>) {
            out << "relu\n";
          } else if constexpr (std::is_same_v<T, MaxPoolSpec>) {
            out << "maxpool " << s.ph << "x" << s.pw << "\n";
          } else if constexpr (std::is_same_v<T, DropoutSpec>) {
            out << "dropout " << fmt_double(s.rate) << "\n";
          } else if constexpr (std::is_same_v<T, GlobalAveragePoolSpec>) {
            out << "global_average_pool\n";
          } else if constexpr (std::is_same_v<T, DwccaSpec>) {
            out << "dwcca alpha " << fmt_double(s.alpha) << " ridge "
                << fmt_double(s.ridge_epsilon) << "\n";
          } else if constexpr (std::is_same_v<T, SoftmaxOutputSpec>) {
            out << "softmax " << s.classes << "\n";
          }
        },
        l);
  }
  return out.str();
}

ModelConfig ModelConfig::without_dwcca() const {
  ModelConfig out;
  out.input = input;
  for (const auto& l : layers)
    if (!std::holds_alternative<DwccaSpec>(l)) out.layers.push_back(l);
  return out;
}

bool ModelConfig::has_dwcca() const {
  for (const auto& l : layers)
    if (std::holds_alternative<DwccaSpec>(l)) return true;
  return false;
}

std::size_t ModelConfig::class_count() const {
  return std::get<SoftmaxOutputSpec>(layers.back()).classes;
}

// ---------------------------------------------------------------------------
// build
// ---------------------------------------------------------------------------

namespace {

using namespace detail;

[[noreturn]] void shape_fail(std::size_t index, const std::string& kind,
                             const std::string& why) {
  throw ShapeMismatch("layer " + std::to_string(index) + " (" + kind + "): " + why);
}

Matrix fan_in_uniform(Rng& rng, std::size_t rows, std::size_t cols,
                      std::size_t fan_in) {
  const double s = std::sqrt(1.0 / static_cast<double>(fan_in));
  Matrix m(rows, cols);
  for (auto& x : m.data()) x = rng.uniform(-s, s);
  return m;
}

}  // namespace

Model build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m;
  m.config = cfg;
  m.shapes.push_back(cfg.input);
  Rng rng(seed);

  ActShape cur = cfg.input;
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    const auto& spec = cfg.layers[i];
    std::visit(
        [&](const auto& s) {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, Conv2dSpec>) {
            if (!cur.image) shape_fail(i, "conv", "needs image input, have flat " + cur.str());
            if (cur.h + 2 * s.pad < s.kh || cur.w + 2 * s.pad < s.kw)
              shape_fail(i, "conv", "kernel " + std::to_string(s.kh) + "x" +
                                        std::to_string(s.kw) + " exceeds padded input " +
                                        cur.str());
            Conv2dLayer l;
            l.spec = s;
            l.in = cur;
            l.out = ActShape{true, s.channels,
                             (cur.h + 2 * s.pad - s.kh) / s.stride + 1,
                             (cur.w + 2 * s.pad - s.kw) / s.stride + 1};
            const std::size_t fan_in = cur.c * s.kh * s.kw;
            l.w = fan_in_uniform(rng, s.channels, fan_in, fan_in);
            l.b = Matrix(1, s.channels);
            l.gw = Matrix(s.channels, fan_in);
            l.gb = Matrix(1, s.channels);
            cur = l.out;
            m.layers.emplace_back(std::move(l));
          } else if constexpr (std::is_same_v<T, DenseSpec>) {
            if (cur.image) shape_fail(i, "dense", "needs flat input, have image " + cur.str());
            DenseLayer l;
            l.in = cur.flat();
            l.units = s.units;
            l.w = fan_in_uniform(rng, l.in, l.units, l.in);
            l.b = Matrix(1, l.units);
            l.gw = Matrix(l.in, l.units);
            l.gb = Matrix(1, l.units);
            cur = ActShape{false, s.units, 0, 0};
            m.layers.emplace_back(std::move(l));
          } else if constexpr (std::is_same_v<T, BatchNormSpec>) {
            BatchNormLayer l;
            l.channels = cur.image ? cur.c : cur.flat();
            l.spatial = cur.image ? cur.h * cur.w : 1;
            l.gamma = Matrix(1, l.channels, 1.0);
            l.beta = Matrix(1, l.channels);
            l.ggamma = Matrix(1, l.channels);
            l.gbeta = Matrix(1, l.channels);
            l.run_mean = Matrix(1, l.channels);
            l.run_var = Matrix(1, l.channels, 1.0);
            m.layers.emplace_back(std::move(l));
          } else if constexpr (std::is_same_v<T, ReluSpec>) {
            m.layers.emplace_back(ReluLayer{});
          } else if constexpr (std::is_same_v<T, MaxPoolSpec>) {
            if (!cur.image) shape_fail(i, "maxpool", "needs image input");
            if (cur.h < s.ph || cur.w < s.pw)
              shape_fail(i, "maxpool", "pool exceeds input " + cur.str());
            MaxPoolLayer l;
            l.spec = s;
            l.in = cur;
            l.out = ActShape{true, cur.c, (cur.h - s.ph) / s.ph + 1,
                             (cur.w - s.pw) / s.pw + 1};
            cur = l.out;
            m.layers.emplace_back(std::move(l));
          } else if constexpr (std::is_same_v<T, DropoutSpec>) {
            m.layers.emplace_back(DropoutLayer{s.rate, {}});
          } else if constexpr (std::is_same_v<T, GlobalAveragePoolSpec>) {
            if (!cur.image) shape_fail(i, "global_average_pool", "needs image input");
            GapLayer l;
            l.in = cur;
            cur = ActShape{false, cur.c, 0, 0};
            m.layers.emplace_back(std::move(l));
          } else if constexpr (std::is_same_v<T, DwccaSpec>) {
            if (cur.image) shape_fail(i, "dwcca", "needs flat input, have image " + cur.str());
            DwccaLayer l;
            l.cfg = layer::DwccaConfig{s.alpha, s.ridge_epsilon, cur.flat()};
            l.cfg.validate();
            l.state = layer::ProjectionState::initial(cur.flat());
            m.layers.emplace_back(std::move(l));
          } else if constexpr (std::is_same_v<T, SoftmaxOutputSpec>) {
            if (cur.image) shape_fail(i, "softmax", "needs flat input, have image " + cur.str());
            SoftmaxOutputLayer l;
            l.in = cur.flat();
            l.classes = s.classes;
            l.w = fan_in_uniform(rng, l.in, l.classes, l.in);
            l.b = Matrix(1, l.classes);
            l.gw = Matrix(l.in, l.classes);
            l.gb = Matrix(1, l.classes);
            cur = ActShape{false, s.classes, 0, 0};
            m.layers.emplace_back(std::move(l));
          }
        },
        spec);
    m.shapes.push_back(cur);
  }

  // tap: dwcca output, else global-average-pool output, else softmax input
  m.tap_index = m.layers.size() - 1;  // softmax input
  for (std::size_t i = 0; i < m.layers.size(); ++i)
    if (std::holds_alternative<GapLayer>(m.layers[i])) m.tap_index = i + 1;
  for (std::size_t i = 0; i < m.layers.size(); ++i)
    if (std::holds_alternative<DwccaLayer>(m.layers[i])) m.tap_index = i + 1;
  return m;
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

namespace {

Matrix conv_forward(Conv2dLayer& l, const Matrix& x, Mode mode) {
  const std::size_t cin = l.in.c, h = l.in.h, w = l.in.w;
  const std::size_t cout = l.out.c, oh = l.out.h, ow = l.out.w;
  const std::size_t n = x.rows();
  const std::size_t kh = l.spec.kh, kw = l.spec.kw;
  const std::size_t pad = l.spec.pad, stride = l.spec.stride;
  Matrix y(n, cout * oh * ow);
  for (std::size_t i = 0; i < n; ++i) {
    const auto xrow = x.row(i);
    auto yrow = y.row(i);
    for (std::size_t o = 0; o < cout; ++o) {
      const auto wrow = l.w.row(o);
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double acc = l.b(0, o);
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t ky = 0; ky < kh; ++ky) {
              const std::ptrdiff_t iy =
                  std::ptrdiff_t(oy * stride + ky) - std::ptrdiff_t(pad);
              if (iy < 0 || iy >= std::ptrdiff_t(h)) continue;
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const std::ptrdiff_t ix =
                    std::ptrdiff_t(ox * stride + kx) - std::ptrdiff_t(pad);
                if (ix < 0 || ix >= std::ptrdiff_t(w)) continue;
                acc += xrow[(ci * h + std::size_t(iy)) * w + std::size_t(ix)] *
                       wrow[(ci * kh + ky) * kw + kx];
              }
            }
          yrow[(o * oh + oy) * ow + ox] = acc;
        }
    }
  }
  if (mode == Mode::kTrain) l.x_cache = x;
  return y;
}

Matrix conv_backward(Conv2dLayer& l, const Matrix& dy) {
  const std::size_t cin = l.in.c, h = l.in.h, w = l.in.w;
  const std::size_t cout = l.out.c, oh = l.out.h, ow = l.out.w;
  const std::size_t n = dy.rows();
  const std::size_t kh = l.spec.kh, kw = l.spec.kw;
  const std::size_t pad = l.spec.pad, stride = l.spec.stride;
  const Matrix& x = l.x_cache;
  Matrix dx(n, cin * h * w);
  l.gw = Matrix(cout, cin * kh * kw);
  l.gb = Matrix(1, cout);
  for (std::size_t i = 0; i < n; ++i) {
    const auto xrow = x.row(i);
    const auto dyrow = dy.row(i);
    auto dxrow = dx.row(i);
    for (std::size_t o = 0; o < cout; ++o) {
      const auto wrow = l.w.row(o);
      auto gwrow = l.gw.row(o);
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const double g = dyrow[(o * oh + oy) * ow + ox];
          if (g == 0.0) continue;
          l.gb(0, o) += g;
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t ky = 0; ky < kh; ++ky) {
              const std::ptrdiff_t iy =
                  std::ptrdiff_t(oy * stride + ky) - std::ptrdiff_t(pad);
              if (iy < 0 || iy >= std::ptrdiff_t(h)) continue;
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const std::ptrdiff_t ix =
                    std::ptrdiff_t(ox * stride + kx) - std::ptrdiff_t(pad);
                if (ix < 0 || ix >= std::ptrdiff_t(w)) continue;
                const std::size_t xi =
                    (ci * h + std::size_t(iy)) * w + std::size_t(ix);
                const std::size_t wi = (ci * kh + ky) * kw + kx;
                gwrow[wi] += g * xrow[xi];
                dxrow[xi] += g * wrow[wi];
              }
            }
        }
    }
  }
  return dx;
}

Matrix batchnorm_forward(BatchNormLayer& l, const Matrix& x, Mode mode) {
  const std::size_t n = x.rows(), C = l.channels, S = l.spatial;
  Matrix y(n, x.cols());
  if (mode == Mode::kEval) {
    for (std::size_t c = 0; c < C; ++c) {
      const double inv = 1.0 / std::sqrt(l.run_var(0, c) + kBatchNormEps);
      const double g = l.gamma(0, c), mu = l.run_mean(0, c), be = l.beta(0, c);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t s = 0; s < S; ++s) {
          const std::size_t j = c * S + s;
          y(i, j) = g * (x(i, j) - mu) * inv + be;
        }
    }
    return y;
  }

  const double m = static_cast<double>(n * S);
  l.xmu_cache = Matrix(n, x.cols());
  l.inv_std_cache.assign(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t s = 0; s < S; ++s) mean += x(i, c * S + s);
    mean /= m;
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t s = 0; s < S; ++s) {
        const double d = x(i, c * S + s) - mean;
        l.xmu_cache(i, c * S + s) = d;
        var += d * d;
      }
    var /= m;  // biased, matching eval-time running variance
    const double inv = 1.0 / std::sqrt(var + kBatchNormEps);
    l.inv_std_cache[c] = inv;
    const double g = l.gamma(0, c), be = l.beta(0, c);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t s = 0; s < S; ++s) {
        const std::size_t j = c * S + s;
        y(i, j) = g * l.xmu_cache(i, j) * inv + be;
      }
    l.run_mean(0, c) =
        (1.0 - kBatchNormMomentum) * l.run_mean(0, c) + kBatchNormMomentum * mean;
    l.run_var(0, c) =
        (1.0 - kBatchNormMomentum) * l.run_var(0, c) + kBatchNormMomentum * var;
  }
  return y;
}

Matrix batchnorm_backward(BatchNormLayer& l, const Matrix& dy) {
  const std::size_t n = dy.rows(), C = l.channels, S = l.spatial;
  const double m = static_cast<double>(n * S);
  Matrix dx(n, dy.cols());
  l.ggamma = Matrix(1, C);
  l.gbeta = Matrix(1, C);
  for (std::size_t c = 0; c < C; ++c) {
    const double inv = l.inv_std_cache[c];
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t s = 0; s < S; ++s) {
        const std::size_t j = c * S + s;
        const double xhat = l.xmu_cache(i, j) * inv;
        sum_dy += dy(i, j);
        sum_dy_xhat += dy(i, j) * xhat;
      }
    l.ggamma(0, c) = sum_dy_xhat;
    l.gbeta(0, c) = sum_dy;
    const double k = l.gamma(0, c) * inv / m;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t s = 0; s < S; ++s) {
        const std::size_t j = c * S + s;
        const double xhat = l.xmu_cache(i, j) * inv;
        dx(i, j) = k * (m * dy(i, j) - sum_dy - xhat * sum_dy_xhat);
      }
  }
  return dx;
}

Matrix maxpool_forward(MaxPoolLayer& l, const Matrix& x, Mode mode) {
  const std::size_t c = l.in.c, h = l.in.h, w = l.in.w;
  const std::size_t oh = l.out.h, ow = l.out.w;
  const std::size_t n = x.rows();
  const std::size_t ph = l.spec.ph, pw = l.spec.pw;
  Matrix y(n, c * oh * ow);
  if (mode == Mode::kTrain) l.argmax.assign(n * c * oh * ow, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto xrow = x.row(i);
    auto yrow = y.row(i);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double best = -1e300;
          std::size_t arg = 0;
          for (std::size_t py = 0; py < ph; ++py)
            for (std::size_t px = 0; px < pw; ++px) {
              const std::size_t xi =
                  (ch * h + oy * ph + py) * w + ox * pw + px;
              if (xrow[xi] > best) {
                best = xrow[xi];
                arg = xi;
              }
            }
          const std::size_t yi = (ch * oh + oy) * ow + ox;
          yrow[yi] = best;
          if (mode == Mode::kTrain)
            l.argmax[i * (c * oh * ow) + yi] = static_cast<std::uint32_t>(arg);
        }
  }
  return y;
}

Matrix maxpool_backward(MaxPoolLayer& l, const Matrix& dy) {
  const std::size_t n = dy.rows();
  const std::size_t out_flat = l.out.flat();
  Matrix dx(n, l.in.flat());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < out_flat; ++j)
      dx(i, l.argmax[i * out_flat + j]) += dy(i, j);
  return dx;
}

Matrix softmax_forward(SoftmaxOutputLayer& l, const Matrix& x, Mode mode) {
  Matrix z = matmul(x, l.w);
  for (std::size_t i = 0; i < z.rows(); ++i)
    for (std::size_t j = 0; j < z.cols(); ++j) z(i, j) += l.b(0, j);
  for (std::size_t i = 0; i < z.rows(); ++i) {
    auto row = z.row(i);
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double sum = 0.0;
    for (auto& v : row) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (auto& v : row) v /= sum;
  }
  if (mode == Mode::kTrain) {
    l.x_cache = x;
    l.probs_cache = z;
  }
  return z;
}

}  // namespace

ForwardResult forward(Model& m, const Matrix& x, Mode mode, Rng* dropout_rng,
                      const std::vector<int>* labels) {
  if (x.cols() != m.config.input.flat())
    throw ShapeMismatch("forward: input cols " + std::to_string(x.cols()) +
                        " vs configured " +
                        std::to_string(m.config.input.flat()));
  if (labels && labels->size() != x.rows())
    throw ShapeMismatch("forward: labels length vs batch rows");

  ForwardResult res;
  Matrix a = x;
  if (m.tap_index == 0) res.embeddings = a;
  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    auto& lv = m.layers[li];
    std::visit(
        [&](auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, Conv2dLayer>) {
            a = conv_forward(l, a, mode);
          } else if constexpr (std::is_same_v<T, DenseLayer>) {
            if (mode == Mode::kTrain) l.x_cache = a;
            Matrix y = matmul(a, l.w);
            for (std::size_t i = 0; i < y.rows(); ++i)
              for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += l.b(0, j);
            a = std::move(y);
          } else if constexpr (std::is_same_v<T, BatchNormLayer>) {
            a = batchnorm_forward(l, a, mode);
          } else if constexpr (std::is_same_v<T, ReluLayer>) {
            if (mode == Mode::kTrain) l.x_cache = a;
            for (auto& v : a.data()) v = v > 0.0 ? v : 0.0;
          } else if constexpr (std::is_same_v<T, MaxPoolLayer>) {
            a = maxpool_forward(l, a, mode);
          } else if constexpr (std::is_same_v<T, DropoutLayer>) {
            if (mode == Mode::kTrain && l.rate > 0.0) {
              if (!dropout_rng)
                throw ConfigError("forward: dropout needs an rng in train mode");
              // inverted dropout: scale kept units so eval needs no rescale
              const double keep = 1.0 - l.rate;
              l.mask = Matrix(a.rows(), a.cols());
              for (std::size_t k = 0; k < a.data().size(); ++k) {
                const bool kept = dropout_rng->uniform() >= l.rate;
                l.mask.data()[k] = kept ? 1.0 / keep : 0.0;
                a.data()[k] *= l.mask.data()[k];
              }
            }
          } else if constexpr (std::is_same_v<T, GapLayer>) {
            const std::size_t S = l.in.h * l.in.w;
            Matrix y(a.rows(), l.in.c);
            for (std::size_t i = 0; i < a.rows(); ++i)
              for (std::size_t c = 0; c < l.in.c; ++c) {
                double s = 0.0;
                for (std::size_t k = 0; k < S; ++k) s += a(i, c * S + k);
                y(i, c) = s / static_cast<double>(S);
              }
            a = std::move(y);
          } else if constexpr (std::is_same_v<T, DwccaLayer>) {
            if (mode == Mode::kTrain) {
              if (!labels)
                throw ShapeMismatch("forward: dwcca needs labels in train mode");
              a = layer::forward(a, *labels, l.state, l.cfg,
                                 layer::Mode::kTraining, &l.tape);
            } else {
              a = layer::forward(a, {}, l.state, l.cfg, layer::Mode::kFrozen,
                                 nullptr);
            }
          } else if constexpr (std::is_same_v<T, SoftmaxOutputLayer>) {
            a = softmax_forward(l, a, mode);
          }
        },
        lv);
    if (li + 1 == m.tap_index) res.embeddings = a;
  }
  res.probs = std::move(a);

  if (labels) {
    double loss = 0.0;
    for (std::size_t i = 0; i < res.probs.rows(); ++i) {
      const double p =
          std::max(res.probs(i, static_cast<std::size_t>((*labels)[i])), kLogFloor);
      loss -= std::log(p);
    }
    res.loss = loss / static_cast<double>(res.probs.rows());
    res.has_loss = true;
  }
  if (mode == Mode::kTrain) {
    res.tape_id = ++m.forward_counter;
    m.last_train_tape = res.tape_id;
  }
  return res;
}

void backward(Model& m, std::uint64_t tape_id, const std::vector<int>& labels) {
  if (tape_id == 0 || tape_id != m.last_train_tape)
    throw StaleTape("backward: tape " + std::to_string(tape_id) +
                    " is not the most recent train forward (" +
                    std::to_string(m.last_train_tape) + ")");

  Matrix da;  // cotangent flowing backwards
  for (std::size_t li = m.layers.size(); li-- > 0;) {
    auto& lv = m.layers[li];
    std::visit(
        [&](auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, SoftmaxOutputLayer>) {
            const std::size_t n = l.probs_cache.rows();
            if (labels.size() != n)
              throw ShapeMismatch("backward: labels length vs taped batch");
            Matrix dz = l.probs_cache;
            for (std::size_t i = 0; i < n; ++i)
              dz(i, static_cast<std::size_t>(labels[i])) -= 1.0;
            dz *= 1.0 / static_cast<double>(n);
            l.gw = matmul(l.x_cache.transpose(), dz);
            l.gb = Matrix(1, l.classes);
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t j = 0; j < l.classes; ++j) l.gb(0, j) += dz(i, j);
            da = matmul(dz, l.w.transpose());
          } else if constexpr (std::is_same_v<T, DenseLayer>) {
            l.gw = matmul(l.x_cache.transpose(), da);
            l.gb = Matrix(1, l.units);
            for (std::size_t i = 0; i < da.rows(); ++i)
              for (std::size_t j = 0; j < l.units; ++j) l.gb(0, j) += da(i, j);
            da = matmul(da, l.w.transpose());
          } else if constexpr (std::is_same_v<T, Conv2dLayer>) {
            da = conv_backward(l, da);
          } else if constexpr (std::is_same_v<T, BatchNormLayer>) {
            da = batchnorm_backward(l, da);
          } else if constexpr (std::is_same_v<T, ReluLayer>) {
            for (std::size_t k = 0; k < da.data().size(); ++k)
              if (l.x_cache.data()[k] <= 0.0) da.data()[k] = 0.0;
          } else if constexpr (std::is_same_v<T, MaxPoolLayer>) {
            da = maxpool_backward(l, da);
          } else if constexpr (std::is_same_v<T, DropoutLayer>) {
            if (l.rate > 0.0)
              for (std::size_t k = 0; k < da.data().size(); ++k)
                da.data()[k] *= l.mask.data()[k];
          } else if constexpr (std::is_same_v<T, GapLayer>) {
            const std::size_t S = l.in.h * l.in.w;
            Matrix dx(da.rows(), l.in.flat());
            for (std::size_t i = 0; i < da.rows(); ++i)
              for (std::size_t c = 0; c < l.in.c; ++c) {
                const double g = da(i, c) / static_cast<double>(S);
                for (std::size_t k = 0; k < S; ++k) dx(i, c * S + k) = g;
              }
            da = std::move(dx);
          } else if constexpr (std::is_same_v<T, DwccaLayer>) {
            da = layer::backward(l.tape, l.state, da);
          }
        },
        lv);
  }
}

std::vector<ParamRef> learnable_params(Model& m) {
  std::vector<ParamRef> out;
  char buf[32];
  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    std::snprintf(buf, sizeof buf, "L%02zu.", li);
    const std::string p(buf);
    std::visit(
        [&](auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, detail::Conv2dLayer>) {
            out.push_back({p + "conv.w", &l.w, &l.gw});
            out.push_back({p + "conv.b", &l.b, &l.gb});
          } else if constexpr (std::is_same_v<T, detail::DenseLayer>) {
            out.push_back({p + "dense.w", &l.w, &l.gw});
            out.push_back({p + "dense.b", &l.b, &l.gb});
          } else if constexpr (std::is_same_v<T, detail::BatchNormLayer>) {
            out.push_back({p + "bn.gamma", &l.gamma, &l.ggamma});
            out.push_back({p + "bn.beta", &l.beta, &l.gbeta});
          } else if constexpr (std::is_same_v<T, detail::SoftmaxOutputLayer>) {
            out.push_back({p + "softmax.w", &l.w, &l.gw});
            out.push_back({p + "softmax.b", &l.b, &l.gb});
          }
        },
        m.layers[li]);
  }
  return out;
}

std::vector<StateBlockRef> state_blocks(Model& m) {
  std::vector<StateBlockRef> out;
  for (auto& p : learnable_params(m)) out.push_back({p.name, p.value});
  char buf[32];
  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    std::snprintf(buf, sizeof buf, "L%02zu.", li);
    const std::string p(buf);
    std::visit(
        [&](auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, detail::BatchNormLayer>) {
            out.push_back({p + "bn.run_mean", &l.run_mean});
            out.push_back({p + "bn.run_var", &l.run_var});
          } else if constexpr (std::is_same_v<T, detail::DwccaLayer>) {
            out.push_back({p + "dwcca.b_bar", &l.state.b_bar});
          }
        },
        m.layers[li]);
  }
  return out;
}

std::size_t parameter_count(Model& m) {
  std::size_t n = 0;
  for (const auto& p : learnable_params(m)) n += p.value->size();
  return n;
}

// ---------------------------------------------------------------------------
// finite-difference checks over whole models
// ---------------------------------------------------------------------------

namespace {

NetGradCheck fd_check_model(const Model& origin, const Matrix& x,
                            const std::vector<int>& labels, double tol,
                            std::uint64_t dropout_seed) {
  const double h = 1e-5;

  Model work = origin;
  Rng drop(dropout_seed);
  const auto res = forward(work, x, Mode::kTrain, &drop, &labels);
  backward(work, res.tape_id, labels);

  const auto loss_of = [&](const Model& probe_src, const std::string& pname,
                           std::size_t flat, double delta) {
    Model probe = probe_src;
    for (auto& pr : learnable_params(probe))
      if (pr.name == pname) pr.value->data()[flat] += delta;
    Rng d2(dropout_seed);
    return forward(probe, x, Mode::kTrain, &d2, &labels).loss;
  };

  double max_abs_fd = 0.0, max_abs_diff_v = 0.0;
  for (auto& pr : learnable_params(work)) {
    for (std::size_t k = 0; k < pr.value->size(); ++k) {
      const double fp = loss_of(origin, pr.name, k, h);
      const double fm = loss_of(origin, pr.name, k, -h);
      const double fd = (fp - fm) / (2.0 * h);
      max_abs_fd = std::max(max_abs_fd, std::abs(fd));
      max_abs_diff_v = std::max(max_abs_diff_v, std::abs(fd - pr.grad->data()[k]));
    }
  }
  const double max_rel = max_abs_diff_v / (max_abs_fd + 1e-12);
  return {max_rel, tol, max_rel <= tol};
}

}  // namespace

NetGradCheck gradcheck_dense_softmax(std::uint64_t seed) {
  const ModelConfig cfg = ModelConfig::parse(
      "input 2\n"
      "dense 4\n"
      "softmax 3\n");
  Model m = build_model(cfg, seed);
  Rng rng(derive_seed(seed, 9));
  Matrix x(6, 2);
  for (auto& v : x.data()) v = rng.uniform(-2.0, 2.0);
  std::vector<int> labels(6);
  for (auto& l : labels) l = static_cast<int>(rng.index_below(3));
  return fd_check_model(m, x, labels, 1e-6, derive_seed(seed, 10));
}

NetGradCheck gradcheck_tiny_conv_stack(std::uint64_t seed) {
  const ModelConfig cfg = ModelConfig::parse(
      "input 1x8x8\n"
      "conv 3x3 channels 2 pad 1 stride 1\n"
      "relu\n"
      "global_average_pool\n"
      "dwcca alpha 0.5 ridge 0.01\n"
      "softmax 2\n");
  Model m = build_model(cfg, seed);
  Rng rng(derive_seed(seed, 11));
  const std::size_t n = 8;
  Matrix x(n, 64);
  for (auto& v : x.data()) v = 2.0 * rng.normal();
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % 2);
  return fd_check_model(m, x, labels, 1e-4, derive_seed(seed, 12));
}

}  // namespace dwcca::nn
