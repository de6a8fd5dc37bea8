#pragma once

#include <string>

#include "dwcca/matrix.hpp"
#include "dwcca/rng.hpp"

namespace testsupport {

// directory of the running test binary; the CLI lives next to it
extern std::string g_binary_dir;

inline std::string dirname_of(const std::string& path) {
  const auto pos = path.find_last_of('/');
  return pos == std::string::npos ? std::string(".") : path.substr(0, pos);
}

inline dwcca::Matrix random_matrix(dwcca::Rng& rng, std::size_t r, std::size_t c,
                                   double lo = -1.0, double hi = 1.0) {
  dwcca::Matrix m(r, c);
  for (auto& x : m.data()) x = rng.uniform(lo, hi);
  return m;
}

// G^T G + I: SPD with min eigenvalue >= 1
inline dwcca::Matrix random_spd(dwcca::Rng& rng, std::size_t n) {
  const auto g = random_matrix(rng, n, n);
  auto a = dwcca::matmul(g.transpose(), g);
  for (std::size_t i = 0; i < n; ++i) a(i, i) += 1.0;
  return a;
}

// Gaussian class blobs: `classes` x `per` rows, unit noise around means
// scattered with the given spread.
inline std::pair<dwcca::Matrix, std::vector<int>> gaussian_batch(
    dwcca::Rng& rng, std::size_t classes, std::size_t per, std::size_t d,
    double mean_spread = 2.0, double noise = 1.0) {
  dwcca::Matrix w(classes * per, d);
  std::vector<int> labels(classes * per);
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<double> mu(d);
    for (auto& x : mu) x = mean_spread * rng.normal();
    for (std::size_t i = 0; i < per; ++i) {
      const std::size_t r = c * per + i;
      labels[r] = static_cast<int>(c);
      for (std::size_t j = 0; j < d; ++j) w(r, j) = mu[j] + noise * rng.normal();
    }
  }
  return {w, labels};
}

}  // namespace testsupport
