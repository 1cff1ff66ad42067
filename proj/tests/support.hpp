#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <string>

#include "carp/numerics.hpp"

namespace testing_support {

inline carp::Matrix random_matrix(carp::Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  carp::Matrix m(r, c);
  for (double& v : m.data()) v = rng.uniform(-scale, scale);
  return m;
}

/// Rows drawn from softmax of uniform(-scale, scale) logits.
inline carp::Matrix random_probs(carp::Rng& rng, std::size_t r, std::size_t c, double scale = 2.0) {
  return carp::softmax_rows(random_matrix(rng, r, c, scale));
}

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({1e-8, std::abs(a), std::abs(b)});
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("carp_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing_support
