#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <utility>
#include <string>
#include <vector>

#include <unistd.h>

#include "attrsearch/numerics/tape.hpp"
#include "attrsearch/roi_box.hpp"
#include "attrsearch/synthgen.hpp"

namespace testing_support {

using attrsearch::Shape;
using attrsearch::Tensor;

template <typename T = double>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<T> t(std::move(shape));
  for (T& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

/// Random valid normalized box (possibly degenerate in one axis).
inline attrsearch::RoiBox random_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double y1 = u(rng), y2 = u(rng), x1 = u(rng), x2 = u(rng);
  if (y1 > y2) std::swap(y1, y2);
  if (x1 > x2) std::swap(x1, x2);
  return attrsearch::RoiBox{y1, x1, y2, x2};
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("attrsearch_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// Small generated dataset with every split populated.
inline attrsearch::Dataset small_dataset(std::size_t n, std::size_t n_query, std::size_t n_gallery, std::uint64_t seed) {
  const auto schema = attrsearch::AttributeSchema::default_schema();
  auto images = attrsearch::generate_dataset(schema, n, seed, attrsearch::SynthConfig{});
  auto sp = attrsearch::split(images, n_query, n_gallery, seed);
  return attrsearch::Dataset(schema, std::move(images), std::move(sp));
}

}  // namespace testing_support
