#pragma once

#include <cmath>
#include <string>

#include "attrsearch/numerics/tape.hpp"

namespace attrsearch {

struct SgdConfig {
  double learning_rate = 0.01;
  double dropout_keep_probability = 0.5;
  // Global L2 bound on each step's gradient; 0 disables.
  double clip_norm = 25.0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ArgumentError("learning rate must be positive");
    if (!(clip_norm >= 0.0)) throw ArgumentError("clip norm must be non-negative");
    if (!(dropout_keep_probability > 0.0) || dropout_keep_probability > 1.0) {
      throw ArgumentError("dropout keep probability must be in (0,1]");
    }
  }
};

/// Rescales every gradient so their joint L2 norm is at most `max_norm`.
/// Returns the norm before rescaling. `max_norm` of 0 leaves the gradients alone.
template <typename T>
double clip_global_norm(ParamSet<T>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads)
    for (T v : g.data()) sq += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& [name, g] : grads)
      for (T& v : g.data()) v *= s;
  }
  return norm;
}

/// Plain gradient step (no momentum) on every parameter that has a gradient.
template <typename T>
void sgd_step(ParamSet<T>& params, const ParamSet<T>& grads, double learning_rate) {
  const T lr = static_cast<T>(learning_rate);
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw UsageError("sgd_step: gradient for unknown parameter " + name);
    Tensor<T>& p = it->second;
    require_shape(g, p.shape(), "sgd_step " + name);
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
    p.check_finite("sgd_step " + name);
  }
}

}  // namespace attrsearch
