#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "attrsearch/numerics/tape.hpp"

namespace attrsearch {

/// Builds a scalar loss on the given tape from the parameters bound to it.
using LossBuilder = std::function<Var<double>(Tape<double>&)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  // Coordinates whose perturbation flipped a relu sign; the loss is not
  // differentiable there so they are excluded.
  std::size_t skipped_at_kink = 0;
};

/// Relative error with a floor on the magnitude so near-zero gradients are
/// compared absolutely.
inline double relative_error(double analytic, double numeric, double floor = 1e-5) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Central differences (f(x+eps) - f(x-eps)) / 2eps on one parameter,
/// compared with the tape gradient. When max_coords is nonzero a seeded
/// random subset of coordinates is checked.
inline GradCheckResult finite_difference_check(ParamSet<double>& params, const std::string& name,
                                               const LossBuilder& loss_fn, double epsilon,
                                               std::size_t max_coords = 0,
                                               std::uint64_t seed = 0) {
  auto pit = params.find(name);
  if (pit == params.end()) throw UsageError("finite_difference_check: unknown parameter " + name);

  Tensor<double> analytic;
  std::vector<std::uint8_t> base_mask;
  {
    Tape<double> tape(params);
    tape.track_kinks(true);
    Var<double> loss = loss_fn(tape);
    tape.backward(loss);
    analytic = tape.gradients().at(name);
    base_mask = tape.kink_mask();
  }

  auto evaluate = [&](std::vector<std::uint8_t>& mask) {
    Tape<double> tape(params);
    tape.track_kinks(true);
    const double v = loss_fn(tape).value().item();
    mask = tape.kink_mask();
    return v;
  };

  std::vector<std::size_t> coords(pit->second.size());
  for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  if (max_coords != 0 && coords.size() > max_coords) {
    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(max_coords);
    std::sort(coords.begin(), coords.end());
  }

  GradCheckResult result;
  std::vector<std::uint8_t> mask_plus, mask_minus;
  for (std::size_t i : coords) {
    Tensor<double>& p = params.at(name);
    const double saved = p[i];
    p[i] = saved + epsilon;
    const double f_plus = evaluate(mask_plus);
    p[i] = saved - epsilon;
    const double f_minus = evaluate(mask_minus);
    params.at(name)[i] = saved;
    if (mask_plus != base_mask || mask_minus != base_mask) {
      ++result.skipped_at_kink;
      continue;
    }
    const double numeric = (f_plus - f_minus) / (2.0 * epsilon);
    result.max_relative_error =
        std::max(result.max_relative_error, relative_error(analytic[i], numeric));
    ++result.checked;
  }
  return result;
}

}  // namespace attrsearch
