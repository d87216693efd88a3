#pragma once

#include <algorithm>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "attrsearch/backbone.hpp"
#include "attrsearch/synthgen.hpp"

namespace attrsearch {

namespace localization {

inline std::string classifier_name(const AttributeSchema& schema, std::size_t a) {
  return "cls/" + schema.attribute(a).name;
}

inline bool is_classifier(std::string_view name) { return name.starts_with("cls/"); }

}  // namespace localization

/// Adds one [K, values(a)] weight matrix per attribute, Gaussian with std `scale`.
template <typename T = float>
void init_classifier(ParamSet<T>& params, const AttributeSchema& schema, std::size_t channels,
                     std::uint64_t seed, double scale = 0.001) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, scale);
  for (std::size_t a = 0; a < schema.attribute_count(); ++a) {
    Tensor<T> w({channels, schema.values_of(a)});
    for (T& v : w.data()) v = static_cast<T>(dist(rng));
    params.insert_or_assign(localization::classifier_name(schema, a), std::move(w));
  }
}

/// Sum over attributes of the softmax cross-entropy of gap(last) . w_a.
template <typename T>
Var<T> classification_loss(Tape<T>& tape, const FeatureVars<T>& features, const Labels& labels,
                           const AttributeSchema& schema) {
  if (!schema.valid_labels(labels)) throw ArgumentError("classification_loss: labels do not fit the schema");
  Var<T> pooled = ops::gap(features.last);
  std::vector<Var<T>> terms;
  for (std::size_t a = 0; a < schema.attribute_count(); ++a) {
    Var<T> logits = ops::matvec(pooled, tape.param(localization::classifier_name(schema, a)));
    terms.push_back(ops::softmax_cross_entropy(logits, static_cast<std::size_t>(labels[a])));
  }
  return ops::add_n(tape, terms);
}

template <typename T>
struct AttributeActivationMap {
  std::size_t attribute = 0;
  std::size_t cls = 0;
  Tensor<T> heatmap;  // h x w
};

/// Class-weighted sum of the last feature maps for the most confident class.
template <typename T>
AttributeActivationMap<T> compute_aam(const Tensor<T>& last, const Tensor<T>& weights, std::size_t attribute) {
  require_rank(last, 3, "compute_aam feature map");
  require_rank(weights, 2, "compute_aam weights");
  const std::size_t H = last.dim(0), W = last.dim(1), K = last.dim(2), C = weights.dim(1);
  if (weights.dim(0) != K) throw DimensionError("compute_aam: weights do not match channel count");

  std::vector<T> pooled(K, T{0});
  for (std::size_t c = 0; c < H * W; ++c)
    for (std::size_t k = 0; k < K; ++k) pooled[k] += last[c * K + k];
  std::size_t best = 0;
  T best_logit{};
  for (std::size_t c = 0; c < C; ++c) {
    T logit{0};
    for (std::size_t k = 0; k < K; ++k) logit += pooled[k] * weights.at(k, c);
    if (c == 0 || logit > best_logit) {
      best = c;
      best_logit = logit;
    }
  }

  AttributeActivationMap<T> aam{attribute, best, Tensor<T>({H, W})};
  for (std::size_t cell = 0; cell < H * W; ++cell) {
    T acc{0};
    for (std::size_t k = 0; k < K; ++k) acc += weights.at(k, best) * last[cell * K + k];
    aam.heatmap[cell] = acc;
  }
  return aam;
}

/// Cells strictly above 20% of the map maximum.
template <typename T>
std::vector<std::uint8_t> segment(const Tensor<T>& heatmap, double fraction = 0.2) {
  const T mx = *std::max_element(heatmap.data().begin(), heatmap.data().end());
  std::vector<std::uint8_t> mask(heatmap.size(), 0);
  if (!(mx > T{0})) return mask;
  const T cut = static_cast<T>(fraction) * mx;
  for (std::size_t i = 0; i < heatmap.size(); ++i) mask[i] = heatmap[i] > cut ? 1 : 0;
  return mask;
}

/// Cells of the largest 4-connected component of `mask` (ties: earliest first cell
/// in row-major order). Empty when the mask is empty.
inline std::vector<std::size_t> largest_component(const std::vector<std::uint8_t>& mask, std::size_t H,
                                                  std::size_t W) {
  std::vector<std::uint8_t> seen(mask.size(), 0);
  std::vector<std::size_t> best, current, stack;
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (!mask[start] || seen[start]) continue;
    current.clear();
    stack.assign(1, start);
    seen[start] = 1;
    while (!stack.empty()) {
      const std::size_t c = stack.back();
      stack.pop_back();
      current.push_back(c);
      const std::size_t y = c / W, x = c % W;
      auto visit = [&](std::size_t n) {
        if (mask[n] && !seen[n]) {
          seen[n] = 1;
          stack.push_back(n);
        }
      };
      if (y > 0) visit(c - W);
      if (y + 1 < H) visit(c + W);
      if (x > 0) visit(c - 1);
      if (x + 1 < W) visit(c + 1);
    }
    if (current.size() > best.size()) best = current;
  }
  return best;
}

/// Tight normalized box around the largest segmented region of the map; the full
/// image when nothing is positive.
template <typename T>
RoiBox threshold_bbox(const AttributeActivationMap<T>& aam) {
  const Tensor<T>& m = aam.heatmap;
  require_rank(m, 2, "threshold_bbox heatmap");
  const std::size_t H = m.dim(0), W = m.dim(1);
  const std::vector<std::size_t> cells = largest_component(segment(m), H, W);
  if (cells.empty()) return RoiBox::full();
  std::size_t r0 = H, r1 = 0, c0 = W, c1 = 0;
  for (std::size_t c : cells) {
    r0 = std::min(r0, c / W);
    r1 = std::max(r1, c / W);
    c0 = std::min(c0, c % W);
    c1 = std::max(c1, c % W);
  }
  auto norm = [](std::size_t v, std::size_t n) { return n > 1 ? static_cast<double>(v) / static_cast<double>(n - 1) : 0.0; };
  return {norm(r0, H), norm(c0, W), norm(r1, H), norm(c1, W)};
}

/// Fraction of segmented heatmap mass lying in rows [row_begin, row_end).
template <typename T>
double segmented_mass_fraction(const Tensor<T>& heatmap, std::size_t row_begin, std::size_t row_end) {
  const std::size_t W = heatmap.dim(1);
  const auto mask = segment(heatmap);
  double total = 0.0, inside = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    total += static_cast<double>(heatmap[i]);
    const std::size_t row = i / W;
    if (row >= row_begin && row < row_end) inside += static_cast<double>(heatmap[i]);
  }
  return total > 0.0 ? inside / total : 0.0;
}

}  // namespace attrsearch
