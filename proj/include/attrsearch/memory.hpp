#pragma once

#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "attrsearch/numerics/ops.hpp"
#include "attrsearch/synthgen.hpp"

namespace attrsearch {

namespace memory {
inline const std::string kMatrix = "memory/matrix";
}

/// Prototype attribute representations: one row per (attribute, value), rows
/// in schema order.
struct MemoryBlock {
  Tensor<float> matrix;  // C x D
  std::vector<std::pair<std::size_t, int>> row_index;
  bool trainable = false;

  std::size_t rows() const { return matrix.dim(0); }
  std::size_t dim() const { return matrix.dim(1); }

  std::size_t row_of(std::size_t attribute, int value) const {
    for (std::size_t r = 0; r < row_index.size(); ++r)
      if (row_index[r].first == attribute && row_index[r].second == value) return r;
    throw IndexError("memory: no row for attribute " + std::to_string(attribute) + " value " + std::to_string(value));
  }

  nlohmann::ordered_json row_index_json(const AttributeSchema& schema) const {
    auto rows = nlohmann::ordered_json::array();
    for (const auto& [a, v] : row_index) {
      rows.push_back({{"attribute", schema.attribute(a).name}, {"value", schema.attribute(a).values.at(v)}});
    }
    return rows;
  }
};

inline std::vector<std::pair<std::size_t, int>> canonical_rows(const AttributeSchema& schema) {
  std::vector<std::pair<std::size_t, int>> rows;
  for (std::size_t a = 0; a < schema.attribute_count(); ++a)
    for (std::size_t v = 0; v < schema.values_of(a); ++v) rows.emplace_back(a, static_cast<int>(v));
  return rows;
}

/// Row (a, v) is the mean of attribute-a representations over the items labelled v.
/// reps[item][attribute] are D-vectors.
inline MemoryBlock build_memory(const AttributeSchema& schema, const std::vector<std::vector<Tensor<float>>>& reps,
                                const std::vector<Labels>& labels) {
  if (reps.size() != labels.size()) throw DimensionError("build_memory: representation/label count mismatch");
  if (reps.empty()) throw CoverageError("build_memory: no training items");
  const std::size_t D = reps.front().at(0).size();
  MemoryBlock m;
  m.row_index = canonical_rows(schema);
  std::vector<std::vector<double>> sums(m.row_index.size(), std::vector<double>(D, 0.0));
  std::vector<std::size_t> counts(m.row_index.size(), 0);
  for (std::size_t i = 0; i < reps.size(); ++i) {
    for (std::size_t a = 0; a < schema.attribute_count(); ++a) {
      const std::size_t row = schema.row_of(a, static_cast<std::size_t>(labels[i][a]));
      const Tensor<float>& r = reps[i].at(a);
      if (r.size() != D) throw DimensionError("build_memory: representation length mismatch");
      for (std::size_t d = 0; d < D; ++d) sums[row][d] += r[d];
      ++counts[row];
    }
  }
  std::string missing;
  for (std::size_t row = 0; row < counts.size(); ++row) {
    if (counts[row] == 0) {
      const auto& [a, v] = m.row_index[row];
      missing += (missing.empty() ? "" : ", ") + schema.attribute(a).name + "=" + schema.attribute(a).values[v];
    }
  }
  if (!missing.empty()) throw CoverageError("build_memory: no training image for " + missing);
  m.matrix = Tensor<float>({m.row_index.size(), D});
  for (std::size_t row = 0; row < counts.size(); ++row)
    for (std::size_t d = 0; d < D; ++d)
      m.matrix.at(row, d) = static_cast<float>(sums[row][d] / static_cast<double>(counts[row]));
  return m;
}

/// Manipulation indicator t: one-hot on the target row.
inline Tensor<float> one_hot(const AttributeSchema& schema, std::size_t attribute, int value) {
  Tensor<float> t({schema.value_count()});
  t[schema.row_of(attribute, static_cast<std::size_t>(value))] = 1.0f;
  return t;
}

/// g = t M on a tape; gradients reach M when its node requires them.
template <typename T>
Var<T> retrieve(Tape<T>& tape, Var<T> memory_matrix, const Tensor<T>& indicator) {
  if (indicator.size() != memory_matrix.value().dim(0)) {
    throw DimensionError("retrieve: indicator length " + std::to_string(indicator.size()) + " vs " +
                         std::to_string(memory_matrix.value().dim(0)) + " memory rows");
  }
  return ops::matvec(tape.constant(indicator.reshaped({indicator.size()})), memory_matrix);
}

inline Tensor<float> retrieve(const MemoryBlock& memory, const Tensor<float>& indicator) {
  Tape<float> tape;
  return retrieve(tape, tape.constant(memory.matrix), indicator).value();
}

inline MemoryBlock freeze(MemoryBlock m) {
  m.trainable = false;
  return m;
}

inline MemoryBlock unfreeze(MemoryBlock m) {
  m.trainable = true;
  return m;
}

}  // namespace attrsearch
