#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attrsearch/heads.hpp"
#include "attrsearch/memory.hpp"

namespace attrsearch {

struct GlobalConfig {
  std::size_t r = 32;
  // One projection shared by every manipulated attribute instead of one each.
  bool shared_projection = false;

  nlohmann::ordered_json to_json() const { return {{"r", r}, {"shared_projection", shared_projection}}; }
  static GlobalConfig from_json(const nlohmann::json& j) {
    return {j.at("r").get<std::size_t>(), j.value("shared_projection", false)};
  }
};

namespace global {

inline const std::string kLambda = "global/lambda";

inline std::string projection(const AttributeSchema& s, std::size_t a, const GlobalConfig& cfg) {
  return cfg.shared_projection ? std::string("global/proj/shared") : "global/proj/" + s.attribute(a).name;
}

inline bool is_global(std::string_view name) { return name.starts_with("global/"); }

}  // namespace global

/// Unit slot weights and Gaussian projections of shape [A*D, r].
template <typename T = float>
void init_global(ParamSet<T>& params, const AttributeSchema& schema, std::size_t dim, const GlobalConfig& cfg,
                 std::uint64_t seed) {
  const std::size_t A = schema.attribute_count();
  params.insert_or_assign(global::kLambda, Tensor<T>({A}, T{1}));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(A * dim)));
  for (std::size_t a = 0; a < A; ++a) {
    const std::string name = global::projection(schema, a, cfg);
    if (params.count(name) && cfg.shared_projection) continue;
    Tensor<T> w({A * dim, cfg.r});
    for (T& v : w.data()) v = static_cast<T>(dist(rng));
    params.insert_or_assign(name, std::move(w));
  }
}

/// Unit slot weights and identity projections (r = A*D): plain concatenation.
template <typename T = float>
GlobalConfig identity_global(ParamSet<T>& params, const AttributeSchema& schema, std::size_t dim) {
  const std::size_t A = schema.attribute_count(), n = A * dim;
  GlobalConfig cfg{n, false};
  params.insert_or_assign(global::kLambda, Tensor<T>({A}, T{1}));
  for (std::size_t a = 0; a < A; ++a) {
    Tensor<T> w({n, n});
    for (std::size_t i = 0; i < n; ++i) w.at(i, i) = T{1};
    params.insert_or_assign(global::projection(schema, a, cfg), std::move(w));
  }
  return cfg;
}

/// Scale each slot by its lambda (slot `manipulation->first` holding g instead of
/// the image's own representation), concatenate, project with w of `projection_attr`.
template <typename T>
Var<T> compose(Tape<T>& tape, const std::vector<Var<T>>& reps, std::optional<std::pair<std::size_t, Var<T>>> manipulation,
               std::size_t projection_attr, const AttributeSchema& schema, const GlobalConfig& cfg) {
  const std::size_t A = schema.attribute_count();
  if (reps.size() != A) {
    throw UsageError("compose: expected " + std::to_string(A) + " representations, got " + std::to_string(reps.size()));
  }
  if (manipulation && manipulation->first >= A) throw IndexError("compose: manipulated attribute out of range");
  Var<T> lambda = tape.param(global::kLambda);
  std::vector<Var<T>> slots;
  for (std::size_t a = 0; a < A; ++a) {
    Var<T> f = (manipulation && manipulation->first == a) ? manipulation->second : reps[a];
    if (f.tape == nullptr) throw UsageError("compose: missing slot " + std::to_string(a));
    if (f.size() != reps[0].size()) throw DimensionError("compose: slot lengths differ");
    slots.push_back(ops::scale_by(f, lambda, a));
  }
  return ops::matvec(ops::concat(slots), tape.param(global::projection(schema, projection_attr, cfg)));
}

/// Tape-free compose on plain vectors.
inline Tensor<float> compose(const ParamSet<float>& params, const std::vector<Tensor<float>>& reps,
                             std::optional<std::pair<std::size_t, Tensor<float>>> manipulation,
                             std::size_t projection_attr, const AttributeSchema& schema, const GlobalConfig& cfg) {
  Tape<float> tape(params, [](std::string_view) { return false; });
  std::vector<Var<float>> vars;
  for (const auto& r : reps) vars.push_back(tape.constant(r));
  std::optional<std::pair<std::size_t, Var<float>>> m;
  if (manipulation) m.emplace(manipulation->first, tape.constant(manipulation->second));
  return compose(tape, vars, m, projection_attr, schema, cfg).value();
}

/// Global ranking loss: d_plus on composed vectors.
template <typename T>
Var<T> global_loss(Var<T> query_manipulated, Var<T> positive, Var<T> negative) {
  return ops::soft_triplet_dplus(query_manipulated, positive, negative);
}

struct GlobalTriplet {
  std::size_t query = 0;
  Manipulation manipulation;
  std::size_t positive = 0;
  std::size_t negative = 0;

  friend bool operator==(const GlobalTriplet&, const GlobalTriplet&) = default;
};

/// Query uniform, manipulation uniform among those achievable inside the pool,
/// positive uniform among exact matches of the target labels, negative uniform
/// among everything else.
inline std::vector<GlobalTriplet> sample_global_triplets(const AttributeSchema& schema, const std::vector<Labels>& labels,
                                                         std::size_t count, std::uint64_t seed,
                                                         std::size_t max_retries = 1000) {
  if (labels.size() < 3) throw SamplingError("sample_global_triplets: need at least 3 items");
  std::map<Labels, std::vector<std::size_t>> by_labels;
  for (std::size_t i = 0; i < labels.size(); ++i) by_labels[labels[i]].push_back(i);
  std::set<Labels> present;
  for (const auto& [l, items] : by_labels) present.insert(l);

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_query(0, labels.size() - 1);
  std::vector<GlobalTriplet> out;
  out.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    std::size_t tries = 0;
    for (;;) {
      const std::size_t q = pick_query(rng);
      const auto options = manipulations_available(schema, labels[q], present);
      if (options.empty()) {
        if (++tries > max_retries) {
          throw SamplingError("sample_global_triplets: no achievable manipulation after " +
                              std::to_string(max_retries) + " retries");
        }
        continue;
      }
      const Manipulation m = options[std::uniform_int_distribution<std::size_t>(0, options.size() - 1)(rng)];
      const auto& matches = by_labels.at(apply_manipulation(labels[q], m));
      const std::size_t pos = matches[std::uniform_int_distribution<std::size_t>(0, matches.size() - 1)(rng)];
      const std::size_t others = labels.size() - matches.size();
      std::size_t k = std::uniform_int_distribution<std::size_t>(0, others - 1)(rng);
      const Labels& target = labels[pos];
      std::size_t neg = 0;
      for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == target) continue;
        if (k-- == 0) {
          neg = i;
          break;
        }
      }
      out.push_back({q, m, pos, neg});
      break;
    }
  }
  return out;
}

}  // namespace attrsearch
