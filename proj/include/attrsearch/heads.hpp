#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attrsearch/localization.hpp"

namespace attrsearch {

struct HeadConfig {
  std::size_t pool = 3;     // ROI pooled size (pool x pool)
  std::size_t hidden = 64;  // fc1 width
  std::size_t dim = 32;     // representation length D
  bool fusion = false;      // concatenate whole-map pooling before fc1
  bool squared_ranking = false;

  std::size_t fc1_inputs(std::size_t mid_channels) const {
    return pool * pool * mid_channels * (fusion ? 2 : 1);
  }

  nlohmann::ordered_json to_json() const {
    return {{"pool", pool}, {"hidden", hidden}, {"dim", dim}, {"fusion", fusion}, {"squared_ranking", squared_ranking}};
  }
  static HeadConfig from_json(const nlohmann::json& j) {
    HeadConfig c;
    c.pool = j.at("pool").get<std::size_t>();
    c.hidden = j.at("hidden").get<std::size_t>();
    c.dim = j.at("dim").get<std::size_t>();
    c.fusion = j.at("fusion").get<bool>();
    c.squared_ranking = j.value("squared_ranking", false);
    return c;
  }
};

namespace heads {

inline std::string prefix(const AttributeSchema& s, std::size_t a) { return "head/" + s.attribute(a).name; }
inline std::string fc1_weight(const AttributeSchema& s, std::size_t a) { return prefix(s, a) + "/fc1/weight"; }
inline std::string fc1_bias(const AttributeSchema& s, std::size_t a) { return prefix(s, a) + "/fc1/bias"; }
inline std::string fc2_weight(const AttributeSchema& s, std::size_t a) { return prefix(s, a) + "/fc2/weight"; }
inline std::string fc2_bias(const AttributeSchema& s, std::size_t a) { return prefix(s, a) + "/fc2/bias"; }
inline std::string classifier(const AttributeSchema& s, std::size_t a) { return prefix(s, a) + "/classifier"; }

inline bool is_head(std::string_view name) { return name.starts_with("head/"); }

}  // namespace heads

/// Two fully connected layers per attribute plus a linear classifier over the
/// representation (used only by the head classification loss).
template <typename T = float>
void init_heads(ParamSet<T>& params, const AttributeSchema& schema, std::size_t mid_channels, const HeadConfig& cfg,
                std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto gaussian = [&](Shape shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Tensor<T> t(std::move(shape));
    for (T& v : t.data()) v = static_cast<T>(dist(rng));
    return t;
  };
  const std::size_t in = cfg.fc1_inputs(mid_channels);
  for (std::size_t a = 0; a < schema.attribute_count(); ++a) {
    params.insert_or_assign(heads::fc1_weight(schema, a), gaussian({in, cfg.hidden}, std::sqrt(2.0 / in)));
    params.insert_or_assign(heads::fc1_bias(schema, a), Tensor<T>({cfg.hidden}));
    params.insert_or_assign(heads::fc2_weight(schema, a), gaussian({cfg.hidden, cfg.dim}, std::sqrt(1.0 / cfg.hidden)));
    params.insert_or_assign(heads::fc2_bias(schema, a), Tensor<T>({cfg.dim}));
    params.insert_or_assign(heads::classifier(schema, a),
                            gaussian({cfg.dim, schema.values_of(a)}, std::sqrt(1.0 / cfg.dim)));
  }
}

/// Dropout settings for a forward pass; keep == 1 disables it.
struct DropoutContext {
  double keep = 1.0;
  std::mt19937_64* rng = nullptr;
};

/// ROI-pool the mid map inside `box`, optionally fuse with whole-map pooling,
/// then fc1 -> relu -> dropout -> fc2.
template <typename T>
Var<T> attribute_representation(Tape<T>& tape, Var<T> mid, const RoiBox& box, const AttributeSchema& schema,
                                std::size_t a, const HeadConfig& cfg, DropoutContext drop = {}) {
  Var<T> pooled = ops::flatten(ops::crop_and_resize(mid, box, cfg.pool, cfg.pool));
  if (cfg.fusion) {
    pooled = ops::concat<T>({pooled, ops::flatten(ops::crop_and_resize(mid, RoiBox::full(), cfg.pool, cfg.pool))});
  }
  Var<T> w1 = tape.param(heads::fc1_weight(schema, a));
  if (w1.value().dim(0) != pooled.size()) {
    throw DimensionError("attribute_representation: fc1 expects " + std::to_string(w1.value().dim(0)) +
                         " inputs, pooled features have " + std::to_string(pooled.size()));
  }
  Var<T> h = ops::relu(ops::add_bias(ops::matvec(pooled, w1), tape.param(heads::fc1_bias(schema, a))));
  if (drop.keep < 1.0) {
    if (drop.rng == nullptr) throw UsageError("dropout enabled without a random generator");
    h = ops::dropout(h, static_cast<T>(drop.keep), *drop.rng);
  }
  return ops::add_bias(ops::matvec(h, tape.param(heads::fc2_weight(schema, a))), tape.param(heads::fc2_bias(schema, a)));
}

/// Indices into the caller's item list.
struct Triplet {
  std::size_t anchor = 0;
  std::size_t positive = 0;
  std::size_t negative = 0;

  friend bool operator==(const Triplet&, const Triplet&) = default;
};

/// Triplets grouped by attribute.
struct TripletBatch {
  std::vector<std::vector<Triplet>> per_attribute;
};

/// Sum over attributes and triplets of d_plus (or d_plus^2) on the representations.
/// reps[item][attribute].
template <typename T>
Var<T> ranking_loss(Tape<T>& tape, const TripletBatch& batch, const std::vector<std::vector<Var<T>>>& reps,
                    bool squared = false) {
  std::vector<Var<T>> terms;
  for (std::size_t a = 0; a < batch.per_attribute.size(); ++a) {
    for (const Triplet& t : batch.per_attribute[a]) {
      for (std::size_t i : {t.anchor, t.positive, t.negative}) {
        if (i >= reps.size() || a >= reps[i].size() || reps[i][a].tape == nullptr) {
          throw UsageError("ranking_loss: missing representation for item " + std::to_string(i));
        }
      }
      Var<T> d = ops::soft_triplet_dplus(reps[t.anchor][a], reps[t.positive][a], reps[t.negative][a]);
      terms.push_back(squared ? ops::mul(d, d) : d);
    }
  }
  return ops::add_n(tape, terms);
}

/// Sum over attributes of the cross-entropy of rep_a . v_a against the label.
template <typename T>
Var<T> head_classification_loss(Tape<T>& tape, const std::vector<Var<T>>& reps, const Labels& labels,
                                const AttributeSchema& schema) {
  if (reps.size() != schema.attribute_count() || !schema.valid_labels(labels)) {
    throw ArgumentError("head_classification_loss: one representation and label per attribute required");
  }
  std::vector<Var<T>> terms;
  for (std::size_t a = 0; a < reps.size(); ++a) {
    Var<T> logits = ops::matvec(reps[a], tape.param(heads::classifier(schema, a)));
    terms.push_back(ops::softmax_cross_entropy(logits, static_cast<std::size_t>(labels[a])));
  }
  return ops::add_n(tape, terms);
}

/// Seeded triplets for one attribute over a pool of labelled items: anchor
/// uniform, positive uniform among other items sharing the anchor's value,
/// negative uniform among items with a different value.
inline std::vector<Triplet> sample_triplets(const std::vector<Labels>& labels, std::size_t attribute,
                                            std::size_t count, std::uint64_t seed) {
  std::map<int, std::vector<std::size_t>> by_value;
  for (std::size_t i = 0; i < labels.size(); ++i) by_value[labels[i].at(attribute)].push_back(i);
  std::vector<std::size_t> anchors;
  for (const auto& [v, items] : by_value)
    if (items.size() >= 2) anchors.insert(anchors.end(), items.begin(), items.end());
  if (by_value.size() < 2 || anchors.empty()) {
    throw SamplingError("sample_triplets: attribute " + std::to_string(attribute) +
                        " has no valid (anchor, positive, negative) combination");
  }
  std::sort(anchors.begin(), anchors.end());
  std::mt19937_64 rng(seed);
  std::vector<Triplet> out;
  out.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    const std::size_t anchor = anchors[std::uniform_int_distribution<std::size_t>(0, anchors.size() - 1)(rng)];
    const int value = labels[anchor][attribute];
    const auto& same = by_value[value];
    std::size_t pick = std::uniform_int_distribution<std::size_t>(0, same.size() - 2)(rng);
    const auto self = static_cast<std::size_t>(std::find(same.begin(), same.end(), anchor) - same.begin());
    if (pick >= self) ++pick;
    const std::size_t negatives = labels.size() - same.size();
    std::size_t neg_pick = std::uniform_int_distribution<std::size_t>(0, negatives - 1)(rng);
    std::size_t negative = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i][attribute] == value) continue;
      if (neg_pick-- == 0) {
        negative = i;
        break;
      }
    }
    out.push_back({anchor, same[pick], negative});
  }
  return out;
}

/// Within-batch triplets: at most one per anchor and attribute, skipping anchors
/// whose value has no second item or no negative in the batch.
inline TripletBatch batch_triplets(const std::vector<Labels>& labels, std::size_t attributes, std::mt19937_64& rng) {
  TripletBatch batch;
  batch.per_attribute.resize(attributes);
  for (std::size_t a = 0; a < attributes; ++a) {
    for (std::size_t anchor = 0; anchor < labels.size(); ++anchor) {
      std::vector<std::size_t> pos, neg;
      for (std::size_t i = 0; i < labels.size(); ++i) {
        if (i == anchor) continue;
        (labels[i][a] == labels[anchor][a] ? pos : neg).push_back(i);
      }
      if (pos.empty() || neg.empty()) continue;
      const std::size_t p = pos[std::uniform_int_distribution<std::size_t>(0, pos.size() - 1)(rng)];
      const std::size_t n = neg[std::uniform_int_distribution<std::size_t>(0, neg.size() - 1)(rng)];
      batch.per_attribute[a].push_back({anchor, p, n});
    }
  }
  return batch;
}

}  // namespace attrsearch
