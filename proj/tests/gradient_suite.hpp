#pragma once

#include <algorithm>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "attrsearch/numerics/gradcheck.hpp"
#include "attrsearch/trainer.hpp"
#include "test_support.hpp"

namespace testing_support {

using namespace attrsearch;

struct TensorCheck {
  std::string path;
  std::string tensor;
  GradCheckResult result;
};

struct GradientSuiteReport {
  std::size_t configurations = 0;
  std::vector<TensorCheck> checks;

  double worst() const {
    double w = 0.0;
    for (const auto& c : checks) w = std::max(w, c.result.max_relative_error);
    return w;
  }

  // Tensors for which every sampled coordinate sat on a relu kink.
  std::size_t unverified() const {
    return static_cast<std::size_t>(
        std::count_if(checks.begin(), checks.end(), [](const TensorCheck& c) { return c.result.checked == 0; }));
  }

  const TensorCheck* worst_check() const {
    const TensorCheck* w = nullptr;
    for (const auto& c : checks)
      if (!w || c.result.max_relative_error > w->result.max_relative_error) w = &c;
    return w;
  }
};

/// A randomly shaped miniature of the full model: three conv layers, two or
/// three attributes, small heads, optional fusion and shared projection.
struct TinySetup {
  Model model;
  ParamSet<double> params;
  std::vector<Tensor<double>> pixels;
  std::vector<Labels> labels;
  std::vector<std::vector<RoiBox>> boxes;
};

inline TinySetup tiny_setup(std::uint64_t seed, std::size_t batch = 4) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> coin(0, 1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);

  TinySetup s;
  Model& m = s.model;
  std::vector<Attribute> attrs{{"a", {"a0", "a1", "a2"}}, {"b", {"b0", "b1"}}};
  if (coin(rng)) attrs.push_back({"c", {"c0", "c1", "c2"}});
  m.schema = AttributeSchema(attrs);

  ArchConfig arch;
  arch.height = arch.width = 8 + 2 * static_cast<std::size_t>(coin(rng));
  arch.channels = 3;
  arch.layers = {{"conv1", 3, 4, 2, ops::Padding::same},
                 {"conv2", 3, 5, 1, coin(rng) ? ops::Padding::same : ops::Padding::valid},
                 {"conv3", 2 + static_cast<std::size_t>(coin(rng)), 4, 1, ops::Padding::same}};
  arch.mid_layer = 1;
  m.config.arch = arch;
  m.config.head.pool = 2;
  m.config.head.hidden = 6;
  m.config.head.dim = 4;
  m.config.head.fusion = coin(rng) != 0;
  m.config.head.squared_ranking = coin(rng) != 0;
  m.config.global.r = 3 + static_cast<std::size_t>(coin(rng));
  m.config.global.shared_projection = coin(rng) != 0;
  m.variant = VariantConfig::of(m.config.head.fusion ? Variant::FullFF : Variant::Full);

  const std::size_t A = m.schema.attribute_count();
  m.params = init_backbone<float>(arch, rng());
  init_classifier(m.params, m.schema, arch.last_shape()[2], rng(), 0.5);
  init_heads(m.params, m.schema, arch.mid_shape()[2], m.config.head, rng());
  init_global(m.params, m.schema, m.config.head.dim, m.config.global, rng());
  Tensor<float> memory({m.schema.value_count(), m.config.head.dim});
  for (float& v : memory.data()) v = static_cast<float>(u(rng));
  m.params.insert_or_assign(memory::kMatrix, memory);
  s.params = cast_params<double>(m.params);
  // Nonzero biases, slot weights away from 1 and a nonzero channel mean.
  for (auto& [name, t] : s.params) {
    if (name.ends_with("bias") || name == backbone::kChannelMean) {
      for (double& v : t.data()) v = 0.2 * u(rng);
    } else if (name == global::kLambda) {
      for (double& v : t.data()) v = 1.0 + 0.5 * u(rng);
    }
  }

  for (std::size_t i = 0; i < batch; ++i) {
    Tensor<double> px({arch.height, arch.width, arch.channels});
    for (double& v : px.data()) v = 0.5 + 0.5 * u(rng);
    s.pixels.push_back(std::move(px));
    Labels l(A);
    for (std::size_t a = 0; a < A; ++a)
      l[a] = std::uniform_int_distribution<int>(0, static_cast<int>(m.schema.values_of(a)) - 1)(rng);
    s.labels.push_back(l);
    std::vector<RoiBox> bx;
    for (std::size_t a = 0; a < A; ++a) bx.push_back(random_box(rng));
    s.boxes.push_back(bx);
  }
  // Make sure attribute 0 has both a shared and a differing value in the batch.
  s.labels[1][0] = s.labels[0][0];
  s.labels[2][0] = (s.labels[0][0] + 1) % 3;
  return s;
}

/// Every loss path of the model, as LossBuilders over a double-precision copy
/// of the parameters, plus the tensors each path is checked against.
struct LossPath {
  std::string name;
  LossBuilder build;
  std::function<bool(std::string_view)> checked;
};

inline std::vector<LossPath> loss_paths(const TinySetup& s) {
  const Model& m = s.model;
  const AttributeSchema& schema = m.schema;
  const std::size_t A = schema.attribute_count();
  std::vector<LossPath> paths;

  auto reps_on_tape = [&s, &m, A](Tape<double>& tape) {
    std::vector<std::vector<Var<double>>> reps;
    for (std::size_t i = 0; i < s.pixels.size(); ++i) {
      FeatureVars<double> fv = extract_features(tape, m.config.arch, s.pixels[i]);
      std::vector<Var<double>> r;
      for (std::size_t a = 0; a < A; ++a)
        r.push_back(attribute_representation(tape, fv.mid, s.boxes[i][a], m.schema, a, m.config.head));
      reps.push_back(r);
    }
    return reps;
  };
  auto fixed_triplets = [A]() {
    TripletBatch b;
    b.per_attribute.assign(A, {{0, 1, 2}, {1, 0, 3}, {2, 3, 0}});
    return b;
  };
  std::set<std::string> up_to_mid, all_conv;
  for (std::size_t l = 0; l < m.config.arch.layers.size(); ++l) {
    for (const auto& n : {backbone::kernel_name(m.config.arch.layers[l]), backbone::bias_name(m.config.arch.layers[l])}) {
      all_conv.insert(n);
      if (l <= m.config.arch.mid_layer) up_to_mid.insert(n);
    }
  }
  auto conv_or = [](std::set<std::string> conv, std::function<bool(std::string_view)> other) {
    return [conv, other](std::string_view n) { return conv.count(std::string(n)) != 0 || other(n); };
  };
  auto backbone_or = [conv_or, all_conv](std::function<bool(std::string_view)> other) { return conv_or(all_conv, other); };
  auto mid_or = [conv_or, up_to_mid](std::function<bool(std::string_view)> other) { return conv_or(up_to_mid, other); };
  auto head_fc = [](std::string_view n) { return heads::is_head(n) && !n.ends_with("/classifier"); };

  paths.push_back({"L_C",
                   [&s, &m](Tape<double>& tape) {
                     std::vector<Var<double>> terms;
                     for (std::size_t i = 0; i < s.pixels.size(); ++i) {
                       terms.push_back(classification_loss(tape, extract_features(tape, m.config.arch, s.pixels[i]),
                                                           s.labels[i], m.schema));
                     }
                     return ops::add_n(tape, terms);
                   },
                   backbone_or(localization::is_classifier)});

  paths.push_back({"L_T",
                   [&m, reps_on_tape, fixed_triplets](Tape<double>& tape) {
                     return ranking_loss(tape, fixed_triplets(), reps_on_tape(tape), m.config.head.squared_ranking);
                   },
                   mid_or(head_fc)});

  paths.push_back({"L_TC",
                   [&s, &m, reps_on_tape](Tape<double>& tape) {
                     const auto reps = reps_on_tape(tape);
                     std::vector<Var<double>> terms;
                     for (std::size_t i = 0; i < reps.size(); ++i)
                       terms.push_back(head_classification_loss(tape, reps[i], s.labels[i], m.schema));
                     return ops::add_n(tape, terms);
                   },
                   mid_or(heads::is_head)});

  paths.push_back({"joint",
                   [&s, &m](Tape<double>& tape) {
                     std::mt19937_64 triplet_rng(17);
                     LossWeights w{0.7, 1.5, 1.1, 0.0};
                     return trainer::joint_loss(tape, m, s.pixels, s.labels, &s.boxes, w, DropoutContext{}, triplet_rng)
                         .total;
                   },
                   backbone_or([](std::string_view n) { return heads::is_head(n) || localization::is_classifier(n); })});

  // L_G through the heads: representations stay on the tape, so the slot
  // weights, projections, memory rows, heads and backbone all receive gradients.
  paths.push_back({"L_G",
                   [&s, &m, reps_on_tape, A](Tape<double>& tape) {
                     const auto reps = reps_on_tape(tape);
                     Var<double> memory = tape.param(memory::kMatrix);
                     std::vector<Var<double>> terms;
                     const std::vector<std::array<std::size_t, 3>> roles{{0, 1, 2}, {3, 2, 1}};
                     for (std::size_t t = 0; t < roles.size(); ++t) {
                       const std::size_t a = t % A;
                       const int value = (s.labels[roles[t][0]][a] + 1) % static_cast<int>(m.schema.values_of(a));
                       Var<double> g = retrieve(tape, memory, one_hot(m.schema, a, value).cast<double>());
                       Var<double> fq = compose(tape, reps[roles[t][0]], std::optional<std::pair<std::size_t, Var<double>>>({a, g}),
                                                a, m.schema, m.config.global);
                       Var<double> fp = compose<double>(tape, reps[roles[t][1]], std::nullopt, a, m.schema, m.config.global);
                       Var<double> fn = compose<double>(tape, reps[roles[t][2]], std::nullopt, a, m.schema, m.config.global);
                       terms.push_back(global_loss(fq, fp, fn));
                     }
                     return ops::add_n(tape, terms);
                   },
                   mid_or([](std::string_view n) {
                     return global::is_global(n) || n == memory::kMatrix || heads::is_head(n);
                   })});

  // L_G as stage 3 computes it, over representations held fixed.
  std::vector<std::vector<Tensor<double>>> fixed;
  {
    Tape<double> tape(s.params, [](std::string_view) { return false; });
    for (const auto& row : reps_on_tape(tape)) {
      std::vector<Tensor<double>> r;
      for (const auto& v : row) r.push_back(v.value());
      fixed.push_back(std::move(r));
    }
  }
  std::vector<GlobalTriplet> triplets;
  for (std::size_t t = 0; t < 3; ++t) {
    const std::size_t a = t % A, q = t, pos = (t + 1) % 4, neg = (t + 2) % 4;
    const int value = (s.labels[q][a] + 1) % static_cast<int>(schema.values_of(a));
    triplets.push_back({q, {a, value}, pos, neg});
  }
  paths.push_back({"L_G/fixed",
                   [&m, fixed, triplets](Tape<double>& tape) { return trainer::global_batch_loss(tape, m, fixed, triplets); },
                   [](std::string_view n) { return global::is_global(n) || n == memory::kMatrix; }});
  return paths;
}

/// Central differences (64-bit) on a random subset of coordinates of
/// every tensor each loss path depends on, over `configurations` random setups.
inline GradientSuiteReport run_gradient_suite(std::size_t configurations, std::uint64_t seed,
                                              std::size_t coords_per_tensor = 6, double step = 1e-5) {
  GradientSuiteReport report;
  report.configurations = configurations;
  for (std::size_t c = 0; c < configurations; ++c) {
    const TinySetup setup = tiny_setup(synth::mix_seed(seed, c));
    for (const LossPath& path : loss_paths(setup)) {
      for (const auto& [name, value] : setup.params) {
        if (!path.checked(name)) continue;
        ParamSet<double> params = setup.params;
        report.checks.push_back({path.name, name,
                                 finite_difference_check(params, name, path.build, step, coords_per_tensor, seed + c)});
      }
    }
  }
  return report;
}

}  // namespace testing_support
