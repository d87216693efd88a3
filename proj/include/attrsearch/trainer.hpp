#pragma once

#include <algorithm>
#include <chrono>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attrsearch/model.hpp"
#include "attrsearch/numerics/sgd.hpp"

namespace attrsearch {

struct LossWeights {
  double classification = 1.0;  // lambda_C
  double ranking = 1.5;         // lambda_T
  double head_classification = 1.0;  // lambda_TC
  double global = 0.0;          // lambda_G

  void validate() const {
    if (classification < 0 || ranking < 0 || head_classification < 0 || global < 0) {
      throw ArgumentError("loss weights must be nonnegative");
    }
  }
};

struct TrainConfig {
  ModelConfig model;
  SgdConfig sgd;
  LossWeights stage2_weights;
  std::size_t stage1_epochs = 12;
  std::size_t stage2_epochs = 12;
  std::size_t stage3_epochs = 2;
  std::size_t batch_size = 16;
  // Global triplets drawn per stage-3 epoch; 0 means one per training image.
  std::size_t global_triplets_per_epoch = 0;
  // Compute pooling boxes once after stage 1 instead of on every stage-2 forward pass.
  bool freeze_boxes = false;
  double classifier_init_scale = 0.001;
  std::uint64_t seed = 0;
  // Called after every epoch with (stage, epoch, mean total loss).
  std::function<void(int, std::size_t, double)> on_epoch;

  nlohmann::ordered_json to_json() const {
    return {{"stage1_epochs", stage1_epochs},
            {"stage2_epochs", stage2_epochs},
            {"stage3_epochs", stage3_epochs},
            {"batch_size", batch_size},
            {"learning_rate", sgd.learning_rate},
            {"clip_norm", sgd.clip_norm},
            {"dropout_keep_probability", sgd.dropout_keep_probability},
            {"loss_weights",
             {{"C", stage2_weights.classification},
              {"T", stage2_weights.ranking},
              {"TC", stage2_weights.head_classification},
              {"G", stage2_weights.global}}},
            {"global_triplets_per_epoch", global_triplets_per_epoch},
            {"freeze_boxes", freeze_boxes},
            {"seed", seed}};
  }
};

/// Per-epoch mean loss of each term, keyed "stage<k>/<term>".
struct TrainReport {
  std::map<std::string, std::vector<double>> curves;
  std::map<std::string, double> stage_seconds;
  std::uint64_t seed = 0;
  std::vector<std::string> notes;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["seed"] = seed;
    j["notes"] = notes;
    j["curves"] = curves;
    j["stage_seconds"] = stage_seconds;
    return j;
  }
};

struct TrainResult {
  Model model;
  TrainReport report;
};

namespace trainer {

inline std::uint64_t stage_seed(std::uint64_t seed, std::uint64_t stage) { return synth::mix_seed(seed, 1000 + stage); }

inline bool stage1_trainable(std::string_view n) {
  return (backbone::is_backbone(n) && n != backbone::kChannelMean) || localization::is_classifier(n);
}

inline bool stage2_trainable(std::string_view n) { return stage1_trainable(n) || heads::is_head(n); }

inline std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t n, std::size_t batch, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch)));
  return out;
}

/// Loss terms of one stage-2 batch, already summed over the batch.
template <typename T>
struct JointTerms {
  Var<T> classification;
  Var<T> ranking;
  Var<T> head_classification;
  Var<T> total;  // weighted sum divided by the batch size
};

/// Builds the stage-2 joint loss for a batch on `tape`. `boxes[i]` overrides the
/// activation-map boxes of item i when present.
template <typename T>
JointTerms<T> joint_loss(Tape<T>& tape, const Model& model, const std::vector<Tensor<T>>& pixels,
                         const std::vector<Labels>& labels, const std::vector<std::vector<RoiBox>>* boxes,
                         const LossWeights& w, DropoutContext drop, std::mt19937_64& triplet_rng) {
  const AttributeSchema& schema = model.schema;
  const std::size_t A = schema.attribute_count();
  std::vector<Var<T>> lc, ltc;
  std::vector<std::vector<Var<T>>> reps(pixels.size());
  const bool need_heads = model.variant.use_triplet;
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    FeatureVars<T> fv = extract_features(tape, model.config.arch, pixels[i]);
    lc.push_back(classification_loss(tape, fv, labels[i], schema));
    if (!need_heads) continue;
    for (std::size_t a = 0; a < A; ++a) {
      RoiBox box = RoiBox::full();
      if (model.variant.use_localization) {
        box = boxes ? (*boxes)[i][a]
                    : threshold_bbox(compute_aam(fv.last.value(), tape.value(tape.param(localization::classifier_name(schema, a))), a));
      }
      reps[i].push_back(attribute_representation(tape, fv.mid, box, schema, a, model.config.head, drop));
    }
    ltc.push_back(head_classification_loss(tape, reps[i], labels[i], schema));
  }
  JointTerms<T> out;
  out.classification = ops::add_n(tape, lc);
  out.head_classification = ops::add_n(tape, ltc);
  if (need_heads) {
    out.ranking = ranking_loss(tape, batch_triplets(labels, A, triplet_rng), reps, model.config.head.squared_ranking);
  } else {
    out.ranking = ops::add_n<T>(tape, {});
  }
  const T inv = T{1} / static_cast<T>(pixels.size());
  std::vector<Var<T>> weighted{ops::scale(out.classification, static_cast<T>(w.classification) * inv)};
  if (need_heads) {
    weighted.push_back(ops::scale(out.ranking, static_cast<T>(w.ranking) * inv));
    weighted.push_back(ops::scale(out.head_classification, static_cast<T>(w.head_classification) * inv));
  }
  out.total = ops::add_n(tape, weighted);
  return out;
}

/// Global ranking loss of a batch of stage-3 triplets over fixed representations,
/// divided by the batch size. reps[item][attribute].
template <typename T>
Var<T> global_batch_loss(Tape<T>& tape, const Model& model, const std::vector<std::vector<Tensor<T>>>& reps,
                         const std::vector<GlobalTriplet>& triplets) {
  const AttributeSchema& schema = model.schema;
  Var<T> memory = tape.param(memory::kMatrix);
  auto constants = [&](std::size_t item) {
    std::vector<Var<T>> v;
    for (const auto& r : reps.at(item)) v.push_back(tape.constant(r));
    return v;
  };
  std::vector<Var<T>> terms;
  for (const GlobalTriplet& t : triplets) {
    const std::size_t a = t.manipulation.attribute;
    Var<T> g = retrieve(tape, memory, one_hot(schema, a, t.manipulation.value).template cast<T>());
    Var<T> fq = compose(tape, constants(t.query), std::optional<std::pair<std::size_t, Var<T>>>({a, g}), a, schema,
                        model.config.global);
    Var<T> fp = compose<T>(tape, constants(t.positive), std::nullopt, a, schema, model.config.global);
    Var<T> fn = compose<T>(tape, constants(t.negative), std::nullopt, a, schema, model.config.global);
    terms.push_back(global_loss(fq, fp, fn));
  }
  return ops::scale(ops::add_n(tape, terms), T{1} / static_cast<T>(std::max<std::size_t>(1, triplets.size())));
}

}  // namespace trainer

/// Three-stage optimizer. Stage 1 trains the backbone and the per-attribute
/// classifiers on L_C; stage 2 adds the heads with the weighted joint loss;
/// then the memory block is built and stage 3 fits slot weights and
/// projections (and the memory rows when trainable) on L_G with every
/// representation held fixed.
class Trainer {
 public:
  Trainer(const Dataset& data, TrainConfig cfg) : data_(data), cfg_(std::move(cfg)) {
    cfg_.sgd.validate();
    cfg_.stage2_weights.validate();
    if (cfg_.batch_size == 0) throw ArgumentError("batch size must be positive");
    train_ = data_.subset(data_.split().train);
    if (train_.empty()) throw ArgumentError("training split is empty");
    for (const auto* img : train_) train_labels_.push_back(img->labels);
  }

  /// Initial parameters plus stage 1. Independent of the variant, so one result
  /// can seed every rung of the ladder.
  TrainResult stage1() {
    TrainResult res;
    Model& m = res.model;
    res.report.seed = cfg_.seed;
    m.schema = data_.schema();
    m.config = cfg_.model;
    m.params = init_backbone<float>(m.config.arch, trainer::stage_seed(cfg_.seed, 0));
    m.params.at(backbone::kChannelMean) = channel_means(train_, m.config.arch.channels);
    init_classifier(m.params, m.schema, m.config.arch.last_shape()[2], trainer::stage_seed(cfg_.seed, 1),
                    cfg_.classifier_init_scale);
    m.variant = VariantConfig::of(Variant::woRank);
    run_classification_epochs(m, res.report, 1, cfg_.stage1_epochs, trainer::stage_seed(cfg_.seed, 2));
    return res;
  }

  /// Stage 2 for a variant, starting from a stage-1 result. Variants that agree
  /// on triplet, localization and fusion flags produce identical results here.
  TrainResult stage2(const TrainResult& after_stage1, Variant variant) {
    TrainResult res = after_stage1;
    Model& m = res.model;
    m.variant = VariantConfig::of(variant);
    m.config.head.fusion = m.variant.feature_fusion;
    init_heads(m.params, m.schema, m.config.arch.mid_shape()[2], m.config.head, trainer::stage_seed(cfg_.seed, 3));
    if (!m.variant.use_triplet) {
      run_classification_epochs(m, res.report, 2, cfg_.stage2_epochs, trainer::stage_seed(cfg_.seed, 4));
    } else {
      run_joint_epochs(m, res.report);
    }
    return res;
  }

  /// Memory construction and stage 3.
  TrainResult stage3(const TrainResult& after_stage2, Variant variant) {
    TrainResult res = after_stage2;
    Model& m = res.model;
    const VariantConfig vc = VariantConfig::of(variant);
    if (stage2_key(vc) != stage2_key(m.variant)) {
      throw UsageError("stage3: stage-2 result was trained for variant " + to_string(m.variant.variant));
    }
    m.variant = vc;

    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::vector<Tensor<float>>> reps;
    reps.reserve(train_.size());
    for (const auto* img : train_) reps.push_back(m.representations(*img));
    MemoryBlock memory;
    try {
      memory = build_memory(m.schema, reps, train_labels_);
    } catch (const CoverageError& e) {
      throw CoverageError(std::string(e.what()) + "; regenerate the dataset with more images or a larger training split");
    }
    m.params.insert_or_assign(memory::kMatrix, memory.matrix);

    if (m.variant.use_global_training) {
      init_global(m.params, m.schema, m.config.head.dim, m.config.global, trainer::stage_seed(cfg_.seed, 6));
      run_global_epochs(m, res.report, reps);
    } else {
      m.config.global = identity_global(m.params, m.schema, m.config.head.dim);
    }
    res.report.stage_seconds["stage3"] = seconds_since(t0);

    m.training_info = cfg_.to_json();
    m.training_info["variant"] = to_string(variant);
    res.report.notes = {"batch size, per-batch triplet rule and parameter initializations are implementation choices",
                        "per-batch losses are averaged over the batch before the gradient step"};
    return res;
  }

  TrainResult finish(const TrainResult& after_stage1, Variant variant) {
    return stage3(stage2(after_stage1, variant), variant);
  }

  static int stage2_key(const VariantConfig& v) {
    return (v.use_triplet ? 1 : 0) | (v.use_localization ? 2 : 0) | (v.feature_fusion ? 4 : 0);
  }

  TrainResult train(Variant variant) { return finish(stage1(), variant); }

  const std::vector<const LabeledImage*>& train_images() const { return train_; }

 private:
  static double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  void step(Model& m, const Tape<float>& tape) const {
    ParamSet<float> grads = tape.gradients();
    clip_global_norm(grads, cfg_.sgd.clip_norm);
    sgd_step(m.params, grads, cfg_.sgd.learning_rate);
  }

  void notify(int stage, std::size_t epoch, double loss) const {
    if (cfg_.on_epoch) cfg_.on_epoch(stage, epoch, loss);
  }

  void run_classification_epochs(Model& m, TrainReport& report, int stage, std::size_t epochs, std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(seed);
    const std::string key = "stage" + std::to_string(stage) + "/L_C";
    for (std::size_t e = 0; e < epochs; ++e) {
      double total = 0.0;
      for (const auto& batch : trainer::shuffled_batches(train_.size(), cfg_.batch_size, rng)) {
        Tape<float> tape(m.params, trainer::stage1_trainable);
        std::vector<Var<float>> terms;
        for (std::size_t i : batch) {
          FeatureVars<float> fv = extract_features(tape, m.config.arch, train_[i]->pixels());
          terms.push_back(classification_loss(tape, fv, train_[i]->labels, m.schema));
        }
        Var<float> sum = ops::add_n(tape, terms);
        Var<float> loss = ops::scale(sum, 1.0f / static_cast<float>(batch.size()));
        tape.backward(loss);
        step(m, tape);
        total += sum.value().item();
      }
      report.curves[key].push_back(total / static_cast<double>(train_.size()));
      notify(stage, e, report.curves[key].back());
    }
    report.stage_seconds["stage" + std::to_string(stage)] = seconds_since(t0);
  }

  void run_joint_epochs(Model& m, TrainReport& report) {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(trainer::stage_seed(cfg_.seed, 4));
    std::mt19937_64 dropout_rng(trainer::stage_seed(cfg_.seed, 5));
    std::vector<std::vector<RoiBox>> frozen;
    if (cfg_.freeze_boxes && m.variant.use_localization) {
      for (const auto* img : train_) frozen.push_back(m.boxes(m.features(*img)));
    }
    const auto& w = cfg_.stage2_weights;
    for (std::size_t e = 0; e < cfg_.stage2_epochs; ++e) {
      double lc = 0, lt = 0, ltc = 0, total = 0;
      for (const auto& batch : trainer::shuffled_batches(train_.size(), cfg_.batch_size, rng)) {
        std::vector<Tensor<float>> pixels;
        std::vector<Labels> labels;
        std::vector<std::vector<RoiBox>> boxes;
        for (std::size_t i : batch) {
          pixels.push_back(train_[i]->pixels());
          labels.push_back(train_[i]->labels);
          if (!frozen.empty()) boxes.push_back(frozen[i]);
        }
        Tape<float> tape(m.params, trainer::stage2_trainable);
        auto terms = trainer::joint_loss(tape, m, pixels, labels, frozen.empty() ? nullptr : &boxes, w,
                                         {cfg_.sgd.dropout_keep_probability, &dropout_rng}, rng);
        tape.backward(terms.total);
        step(m, tape);
        lc += terms.classification.value().item();
        lt += terms.ranking.value().item();
        ltc += terms.head_classification.value().item();
        total += terms.total.value().item() * static_cast<double>(batch.size());
      }
      const double n = static_cast<double>(train_.size());
      report.curves["stage2/L_C"].push_back(lc / n);
      report.curves["stage2/L_T"].push_back(lt / n);
      report.curves["stage2/L_TC"].push_back(ltc / n);
      report.curves["stage2/joint"].push_back(total / n);
      notify(2, e, total / n);
    }
    report.stage_seconds["stage2"] = seconds_since(t0);
  }

  void run_global_epochs(Model& m, TrainReport& report, const std::vector<std::vector<Tensor<float>>>& reps) {
    const bool memory_trainable = m.variant.memory_trainable;
    auto trainable = [memory_trainable](std::string_view n) {
      return global::is_global(n) || (memory_trainable && n == memory::kMatrix);
    };
    const std::size_t per_epoch = cfg_.global_triplets_per_epoch ? cfg_.global_triplets_per_epoch : train_.size();
    for (std::size_t e = 0; e < cfg_.stage3_epochs; ++e) {
      const auto triplets =
          sample_global_triplets(m.schema, train_labels_, per_epoch, synth::mix_seed(trainer::stage_seed(cfg_.seed, 7), e));
      double total = 0;
      for (std::size_t i = 0; i < triplets.size(); i += cfg_.batch_size) {
        const std::vector<GlobalTriplet> batch(triplets.begin() + static_cast<std::ptrdiff_t>(i),
                                               triplets.begin() + static_cast<std::ptrdiff_t>(std::min(triplets.size(), i + cfg_.batch_size)));
        Tape<float> tape(m.params, trainable);
        Var<float> loss = trainer::global_batch_loss(tape, m, reps, batch);
        tape.backward(loss);
        step(m, tape);
        total += loss.value().item() * static_cast<double>(batch.size());
      }
      report.curves["stage3/L_G"].push_back(total / static_cast<double>(triplets.size()));
      notify(3, e, report.curves["stage3/L_G"].back());
    }
  }

  const Dataset& data_;
  TrainConfig cfg_;
  std::vector<const LabeledImage*> train_;
  std::vector<Labels> train_labels_;
};

}  // namespace attrsearch
