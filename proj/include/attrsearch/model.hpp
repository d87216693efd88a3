#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attrsearch/global_rep.hpp"
#include "attrsearch/heads.hpp"
#include "attrsearch/localization.hpp"
#include "attrsearch/memory.hpp"
#include "attrsearch/numerics/checkpoint.hpp"

namespace attrsearch {

/// Rungs of the ablation ladder, in table order.
enum class Variant { woRank, Rank, RankL, RankLG, Full, FullFF };

inline constexpr std::array<Variant, 6> kAllVariants{Variant::woRank, Variant::Rank,  Variant::RankL,
                                                     Variant::RankLG, Variant::Full, Variant::FullFF};

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::woRank: return "woRank";
    case Variant::Rank: return "Rank";
    case Variant::RankL: return "RankL";
    case Variant::RankLG: return "RankLG";
    case Variant::Full: return "Full";
    case Variant::FullFF: return "FullFF";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (Variant v : kAllVariants)
    if (to_string(v) == s) return v;
  throw ArgumentError("unknown variant '" + s + "' (expected woRank|Rank|RankL|RankLG|Full|FullFF)");
}

struct VariantConfig {
  Variant variant = Variant::Full;
  bool use_triplet = true;
  bool use_localization = true;
  bool use_global_training = true;
  bool memory_trainable = true;
  bool feature_fusion = false;

  static VariantConfig of(Variant v) {
    const int rung = static_cast<int>(v);
    VariantConfig c;
    c.variant = v;
    c.use_triplet = rung >= static_cast<int>(Variant::Rank);
    c.use_localization = rung >= static_cast<int>(Variant::RankL);
    c.use_global_training = rung >= static_cast<int>(Variant::RankLG);
    c.memory_trainable = rung >= static_cast<int>(Variant::Full);
    c.feature_fusion = rung >= static_cast<int>(Variant::FullFF);
    return c;
  }
};

struct ModelConfig {
  ArchConfig arch = ArchConfig::desk_default();
  HeadConfig head;
  GlobalConfig global;
};

inline std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

/// Everything needed to turn an image into representations and composed vectors.
class Model {
 public:
  AttributeSchema schema;
  ModelConfig config;
  VariantConfig variant;
  ParamSet<float> params;
  nlohmann::ordered_json training_info = nlohmann::ordered_json::object();

  FeatureMaps<float> features(const LabeledImage& img) const {
    return extract_features(config.arch, params, img.pixels());
  }

  AttributeActivationMap<float> aam(const FeatureMaps<float>& fm, std::size_t a) const {
    return compute_aam(fm.last, params.at(localization::classifier_name(schema, a)), a);
  }

  /// Per-attribute pooling boxes: activation-map boxes when localization is on.
  std::vector<RoiBox> boxes(const FeatureMaps<float>& fm) const {
    std::vector<RoiBox> out;
    for (std::size_t a = 0; a < schema.attribute_count(); ++a)
      out.push_back(variant.use_localization ? threshold_bbox(aam(fm, a)) : RoiBox::full());
    return out;
  }

  std::vector<Tensor<float>> representations(const FeatureMaps<float>& fm) const {
    Tape<float> tape(params, [](std::string_view) { return false; });
    Var<float> mid = tape.constant(fm.mid);
    const auto bx = boxes(fm);
    std::vector<Tensor<float>> out;
    for (std::size_t a = 0; a < schema.attribute_count(); ++a)
      out.push_back(attribute_representation(tape, mid, bx[a], schema, a, config.head).value());
    return out;
  }

  std::vector<Tensor<float>> representations(const LabeledImage& img) const { return representations(features(img)); }

  MemoryBlock memory() const {
    MemoryBlock m;
    m.matrix = params.at(memory::kMatrix);
    m.row_index = canonical_rows(schema);
    m.trainable = variant.memory_trainable;
    return m;
  }

  /// Composed vector projected by the manipulated attribute's projection.
  Tensor<float> project(const std::vector<Tensor<float>>& reps, std::size_t projection_attr,
                        std::optional<Manipulation> manipulation = std::nullopt) const {
    std::optional<std::pair<std::size_t, Tensor<float>>> m;
    if (manipulation) {
      m.emplace(manipulation->attribute,
                retrieve(memory(), one_hot(schema, manipulation->attribute, manipulation->value)));
    }
    return compose(params, reps, m, projection_attr, schema, config.global);
  }

  std::vector<std::string> required_tensors() const {
    std::vector<std::string> names{backbone::kChannelMean, memory::kMatrix, global::kLambda};
    for (const auto& l : config.arch.layers) {
      names.push_back(backbone::kernel_name(l));
      names.push_back(backbone::bias_name(l));
    }
    for (std::size_t a = 0; a < schema.attribute_count(); ++a) {
      names.push_back(localization::classifier_name(schema, a));
      names.push_back(heads::fc1_weight(schema, a));
      names.push_back(heads::fc1_bias(schema, a));
      names.push_back(heads::fc2_weight(schema, a));
      names.push_back(heads::fc2_bias(schema, a));
      names.push_back(global::projection(schema, a, config.global));
    }
    return names;
  }

  /// Content hash of the tensors; ties an index to the checkpoint it came from.
  std::string version() const { return fnv1a_hex(checkpoint::encode(params)); }

  nlohmann::ordered_json sidecar() const {
    nlohmann::ordered_json j;
    j["format"] = "attrsearch-checkpoint";
    j["version"] = version();
    j["schema"] = schema.to_json();
    j["arch"] = config.arch.to_json();
    j["head"] = config.head.to_json();
    j["global"] = config.global.to_json();
    j["variant"] = to_string(variant.variant);
    j["memory"] = {{"trainable", variant.memory_trainable}, {"row_index", memory_rows_json()}};
    j["training"] = training_info;
    return j;
  }

  /// Writes `path` (tensors) and `path`.json (configuration, memory row index).
  void save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    checkpoint::save(path, params);
    write_file(sidecar_path(path), sidecar().dump(2) + "\n");
  }

  static Model load(const std::filesystem::path& path) {
    Model m;
    const auto j = nlohmann::json::parse(read_file(sidecar_path(path)));
    m.schema = AttributeSchema::from_json(j.at("schema"));
    m.config.arch = ArchConfig::from_json(j.at("arch"));
    m.config.head = HeadConfig::from_json(j.at("head"));
    m.config.global = GlobalConfig::from_json(j.at("global"));
    m.variant = VariantConfig::of(parse_variant(j.at("variant").get<std::string>()));
    m.training_info = j.value("training", nlohmann::ordered_json::object());
    m.params = checkpoint::load(path);
    checkpoint::require_tensors(m.params, m.required_tensors());
    return m;
  }

  static std::filesystem::path sidecar_path(const std::filesystem::path& path) {
    return std::filesystem::path(path.string() + ".json");
  }

 private:
  nlohmann::ordered_json memory_rows_json() const {
    MemoryBlock m;
    m.row_index = canonical_rows(schema);
    return m.row_index_json(schema);
  }
};

}  // namespace attrsearch
