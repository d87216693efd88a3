#pragma once

#include <algorithm>
#include <array>
#include <iomanip>
#include <optional>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "attrsearch/image_io.hpp"

namespace attrsearch {

using Labels = std::vector<int>;

struct Attribute {
  std::string name;
  std::vector<std::string> values;
};

/// Ordered attributes and their ordered values. Row order of the memory block,
/// the meaning of manipulation indicators and the served schema all follow it.
class AttributeSchema {
 public:
  AttributeSchema() = default;
  explicit AttributeSchema(std::vector<Attribute> attributes) : attributes_(std::move(attributes)) {
    validate();
  }

  static AttributeSchema default_schema() {
    const std::vector<std::string> shapes{"square", "circle", "triangle", "cross"};
    return AttributeSchema({{"color", {"red", "green", "blue", "yellow"}},
                            {"top_shape", shapes},
                            {"bottom_shape", shapes},
                            {"pattern", {"plain", "hstripes", "vstripes", "checker"}}});
  }

  void validate() const {
    if (attributes_.size() < 2) throw ArgumentError("schema needs at least 2 attributes");
    std::set<std::string> names;
    for (const auto& a : attributes_) {
      if (!names.insert(a.name).second) throw ArgumentError("duplicate attribute " + a.name);
      if (a.values.size() < 2) throw ArgumentError("attribute " + a.name + " needs >= 2 values");
      std::set<std::string> vals(a.values.begin(), a.values.end());
      if (vals.size() != a.values.size()) throw ArgumentError("duplicate value in " + a.name);
    }
  }

  std::size_t attribute_count() const { return attributes_.size(); }
  /// Total number of (attribute, value) pairs.
  std::size_t value_count() const {
    std::size_t c = 0;
    for (const auto& a : attributes_) c += a.values.size();
    return c;
  }
  std::size_t values_of(std::size_t a) const { return attributes_.at(a).values.size(); }
  const Attribute& attribute(std::size_t a) const { return attributes_.at(a); }
  const std::vector<Attribute>& attributes() const { return attributes_; }

  /// Row of (a, v) in attribute-major order.
  std::size_t row_of(std::size_t a, std::size_t v) const {
    if (a >= attributes_.size() || v >= attributes_[a].values.size()) {
      throw IndexError("schema: (attribute, value) out of range");
    }
    std::size_t row = 0;
    for (std::size_t i = 0; i < a; ++i) row += attributes_[i].values.size();
    return row + v;
  }

  std::optional<std::size_t> find_attribute(const std::string& name) const {
    for (std::size_t a = 0; a < attributes_.size(); ++a)
      if (attributes_[a].name == name) return a;
    return std::nullopt;
  }

  std::optional<std::size_t> find_value(std::size_t a, const std::string& name) const {
    const auto& vals = attributes_.at(a).values;
    for (std::size_t v = 0; v < vals.size(); ++v)
      if (vals[v] == name) return v;
    return std::nullopt;
  }

  bool valid_labels(const Labels& labels) const {
    if (labels.size() != attributes_.size()) return false;
    for (std::size_t a = 0; a < labels.size(); ++a)
      if (labels[a] < 0 || static_cast<std::size_t>(labels[a]) >= attributes_[a].values.size()) return false;
    return true;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["attributes"] = nlohmann::ordered_json::array();
    for (const auto& a : attributes_) j["attributes"].push_back({{"name", a.name}, {"values", a.values}});
    return j;
  }

  static AttributeSchema from_json(const nlohmann::json& j) {
    std::vector<Attribute> attrs;
    for (const auto& a : j.at("attributes")) {
      attrs.push_back({a.at("name").get<std::string>(), a.at("values").get<std::vector<std::string>>()});
    }
    return AttributeSchema(std::move(attrs));
  }

  friend bool operator==(const AttributeSchema& a, const AttributeSchema& b) {
    if (a.attributes_.size() != b.attributes_.size()) return false;
    for (std::size_t i = 0; i < a.attributes_.size(); ++i) {
      if (a.attributes_[i].name != b.attributes_[i].name ||
          a.attributes_[i].values != b.attributes_[i].values)
        return false;
    }
    return true;
  }

 private:
  std::vector<Attribute> attributes_;
};

struct LabeledImage {
  std::string id;
  Image8 image;
  Labels labels;

  Tensor<float> pixels() const { return to_tensor(image); }
};

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> query;
  std::vector<std::string> gallery;
};

/// Per-image nuisance: glyph jitter, stripe phase and the pixel-noise stream.
struct Nuisance {
  int top_dy = 0, top_dx = 0;
  int bottom_dy = 0, bottom_dx = 0;
  int stripe_phase = 0;
  std::uint64_t noise_seed = 0;
};

struct SynthConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  int jitter = 2;
  double noise_sigma = 0.02;
  // When set, bottom_shape copies top_shape with this probability (fusion experiments).
  double correlation = 0.0;
};

namespace synth {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Vertical bands of the raster, as fractions of the height.
struct Bands {
  std::size_t top_end, mid_begin, mid_end, bottom_begin;
};

inline Bands bands(std::size_t height) {
  const std::size_t third = height / 3;
  return {third, third, height - third, height - third};
}

inline std::array<double, 3> body_color(int value) {
  static constexpr std::array<std::array<double, 3>, 8> palette{{{0.85, 0.20, 0.20},
                                                                 {0.20, 0.75, 0.25},
                                                                 {0.20, 0.35, 0.85},
                                                                 {0.90, 0.85, 0.20},
                                                                 {0.70, 0.30, 0.80},
                                                                 {0.20, 0.80, 0.80},
                                                                 {0.95, 0.55, 0.15},
                                                                 {0.55, 0.55, 0.55}}};
  return palette[static_cast<std::size_t>(value) % palette.size()];
}

/// True if pixel offset (dy, dx) from a glyph center lies inside glyph `shape`.
inline bool glyph_covers(int shape, int dy, int dx) {
  switch (shape % 4) {
    case 0:  // square
      return std::abs(dy) <= 5 && std::abs(dx) <= 5;
    case 1:  // circle
      return dy * dy + dx * dx <= 36;
    case 2:  // triangle, apex up
      return dy >= -6 && dy <= 6 && std::abs(dx) * 2 <= dy + 6;
    default:  // cross
      return (std::abs(dy) <= 6 && std::abs(dx) <= 1) || (std::abs(dx) <= 6 && std::abs(dy) <= 1);
  }
}

inline bool pattern_darkens(int pattern, std::size_t y, std::size_t x, int phase) {
  const auto py = static_cast<int>(y) + phase, px = static_cast<int>(x) + phase;
  switch (pattern % 4) {
    case 0:
      return false;
    case 1:
      return (py / 3) % 2 == 0;
    case 2:
      return (px / 3) % 2 == 0;
    default:
      return ((py / 4) + (px / 4)) % 2 == 0;
  }
}

}  // namespace synth

/// Draws one image of the default layout: body color everywhere, a dark glyph
/// in the top band, a texture in the middle band and a light glyph in the
/// bottom band.
/// Schemas with other attribute counts reuse the same four roles in order.
inline Image8 render(const SynthConfig& cfg, const Labels& labels, const Nuisance& nz) {
  const std::size_t H = cfg.height, W = cfg.width;
  const synth::Bands b = synth::bands(H);
  const int color = labels.size() > 0 ? labels[0] : 0;
  const int top = labels.size() > 1 ? labels[1] : 0;
  const int bottom = labels.size() > 2 ? labels[2] : 0;
  const int pattern = labels.size() > 3 ? labels[3] : 0;
  const auto rgb = synth::body_color(color);
  const int top_cy = static_cast<int>(b.top_end / 2) + nz.top_dy;
  const int bot_cy = static_cast<int>(b.bottom_begin + (H - b.bottom_begin) / 2) + nz.bottom_dy;
  const int cx_top = static_cast<int>(W / 2) + nz.top_dx;
  const int cx_bot = static_cast<int>(W / 2) + nz.bottom_dx;
  const std::size_t stripe_begin = b.mid_begin + 3, stripe_end = b.mid_end - 3;

  std::mt19937_64 noise_rng(nz.noise_seed);
  std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
  Image8 img{H, W, 3, std::vector<std::uint8_t>(H * W * 3)};
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      std::array<double, 3> px = rgb;
      const int iy = static_cast<int>(y), ix = static_cast<int>(x);
      if (y < b.top_end && synth::glyph_covers(top, iy - top_cy, ix - cx_top)) {
        px = {0.08, 0.08, 0.08};
      } else if (y >= b.bottom_begin && synth::glyph_covers(bottom, iy - bot_cy, ix - cx_bot)) {
        px = {0.97, 0.97, 0.97};
      } else if (y >= stripe_begin && y < stripe_end && synth::pattern_darkens(pattern, y, x, nz.stripe_phase)) {
        for (double& c : px) c *= 0.45;
      }
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = quantize_unit(px[c] + noise(noise_rng));
    }
  }
  return img;
}

inline Nuisance draw_nuisance(const SynthConfig& cfg, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> jit(-cfg.jitter, cfg.jitter);
  std::uniform_int_distribution<int> phase(0, 5);
  Nuisance nz;
  nz.top_dy = jit(rng);
  nz.top_dx = jit(rng);
  nz.bottom_dy = jit(rng);
  nz.bottom_dx = jit(rng);
  nz.stripe_phase = phase(rng);
  nz.noise_seed = rng();
  return nz;
}

inline std::string image_id(std::size_t i) {
  std::ostringstream os;
  os << "img_" << std::setw(5) << std::setfill('0') << i;
  return os.str();
}

/// Deterministic dataset with uniformly drawn labels.
inline std::vector<LabeledImage> generate_dataset(const AttributeSchema& schema, std::size_t n,
                                                  std::uint64_t seed, const SynthConfig& cfg = {}) {
  if (n < 1) throw ArgumentError("generate_dataset: n must be >= 1");
  std::vector<LabeledImage> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::mt19937_64 rng(synth::mix_seed(seed, i));
    Labels labels(schema.attribute_count());
    for (std::size_t a = 0; a < labels.size(); ++a) {
      std::uniform_int_distribution<int> pick(0, static_cast<int>(schema.values_of(a)) - 1);
      labels[a] = pick(rng);
    }
    if (cfg.correlation > 0.0 && labels.size() > 2 && schema.values_of(1) == schema.values_of(2)) {
      std::bernoulli_distribution coin(cfg.correlation);
      if (coin(rng)) labels[2] = labels[1];
    }
    const Nuisance nz = draw_nuisance(cfg, rng);
    out.push_back({image_id(i), render(cfg, labels, nz), labels});
  }
  return out;
}

/// Seeded shuffle, then query | gallery | train.
inline DatasetSplit split(const std::vector<LabeledImage>& dataset, std::size_t n_query,
                          std::size_t n_gallery, std::uint64_t seed) {
  if (n_query + n_gallery >= dataset.size()) {
    throw ArgumentError("split: query + gallery sizes must be smaller than the dataset (" +
                        std::to_string(dataset.size()) + ")");
  }
  std::vector<std::string> ids;
  ids.reserve(dataset.size());
  for (const auto& img : dataset) ids.push_back(img.id);
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  DatasetSplit s;
  s.query.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_query));
  s.gallery.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_query),
                   ids.begin() + static_cast<std::ptrdiff_t>(n_query + n_gallery));
  s.train.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_query + n_gallery), ids.end());
  return s;
}

struct Manipulation {
  std::size_t attribute = 0;
  int value = 0;

  friend bool operator==(const Manipulation&, const Manipulation&) = default;
  friend auto operator<=>(const Manipulation&, const Manipulation&) = default;
};

inline Labels apply_manipulation(Labels labels, const Manipulation& m) {
  labels.at(m.attribute) = m.value;
  return labels;
}

/// Single-attribute changes of `query` whose exact result exists in the gallery.
inline std::vector<Manipulation> manipulations_available(const AttributeSchema& schema, const Labels& query,
                                                         const std::set<Labels>& gallery_labels) {
  std::vector<Manipulation> out;
  for (std::size_t a = 0; a < schema.attribute_count(); ++a) {
    for (int v = 0; v < static_cast<int>(schema.values_of(a)); ++v) {
      if (v == query[a]) continue;
      if (gallery_labels.count(apply_manipulation(query, {a, v}))) out.push_back({a, v});
    }
  }
  return out;
}

inline std::vector<Manipulation> manipulations_available(const AttributeSchema& schema, const Labels& query,
                                                         const std::vector<Labels>& gallery) {
  return manipulations_available(schema, query, std::set<Labels>(gallery.begin(), gallery.end()));
}

/// On-disk dataset: schema.json, manifest.jsonl, split.json and images/*.png.
class Dataset {
 public:
  Dataset() = default;
  Dataset(AttributeSchema schema, std::vector<LabeledImage> images, DatasetSplit split)
      : schema_(std::move(schema)), images_(std::move(images)), split_(std::move(split)) {
    reindex();
  }

  const AttributeSchema& schema() const { return schema_; }
  const std::vector<LabeledImage>& images() const { return images_; }
  const DatasetSplit& split() const { return split_; }

  const LabeledImage* find(const std::string& id) const {
    auto it = by_id_.find(id);
    return it == by_id_.end() ? nullptr : &images_[it->second];
  }

  const LabeledImage& get(const std::string& id) const {
    const LabeledImage* img = find(id);
    if (!img) throw ArgumentError("unknown image id " + id);
    return *img;
  }

  std::vector<const LabeledImage*> subset(const std::vector<std::string>& ids) const {
    std::vector<const LabeledImage*> out;
    out.reserve(ids.size());
    for (const auto& id : ids) out.push_back(&get(id));
    return out;
  }

  void save(const std::filesystem::path& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "images");
    write_file(dir / "schema.json", schema_.to_json().dump(2) + "\n");
    std::string manifest;
    for (const auto& img : images_) {
      const std::string file = "images/" + img.id + ".png";
      write_file(dir / file, encode_png(img.image));
      nlohmann::ordered_json rec{{"id", img.id}, {"labels", img.labels}, {"file", file}};
      manifest += rec.dump() + "\n";
    }
    write_file(dir / "manifest.jsonl", manifest);
    nlohmann::ordered_json s{{"train", split_.train}, {"query", split_.query}, {"gallery", split_.gallery}};
    write_file(dir / "split.json", s.dump(2) + "\n");
  }

  static Dataset load(const std::filesystem::path& dir) {
    AttributeSchema schema = AttributeSchema::from_json(nlohmann::json::parse(read_file(dir / "schema.json")));
    std::vector<LabeledImage> images;
    std::istringstream manifest(read_file(dir / "manifest.jsonl"));
    std::string line;
    while (std::getline(manifest, line)) {
      if (line.empty()) continue;
      const auto rec = nlohmann::json::parse(line);
      LabeledImage img{rec.at("id").get<std::string>(), decode_png(read_file(dir / rec.at("file").get<std::string>())),
                       rec.at("labels").get<Labels>()};
      if (!schema.valid_labels(img.labels)) throw LoadError("manifest: invalid labels for " + img.id);
      if (img.image.channels != 3) throw LoadError("manifest: " + img.id + " is not RGB");
      images.push_back(std::move(img));
    }
    const auto s = nlohmann::json::parse(read_file(dir / "split.json"));
    DatasetSplit sp{s.at("train").get<std::vector<std::string>>(), s.at("query").get<std::vector<std::string>>(),
                    s.at("gallery").get<std::vector<std::string>>()};
    return Dataset(std::move(schema), std::move(images), std::move(sp));
  }

 private:
  void reindex() {
    by_id_.clear();
    for (std::size_t i = 0; i < images_.size(); ++i) {
      if (!by_id_.emplace(images_[i].id, i).second) throw ArgumentError("duplicate image id " + images_[i].id);
    }
    for (const auto* part : {&split_.train, &split_.query, &split_.gallery})
      for (const auto& id : *part)
        if (!by_id_.count(id)) throw ArgumentError("split references unknown id " + id);
  }

  AttributeSchema schema_;
  std::vector<LabeledImage> images_;
  DatasetSplit split_;
  std::unordered_map<std::string, std::size_t> by_id_;
};

}  // namespace attrsearch
