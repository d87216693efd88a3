#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attrsearch/model.hpp"

namespace attrsearch {

/// Immutable gallery snapshot: per image its label vector, the A attribute
/// representations and one projected vector per possible manipulated attribute.
struct GalleryIndex {
  AttributeSchema schema;
  std::vector<std::string> ids;
  std::vector<Labels> labels;
  std::vector<std::vector<Tensor<float>>> reps;       // [item][attribute], length D
  std::vector<std::vector<Tensor<float>>> projected;  // [item][attribute], length r
  std::string model_version;
  std::size_t dim = 0;
  std::size_t r = 0;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }

  std::optional<std::size_t> position(const std::string& id) const {
    auto it = std::find(ids.begin(), ids.end(), id);
    if (it == ids.end()) return std::nullopt;
    return static_cast<std::size_t>(it - ids.begin());
  }

  ParamSet<float> tensors() const {
    const std::size_t A = schema.attribute_count(), N = size();
    Tensor<float> R({N, A, dim}), P({N, A, r});
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t a = 0; a < A; ++a) {
        std::copy(reps[i][a].data().begin(), reps[i][a].data().end(), R.data().begin() + (i * A + a) * dim);
        std::copy(projected[i][a].data().begin(), projected[i][a].data().end(), P.data().begin() + (i * A + a) * r);
      }
    return {{"index/reps", std::move(R)}, {"index/projected", std::move(P)}};
  }

  std::string version() const {
    std::string bytes = checkpoint::encode(tensors());
    for (const auto& id : ids) bytes += id + '\n';
    return fnv1a_hex(bytes);
  }

  nlohmann::ordered_json sidecar() const {
    nlohmann::ordered_json j;
    j["format"] = "attrsearch-index";
    j["distance"] = "squared_euclidean";
    j["version"] = version();
    j["model_version"] = model_version;
    j["schema"] = schema.to_json();
    j["dim"] = dim;
    j["r"] = r;
    j["ids"] = ids;
    j["labels"] = labels;
    return j;
  }

  /// Writes `path` (tensors) and `path`.json (ids, labels, versions).
  void save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    checkpoint::save(path, tensors());
    write_file(Model::sidecar_path(path), sidecar().dump(2) + "\n");
  }

  static GalleryIndex load(const std::filesystem::path& path) {
    const auto j = nlohmann::json::parse(read_file(Model::sidecar_path(path)));
    if (j.value("format", "") != "attrsearch-index") throw LoadError("index: " + path.string() + " is not an index");
    GalleryIndex idx;
    idx.schema = AttributeSchema::from_json(j.at("schema"));
    idx.ids = j.at("ids").get<std::vector<std::string>>();
    idx.labels = j.at("labels").get<std::vector<Labels>>();
    idx.model_version = j.at("model_version").get<std::string>();
    idx.dim = j.at("dim").get<std::size_t>();
    idx.r = j.at("r").get<std::size_t>();
    const ParamSet<float> t = checkpoint::load(path);
    checkpoint::require_tensors(t, {"index/reps", "index/projected"});
    const std::size_t A = idx.schema.attribute_count(), N = idx.ids.size();
    const Tensor<float>& R = t.at("index/reps");
    const Tensor<float>& P = t.at("index/projected");
    if (idx.labels.size() != N || R.shape() != Shape{N, A, idx.dim} || P.shape() != Shape{N, A, idx.r}) {
      throw LoadError("index: tensor shapes do not match the sidecar");
    }
    auto slice = [](const Tensor<float>& src, std::size_t offset, std::size_t n) {
      return Tensor<float>({n}, std::vector<float>(src.data().begin() + offset, src.data().begin() + offset + n));
    };
    for (std::size_t i = 0; i < N; ++i) {
      idx.reps.emplace_back();
      idx.projected.emplace_back();
      for (std::size_t a = 0; a < A; ++a) {
        idx.reps[i].push_back(slice(R, (i * A + a) * idx.dim, idx.dim));
        idx.projected[i].push_back(slice(P, (i * A + a) * idx.r, idx.r));
      }
    }
    if (idx.version() != j.at("version").get<std::string>()) throw LoadError("index: content does not match its version tag");
    return idx;
  }
};

inline GalleryIndex index_gallery(const Model& model, const std::vector<const LabeledImage*>& gallery) {
  GalleryIndex idx;
  idx.schema = model.schema;
  idx.model_version = model.version();
  idx.dim = model.config.head.dim;
  idx.r = model.config.global.r;
  for (const LabeledImage* img : gallery) {
    auto reps = model.representations(*img);
    std::vector<Tensor<float>> proj;
    for (std::size_t a = 0; a < model.schema.attribute_count(); ++a) proj.push_back(model.project(reps, a));
    idx.ids.push_back(img->id);
    idx.labels.push_back(img->labels);
    idx.reps.push_back(std::move(reps));
    idx.projected.push_back(std::move(proj));
  }
  return idx;
}

struct QueryResult {
  std::vector<std::size_t> positions;  // into the index
  std::vector<std::string> ids;
  std::vector<double> distances;       // squared Euclidean, nondecreasing
  std::vector<bool> hits;
  Labels target;
  Manipulation manipulation;
};

inline double squared_distance(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.size() != b.size()) throw DimensionError("squared_distance: lengths differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s;
}

inline void validate_manipulation(const AttributeSchema& schema, const Labels& query, const Manipulation& m) {
  if (m.attribute >= schema.attribute_count()) throw ArgumentError("manipulation: attribute index out of range");
  if (m.value < 0 || static_cast<std::size_t>(m.value) >= schema.values_of(m.attribute)) {
    throw ArgumentError("manipulation: value out of range for attribute " + schema.attribute(m.attribute).name);
  }
  if (query.at(m.attribute) == m.value) {
    throw ArgumentError("manipulation: " + schema.attribute(m.attribute).name + " already has value " +
                        schema.attribute(m.attribute).values[static_cast<std::size_t>(m.value)]);
  }
}

/// Ranks the gallery against an already composed query vector using the
/// projections of attribute `a`.
inline QueryResult rank_gallery(const GalleryIndex& index, const Tensor<float>& fq, std::size_t a, std::size_t k) {
  QueryResult res;
  std::vector<std::pair<double, std::size_t>> scored;
  scored.reserve(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) scored.emplace_back(squared_distance(index.projected[i].at(a), fq), i);
  const std::size_t n = std::min(k, scored.size());
  auto before = [&](const auto& x, const auto& y) {
    if (x.first != y.first) return x.first < y.first;
    return index.ids[x.second] < index.ids[y.second];
  };
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(n), scored.end(), before);
  for (std::size_t j = 0; j < n; ++j) {
    res.positions.push_back(scored[j].second);
    res.ids.push_back(index.ids[scored[j].second]);
    res.distances.push_back(scored[j].first);
  }
  return res;
}

/// Manipulation query from precomputed query representations.
inline QueryResult query(const GalleryIndex& index, const Model& model, const std::vector<Tensor<float>>& query_reps,
                         const Labels& query_labels, const Manipulation& m, std::size_t k) {
  validate_manipulation(model.schema, query_labels, m);
  QueryResult res = rank_gallery(index, model.project(query_reps, m.attribute, m), m.attribute, k);
  res.manipulation = m;
  res.target = apply_manipulation(query_labels, m);
  for (std::size_t p : res.positions) res.hits.push_back(index.labels[p] == res.target);
  return res;
}

inline QueryResult query(const GalleryIndex& index, const Model& model, const LabeledImage& image, const Manipulation& m,
                         std::size_t k) {
  validate_manipulation(model.schema, image.labels, m);
  return query(index, model, model.representations(image), image.labels, m, k);
}

/// One evaluated (query, manipulation) pair with its ranked list at the largest K.
struct EvalRecord {
  std::string query_id;
  Manipulation manipulation;
  Labels target;
  std::vector<std::string> ranked_ids;
  std::vector<Labels> ranked_labels;
};

struct EvalResult {
  AttributeSchema schema;
  std::vector<std::size_t> ks;
  // accuracy[k_index][attribute]; NaN when no query could manipulate that attribute
  std::vector<std::vector<double>> accuracy;
  std::vector<double> average;
  std::vector<std::size_t> counts;  // per attribute
  std::vector<EvalRecord> records;

  double at(std::size_t k) const {
    for (std::size_t i = 0; i < ks.size(); ++i)
      if (ks[i] == k) return average[i];
    throw ArgumentError("evaluation has no K=" + std::to_string(k));
  }

  std::string csv() const {
    std::ostringstream os;
    os << "K";
    for (const auto& attr : schema.attributes()) os << ',' << attr.name;
    os << ",avg\n" << std::fixed << std::setprecision(6);
    for (std::size_t i = 0; i < ks.size(); ++i) {
      os << ks[i];
      for (double v : accuracy[i]) {
        os << ',';
        if (!std::isnan(v)) os << v;
      }
      os << ',' << average[i] << '\n';
    }
    return os.str();
  }

  nlohmann::ordered_json summary() const {
    nlohmann::ordered_json j;
    j["metric"] = "top_k_accuracy";
    j["queries"] = records.size();
    nlohmann::ordered_json per_attr = nlohmann::ordered_json::object();
    for (std::size_t a = 0; a < schema.attribute_count(); ++a) per_attr[schema.attribute(a).name] = counts[a];
    j["manipulations_per_attribute"] = per_attr;
    auto rows = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < ks.size(); ++i) {
      nlohmann::ordered_json row;
      row["k"] = ks[i];
      for (std::size_t a = 0; a < schema.attribute_count(); ++a) {
        row[schema.attribute(a).name] = std::isnan(accuracy[i][a]) ? nlohmann::ordered_json(nullptr)
                                                                   : nlohmann::ordered_json(accuracy[i][a]);
      }
      row["avg"] = average[i];
      rows.push_back(row);
    }
    j["table"] = rows;
    return j;
  }
};

/// Top-K accuracy over every manipulation each query admits in the gallery.
/// A hit needs the full label vector of a retrieved image to equal the target.
/// The average is the mean of the per-attribute accuracies that are defined.
inline EvalResult evaluate(const GalleryIndex& index, const Model& model, const std::vector<const LabeledImage*>& queries,
                           std::vector<std::size_t> ks) {
  if (ks.empty()) throw ArgumentError("evaluate: no K given");
  for (std::size_t k : ks)
    if (k == 0) throw ArgumentError("evaluate: K must be positive");
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  const std::size_t A = model.schema.attribute_count(), kmax = ks.back();
  const std::set<Labels> present(index.labels.begin(), index.labels.end());

  EvalResult res;
  res.schema = model.schema;
  res.ks = ks;
  res.counts.assign(A, 0);
  std::vector<std::vector<std::size_t>> hits(ks.size(), std::vector<std::size_t>(A, 0));
  for (const LabeledImage* q : queries) {
    const auto options = manipulations_available(model.schema, q->labels, present);
    if (options.empty()) continue;
    const auto reps = model.representations(*q);
    for (const Manipulation& m : options) {
      const QueryResult qr = query(index, model, reps, q->labels, m, kmax);
      EvalRecord rec{q->id, m, qr.target, qr.ids, {}};
      for (std::size_t p : qr.positions) rec.ranked_labels.push_back(index.labels[p]);
      ++res.counts[m.attribute];
      std::optional<std::size_t> first_hit;
      for (std::size_t j = 0; j < qr.hits.size(); ++j)
        if (qr.hits[j]) {
          first_hit = j;
          break;
        }
      for (std::size_t i = 0; i < ks.size(); ++i)
        if (first_hit && *first_hit < ks[i]) ++hits[i][m.attribute];
      res.records.push_back(std::move(rec));
    }
  }
  for (std::size_t i = 0; i < ks.size(); ++i) {
    std::vector<double> row(A, std::nan(""));
    double sum = 0.0;
    std::size_t defined = 0;
    for (std::size_t a = 0; a < A; ++a) {
      if (res.counts[a] == 0) continue;
      row[a] = static_cast<double>(hits[i][a]) / static_cast<double>(res.counts[a]);
      sum += row[a];
      ++defined;
    }
    res.accuracy.push_back(row);
    res.average.push_back(defined ? sum / static_cast<double>(defined) : 0.0);
  }
  return res;
}

}  // namespace attrsearch
