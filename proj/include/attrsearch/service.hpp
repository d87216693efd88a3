#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <utility>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "attrsearch/engine.hpp"

namespace attrsearch {

/// Heatmap as an 8-bit grayscale image of the given size: values scaled by the
/// map maximum, negatives clipped to zero, bilinear (align-corners) upsampling.
inline Image8 render_heatmap(const Tensor<float>& heatmap, std::size_t height, std::size_t width) {
  require_rank(heatmap, 2, "render_heatmap");
  const std::size_t h = heatmap.dim(0), w = heatmap.dim(1);
  const float mx = *std::max_element(heatmap.data().begin(), heatmap.data().end());
  Image8 out{height, width, 1, std::vector<std::uint8_t>(height * width, 0)};
  if (!(mx > 0.0f)) return out;
  auto coord = [](std::size_t i, std::size_t out_n, std::size_t in_n) {
    return out_n > 1 ? static_cast<double>(i) * static_cast<double>(in_n - 1) / static_cast<double>(out_n - 1)
                     : 0.5 * static_cast<double>(in_n - 1);
  };
  auto value = [&](std::size_t y, std::size_t x) { return std::max(0.0, static_cast<double>(heatmap.at(y, x)) / mx); };
  for (std::size_t y = 0; y < height; ++y) {
    const double sy = coord(y, height, h);
    const auto y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double sx = coord(x, width, w);
      const auto x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = value(y0, x0) + (value(y0, x1) - value(y0, x0)) * fx;
      const double bottom = value(y1, x0) + (value(y1, x1) - value(y1, x0)) * fx;
      out.at(y, x, 0) = quantize_unit(top + (bottom - top) * fy);
    }
  }
  return out;
}

/// Immutable snapshot the service answers from.
struct ServiceState {
  Model model;
  GalleryIndex index;
  Dataset data;

  ServiceState(Model m, GalleryIndex idx, Dataset d) : model(std::move(m)), index(std::move(idx)), data(std::move(d)) {
    if (index.model_version != model.version()) {
      throw LoadError("index was built from checkpoint " + index.model_version + " but the loaded checkpoint is " +
                      model.version());
    }
    if (!(index.schema == model.schema) || !(data.schema() == model.schema)) {
      throw LoadError("checkpoint, index and dataset schemas differ");
    }
  }

  static std::shared_ptr<const ServiceState> open(const std::filesystem::path& checkpoint,
                                                  const std::filesystem::path& index,
                                                  const std::filesystem::path& data) {
    return std::make_shared<const ServiceState>(Model::load(checkpoint), GalleryIndex::load(index), Dataset::load(data));
  }
};

struct HttpResponse {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

/// Route handlers as plain functions of the request, so they can be exercised
/// without a socket. mount() wires them into an httplib server.
class Service {
 public:
  explicit Service(std::shared_ptr<const ServiceState> state, std::size_t thumbnail_size = 64)
      : state_(std::move(state)), thumbnail_size_(thumbnail_size) {
    if (!state_) throw UsageError("service: no state");
    if (thumbnail_size_ == 0) throw ArgumentError("thumbnail size must be positive");
  }

  static HttpResponse error(int status, const std::string& code, const std::string& message,
                            const std::optional<std::string>& field = std::nullopt) {
    nlohmann::ordered_json e{{"code", code}, {"message", message}};
    if (field) e["field"] = *field;
    return {status, "application/json", nlohmann::ordered_json{{"error", e}}.dump()};
  }

  static HttpResponse json(const nlohmann::ordered_json& j) { return {200, "application/json", j.dump()}; }

  HttpResponse schema() const { return json(state_->model.schema.to_json()); }

  HttpResponse query(const std::string& body) const {
    const AttributeSchema& schema = state_->model.schema;
    nlohmann::json req;
    try {
      req = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception&) {
      return error(400, "bad_request", "request body is not valid JSON");
    }
    if (!req.is_object()) return error(400, "bad_request", "request body must be a JSON object");
    if (!req.contains("query_id") || !req["query_id"].is_string()) {
      return error(422, "invalid_field", "query_id must be a string", "query_id");
    }
    if (!req.contains("attribute") || !req["attribute"].is_string()) {
      return error(422, "invalid_field", "attribute must be a string", "attribute");
    }
    if (!req.contains("value") || !req["value"].is_string()) {
      return error(422, "invalid_field", "value must be a string", "value");
    }
    if (!req.contains("k") || !req["k"].is_number_integer() || req["k"].get<long long>() < 1) {
      return error(422, "invalid_field", "k must be an integer >= 1", "k");
    }
    const std::string id = req["query_id"].get<std::string>();
    const LabeledImage* image = state_->data.find(id);
    if (!image) return error(404, "not_found", "unknown image id '" + id + "'");
    const std::string attr_name = req["attribute"].get<std::string>();
    const auto a = schema.find_attribute(attr_name);
    if (!a) return error(422, "invalid_field", "unknown attribute '" + attr_name + "'", "attribute");
    const std::string value_name = req["value"].get<std::string>();
    const auto v = schema.find_value(*a, value_name);
    if (!v) {
      return error(422, "invalid_field", "attribute '" + attr_name + "' has no value '" + value_name + "'", "value");
    }
    if (image->labels[*a] == static_cast<int>(*v)) {
      return error(422, "invalid_field", "image '" + id + "' already has " + attr_name + "=" + value_name, "value");
    }
    const auto k = static_cast<std::size_t>(req["k"].get<long long>());
    const QueryResult r = attrsearch::query(state_->index, state_->model, *image, {*a, static_cast<int>(*v)}, k);

    nlohmann::ordered_json out;
    auto results = nlohmann::ordered_json::array();
    for (std::size_t j = 0; j < r.ids.size(); ++j) {
      results.push_back({{"id", r.ids[j]},
                         {"distance", r.distances[j]},
                         {"labels", label_names(state_->index.labels[r.positions[j]])},
                         {"hit", static_cast<bool>(r.hits[j])}});
    }
    out["query_id"] = id;
    out["manipulated_attribute"] = attr_name;
    out["value"] = value_name;
    out["query_labels"] = label_names(image->labels);
    out["target_labels"] = label_names(r.target);
    out["results"] = results;
    return json(out);
  }

  HttpResponse aam_png(const std::string& id, const std::string& attribute) const {
    std::optional<HttpResponse> err;
    const auto aam = activation(id, attribute, err);
    if (err) return *err;
    const LabeledImage& img = state_->data.get(id);
    return {200, "image/png", encode_png(render_heatmap(aam->heatmap, img.image.height, img.image.width))};
  }

  HttpResponse aam_box(const std::string& id, const std::string& attribute) const {
    std::optional<HttpResponse> err;
    const auto aam = activation(id, attribute, err);
    if (err) return *err;
    const AttributeSchema& schema = state_->model.schema;
    const RoiBox box = threshold_bbox(*aam);
    return json({{"image_id", id},
                 {"attribute", attribute},
                 {"class", schema.attribute(aam->attribute).values.at(aam->cls)},
                 {"class_index", aam->cls},
                 {"box", {{"y1", box.y1}, {"x1", box.x1}, {"y2", box.y2}, {"x2", box.x2}}}});
  }

  HttpResponse thumbnail(const std::string& id) const {
    const LabeledImage* img = state_->data.find(id);
    if (!img) return error(404, "not_found", "unknown image id '" + id + "'");
    return {200, "image/png", encode_png(resize_bilinear(img->image, thumbnail_size_, thumbnail_size_))};
  }

  void mount(httplib::Server& server, const std::filesystem::path& static_dir = {}) const {
    auto send = [](httplib::Response& res, const HttpResponse& r) {
      res.status = r.status;
      res.set_content(r.body, r.content_type);
    };
    server.Get("/schema", [this, send](const httplib::Request&, httplib::Response& res) { send(res, schema()); });
    server.Post("/query",
                [this, send](const httplib::Request& req, httplib::Response& res) { send(res, query(req.body)); });
    server.Get("/aam/:id/:attribute/box", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, aam_box(req.path_params.at("id"), req.path_params.at("attribute")));
    });
    server.Get("/aam/:id/:attribute", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, aam_png(req.path_params.at("id"), req.path_params.at("attribute")));
    });
    server.Get("/gallery/:id/thumbnail", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, thumbnail(req.path_params.at("id")));
    });
    server.set_exception_handler([send](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      std::string msg = "internal error";
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        msg = e.what();
      } catch (...) {
      }
      send(res, error(500, "internal", msg));
    });
    if (!static_dir.empty()) server.set_mount_point("/", static_dir.string());
  }

  const ServiceState& state() const { return *state_; }

 private:
  nlohmann::ordered_json label_names(const Labels& labels) const {
    const AttributeSchema& schema = state_->model.schema;
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (std::size_t a = 0; a < schema.attribute_count(); ++a)
      j[schema.attribute(a).name] = schema.attribute(a).values.at(static_cast<std::size_t>(labels.at(a)));
    return j;
  }

  std::optional<AttributeActivationMap<float>> activation(const std::string& id, const std::string& attribute,
                                                          std::optional<HttpResponse>& err) const {
    const LabeledImage* img = state_->data.find(id);
    if (!img) {
      err = error(404, "not_found", "unknown image id '" + id + "'");
      return std::nullopt;
    }
    const auto a = state_->model.schema.find_attribute(attribute);
    if (!a) {
      err = error(404, "not_found", "unknown attribute '" + attribute + "'");
      return std::nullopt;
    }
    return state_->model.aam(state_->model.features(*img), *a);
  }

  std::shared_ptr<const ServiceState> state_;
  std::size_t thumbnail_size_;
};

}  // namespace attrsearch
