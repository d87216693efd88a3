#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attrsearch/numerics/ops.hpp"

namespace attrsearch {

struct ConvLayerSpec {
  std::string name;
  std::size_t kernel = 3;
  std::size_t out_channels = 16;
  std::size_t stride = 1;
  ops::Padding padding = ops::Padding::same;
};

/// Convolutional stack. The output of layer `mid_layer` plays the role of the
/// pooled-from map, the last layer's output the map used for activation maps.
struct ArchConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t channels = 3;
  std::vector<ConvLayerSpec> layers;
  std::size_t mid_layer = 2;

  /// 64x64x3 -> 16x16x16 -> 8x8x32 -> 8x8x32 (mid) -> 8x8x64 (last).
  static ArchConfig desk_default() {
    ArchConfig c;
    c.layers = {{"conv1", 4, 16, 4, ops::Padding::valid},
                {"conv2", 3, 32, 2, ops::Padding::same},
                {"conv3", 3, 32, 1, ops::Padding::same},
                {"conv4", 3, 64, 1, ops::Padding::same}};
    c.mid_layer = 2;
    return c;
  }

  void validate() const {
    if (layers.empty()) throw ArgumentError("architecture has no layers");
    if (mid_layer >= layers.size()) throw ArgumentError("mid_layer out of range");
    (void)output_shape(layers.size() - 1);
  }

  /// Output shape (HxWxC) of layer i.
  Shape output_shape(std::size_t i) const {
    std::size_t h = height, w = width, c = channels;
    for (std::size_t l = 0; l <= i; ++l) {
      const auto& s = layers.at(l);
      h = ops::conv_axis(h, s.kernel, s.stride, s.padding).out;
      w = ops::conv_axis(w, s.kernel, s.stride, s.padding).out;
      c = s.out_channels;
    }
    return {h, w, c};
  }

  Shape mid_shape() const { return output_shape(mid_layer); }
  Shape last_shape() const { return output_shape(layers.size() - 1); }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j{{"input", {height, width, channels}}, {"mid_layer", mid_layer}};
    j["layers"] = nlohmann::ordered_json::array();
    for (const auto& l : layers) {
      j["layers"].push_back({{"name", l.name},
                             {"kernel", l.kernel},
                             {"out", l.out_channels},
                             {"stride", l.stride},
                             {"padding", l.padding == ops::Padding::same ? "same" : "valid"}});
    }
    return j;
  }

  static ArchConfig from_json(const nlohmann::json& j) {
    ArchConfig c;
    const auto in = j.at("input").get<std::vector<std::size_t>>();
    if (in.size() != 3) throw ArgumentError("architecture input must be [h, w, c]");
    c.height = in[0];
    c.width = in[1];
    c.channels = in[2];
    c.mid_layer = j.at("mid_layer").get<std::size_t>();
    for (const auto& l : j.at("layers")) {
      const std::string pad = l.at("padding").get<std::string>();
      if (pad != "same" && pad != "valid") throw ArgumentError("padding must be same|valid");
      c.layers.push_back({l.at("name").get<std::string>(), l.at("kernel").get<std::size_t>(),
                          l.at("out").get<std::size_t>(), l.at("stride").get<std::size_t>(),
                          pad == "same" ? ops::Padding::same : ops::Padding::valid});
    }
    c.validate();
    return c;
  }
};

namespace backbone {

inline std::string kernel_name(const ConvLayerSpec& l) { return "backbone/" + l.name + "/kernel"; }
inline std::string bias_name(const ConvLayerSpec& l) { return "backbone/" + l.name + "/bias"; }
inline const std::string kChannelMean = "backbone/channel_mean";

inline bool is_backbone(std::string_view name) { return name.starts_with("backbone/"); }

}  // namespace backbone

template <typename T>
struct FeatureVars {
  Var<T> mid;
  Var<T> last;
};

template <typename T>
struct FeatureMaps {
  Tensor<T> mid;
  Tensor<T> last;
};

/// Sum over layers of k*k*Cin*Cout + Cout.
inline std::size_t parameter_count(const ArchConfig& cfg) {
  std::size_t n = 0, c = cfg.channels;
  for (const auto& l : cfg.layers) {
    n += l.kernel * l.kernel * c * l.out_channels + l.out_channels;
    c = l.out_channels;
  }
  return n;
}

/// He-scaled Gaussian kernels, zero biases and zero channel means.
template <typename T = float>
ParamSet<T> init_backbone(const ArchConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ParamSet<T> params;
  std::size_t c = cfg.channels;
  for (const auto& l : cfg.layers) {
    const double fan_in = static_cast<double>(l.kernel * l.kernel * c);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    Tensor<T> k({l.kernel, l.kernel, c, l.out_channels});
    for (T& v : k.data()) v = static_cast<T>(dist(rng));
    params.emplace(backbone::kernel_name(l), std::move(k));
    params.emplace(backbone::bias_name(l), Tensor<T>({l.out_channels}));
    c = l.out_channels;
  }
  params.emplace(backbone::kChannelMean, Tensor<T>({cfg.channels}));
  return params;
}

/// Forward pass on a tape; parameters are read from the tape's registry.
template <typename T>
FeatureVars<T> extract_features(Tape<T>& tape, const ArchConfig& cfg, const Tensor<T>& pixels) {
  require_shape(pixels, {cfg.height, cfg.width, cfg.channels}, "extract_features pixels");
  const Tensor<T>& mean = tape.value(tape.param(backbone::kChannelMean));
  Tensor<T> centered = pixels;
  for (std::size_t i = 0; i < centered.size(); ++i) centered[i] -= mean[i % cfg.channels];
  Var<T> x = tape.constant(std::move(centered));
  FeatureVars<T> out;
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    const auto& l = cfg.layers[i];
    x = ops::conv2d(x, tape.param(backbone::kernel_name(l)), l.stride, l.padding);
    x = ops::relu(ops::add_bias(x, tape.param(backbone::bias_name(l))));
    if (i == cfg.mid_layer) out.mid = x;
  }
  out.last = x;
  return out;
}

/// Tape-free forward pass.
template <typename T>
FeatureMaps<T> extract_features(const ArchConfig& cfg, const ParamSet<T>& params, const Tensor<T>& pixels) {
  Tape<T> tape(params, [](std::string_view) { return false; });
  FeatureVars<T> v = extract_features(tape, cfg, pixels);
  return {v.mid.value(), v.last.value()};
}

/// Per-channel pixel means over a set of images (the normalization statistic).
template <typename Images>
Tensor<float> channel_means(const Images& images, std::size_t channels) {
  std::vector<double> acc(channels, 0.0);
  double count = 0.0;
  for (const auto* img : images) {
    const auto& bytes = img->image.bytes;
    for (std::size_t i = 0; i < bytes.size(); ++i) acc[i % channels] += bytes[i] / 255.0;
    count += static_cast<double>(bytes.size() / channels);
  }
  Tensor<float> m({channels});
  for (std::size_t c = 0; c < channels; ++c) m[c] = count > 0 ? static_cast<float>(acc[c] / count) : 0.0f;
  return m;
}

}  // namespace attrsearch
