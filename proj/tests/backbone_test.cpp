#include <gtest/gtest.h>

#include <cmath>

#include "attrsearch/backbone.hpp"
#include "attrsearch/numerics/gradcheck.hpp"
#include "attrsearch/synthgen.hpp"
#include "test_support.hpp"

using namespace attrsearch;
using testing_support::random_tensor;

TEST(Arch, DefaultMapShapes) {
  const ArchConfig cfg = ArchConfig::desk_default();
  EXPECT_EQ(cfg.mid_shape(), (Shape{8, 8, 32}));
  EXPECT_EQ(cfg.last_shape(), (Shape{8, 8, 64}));
  const auto params = init_backbone(cfg, 1);
  const auto fm = extract_features(cfg, params, Tensor<float>({64, 64, 3}, 0.5f));
  EXPECT_EQ(fm.mid.shape(), (Shape{8, 8, 32}));
  EXPECT_EQ(fm.last.shape(), (Shape{8, 8, 64}));
}

TEST(Arch, JsonRoundTripAndValidation) {
  const ArchConfig cfg = ArchConfig::desk_default();
  EXPECT_EQ(ArchConfig::from_json(cfg.to_json()).to_json(), cfg.to_json());
  ArchConfig bad = cfg;
  bad.mid_layer = 4;
  EXPECT_THROW(bad.validate(), ArgumentError);
  bad = cfg;
  bad.layers.clear();
  EXPECT_THROW(bad.validate(), ArgumentError);
}

TEST(Init, DeterministicPerSeed) {
  const ArchConfig cfg = ArchConfig::desk_default();
  EXPECT_EQ(init_backbone(cfg, 3), init_backbone(cfg, 3));
  EXPECT_NE(init_backbone(cfg, 3), init_backbone(cfg, 4));
}

TEST(Init, ParameterCountMatchesClosedForm) {
  const ArchConfig cfg = ArchConfig::desk_default();
  // 4*4*3*16+16, 3*3*16*32+32, 3*3*32*32+32, 3*3*32*64+64
  const std::size_t expected = 784 + 4640 + 9248 + 18496;
  EXPECT_EQ(parameter_count(cfg), expected);
  std::size_t stored = 0;
  for (const auto& [name, t] : init_backbone(cfg, 0))
    if (name != backbone::kChannelMean) stored += t.size();
  EXPECT_EQ(stored, expected);
}

TEST(Init, KernelsAreHeScaled) {
  const ArchConfig cfg = ArchConfig::desk_default();
  const auto params = init_backbone(cfg, 7);
  const Tensor<float>& k = params.at("backbone/conv4/kernel");
  double ss = 0;
  for (float v : k.data()) ss += static_cast<double>(v) * v;
  const double sd = std::sqrt(ss / static_cast<double>(k.size()));
  EXPECT_NEAR(sd, std::sqrt(2.0 / (3 * 3 * 32)), 0.02 * std::sqrt(2.0 / (3 * 3 * 32)) + 0.003);
  for (float v : params.at("backbone/conv4/bias").data()) EXPECT_EQ(v, 0.0f);
}

TEST(Forward, ZeroImageWithZeroBiasesGivesZeroMaps) {
  const ArchConfig cfg = ArchConfig::desk_default();
  const auto fm = extract_features(cfg, init_backbone(cfg, 2), Tensor<float>({64, 64, 3}));
  for (float v : fm.mid.data()) EXPECT_EQ(v, 0.0f);
  for (float v : fm.last.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Forward, WrongPixelShapeIsADimensionError) {
  const ArchConfig cfg = ArchConfig::desk_default();
  EXPECT_THROW(extract_features(cfg, init_backbone(cfg, 2), Tensor<float>({32, 64, 3})), DimensionError);
}

TEST(Forward, IsPure) {
  const ArchConfig cfg = ArchConfig::desk_default();
  const auto params = init_backbone(cfg, 5);
  const auto images = generate_dataset(AttributeSchema::default_schema(), 2, 5);
  const auto first = extract_features(cfg, params, images[0].pixels());
  (void)extract_features(cfg, params, images[1].pixels());
  const auto again = extract_features(cfg, params, images[0].pixels());
  EXPECT_EQ(first.mid, again.mid);
  EXPECT_EQ(first.last, again.last);
}

TEST(Forward, ChannelMeanIsSubtracted) {
  const ArchConfig cfg = ArchConfig::desk_default();
  auto params = init_backbone(cfg, 5);
  params.at(backbone::kChannelMean) = Tensor<float>({3}, std::vector<float>{0.2f, 0.4f, 0.6f});
  Tensor<float> px({64, 64, 3});
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = 0.2f * static_cast<float>(1 + i % 3);
  const auto fm = extract_features(cfg, params, px);
  for (float v : fm.last.data()) EXPECT_EQ(v, 0.0f);
}

TEST(ChannelMeans, AverageOverImages) {
  const auto images = generate_dataset(AttributeSchema::default_schema(), 3, 1);
  std::vector<const LabeledImage*> ptrs{&images[0], &images[1], &images[2]};
  const Tensor<float> m = channel_means(ptrs, 3);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0;
    std::size_t n = 0;
    for (const auto& img : images)
      for (std::size_t i = c; i < img.image.bytes.size(); i += 3, ++n) s += img.image.bytes[i] / 255.0;
    EXPECT_NEAR(m[c], s / static_cast<double>(n), 1e-6);
  }
}

TEST(Forward, FirstLayerGradientMatchesFiniteDifferences) {
  const ArchConfig cfg = ArchConfig::desk_default();
  ParamSet<double> params = cast_params<double>(init_backbone(cfg, 8));
  std::mt19937_64 rng(8);
  for (auto& [name, t] : params)
    if (name.ends_with("bias")) t = random_tensor<double>(t.shape(), rng, -0.1, 0.1);
  const Tensor<double> px = generate_dataset(AttributeSchema::default_schema(), 1, 8)[0].pixels().cast<double>();
  const Tensor<double> w = random_tensor<double>(cfg.last_shape(), rng);
  LossBuilder loss = [&](Tape<double>& tape) {
    return ops::sum(ops::mul(extract_features(tape, cfg, px).last, tape.constant(w)));
  };
  for (const char* name : {"backbone/conv1/kernel", "backbone/conv1/bias"}) {
    const auto r = finite_difference_check(params, name, loss, 1e-5, 40, 1);
    EXPECT_GE(r.checked, 12u) << name;
    EXPECT_LT(r.max_relative_error, 1e-4) << name;
  }
}

// A glyph moved from the top band to the bottom band changes the mid map more
// in the top and bottom rows than in the middle rows.
TEST(Forward, MidMapIsTranslationSensitive) {
  const ArchConfig cfg = ArchConfig::desk_default();
  std::mt19937_64 rng(31);
  std::size_t agree = 0;
  const std::size_t pairs = 100;
  for (std::size_t p = 0; p < pairs; ++p) {
    auto params = init_backbone(cfg, 100 + p);
    params.at(backbone::kChannelMean) = Tensor<float>({3}, 0.5f);
    const auto rgb = synth::body_color(static_cast<int>(p % 4));
    const int shape = static_cast<int>(rng() % 4);
    const int dx = static_cast<int>(rng() % 5) - 2;
    auto draw = [&](int cy) {
      Tensor<float> px({64, 64, 3});
      for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x)
          for (int c = 0; c < 3; ++c)
            px.at(y, x, c) = synth::glyph_covers(shape, y - cy, x - 32 - dx) ? 0.08f : static_cast<float>(rgb[c]);
      return px;
    };
    const auto a = extract_features(cfg, params, draw(10)).mid;
    const auto b = extract_features(cfg, params, draw(53)).mid;
    double outer = 0, middle = 0;
    const std::size_t W = 8, K = 32;
    for (std::size_t y = 0; y < 8; ++y)
      for (std::size_t i = 0; i < W * K; ++i) {
        const double d = std::abs(a[y * W * K + i] - b[y * W * K + i]);
        (y <= 2 || y >= 5 ? outer : middle) += d;
      }
    if (outer / 6.0 > middle / 2.0) ++agree;
  }
  EXPECT_GE(agree, 95u);
}
