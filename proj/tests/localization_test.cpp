#include <gtest/gtest.h>

#include <cmath>

#include "attrsearch/localization.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace attrsearch;
using testing_support::random_tensor;

namespace {

Tensor<float> map_with(std::initializer_list<std::pair<std::size_t, float>> cells, std::size_t n = 8) {
  Tensor<float> h({n, n});
  for (const auto& [i, v] : cells) h[i] = v;
  return h;
}

RoiBox box_of(const Tensor<float>& h) { return threshold_bbox(AttributeActivationMap<float>{0, 0, h}); }

}  // namespace

TEST(ClassificationLoss, ZeroWeightsGiveUniformSoftmax) {
  const AttributeSchema schema({{"a", {"x", "y"}}, {"b", {"p", "q", "r"}}, {"c", {"s", "t", "u", "v"}}});
  ParamSet<double> params;
  for (std::size_t a = 0; a < 3; ++a) params[localization::classifier_name(schema, a)] = Tensor<double>({4, schema.values_of(a)});
  std::mt19937_64 rng(1);
  Tape<double> tape(params);
  FeatureVars<double> fv{tape.constant(random_tensor<double>({2, 2, 4}, rng)), tape.constant(random_tensor<double>({2, 2, 4}, rng))};
  const double loss = classification_loss(tape, fv, {1, 2, 3}, schema).value().item();
  EXPECT_NEAR(loss, std::log(2.0) + std::log(3.0) + std::log(4.0), 1e-12);
}

TEST(ClassificationLoss, ConfidentCorrectLogitsGiveSmallLoss) {
  const AttributeSchema schema({{"a", {"x", "y"}}, {"b", {"p", "q"}}});
  ParamSet<double> params;
  params["cls/a"] = Tensor<double>({1, 2}, std::vector<double>{5.0, -5.0});
  params["cls/b"] = Tensor<double>({1, 2}, std::vector<double>{0.0, 0.0});
  Tape<double> tape(params);
  Var<double> last = tape.constant(Tensor<double>({1, 1, 1}, 1.0));
  const double total = classification_loss(tape, {last, last}, {0, 0}, schema).value().item();
  EXPECT_LT(total - std::log(2.0), 0.01);
  EXPECT_GT(total - std::log(2.0), 0.0);
}

TEST(ClassificationLoss, AttributeOrderDoesNotMatter) {
  const AttributeSchema ab({{"a", {"x", "y", "z"}}, {"b", {"p", "q"}}});
  const AttributeSchema ba({{"b", {"p", "q"}}, {"a", {"x", "y", "z"}}});
  std::mt19937_64 rng(2);
  ParamSet<double> params{{"cls/a", random_tensor<double>({3, 3}, rng)}, {"cls/b", random_tensor<double>({3, 2}, rng)}};
  const Tensor<double> last = random_tensor<double>({2, 2, 3}, rng);
  Tape<double> t1(params), t2(params);
  const double l1 = classification_loss(t1, {t1.constant(last), t1.constant(last)}, {2, 1}, ab).value().item();
  const double l2 = classification_loss(t2, {t2.constant(last), t2.constant(last)}, {1, 2}, ba).value().item();
  EXPECT_NEAR(l1, l2, 1e-12);
  EXPECT_THROW(classification_loss(t1, {t1.constant(last), t1.constant(last)}, {3, 1}, ab), ArgumentError);
}

TEST(Aam, SingleChannelUnitWeightReturnsTheMap) {
  std::mt19937_64 rng(3);
  const Tensor<float> last = random_tensor<float>({8, 8, 1}, rng);
  const auto aam = compute_aam(last, Tensor<float>({1, 1}, 1.0f), 0);
  EXPECT_EQ(aam.heatmap, last.reshaped({8, 8}));
}

TEST(Aam, ZeroColumnGivesZeroMap) {
  std::mt19937_64 rng(4);
  const Tensor<float> last = random_tensor<float>({8, 8, 3}, rng, 0, 1);
  const auto aam = compute_aam(last, Tensor<float>({3, 1}), 0);
  for (float v : aam.heatmap.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Aam, TwoChannelsWeightedTwoAndMinusOne) {
  std::mt19937_64 rng(5);
  const Tensor<float> last = random_tensor<float>({4, 5, 2}, rng);
  const auto aam = compute_aam(last, Tensor<float>({2, 1}, std::vector<float>{2.0f, -1.0f}), 0);
  for (std::size_t c = 0; c < 20; ++c) EXPECT_FLOAT_EQ(aam.heatmap[c], 2.0f * last[2 * c] - last[2 * c + 1]);
}

TEST(Aam, PicksTheMostConfidentClass) {
  // Pooled features (sum over cells) are (4, 0); class 1 has the larger logit.
  const Tensor<float> last({2, 2, 2}, std::vector<float>{1, 0, 1, 0, 1, 0, 1, 0});
  const Tensor<float> w({2, 3}, std::vector<float>{0.1f, 0.5f, -1.0f, 9.0f, 9.0f, 9.0f});
  const auto aam = compute_aam(last, w, 2);
  EXPECT_EQ(aam.cls, 1u);
  EXPECT_EQ(aam.attribute, 2u);
  EXPECT_FLOAT_EQ(aam.heatmap[0], 0.5f);
}

TEST(Aam, LinearInTheClassifierColumn) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor<float> last = random_tensor<float>({8, 8, 6}, rng, 0, 2);
    const Tensor<float> w1 = random_tensor<float>({6, 1}, rng), w2 = random_tensor<float>({6, 1}, rng);
    Tensor<float> sum = w1;
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += w2[i];
    const auto a = compute_aam(last, w1, 0), b = compute_aam(last, w2, 0), c = compute_aam(last, sum, 0);
    for (std::size_t i = 0; i < 64; ++i) EXPECT_NEAR(c.heatmap[i], a.heatmap[i] + b.heatmap[i], 1e-5);
  }
}

TEST(Bbox, SinglePositiveCell) {
  const RoiBox b = box_of(map_with({{2 * 8 + 3, 1.0f}}));
  EXPECT_DOUBLE_EQ(b.y1, 2.0 / 7);
  EXPECT_DOUBLE_EQ(b.x1, 3.0 / 7);
  EXPECT_DOUBLE_EQ(b.y2, 2.0 / 7);
  EXPECT_DOUBLE_EQ(b.x2, 3.0 / 7);
}

TEST(Bbox, UniformPositiveAndNonpositiveMapsGiveFullBox) {
  EXPECT_EQ(box_of(Tensor<float>({8, 8}, 0.3f)), RoiBox::full());
  EXPECT_EQ(box_of(Tensor<float>({8, 8}, 0.0f)), RoiBox::full());
  EXPECT_EQ(box_of(Tensor<float>({8, 8}, -2.0f)), RoiBox::full());
}

TEST(Bbox, LargerOfTwoComponentsWins) {
  // Three cells in row 0, five cells in column 6 rows 2..6.
  const RoiBox b = box_of(map_with({{0, 1.0f}, {1, 1.0f}, {2, 1.0f},
                                    {2 * 8 + 6, 0.5f}, {3 * 8 + 6, 0.5f}, {4 * 8 + 6, 0.5f}, {5 * 8 + 6, 0.5f}, {6 * 8 + 6, 0.5f}}));
  EXPECT_EQ(b, (RoiBox{2.0 / 7, 6.0 / 7, 6.0 / 7, 6.0 / 7}));
}

TEST(Bbox, EqualComponentsResolveToTheEarliestFirstCell) {
  const RoiBox b = box_of(map_with({{5 * 8 + 5, 1.0f}, {5 * 8 + 6, 1.0f}, {1 * 8 + 0, 1.0f}, {2 * 8 + 0, 1.0f}}));
  EXPECT_EQ(b, (RoiBox{1.0 / 7, 0.0, 2.0 / 7, 0.0}));
}

TEST(Bbox, DiagonalNeighboursAreSeparateComponents) {
  const RoiBox b = box_of(map_with({{0, 1.0f}, {9, 1.0f}, {18, 1.0f}, {19, 1.0f}}));
  EXPECT_EQ(b, (RoiBox{2.0 / 7, 2.0 / 7, 2.0 / 7, 3.0 / 7}));
}

TEST(Bbox, ThresholdIsStrict) {
  // 0.2 is exactly 20% of 1.0 and must not join the component.
  const RoiBox b = box_of(map_with({{0, 1.0f}, {1, 0.2f}}));
  EXPECT_EQ(b, (RoiBox{0.0, 0.0, 0.0, 0.0}));
  const RoiBox c = box_of(map_with({{0, 1.0f}, {1, 0.21f}}));
  EXPECT_EQ(c, (RoiBox{0.0, 0.0, 0.0, 1.0 / 7}));
}

TEST(Bbox, MatchesUnionFindOracleOnRandomMaps) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    const Tensor<float> h = oracles::random_heatmap(rng);
    ASSERT_EQ(box_of(h), oracles::bbox(h)) << "trial " << trial;
  }
}

TEST(Bbox, InvariantToPositiveScaling) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor<float> h = oracles::random_heatmap(rng);
    Tensor<float> s = h;
    const float factor = (trial % 2) ? 4.0f : 0.25f;
    for (float& v : s.data()) v *= factor;
    EXPECT_EQ(box_of(s), box_of(h)) << trial;
  }
}

TEST(Bbox, BoxIsTightAroundTheSelectedComponent) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor<float> h = oracles::random_heatmap(rng);
    const auto cells = largest_component(segment(h), 8, 8);
    if (cells.empty()) continue;
    const RoiBox b = box_of(h);
    bool touches_y1 = false, touches_y2 = false, touches_x1 = false, touches_x2 = false;
    for (std::size_t c : cells) {
      const double y = static_cast<double>(c / 8) / 7, x = static_cast<double>(c % 8) / 7;
      EXPECT_TRUE(y >= b.y1 && y <= b.y2 && x >= b.x1 && x <= b.x2);
      touches_y1 |= y == b.y1;
      touches_y2 |= y == b.y2;
      touches_x1 |= x == b.x1;
      touches_x2 |= x == b.x2;
    }
    EXPECT_TRUE(touches_y1 && touches_y2 && touches_x1 && touches_x2);
  }
}

TEST(MassFraction, CountsSegmentedMassByRow) {
  Tensor<float> h({8, 8});
  h.at(0, 0) = 3.0f;
  h.at(7, 0) = 1.0f;
  h.at(4, 4) = 0.1f;  // below the threshold
  EXPECT_DOUBLE_EQ(segmented_mass_fraction(h, 0, 3), 0.75);
  EXPECT_DOUBLE_EQ(segmented_mass_fraction(h, 5, 8), 0.25);
  EXPECT_DOUBLE_EQ(segmented_mass_fraction(Tensor<float>({8, 8}), 0, 3), 0.0);
}

TEST(InitClassifier, ShapesPerAttribute) {
  ParamSet<float> params;
  const auto schema = AttributeSchema::default_schema();
  init_classifier(params, schema, 64, 1);
  for (std::size_t a = 0; a < 4; ++a) EXPECT_EQ(params.at(localization::classifier_name(schema, a)).shape(), (Shape{64, 4}));
}
