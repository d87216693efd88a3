#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "attrsearch/global_rep.hpp"
#include "attrsearch/numerics/gradcheck.hpp"
#include "test_support.hpp"

using namespace attrsearch;
using testing_support::random_tensor;

namespace {

const AttributeSchema kPair({{"a", {"a0", "a1", "a2"}}, {"b", {"b0", "b1"}}});

std::vector<Tensor<float>> random_reps(std::mt19937_64& rng, std::size_t A, std::size_t D) {
  std::vector<Tensor<float>> reps;
  for (std::size_t a = 0; a < A; ++a) reps.push_back(random_tensor<float>({D}, rng));
  return reps;
}

double distance(const Tensor<float>& x, const Tensor<float>& y) {
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (static_cast<double>(x[i]) - y[i]) * (static_cast<double>(x[i]) - y[i]);
  return std::sqrt(s);
}

}  // namespace

TEST(Compose, IdentityProjectionIsPlainConcatenation) {
  ParamSet<float> params;
  const GlobalConfig cfg = identity_global(params, kPair, 3);
  EXPECT_EQ(cfg.r, 6u);
  std::mt19937_64 rng(1);
  const auto reps = random_reps(rng, 2, 3);
  for (std::size_t a = 0; a < 2; ++a) {
    const Tensor<float> f = compose(params, reps, std::nullopt, a, kPair, cfg);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(f[i], reps[i / 3][i % 3]);
  }
  const Tensor<float> g = random_tensor<float>({3}, rng);
  const Tensor<float> f = compose(params, reps, std::pair{std::size_t{1}, g}, 1, kPair, cfg);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(f[i], i < 3 ? reps[0][i] : g[i - 3]);
}

TEST(Compose, MatchesHandComputedScaleConcatProject) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const GlobalConfig cfg{2, false};
    ParamSet<float> params;
    init_global(params, kPair, 3, cfg, static_cast<std::uint64_t>(trial));
    params.at(global::kLambda) = random_tensor<float>({2}, rng, 0.2, 2.0);
    const auto reps = random_reps(rng, 2, 3);
    for (std::size_t p = 0; p < 2; ++p) {
      const Tensor<float>& w = params.at(global::projection(kPair, p, cfg));
      const Tensor<float> f = compose(params, reps, std::nullopt, p, kPair, cfg);
      for (std::size_t j = 0; j < 2; ++j) {
        double expect = 0;
        for (std::size_t i = 0; i < 6; ++i)
          expect += static_cast<double>(params.at(global::kLambda)[i / 3]) * reps[i / 3][i % 3] * w.at(i, j);
        EXPECT_NEAR(f[j], expect, 1e-5);
      }
    }
  }
}

TEST(Compose, SlotErrors) {
  ParamSet<float> params;
  const GlobalConfig cfg = identity_global(params, kPair, 3);
  std::mt19937_64 rng(3);
  const auto reps = random_reps(rng, 2, 3);
  EXPECT_THROW(compose(params, {reps[0]}, std::nullopt, 0, kPair, cfg), UsageError);
  EXPECT_THROW(compose(params, reps, std::pair{std::size_t{2}, reps[0]}, 0, kPair, cfg), IndexError);
  EXPECT_THROW(compose(params, reps, std::pair{std::size_t{0}, Tensor<float>({4})}, 0, kPair, cfg), DimensionError);
}

TEST(Compose, InitShapesAndSharedProjection) {
  ParamSet<float> params;
  init_global(params, kPair, 4, GlobalConfig{5, false}, 1);
  EXPECT_EQ(params.at("global/proj/a").shape(), (Shape{8, 5}));
  EXPECT_EQ(params.at("global/proj/b").shape(), (Shape{8, 5}));
  EXPECT_EQ(params.at(global::kLambda), Tensor<float>({2}, 1.0f));
  ParamSet<float> shared;
  init_global(shared, kPair, 4, GlobalConfig{5, true}, 1);
  EXPECT_EQ(shared.count("global/proj/a"), 0u);
  EXPECT_EQ(shared.at("global/proj/shared").shape(), (Shape{8, 5}));
}

TEST(Compose, LambdaReparameterizationLeavesOutputUnchanged) {
  std::mt19937_64 rng(4);
  const GlobalConfig cfg{4, false};
  for (int trial = 0; trial < 20; ++trial) {
    ParamSet<float> params;
    init_global(params, kPair, 3, cfg, static_cast<std::uint64_t>(trial));
    const std::size_t a = trial % 2;
    const float c = std::uniform_real_distribution<float>(0.2f, 5.0f)(rng);
    ParamSet<float> scaled = params;
    scaled.at(global::kLambda)[a] *= c;
    for (std::size_t p = 0; p < 2; ++p) {
      Tensor<float>& w = scaled.at(global::projection(kPair, p, cfg));
      for (std::size_t i = a * 3; i < a * 3 + 3; ++i)
        for (std::size_t j = 0; j < 4; ++j) w.at(i, j) /= c;
    }
    const auto reps = random_reps(rng, 2, 3);
    const Tensor<float> g = random_tensor<float>({3}, rng);
    for (std::size_t p = 0; p < 2; ++p) {
      EXPECT_LT(testing_support::max_abs_diff(compose(params, reps, std::nullopt, p, kPair, cfg),
                                              compose(scaled, reps, std::nullopt, p, kPair, cfg)),
                1e-5);
      EXPECT_LT(testing_support::max_abs_diff(compose(params, reps, std::pair{p, g}, p, kPair, cfg),
                                              compose(scaled, reps, std::pair{p, g}, p, kPair, cfg)),
                1e-5);
    }
  }
}

TEST(Compose, PrototypeReplacementMovesTowardTheTarget) {
  std::mt19937_64 rng(5);
  ParamSet<float> params;
  const GlobalConfig cfg = identity_global(params, kPair, 4);
  for (int trial = 0; trial < 50; ++trial) {
    const auto query = random_reps(rng, 2, 4);
    const std::size_t a = trial % 2;
    const Tensor<float> prototype = random_tensor<float>({4}, rng);
    // Gallery item: same other slot, slot a near the prototype.
    auto target = query;
    target[a] = prototype;
    for (float& v : target[a].data()) v += 0.05f * std::uniform_real_distribution<float>(-1, 1)(rng);
    const Tensor<float> ft = compose(params, target, std::nullopt, a, kPair, cfg);
    const double replaced = distance(compose(params, query, std::pair{a, prototype}, a, kPair, cfg), ft);
    const double plain = distance(compose(params, query, std::nullopt, a, kPair, cfg), ft);
    EXPECT_LT(replaced, plain);
  }
}

TEST(GlobalLoss, DirectFormulaValues) {
  Tape<double> tape;
  const auto q = tape.constant(Tensor<double>({2}, std::vector<double>{1.0, 2.0}));
  const auto n = tape.constant(Tensor<double>({2}, std::vector<double>{1.0, 2.0 + std::log(3.0)}));
  EXPECT_NEAR(global_loss(q, q, n).value().item(), 0.25, 1e-12);
  const auto p = tape.constant(Tensor<double>({2}, std::vector<double>{2.0, 2.0}));
  const auto m = tape.constant(Tensor<double>({2}, std::vector<double>{0.0, 2.0}));
  EXPECT_NEAR(global_loss(q, p, m).value().item(), 0.5, 1e-12);
}

TEST(GlobalLoss, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(6);
  const GlobalConfig cfg{3, false};
  ParamSet<float> pf;
  init_global(pf, kPair, 4, cfg, 6);
  ParamSet<double> params = cast_params<double>(pf);
  params.at(global::kLambda) = random_tensor<double>({2}, rng, 0.5, 1.5);
  params[memory::kMatrix] = random_tensor<double>({5, 4}, rng);
  std::vector<std::vector<Tensor<double>>> reps(3);
  for (auto& r : reps)
    for (int a = 0; a < 2; ++a) r.push_back(random_tensor<double>({4}, rng));
  Tensor<double> t({5});
  t[kPair.row_of(0, 2)] = 1.0;
  LossBuilder loss = [&](Tape<double>& tape) {
    std::vector<std::vector<Var<double>>> v(3);
    for (std::size_t i = 0; i < 3; ++i)
      for (const auto& r : reps[i]) v[i].push_back(tape.constant(r));
    using Slot = std::optional<std::pair<std::size_t, Var<double>>>;
    const Slot g = std::pair{std::size_t{0}, retrieve(tape, tape.param(memory::kMatrix), t)};
    return global_loss(compose(tape, v[0], g, 0, kPair, cfg), compose(tape, v[1], Slot{}, 0, kPair, cfg),
                       compose(tape, v[2], Slot{}, 0, kPair, cfg));
  };
  for (const std::string& name : {global::kLambda, std::string("global/proj/a"), memory::kMatrix}) {
    const auto r = finite_difference_check(params, name, loss, 1e-5, 30, 2);
    EXPECT_GT(r.checked, 0u) << name;
    EXPECT_LT(r.max_relative_error, 1e-4) << name;
  }
}

TEST(SampleGlobalTriplets, PositiveIsTheManipulatedQuery) {
  const AttributeSchema schema = AttributeSchema::default_schema();
  const auto images = generate_dataset(schema, 1000, 7);
  std::vector<Labels> labels;
  for (const auto& img : images) labels.push_back(img.labels);
  const auto triplets = sample_global_triplets(schema, labels, 1000, 3);
  ASSERT_EQ(triplets.size(), 1000u);
  std::map<std::size_t, std::size_t> per_attribute;
  for (const GlobalTriplet& t : triplets) {
    EXPECT_NE(labels[t.query][t.manipulation.attribute], t.manipulation.value);
    EXPECT_EQ(labels[t.positive], apply_manipulation(labels[t.query], t.manipulation));
    EXPECT_NE(labels[t.negative], labels[t.positive]);
    ++per_attribute[t.manipulation.attribute];
  }
  for (std::size_t a = 0; a < 4; ++a) {
    EXPECT_GE(per_attribute[a], 200u) << a;
    EXPECT_LE(per_attribute[a], 300u) << a;
  }
  EXPECT_EQ(triplets, sample_global_triplets(schema, labels, 1000, 3));
}

TEST(SampleGlobalTriplets, UnreachableTargetsExhaustRetries) {
  // Every pair of label vectors differs in both attributes.
  const AttributeSchema three({{"a", {"a0", "a1", "a2"}}, {"c", {"c0", "c1", "c2"}}});
  EXPECT_THROW(sample_global_triplets(three, {{0, 0}, {1, 1}, {2, 2}}, 1, 1, 50), SamplingError);
  EXPECT_THROW(sample_global_triplets(kPair, {{0, 0}, {1, 0}}, 1, 1), SamplingError);
}
