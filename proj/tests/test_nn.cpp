#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "relmem/nn.hpp"
#include "test_util.hpp"

using namespace relmem;
using relmem::testing::gradcheck;
using relmem::testing::random_tensor;

namespace {

Tensor run_linear(const Linear& layer, const Tensor& x) {
  Tape t;
  return linear_apply(bind(t, layer), t.constant(x)).value();
}

Tensor run_layer_norm(const LayerNorm& ln, const Tensor& x) {
  Tape t;
  return layer_norm_apply(bind(t, ln), t.constant(x)).value();
}

double run_xent(const Tensor& logits, const std::vector<std::size_t>& targets) {
  Tape t;
  return softmax_xent(t.constant(logits), targets).value().data[0];
}

}  // namespace

TEST(Linear, IdentityWeightsReturnInput) {
  Linear l{Tensor::identity(3), Tensor(1, 3)};
  Tensor x{{1, -2, 3}, {0.5, 0, 7}};
  EXPECT_EQ(run_linear(l, x), x);
}

TEST(Linear, HandComputedAffineMap) {
  Linear l{Tensor{{1, 0}, {0, 1}}, Tensor{{2, 3}}};
  EXPECT_EQ(run_linear(l, Tensor{{1, 1}}), (Tensor{{3, 4}}));
}

TEST(Linear, ZeroInputGivesBiasPerRow) {
  Rng rng(3);
  Linear l = init_linear(rng, 4, 3);
  l.bias = Tensor{{0.1, -0.2, 0.3}};
  const Tensor y = run_linear(l, Tensor(5, 4));
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(y(r, c), l.bias(0, c));
}

TEST(Linear, WidthMismatchThrows) {
  Rng rng(3);
  Linear l = init_linear(rng, 4, 3);
  EXPECT_THROW(run_linear(l, Tensor(2, 5)), DimensionError);
}

TEST(Mlp, SingleIdentityLayer) {
  Mlp m;
  m.layers.push_back({Tensor::identity(2), Tensor(1, 2)});
  Tape t;
  Tensor x{{-1, 2}};
  EXPECT_EQ(mlp_apply(bind(t, m), t.constant(x)).value(), x);
}

TEST(Mlp, NegativePreActivationIsZeroedByRelu) {
  Mlp m;
  m.layers.push_back({Tensor{{1, 1}}, Tensor{{-10, -10}}});  // 1 -> 2, negative for small inputs
  m.layers.push_back({Tensor{{3}, {4}}, Tensor{{0}}});
  Tape t;
  const Tensor y = mlp_apply(bind(t, m), t.constant(Tensor{{2}})).value();
  EXPECT_EQ(y, (Tensor{{0}}));
}

TEST(Mlp, RowsAreIndependent) {
  Rng rng(5);
  Mlp m = init_mlp(rng, {3, 6, 2});
  Tensor x = random_tensor(rng, 4, 3);
  Tape t;
  auto bound = bind(t, m);
  const Tensor all = mlp_apply(bound, t.constant(x)).value();
  for (std::size_t r = 0; r < 4; ++r) {
    Tensor row(1, 3, std::vector<double>(x.row(r).begin(), x.row(r).end()));
    const Tensor one = mlp_apply(bound, t.constant(row)).value();
    for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(one(0, c), all(r, c), 1e-14);
  }
}

TEST(Mlp, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  Mlp m = init_mlp(rng, {3, 5, 4});
  Tensor x = random_tensor(rng, 2, 3);
  Tensor w = random_tensor(rng, 2, 4);
  std::vector<Tensor> inputs{x};
  m.visit("", [&](const std::string&, const Tensor& v) { inputs.push_back(v); });
  const double err = gradcheck(
      [&](Tape& t, const std::vector<Var>& v) {
        Mlp shape = m;
        auto bound = shape.map([&](const Tensor&) { return Var{}; });
        std::size_t k = 1;
        bound.visit("", [&](const std::string&, Var& p) { p = v[k++]; });
        return sum(mul(mlp_apply(bound, v[0]), t.constant(w)));
      },
      inputs);
  EXPECT_LT(err, 1e-4);
}

TEST(LayerNorm, ConstantRowMapsToOffset) {
  LayerNorm ln = init_layer_norm(4);
  const Tensor y = run_layer_norm(ln, Tensor{{3, 3, 3, 3}});
  for (double v : y.data) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, UnitVarianceRowIsUnchanged) {
  LayerNorm ln = init_layer_norm(2, 1e-12);
  const Tensor y = run_layer_norm(ln, Tensor{{1, -1}});
  EXPECT_NEAR(y(0, 0), 1.0, 1e-9);
  EXPECT_NEAR(y(0, 1), -1.0, 1e-9);
}

TEST(LayerNorm, RowStatisticsAfterNormalisation) {
  Rng rng(17);
  LayerNorm ln = init_layer_norm(16);
  std::uniform_real_distribution<double> target_var(10.0, 1000.0);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor(rng, 8, 16);
    for (std::size_t r = 0; r < x.rows; ++r) {
      auto row = x.row(r);
      const double mu = std::accumulate(row.begin(), row.end(), 0.0) / 16.0;
      double var = 0.0;
      for (double v : row) var += (v - mu) * (v - mu);
      var /= 16.0;
      const double s = std::sqrt(target_var(rng) / var);
      for (double& v : row) v = 5.0 + (v - mu) * s;
    }
    const Tensor y = run_layer_norm(ln, x);
    for (std::size_t r = 0; r < y.rows; ++r) {
      auto row = y.row(r);
      const double mu = std::accumulate(row.begin(), row.end(), 0.0) / 16.0;
      double var = 0.0;
      for (double v : row) var += (v - mu) * (v - mu);
      var /= 16.0;
      EXPECT_LT(std::abs(mu), 1e-9);
      EXPECT_GE(var, 1.0 - 1e-6);
      EXPECT_LE(var, 1.0);
    }
  }
}

TEST(LayerNorm, OutputMeanIsOffsetMeanWithUnitGain) {
  Rng rng(19);
  LayerNorm ln = init_layer_norm(6);
  ln.offset = random_tensor(rng, 1, 6);
  const double offset_mean = std::accumulate(ln.offset.data.begin(), ln.offset.data.end(), 0.0) / 6.0;
  const Tensor y = run_layer_norm(ln, random_tensor(rng, 5, 6, 3.0));
  for (std::size_t r = 0; r < 5; ++r) {
    auto row = y.row(r);
    EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0) / 6.0, offset_mean, 1e-12);
  }
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  Rng rng(23);
  Tensor x = random_tensor(rng, 3, 5);
  Tensor gain = random_tensor(rng, 1, 5);
  Tensor offset = random_tensor(rng, 1, 5);
  Tensor w = random_tensor(rng, 3, 5);
  const double err = gradcheck(
      [&](Tape& t, const std::vector<Var>& v) {
        LayerNormT<Var> ln{v[1], v[2], 1e-5};
        return sum(mul(layer_norm_apply(ln, v[0]), t.constant(w)));
      },
      {x, gain, offset});
  EXPECT_LT(err, 1e-4);
}

TEST(SoftmaxXent, UniformLogitsGiveLogClassCount) {
  for (std::size_t classes : {2u, 4u, 8u, 13u}) {
    const double loss = run_xent(Tensor(3, classes, 0.7), {0, classes - 1, 1});
    EXPECT_NEAR(loss, std::log(double(classes)), 1e-12);
  }
  EXPECT_NEAR(run_xent(Tensor(1, 8), {5}), 2.0794415416798357, 1e-12);
}

TEST(SoftmaxXent, ConfidentCorrectLogitApproachesZero) {
  Tensor logits(1, 4);
  logits(0, 2) = 50.0;
  const double loss = run_xent(logits, {2});
  EXPECT_GE(loss, 0.0);
  EXPECT_LT(loss, 1e-20);
}

TEST(SoftmaxXent, NonNegativeOnRandomLogits) {
  Rng rng(29);
  for (int i = 0; i < 50; ++i) EXPECT_GE(run_xent(random_tensor(rng, 4, 6, 5.0), {0, 1, 2, 5}), 0.0);
}

TEST(SoftmaxXent, OutOfRangeTargetThrows) {
  EXPECT_THROW(run_xent(Tensor(2, 3), {0, 3}), ContractError);
  EXPECT_THROW(run_xent(Tensor(2, 3), {0}), ContractError);
}

TEST(SoftmaxXent, GradientMatchesFiniteDifferences) {
  Rng rng(31);
  const std::vector<std::size_t> targets{1, 0, 3};
  const double err =
      gradcheck([&](Tape&, const std::vector<Var>& v) { return softmax_xent(v[0], targets); },
                {random_tensor(rng, 3, 4, 2.0)});
  EXPECT_LT(err, 1e-4);
}

TEST(SoftmaxXent, GradientIsSoftmaxMinusOneHotOverRows) {
  Tensor logits{{0.0, std::log(3.0)}};  // softmax = [0.25, 0.75]
  Tape t;
  Var l = t.leaf(logits);
  const Gradients g = backward(t, softmax_xent(l, std::vector<std::size_t>{0}));
  EXPECT_NEAR(g[l](0, 0), 0.25 - 1.0, 1e-15);
  EXPECT_NEAR(g[l](0, 1), 0.75, 1e-15);
}

TEST(ClipGlobalNorm, ScalesDownLargeGradients) {
  ParamMap g{{"a", Tensor{{6, 0}}}, {"b", Tensor{{0, 8}}}};  // norm 10
  const ParamMap c = clip_global_norm(g, 1.0);
  EXPECT_NEAR(global_norm(c), 1.0, 1e-9);
  EXPECT_NEAR(c.at("a")(0, 0), 0.6, 1e-15);
  EXPECT_NEAR(c.at("b")(0, 1), 0.8, 1e-15);
}

TEST(ClipGlobalNorm, SmallAndZeroGradientsUnchanged) {
  ParamMap g{{"a", Tensor{{0.3, 0.4}}}};  // norm 0.5
  EXPECT_EQ(clip_global_norm(g, 1.0), g);
  ParamMap z{{"a", Tensor(2, 2)}};
  EXPECT_EQ(clip_global_norm(z, 1.0), z);
}

TEST(ClipGlobalNorm, Idempotent) {
  Rng rng(37);
  ParamMap g{{"a", random_tensor(rng, 3, 3, 4.0)}, {"b", random_tensor(rng, 1, 5, 4.0)}};
  const ParamMap once = clip_global_norm(g, 0.5);
  EXPECT_EQ(clip_global_norm(once, 0.5), once);
}

TEST(ClipGlobalNorm, NonPositiveMaxNormThrows) {
  EXPECT_THROW(clip_global_norm({}, 0.0), ContractError);
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  ParamMap p{{"w", Tensor{{1, -2}}}};
  const ParamMap before = p;
  AdamState s;
  adam_step(p, {{"w", Tensor(1, 2)}}, s);
  EXPECT_EQ(p, before);
  EXPECT_EQ(s.step, 1u);
  EXPECT_EQ(s.m.at("w"), Tensor(1, 2));
  EXPECT_EQ(s.v.at("w"), Tensor(1, 2));
}

TEST(Adam, FirstStepMovesEachCoordinateByLearningRate) {
  ParamMap p{{"w", Tensor{{1, -2, 0.5}}}};
  AdamState s;
  s.lr = 0.01;
  adam_step(p, {{"w", Tensor{{0.3, -4, 2}}}}, s);
  EXPECT_NEAR(p.at("w")(0, 0), 1 - 0.01, 1e-9);
  EXPECT_NEAR(p.at("w")(0, 1), -2 + 0.01, 1e-9);
  EXPECT_NEAR(p.at("w")(0, 2), 0.5 - 0.01, 1e-9);
}

TEST(Adam, ConstantGradientMatchesDirectRecurrence) {
  const double g = 0.7, lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ParamMap p{{"w", Tensor{{2.0}}}};
  AdamState s;
  s.lr = lr;
  double m = 0, v = 0, w = 2.0, prev = 2.0;
  for (int t = 1; t <= 2; ++t) {
    adam_step(p, {{"w", Tensor{{g}}}}, s);
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    w -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
    EXPECT_NEAR(p.at("w")(0, 0), w, 1e-14);
    EXPECT_LT(p.at("w")(0, 0), prev);
    prev = p.at("w")(0, 0);
  }
  EXPECT_EQ(s.step, 2u);
}

TEST(Adam, DeterministicBitwise) {
  Rng rng(41);
  ParamMap p{{"a", random_tensor(rng, 3, 2)}, {"b", random_tensor(rng, 1, 4)}};
  ParamMap g{{"a", random_tensor(rng, 3, 2)}, {"b", random_tensor(rng, 1, 4)}};
  ParamMap p1 = p, p2 = p;
  AdamState s1, s2;
  for (int i = 0; i < 3; ++i) {
    adam_step(p1, g, s1);
    adam_step(p2, g, s2);
  }
  EXPECT_EQ(p1, p2);
  EXPECT_EQ(s1, s2);
}

TEST(Adam, KeyMismatchThrows) {
  ParamMap p{{"a", Tensor(1, 1)}};
  AdamState s;
  EXPECT_THROW(adam_step(p, {{"b", Tensor(1, 1)}}, s), ContractError);
  EXPECT_THROW(adam_step(p, {{"a", Tensor(1, 2)}}, s), ContractError);
  EXPECT_EQ(s.step, 0u);
}

TEST(Params, FlattenUnflattenRoundTrip) {
  Rng rng(43);
  Mlp m = init_mlp(rng, {3, 4, 2});
  ParamMap flat = flatten(m, "head.");
  EXPECT_EQ(flat.size(), 4u);
  EXPECT_TRUE(flat.count("head.0.weight"));
  EXPECT_TRUE(flat.count("head.1.bias"));
  EXPECT_EQ(count_params(m), 3u * 4 + 4 + 4 * 2 + 2);
  Mlp other = init_mlp(rng, {3, 4, 2});
  unflatten(other, flat, "head.");
  EXPECT_EQ(flatten(other, "head."), flat);
  flat.erase("head.0.bias");
  EXPECT_THROW(unflatten(other, flat, "head."), ContractError);
}
