#include <gtest/gtest.h>

#include <cmath>

#include "relmem/lstm.hpp"
#include "test_util.hpp"

using namespace relmem;
using namespace relmem::testing;

namespace {

LstmParams random_lstm(const LstmConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  LstmParams p = init_lstm_params(c, rng);
  jitter(p, rng);
  return p;
}

double logistic(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Textbook cell written out per unit.
LstmState reference_step(const LstmParams& p, const LstmConfig& c, const LstmState& s, const std::vector<double>& x) {
  const std::size_t h = c.hidden_size;
  LstmState next{Tensor(1, h), Tensor(1, h)};
  for (std::size_t j = 0; j < h; ++j) {
    double pre[4];
    for (std::size_t g = 0; g < 4; ++g) {
      const std::size_t col = g * h + j;
      double v = p.bias(0, col);
      for (std::size_t k = 0; k < x.size(); ++k) v += x[k] * p.input_weights(k, col);
      for (std::size_t k = 0; k < h; ++k) v += s.hidden(0, k) * p.recurrent_weights(k, col);
      pre[g] = v;
    }
    const double i = logistic(pre[0]), f = logistic(pre[1] + c.forget_bias), g = std::tanh(pre[2]),
                 o = logistic(pre[3]);
    next.cell(0, j) = f * s.cell(0, j) + i * g;
    next.hidden(0, j) = o * std::tanh(next.cell(0, j));
  }
  return next;
}

}  // namespace

TEST(LstmStep, ZeroParametersGiveZeroHidden) {
  LstmConfig c;
  c.hidden_size = 6;
  c.input_size = 3;
  LstmParams p{Tensor(3, 24), Tensor(6, 24), Tensor(1, 24)};
  const auto u = lstm_unroll(p, c, init_lstm_state(c), {{1.0, -2.0, 3.0}, {4.0, 5.0, 6.0}});
  for (const auto& out : u.outputs)
    for (double v : out) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(u.final_state.cell, Tensor(1, 6));
}

TEST(LstmStep, Shapes) {
  LstmConfig c;
  c.hidden_size = 64;
  c.input_size = 5;
  const auto u = lstm_unroll(random_lstm(c, 1), c, init_lstm_state(c), {std::vector<double>(5, 0.5)});
  ASSERT_EQ(u.outputs.size(), 1u);
  EXPECT_EQ(u.outputs[0].size(), 64u);
  EXPECT_EQ(u.final_state.hidden.rows, 1u);
  EXPECT_EQ(u.final_state.hidden.cols, 64u);
  EXPECT_EQ(u.final_state.cell.cols, 64u);
}

TEST(LstmStep, MatchesTextbookCell) {
  Rng rng(3);
  LstmConfig c;
  c.hidden_size = 5;
  c.input_size = 3;
  c.forget_bias = 0.7;
  const LstmParams p = random_lstm(c, 5);
  LstmState s{random_tensor(rng, 1, 5), random_tensor(rng, 1, 5)};
  for (int step = 0; step < 4; ++step) {
    const auto x = random_tensor(rng, 1, 3).data;
    const auto u = lstm_unroll(p, c, s, {x});
    const LstmState ref = reference_step(p, c, s, x);
    EXPECT_LT(max_relative_error({{"h", u.final_state.hidden}}, {{"h", ref.hidden}}), 1e-12);
    EXPECT_LT(max_relative_error({{"c", u.final_state.cell}}, {{"c", ref.cell}}), 1e-12);
    s = u.final_state;
  }
}

TEST(LstmUnroll, EqualsManualComposition) {
  Rng rng(7);
  LstmConfig c;
  c.hidden_size = 4;
  c.input_size = 2;
  const LstmParams p = random_lstm(c, 9);
  const std::vector<std::vector<double>> xs{{0.1, 0.2}, {-0.5, 1.0}, {2.0, 0.0}};
  const auto all = lstm_unroll(p, c, init_lstm_state(c), xs);
  LstmState s = init_lstm_state(c);
  for (std::size_t t = 0; t < xs.size(); ++t) {
    const auto one = lstm_unroll(p, c, s, {xs[t]});
    EXPECT_EQ(one.outputs[0], all.outputs[t]);
    s = one.final_state;
  }
  EXPECT_EQ(s.hidden, all.final_state.hidden);
  EXPECT_EQ(s.cell, all.final_state.cell);
  const auto again = lstm_unroll(p, c, init_lstm_state(c), xs);
  EXPECT_EQ(again.outputs, all.outputs);
}

TEST(LstmStep, ShapeMismatchThrows) {
  LstmConfig c;
  c.hidden_size = 4;
  c.input_size = 2;
  const LstmParams p = random_lstm(c, 11);
  EXPECT_THROW(lstm_unroll(p, c, init_lstm_state(c), {{1.0, 2.0, 3.0}}), DimensionError);
  EXPECT_THROW(lstm_unroll(p, c, init_lstm_state(c), {}), ContractError);
}

TEST(LstmParamCount, MatchesInstantiated) {
  for (std::size_t h : {1u, 8u, 82u})
    for (std::size_t in : {1u, 16u}) {
      LstmConfig c;
      c.hidden_size = h;
      c.input_size = in;
      Rng rng(1);
      EXPECT_EQ(count_params(init_lstm_params(c, rng)), param_count(c));
      EXPECT_EQ(param_count(c), 4 * h * (in + h + 1));
    }
}

TEST(LstmGradient, ThreeStepUnrollMatchesFiniteDifferences) {
  LstmConfig c;
  c.hidden_size = 8;
  c.input_size = 5;
  const LstmParams p = random_lstm(c, 13);
  Rng rng(17);
  std::vector<Tensor> xs, weights;
  for (int k = 0; k < 3; ++k) {
    xs.push_back(random_tensor(rng, 2, 5));
    weights.push_back(random_tensor(rng, 2, 8));
  }
  std::vector<Tensor> inputs;
  append_params(p, inputs);
  const double err = gradcheck(
      [&](Tape& t, const std::vector<Var>& v) {
        std::size_t k = 0;
        auto bound = assign_vars(p, v, k);
        std::vector<Var> xv;
        for (const auto& x : xs) xv.push_back(t.constant(x));
        const LstmState s0 = init_lstm_state(c, 2);
        auto r = lstm_unroll(bound, c, {t.constant(s0.hidden), t.constant(s0.cell)}, xv);
        Var loss = sum(mul(r.outputs[0], t.constant(weights[0])));
        for (std::size_t i = 1; i < 3; ++i) loss = add(loss, sum(mul(r.outputs[i], t.constant(weights[i]))));
        return loss;
      },
      inputs);
  EXPECT_LT(err, 1e-4);
}
