#pragma once

// Single-layer LSTM baseline with the same batched step interface as the RMC.

#include <string>
#include <vector>

#include "relmem/nn.hpp"

namespace relmem {

struct LstmConfig {
  std::size_t hidden_size = 128;
  std::size_t input_size = 1;
  double forget_bias = 1.0;

  void validate() const {
    if (hidden_size == 0) throw ContractError("lstm.hidden_size must be >= 1");
    if (input_size == 0) throw ContractError("lstm.input_size must be >= 1");
  }
};

/// Gate order in the packed weights: input, forget, cell candidate, output.
template <class T>
struct LstmParamsT {
  T input_weights;      // input_size x 4H
  T recurrent_weights;  // H x 4H
  T bias;               // 1 x 4H

  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + "input_weights", input_weights);
    f(prefix + "recurrent_weights", recurrent_weights);
    f(prefix + "bias", bias);
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "input_weights", input_weights);
    f(prefix + "recurrent_weights", recurrent_weights);
    f(prefix + "bias", bias);
  }
  template <class F>
  auto map(F&& f) const -> LstmParamsT<decltype(f(input_weights))> {
    return {f(input_weights), f(recurrent_weights), f(bias)};
  }
};

using LstmParams = LstmParamsT<Tensor>;

template <class T>
struct LstmStateT {
  T hidden;  // G x H
  T cell;    // G x H
};

using LstmState = LstmStateT<Tensor>;

inline LstmParams init_lstm_params(const LstmConfig& config, Rng& rng) {
  config.validate();
  const std::size_t h = config.hidden_size;
  return {normal_tensor(rng, config.input_size, 4 * h, 1.0 / std::sqrt(double(config.input_size))),
          normal_tensor(rng, h, 4 * h, 1.0 / std::sqrt(double(h))), Tensor(1, 4 * h)};
}

inline std::size_t param_count(const LstmConfig& config) {
  const std::size_t h = config.hidden_size;
  return 4 * h * (config.input_size + h + 1);
}

inline LstmState init_lstm_state(const LstmConfig& config, std::size_t groups = 1) {
  return {Tensor(groups, config.hidden_size), Tensor(groups, config.hidden_size)};
}

struct LstmStepResult {
  Var output;  // G x H
  LstmStateT<Var> next;
};

inline LstmStepResult lstm_step(const LstmParamsT<Var>& p, const LstmConfig& config, const LstmStateT<Var>& state,
                                Var x) {
  const std::size_t h = config.hidden_size;
  if (x.cols() != config.input_size || state.hidden.cols() != h || state.cell.cols() != h ||
      state.hidden.rows() != x.rows() || state.cell.rows() != x.rows()) {
    throw DimensionError("lstm_step: input " + shape_str(x.value()) + " with state " +
                         shape_str(state.hidden.value()) + "/" + shape_str(state.cell.value()) +
                         " does not match hidden size " + std::to_string(h));
  }
  Var pre = add(add(matmul(x, p.input_weights), matmul(state.hidden, p.recurrent_weights)), p.bias);
  auto g = split_cols(pre, {h, h, h, h});
  Var in = sigmoid(g[0]);
  Var forget = sigmoid(add_scalar(g[1], config.forget_bias));
  Var candidate = tanh(g[2]);
  Var out = sigmoid(g[3]);
  Var cell = add(mul(forget, state.cell), mul(in, candidate));
  Var hidden = mul(out, tanh(cell));
  return {hidden, {hidden, cell}};
}

struct LstmUnrollResult {
  std::vector<Var> outputs;
  LstmStateT<Var> final_state;
};

inline LstmUnrollResult lstm_unroll(const LstmParamsT<Var>& p, const LstmConfig& config, LstmStateT<Var> state,
                                    std::span<const Var> inputs) {
  if (inputs.empty()) throw ContractError("unroll needs at least one timestep");
  LstmUnrollResult out;
  for (Var x : inputs) {
    auto step = lstm_step(p, config, state, x);
    out.outputs.push_back(step.output);
    state = step.next;
  }
  out.final_state = state;
  return out;
}

struct LstmValueUnroll {
  std::vector<std::vector<double>> outputs;
  LstmState final_state;
};

inline LstmValueUnroll lstm_unroll(const LstmParams& params, const LstmConfig& config, const LstmState& state0,
                                   const std::vector<std::vector<double>>& inputs) {
  Tape tape;
  auto bound = bind(tape, params);
  LstmStateT<Var> s{tape.constant(state0.hidden), tape.constant(state0.cell)};
  std::vector<Var> xs;
  for (const auto& x : inputs) xs.push_back(tape.constant(Tensor(1, x.size(), x)));
  auto r = lstm_unroll(bound, config, s, xs);
  LstmValueUnroll out;
  for (Var o : r.outputs) out.outputs.push_back(o.value().data);
  out.final_state = {r.final_state.hidden.value(), r.final_state.cell.value()};
  return out;
}

}  // namespace relmem
