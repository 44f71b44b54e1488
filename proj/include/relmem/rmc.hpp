#pragma once

// Relational memory core: a memory matrix updated each step by attention over
// [memory; projected input] and an LSTM-style gated write per memory row.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "relmem/attention.hpp"

namespace relmem {

enum class GateStyle { unit, memory };
enum class InitMode { identity_padded, random_normal };

struct RmcConfig {
  std::size_t mem_slots = 4;    // N
  std::size_t mem_size = 64;    // F
  std::size_t num_heads = 2;
  std::size_t num_blocks = 1;
  GateStyle gate_style = GateStyle::unit;
  bool use_output_gate = false;
  double forget_bias = 1.0;     // fixed offset added before the forget sigmoid
  std::size_t input_size = 1;
  std::size_t key_size = 0;     // 0 means mem_size / num_heads
  InitMode init_mode = InitMode::identity_padded;

  std::size_t resolved_key_size() const { return key_size ? key_size : mem_size / num_heads; }
  std::size_t gate_width() const { return gate_style == GateStyle::unit ? mem_size : 1; }
  std::size_t total_units() const { return mem_slots * mem_size; }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ContractError(std::string("rmc.") + name + " must be >= 1");
    };
    positive(mem_slots, "mem_slots");
    positive(mem_size, "mem_size");
    positive(num_heads, "num_heads");
    positive(num_blocks, "num_blocks");
    positive(input_size, "input_size");
    if (mem_size % num_heads) {
      throw ContractError("rmc.mem_size " + std::to_string(mem_size) + " is not divisible by rmc.num_heads " +
                          std::to_string(num_heads));
    }
  }
};

/// x W + h U + b for one gate; widths are F (unit gating) or 1 (memory gating).
template <class T>
struct GateT {
  T input;      // input_size x width
  T recurrent;  // F x width
  T bias;       // 1 x width

  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + "input", input);
    f(prefix + "recurrent", recurrent);
    f(prefix + "bias", bias);
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "input", input);
    f(prefix + "recurrent", recurrent);
    f(prefix + "bias", bias);
  }
  template <class F>
  auto map(F&& f) const -> GateT<decltype(f(input))> {
    return {f(input), f(recurrent), f(bias)};
  }
};

template <class T>
struct RmcParamsT {
  LinearT<T> input_proj;
  std::vector<AttentionParamsT<T>> blocks;
  GateT<T> forget;
  GateT<T> input;
  std::optional<GateT<T>> output;

  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    visit_impl(*this, prefix, f);
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) {
    visit_impl(*this, prefix, f);
  }
  template <class F>
  auto map(F&& f) const -> RmcParamsT<decltype(f(std::declval<const T&>()))> {
    RmcParamsT<decltype(f(std::declval<const T&>()))> out;
    out.input_proj = input_proj.map(f);
    for (const auto& b : blocks) out.blocks.push_back(b.map(f));
    out.forget = forget.map(f);
    out.input = input.map(f);
    if (output) out.output = output->map(f);
    return out;
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, const std::string& prefix, F& f) {
    self.input_proj.visit(prefix + "input_proj.", f);
    for (std::size_t b = 0; b < self.blocks.size(); ++b) self.blocks[b].visit(prefix + "block" + std::to_string(b) + ".", f);
    self.forget.visit(prefix + "gate.forget.", f);
    self.input.visit(prefix + "gate.input.", f);
    if (self.output) self.output->visit(prefix + "gate.output.", f);
  }
};

using RmcParams = RmcParamsT<Tensor>;

/// Cell states (memory) and hidden states, both N x F per sequence; a batch of
/// G sequences stacks G such blocks.
template <class T>
struct RmcStateT {
  T memory;
  T hidden;
};

using RmcState = RmcStateT<Tensor>;

inline RmcParams init_rmc_params(const RmcConfig& config, Rng& rng) {
  config.validate();
  const std::size_t width = config.mem_size, gw = config.gate_width(), in = config.input_size;
  RmcParams p;
  p.input_proj = init_linear(rng, in, width);
  for (std::size_t b = 0; b < config.num_blocks; ++b) {
    p.blocks.push_back(init_attention(rng, width, config.num_heads, config.resolved_key_size()));
  }
  auto gate = [&] {
    return GateT<Tensor>{normal_tensor(rng, in, gw, 1.0 / std::sqrt(double(in))),
                         normal_tensor(rng, width, gw, 1.0 / std::sqrt(double(width))), Tensor(1, gw)};
  };
  p.forget = gate();
  p.input = gate();
  if (config.use_output_gate) p.output = gate();
  return p;
}

/// Scalar parameter count, enumerated from the config alone.
inline std::size_t param_count(const RmcConfig& config) {
  const std::size_t width = config.mem_size, in = config.input_size, heads = config.num_heads;
  const std::size_t d_k = config.resolved_key_size(), gw = config.gate_width();
  const std::size_t projection = in * width + width;
  const std::size_t attention = heads * (2 * width * d_k + width * (width / heads));
  const std::size_t mlp = 2 * (width * width + width);
  const std::size_t norms = 2 * 2 * width;
  const std::size_t gates = (config.use_output_gate ? 3 : 2) * (in * gw + width * gw + gw);
  return projection + config.num_blocks * (attention + mlp + norms) + gates;
}

/// Initial state for `groups` sequences (each gets the same N x F block).
inline RmcState init_state(const RmcConfig& config, InitMode mode, std::uint64_t seed, std::size_t groups = 1) {
  const std::size_t n = config.mem_slots, width = config.mem_size;
  Tensor block(n, width);
  if (mode == InitMode::identity_padded) {
    for (std::size_t i = 0; i < std::min(n, width); ++i) block(i, i) = 1.0;
  } else {
    Rng rng(seed);
    block = normal_tensor(rng, n, width, 1.0);
  }
  RmcState s{Tensor(groups * n, width), Tensor(groups * n, width)};
  for (std::size_t g = 0; g < groups; ++g) std::copy(block.data.begin(), block.data.end(), s.memory.data.begin() + g * block.size());
  return s;
}

inline RmcState init_state(const RmcConfig& config, std::uint64_t seed = 0, std::size_t groups = 1) {
  return init_state(config, config.init_mode, seed, groups);
}

struct RmcStepResult {
  Var output;  // G x (N * F), row-major flattening of the next hidden state
  RmcStateT<Var> next;
  AttentionTrace trace;
  Var candidate;                   // attended memory written through the input gate
  Var forget_gate;                 // G*N x gate width, after the sigmoid
  Var input_gate;
  std::optional<Var> output_gate;
};

/// One recurrent step for G stacked sequences; `x` is G x input_size.
inline RmcStepResult rmc_step(const RmcParamsT<Var>& p, const RmcConfig& config, const RmcStateT<Var>& state, Var x,
                              std::size_t groups = 1) {
  const std::size_t n = config.mem_slots, width = config.mem_size;
  if (x.rows() != groups || x.cols() != config.input_size) {
    throw DimensionError("rmc_step: input " + shape_str(x.value()) + ", expected " + std::to_string(groups) + "x" +
                         std::to_string(config.input_size));
  }
  for (Var s : {state.memory, state.hidden}) {
    if (s.rows() != groups * n || s.cols() != width) {
      throw DimensionError("rmc_step: state " + shape_str(s.value()) + ", expected " + std::to_string(groups * n) +
                           "x" + std::to_string(width));
    }
  }

  Var projected = linear_apply(p.input_proj, x);  // one input row per sequence
  auto attended = attend_blocks(p.blocks, state.memory, projected, groups);

  std::vector<Var> w_parts{p.forget.input, p.input.input};
  std::vector<Var> u_parts{p.forget.recurrent, p.input.recurrent};
  std::vector<Var> b_parts{p.forget.bias, p.input.bias};
  if (p.output) {
    w_parts.push_back(p.output->input);
    u_parts.push_back(p.output->recurrent);
    b_parts.push_back(p.output->bias);
  }
  const std::size_t gw = config.gate_width();
  Var pre = add(add(repeat_rows(matmul(x, concat_cols(w_parts)), n), matmul(state.hidden, concat_cols(u_parts))),
                concat_cols(b_parts));
  const std::vector<std::size_t> widths(w_parts.size(), gw);
  auto gates = split_cols(pre, widths);

  Var forget = sigmoid(add_scalar(gates[0], config.forget_bias));
  Var input = sigmoid(gates[1]);
  Var memory = add(mul(forget, state.memory), mul(input, attended.memory));
  Var hidden = tanh(memory);
  std::optional<Var> output_gate;
  if (p.output) {
    output_gate = sigmoid(gates[2]);
    hidden = mul(*output_gate, hidden);
  }

  return {reshape(hidden, groups, n * width), {memory, hidden}, {0, std::move(attended.weights)},
          attended.memory, forget, input, output_gate};
}

struct RmcUnrollResult {
  std::vector<Var> outputs;
  RmcStateT<Var> final_state;
  std::vector<AttentionTrace> traces;
};

inline RmcUnrollResult rmc_unroll(const RmcParamsT<Var>& p, const RmcConfig& config, RmcStateT<Var> state,
                                  std::span<const Var> inputs, std::size_t groups = 1) {
  if (inputs.empty()) throw ContractError("unroll needs at least one timestep");
  RmcUnrollResult out;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto step = rmc_step(p, config, state, inputs[t], groups);
    step.trace.timestep = t;
    out.outputs.push_back(step.output);
    out.traces.push_back(std::move(step.trace));
    state = step.next;
  }
  out.final_state = state;
  return out;
}

// ---------------------------------------------------------------------------
// Value-level conveniences for a single sequence

struct RmcValueStep {
  std::vector<double> output;
  RmcState next;
  AttentionTrace trace;
};

inline RmcValueStep rmc_step(const RmcParams& params, const RmcConfig& config, const RmcState& state,
                             std::span<const double> x) {
  Tape tape;
  auto bound = bind(tape, params);
  RmcStateT<Var> s{tape.constant(state.memory), tape.constant(state.hidden)};
  Var xv = tape.constant(Tensor(1, x.size(), std::vector<double>(x.begin(), x.end())));
  auto r = rmc_step(bound, config, s, xv);
  return {r.output.value().data, {r.next.memory.value(), r.next.hidden.value()}, std::move(r.trace)};
}

struct RmcValueUnroll {
  std::vector<std::vector<double>> outputs;
  RmcState final_state;
  std::vector<AttentionTrace> traces;
};

inline RmcValueUnroll unroll(const RmcParams& params, const RmcConfig& config, const RmcState& state0,
                             const std::vector<std::vector<double>>& inputs) {
  Tape tape;
  auto bound = bind(tape, params);
  RmcStateT<Var> s{tape.constant(state0.memory), tape.constant(state0.hidden)};
  std::vector<Var> xs;
  for (const auto& x : inputs) xs.push_back(tape.constant(Tensor(1, x.size(), x)));
  auto r = rmc_unroll(bound, config, s, xs);
  RmcValueUnroll out;
  for (Var o : r.outputs) out.outputs.push_back(o.value().data);
  out.final_state = {r.final_state.memory.value(), r.final_state.hidden.value()};
  out.traces = std::move(r.traces);
  return out;
}

}  // namespace relmem
