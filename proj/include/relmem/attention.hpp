#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "relmem/nn.hpp"

namespace relmem {

/// Parameters of one attention block: per-head projections plus the row-wise
/// MLP and the two layer norms wrapped around it.
template <class T>
struct AttentionParamsT {
  std::vector<T> query;  // per head, F x key_size
  std::vector<T> key;    // per head, F x key_size
  std::vector<T> value;  // per head, F x F/heads
  MlpT<T> mlp;
  LayerNormT<T> ln1;
  LayerNormT<T> ln2;

  std::size_t num_heads() const { return query.size(); }

  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    visit_impl(*this, prefix, f);
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) {
    visit_impl(*this, prefix, f);
  }
  template <class F>
  auto map(F&& f) const -> AttentionParamsT<decltype(f(std::declval<const T&>()))> {
    AttentionParamsT<decltype(f(std::declval<const T&>()))> out;
    for (const auto& t : query) out.query.push_back(f(t));
    for (const auto& t : key) out.key.push_back(f(t));
    for (const auto& t : value) out.value.push_back(f(t));
    out.mlp = mlp.map(f);
    out.ln1 = ln1.map(f);
    out.ln2 = ln2.map(f);
    return out;
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, const std::string& prefix, F& f) {
    for (std::size_t h = 0; h < self.query.size(); ++h) {
      const std::string head = prefix + "head" + std::to_string(h) + ".";
      f(head + "query", self.query[h]);
      f(head + "key", self.key[h]);
      f(head + "value", self.value[h]);
    }
    self.mlp.visit(prefix + "mlp.", f);
    self.ln1.visit(prefix + "ln1.", f);
    self.ln2.visit(prefix + "ln2.", f);
  }
};

using AttentionParams = AttentionParamsT<Tensor>;

inline AttentionParams init_attention(Rng& rng, std::size_t width, std::size_t num_heads, std::size_t key_size) {
  if (num_heads == 0 || width % num_heads) {
    throw ContractError("memory width " + std::to_string(width) + " is not divisible by " +
                        std::to_string(num_heads) + " heads");
  }
  const double s = 1.0 / std::sqrt(static_cast<double>(width));
  AttentionParams p;
  for (std::size_t h = 0; h < num_heads; ++h) {
    p.query.push_back(normal_tensor(rng, width, key_size, s));
    p.key.push_back(normal_tensor(rng, width, key_size, s));
    p.value.push_back(normal_tensor(rng, width, width / num_heads, s));
  }
  p.mlp = init_mlp(rng, {width, width, width});
  p.ln1 = init_layer_norm(width);
  p.ln2 = init_layer_norm(width);
  return p;
}

/// Attention weights of every block and head for one step. With a batch of G
/// sequences each matrix stacks G blocks of N rows.
struct AttentionTrace {
  std::size_t timestep = 0;
  std::vector<std::vector<Tensor>> weights;  // [block][head], N x (N + R)
};

struct AttentionResult {
  Var output;
  Var weights;
};

/// softmax(q k^T / sqrt(d_k)) v, block-wise over `groups` stacked sequences.
inline AttentionResult scaled_dot_attention(Var q, Var k, Var v, std::size_t d_k, std::size_t groups = 1) {
  if (q.cols() != d_k || k.cols() != d_k) {
    throw DimensionError("attention: query " + shape_str(q.value()) + " / key " + shape_str(k.value()) +
                         " widths must equal d_k = " + std::to_string(d_k));
  }
  if (v.rows() != k.rows()) {
    throw DimensionError("attention: value " + shape_str(v.value()) + " and key " + shape_str(k.value()) +
                         " row counts differ");
  }
  Var scores = scale(grouped_matmul_nt(q, k, groups), 1.0 / std::sqrt(static_cast<double>(d_k)));
  Var weights = softmax_rows(scores);
  return {grouped_matmul(weights, v, groups), weights};
}

struct MultiHeadResult {
  Var output;                 // N x F
  std::vector<Var> weights;   // per head, N x (N + R)
};

/// Queries from memory only; keys and values from [memory; inputs]. The
/// per-head outputs are concatenated column-wise, so the result has the
/// memory's shape.
inline MultiHeadResult mhdpa_over_memory(const AttentionParamsT<Var>& p, Var memory, std::optional<Var> inputs,
                                         std::size_t groups = 1) {
  const std::size_t width = memory.cols();
  const std::size_t heads = p.num_heads();
  if (heads == 0) throw ContractError("attention needs at least one head");
  if (p.query[0].rows() != width) {
    throw DimensionError("attention: memory " + shape_str(memory.value()) + " does not match projection " +
                         shape_str(p.query[0].value()));
  }
  if (inputs && inputs->cols() != width) {
    throw DimensionError("attention: input rows " + shape_str(inputs->value()) + " must have memory width " +
                         std::to_string(width));
  }
  const Var source = inputs ? concat_rows_grouped(memory, *inputs, groups) : memory;
  const std::size_t d_k = p.query[0].cols();
  const std::size_t d_v = p.value[0].cols();

  const std::vector<std::size_t> key_widths(heads, d_k), value_widths(heads, d_v);
  const auto queries = split_cols(matmul(memory, concat_cols(p.query)), key_widths);
  const auto keys = split_cols(matmul(source, concat_cols(p.key)), key_widths);
  const auto values = split_cols(matmul(source, concat_cols(p.value)), value_widths);

  MultiHeadResult result;
  std::vector<Var> outputs;
  for (std::size_t h = 0; h < heads; ++h) {
    auto r = scaled_dot_attention(queries[h], keys[h], values[h], d_k, groups);
    outputs.push_back(r.output);
    result.weights.push_back(r.weights);
  }
  result.output = concat_cols(outputs);
  return result;
}

struct BlocksResult {
  Var memory;
  std::vector<std::vector<Tensor>> weights;  // [block][head]
};

/// Repeated attention: A = mhdpa(M, x); Y = ln1(M + A); M <- ln2(Y + mlp(Y)).
inline BlocksResult attend_blocks(std::span<const AttentionParamsT<Var>> blocks, Var memory,
                                  std::optional<Var> inputs, std::size_t groups = 1) {
  if (blocks.empty()) throw ContractError("attend_blocks needs at least one block");
  BlocksResult out;
  for (const auto& block : blocks) {
    auto attended = mhdpa_over_memory(block, memory, inputs, groups);
    Var y = layer_norm_apply(block.ln1, add(memory, attended.output));
    memory = layer_norm_apply(block.ln2, add(y, mlp_apply(block.mlp, y)));
    std::vector<Tensor> head_weights;
    for (Var w : attended.weights) head_weights.push_back(w.value());
    out.weights.push_back(std::move(head_weights));
  }
  out.memory = memory;
  return out;
}

}  // namespace relmem
