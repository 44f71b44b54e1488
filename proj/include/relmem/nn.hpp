#pragma once

// Layers are templates over the parameter handle: `T = Tensor` holds values,
// `T = Var` holds the same parameters bound to a tape for one forward pass.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "relmem/tensor.hpp"

namespace relmem {

using Rng = std::mt19937_64;

template <class T>
struct LinearT {
  T weight;  // in x out
  T bias;    // 1 x out

  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + "weight", weight);
    f(prefix + "bias", bias);
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "weight", weight);
    f(prefix + "bias", bias);
  }
  template <class F>
  auto map(F&& f) const -> LinearT<decltype(f(weight))> {
    return {f(weight), f(bias)};
  }
};

template <class T>
struct MlpT {
  std::vector<LinearT<T>> layers;
  bool relu_after_last = false;

  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].visit(prefix + std::to_string(i) + ".", f);
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].visit(prefix + std::to_string(i) + ".", f);
  }
  template <class F>
  auto map(F&& f) const -> MlpT<decltype(f(std::declval<const T&>()))> {
    MlpT<decltype(f(std::declval<const T&>()))> out;
    out.relu_after_last = relu_after_last;
    for (const auto& l : layers) out.layers.push_back(l.map(f));
    return out;
  }
};

template <class T>
struct LayerNormT {
  T gain;    // 1 x F
  T offset;  // 1 x F
  double epsilon = 1e-5;

  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + "gain", gain);
    f(prefix + "offset", offset);
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "gain", gain);
    f(prefix + "offset", offset);
  }
  template <class F>
  auto map(F&& f) const -> LayerNormT<decltype(f(gain))> {
    return {f(gain), f(offset), epsilon};
  }
};

using Linear = LinearT<Tensor>;
using Mlp = MlpT<Tensor>;
using LayerNorm = LayerNormT<Tensor>;

// ---------------------------------------------------------------------------
// Parameter plumbing shared by every model struct

template <class P>
ParamMap flatten(const P& params, const std::string& prefix = "") {
  ParamMap out;
  params.visit(prefix, [&](const std::string& name, const Tensor& t) { out.emplace(name, t); });
  return out;
}

template <class P>
void unflatten(P& params, const ParamMap& values, const std::string& prefix = "") {
  params.visit(prefix, [&](const std::string& name, Tensor& t) {
    auto it = values.find(name);
    if (it == values.end()) throw ContractError("missing parameter '" + name + "'");
    if (!it->second.same_shape(t)) {
      throw DimensionError("parameter '" + name + "' has shape " + shape_str(it->second) + ", expected " +
                           shape_str(t));
    }
    t = it->second;
  });
}

template <class P>
std::size_t count_params(const P& params) {
  std::size_t n = 0;
  params.visit("", [&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

/// Registers every parameter as a tape leaf.
template <class P>
auto bind(Tape& tape, const P& params) {
  return params.map([&](const Tensor& t) { return tape.leaf(t); });
}

/// Gradient of each bound parameter, as a value struct.
template <class PV>
auto gradients_of(const PV& bound, const Gradients& grads) {
  return bound.map([&](const Var& v) { return grads[v]; });
}

inline Tensor normal_tensor(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(rows, cols);
  for (double& v : t.data) v = dist(rng);
  return t;
}

inline Linear init_linear(Rng& rng, std::size_t in, std::size_t out) {
  return {normal_tensor(rng, in, out, 1.0 / std::sqrt(static_cast<double>(in))), Tensor(1, out)};
}

/// Layer widths `dims` = {in, h1, ..., out}; relu between consecutive layers.
inline Mlp init_mlp(Rng& rng, const std::vector<std::size_t>& dims, bool relu_after_last = false) {
  if (dims.size() < 2) throw ContractError("an MLP needs at least one layer");
  Mlp m;
  m.relu_after_last = relu_after_last;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) m.layers.push_back(init_linear(rng, dims[i], dims[i + 1]));
  return m;
}

inline LayerNorm init_layer_norm(std::size_t width, double epsilon = 1e-5) {
  return {Tensor(1, width, 1.0), Tensor(1, width), epsilon};
}

// ---------------------------------------------------------------------------
// Forward operations

inline Var linear_apply(const LinearT<Var>& layer, Var x) {
  if (x.cols() != layer.weight.rows()) {
    throw DimensionError("linear: input " + shape_str(x.value()) + " does not match weight " +
                         shape_str(layer.weight.value()));
  }
  return add(matmul(x, layer.weight), layer.bias);
}

inline Var mlp_apply(const MlpT<Var>& mlp, Var x) {
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    x = linear_apply(mlp.layers[i], x);
    if (i + 1 < mlp.layers.size() || mlp.relu_after_last) x = relu(x);
  }
  return x;
}

/// Per row: (x - mean) / sqrt(var + eps) * gain + offset, population variance.
inline Var layer_norm_apply(const LayerNormT<Var>& ln, Var x) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows, width = xv.cols;
  if (ln.gain.cols() != width) {
    throw DimensionError("layer_norm: input " + shape_str(xv) + " vs gain " + shape_str(ln.gain.value()));
  }
  const Tensor& gain = ln.gain.value();
  const Tensor& offset = ln.offset.value();
  Tensor normed(rows, width);
  std::vector<double> inv_std(rows);
  Tensor out(rows, width);
  for (std::size_t r = 0; r < rows; ++r) {
    auto in = xv.row(r);
    double mu = 0.0;
    for (double v : in) mu += v;
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (double v : in) var += (v - mu) * (v - mu);
    var /= static_cast<double>(width);
    inv_std[r] = 1.0 / std::sqrt(var + ln.epsilon);
    for (std::size_t c = 0; c < width; ++c) {
      normed(r, c) = (in[c] - mu) * inv_std[r];
      out(r, c) = normed(r, c) * gain.data[c] + offset.data[c];
    }
  }
  const std::size_t ig = ln.gain.id;
  return x.tape->record(
      std::move(out), {x, ln.gain, ln.offset},
      [normed = std::move(normed), inv_std = std::move(inv_std), ig, width](
          const Tape& t, const Tensor& g, std::span<Tensor* const> gi) {
        const Tensor& gain = t.value(ig);
        std::vector<double> dn(width);
        for (std::size_t r = 0; r < g.rows; ++r) {
          auto gr = g.row(r);
          auto nr = normed.row(r);
          if (gi[1])
            for (std::size_t c = 0; c < width; ++c) gi[1]->data[c] += gr[c] * nr[c];
          if (gi[2])
            for (std::size_t c = 0; c < width; ++c) gi[2]->data[c] += gr[c];
          if (!gi[0]) continue;
          double mean_dn = 0.0, mean_dn_n = 0.0;
          for (std::size_t c = 0; c < width; ++c) {
            dn[c] = gr[c] * gain.data[c];
            mean_dn += dn[c];
            mean_dn_n += dn[c] * nr[c];
          }
          mean_dn /= static_cast<double>(width);
          mean_dn_n /= static_cast<double>(width);
          auto d = gi[0]->row(r);
          for (std::size_t c = 0; c < width; ++c) d[c] += inv_std[r] * (dn[c] - mean_dn - nr[c] * mean_dn_n);
        }
      });
}

/// Mean over rows of -log softmax(logits)[target].
inline Var softmax_xent(Var logits, std::span<const std::size_t> targets) {
  const Tensor& lv = logits.value();
  if (targets.size() != lv.rows) {
    throw ContractError("softmax_xent: " + std::to_string(targets.size()) + " targets for " +
                        std::to_string(lv.rows) + " rows");
  }
  for (std::size_t t : targets) {
    if (t >= lv.cols) {
      throw ContractError("softmax_xent: target " + std::to_string(t) + " out of range for " +
                          std::to_string(lv.cols) + " classes");
    }
  }
  Tensor probs = softmax_rows_value(lv);
  double loss = 0.0;
  for (std::size_t r = 0; r < lv.rows; ++r) {
    auto row = lv.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    loss += -(row[targets[r]] - mx - std::log(z));
  }
  const double n = static_cast<double>(lv.rows);
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return logits.tape->record(Tensor::scalar(loss / n), {logits},
                             [probs = std::move(probs), tgt = std::move(tgt), n](
                                 const Tape&, const Tensor& g, std::span<Tensor* const> gi) {
                               const double k = g.data[0] / n;
                               for (std::size_t r = 0; r < probs.rows; ++r) {
                                 auto d = gi[0]->row(r);
                                 auto p = probs.row(r);
                                 for (std::size_t c = 0; c < probs.cols; ++c) d[c] += k * p[c];
                                 d[tgt[r]] -= k;
                               }
                             });
}

// ---------------------------------------------------------------------------
// Optimisation

inline double global_norm(const ParamMap& grads) {
  double sq = 0.0;
  for (const auto& [_, g] : grads)
    for (double v : g.data) sq += v * v;
  return std::sqrt(sq);
}

/// Rescales all gradients by max_norm / norm when the global L2 norm exceeds max_norm.
inline ParamMap clip_global_norm(ParamMap grads, double max_norm) {
  if (!(max_norm > 0)) throw ContractError("clip_global_norm: max_norm must be positive");
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [_, g] : grads)
      for (double& v : g.data) v *= s;
  }
  return grads;
}

struct AdamState {
  std::uint64_t step = 0;
  ParamMap m;
  ParamMap v;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double lr = 1e-3;

  bool operator==(const AdamState&) const = default;
};

/// One bias-corrected Adam update of `params` in place.
inline void adam_step(ParamMap& params, const ParamMap& grads, AdamState& state) {
  if (params.size() != grads.size()) throw ContractError("adam_step: params and grads have different keys");
  for (const auto& [name, p] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw ContractError("adam_step: no gradient for '" + name + "'");
    if (!it->second.same_shape(p)) throw ContractError("adam_step: gradient shape mismatch for '" + name + "'");
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (auto& [name, p] : params) {
    const Tensor& g = grads.at(name);
    auto [mi, _m] = state.m.try_emplace(name, p.rows, p.cols);
    auto [vi, _v] = state.v.try_emplace(name, p.rows, p.cols);
    Tensor& m = mi->second;
    Tensor& v = vi->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m.data[i] = state.beta1 * m.data[i] + (1.0 - state.beta1) * g.data[i];
      v.data[i] = state.beta2 * v.data[i] + (1.0 - state.beta2) * g.data[i] * g.data[i];
      const double mhat = m.data[i] / c1;
      const double vhat = v.data[i] / c2;
      p.data[i] -= state.lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

}  // namespace relmem
