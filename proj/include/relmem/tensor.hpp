#pragma once

// Dense row-major 2-D tensors and a tape for reverse-mode differentiation.
//
// Batches are handled by stacking rows; the "grouped" operations treat a
// tensor as `groups` equally sized row blocks and act on each block
// independently.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <Eigen/Dense>

namespace relmem {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Tensor(std::size_t r, std::size_t c, std::vector<double> values)
      : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + std::to_string(r) + "x" + std::to_string(c));
    }
  }
  Tensor(std::initializer_list<std::initializer_list<double>> init) {
    rows = init.size();
    cols = rows ? init.begin()->size() : 0;
    data.reserve(rows * cols);
    for (const auto& row : init) {
      if (row.size() != cols) throw DimensionError("ragged tensor literal");
      data.insert(data.end(), row.begin(), row.end());
    }
  }

  static Tensor zeros(std::size_t r, std::size_t c) { return Tensor(r, c); }
  static Tensor identity(std::size_t n) {
    Tensor t(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }
  static Tensor scalar(double v) { return Tensor(1, 1, v); }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::size_t size() const { return data.size(); }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }

  bool operator==(const Tensor&) const = default;
};

inline std::string shape_str(const Tensor& t) {
  return std::to_string(t.rows) + "x" + std::to_string(t.cols);
}

/// Keeps freed tensor buffers in the heap instead of returning them to the OS.
/// Training allocates and releases the same few hundred buffers every step;
/// with glibc defaults each large one is a fresh mmap that must be faulted in
/// again. Call once from main(); a no-op on other C libraries.
inline void tune_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline ConstMap view(const Tensor& t) { return {t.data.data(), Eigen::Index(t.rows), Eigen::Index(t.cols)}; }
inline MutMap view(Tensor& t) { return {t.data.data(), Eigen::Index(t.rows), Eigen::Index(t.cols)}; }
inline ConstMap view_rows(const Tensor& t, std::size_t r0, std::size_t n) {
  return {t.data.data() + r0 * t.cols, Eigen::Index(n), Eigen::Index(t.cols)};
}
inline MutMap view_rows(Tensor& t, std::size_t r0, std::size_t n) {
  return {t.data.data() + r0 * t.cols, Eigen::Index(n), Eigen::Index(t.cols)};
}

/// y[i] = f(x[i]) evaluated in fixed 4-wide chunks (the tail is zero-padded),
/// so every element takes the same vectorised path whatever the buffer
/// alignment. Results are then bitwise reproducible across allocations.
template <class F>
void packetwise(const double* x, double* y, std::size_t n, F f) {
  using P = Eigen::Array<double, 4, 1>;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) Eigen::Map<P>(y + i) = f(P(Eigen::Map<const P>(x + i)));
  if (i < n) {
    P buf = P::Zero();
    for (std::size_t k = 0; i + k < n; ++k) buf[Eigen::Index(k)] = x[i + k];
    const P r = f(buf);
    for (std::size_t k = 0; i + k < n; ++k) y[i + k] = r[Eigen::Index(k)];
  }
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

class Tape;

/// Handle to a tensor recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows; }
  std::size_t cols() const { return value().cols; }
};

/// Propagates `grad_out` into the gradients of a node's inputs. Entries of
/// `grad_in` are null for inputs that do not require gradients.
using BackwardFn =
    std::function<void(const Tape& tape, const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

class Tape {
 public:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  /// A differentiable input; receives a gradient on backward().
  Var leaf(Tensor value) { return push({std::move(value), {}, {}, true}); }
  /// A non-differentiable input.
  Var constant(Tensor value) { return push({std::move(value), {}, {}, false}); }

  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
  }

  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
    Node node{std::move(value), {}, std::move(fn), false};
    node.inputs.reserve(inputs.size());
    for (const Var& v : inputs) {
      if (v.tape != this) throw ContractError("operand belongs to a different tape");
      node.inputs.push_back(v.id);
      node.requires_grad = node.requires_grad || nodes_[v.id].requires_grad;
    }
    if (!node.requires_grad) node.backward = nullptr;
    return push(std::move(node));
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

 private:
  Var push(Node node) {
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

/// Accumulated gradients indexed by tape node.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Tensor> grads) : grads_(std::move(grads)) {}

  const Tensor& operator[](Var v) const { return grads_.at(v.id); }

 private:
  std::vector<Tensor> grads_;
};

/// Reverse pass from a scalar loss. Every node that requires a gradient gets
/// one (zero when it does not reach the loss).
inline Gradients backward(Tape& tape, Var loss) {
  if (loss.tape != &tape) throw ContractError("loss is not recorded on this tape");
  const Tensor& lv = loss.value();
  if (lv.rows != 1 || lv.cols != 1) {
    throw ContractError("backward requires a scalar loss, got " + shape_str(lv));
  }
  const std::size_t n = tape.size();
  std::vector<Tensor> grads(n);
  std::vector<char> touched(n, 0);
  auto zero_fill = [&] {
    for (std::size_t i = 0; i < n; ++i) {
      const auto& v = tape.node(i).value;
      if (tape.node(i).requires_grad && !touched[i]) grads[i] = Tensor(v.rows, v.cols);
    }
  };
  if (!tape.node(loss.id).requires_grad) {
    zero_fill();
    return Gradients(std::move(grads));
  }
  grads[loss.id] = Tensor::scalar(1.0);
  touched[loss.id] = 1;

  std::vector<Tensor*> in;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    const auto& node = tape.node(i);
    if (!touched[i] || !node.backward) continue;
    in.assign(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const std::size_t j = node.inputs[k];
      if (tape.node(j).requires_grad) {
        if (!touched[j]) {
          const auto& v = tape.node(j).value;
          grads[j] = Tensor(v.rows, v.cols);
          touched[j] = 1;
        }
        in[k] = &grads[j];
      }
    }
    node.backward(tape, grads[i], in);
  }
  zero_fill();
  return Gradients(std::move(grads));
}

// ---------------------------------------------------------------------------
// Operations

inline Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols != bv.rows) {
    throw DimensionError("matmul: cannot multiply " + shape_str(av) + " by " + shape_str(bv));
  }
  Tensor out(av.rows, bv.cols);
  detail::view(out).noalias() = detail::view(av) * detail::view(bv);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b},
                        [ia, ib](const Tape& t, const Tensor& g, std::span<Tensor* const> gi) {
                          if (gi[0]) detail::view(*gi[0]).noalias() += detail::view(g) * detail::view(t.value(ib)).transpose();
                          if (gi[1]) detail::view(*gi[1]).noalias() += detail::view(t.value(ia)).transpose() * detail::view(g);
                        });
}

inline Var transpose(Var a) {
  const Tensor& av = a.value();
  Tensor out(av.cols, av.rows);
  for (std::size_t r = 0; r < av.rows; ++r)
    for (std::size_t c = 0; c < av.cols; ++c) out(c, r) = av(r, c);
  return a.tape->record(std::move(out), {a}, [](const Tape&, const Tensor& g, std::span<Tensor* const> gi) {
    for (std::size_t r = 0; r < g.rows; ++r)
      for (std::size_t c = 0; c < g.cols; ++c) (*gi[0])(c, r) += g(r, c);
  });
}

/// Same data, new shape (row-major order is preserved).
inline Var reshape(Var a, std::size_t rows, std::size_t cols) {
  const Tensor& av = a.value();
  if (rows * cols != av.size()) {
    throw DimensionError("reshape: " + shape_str(av) + " has no " + std::to_string(rows) + "x" +
                         std::to_string(cols) + " view");
  }
  return a.tape->record(Tensor(rows, cols, av.data), {a},
                        [](const Tape&, const Tensor& g, std::span<Tensor* const> gi) {
                          for (std::size_t i = 0; i < g.size(); ++i) gi[0]->data[i] += g.data[i];
                        });
}

enum class Axis { rows, cols };

/// Row-wise concatenation of matching row blocks: with `groups` = G, `a` holds
/// G blocks of a.rows/G rows and `b` G blocks of b.rows/G rows; output block g
/// is [a_g; b_g]. groups = 1 is plain row concatenation.
inline Var concat_rows_grouped(Var a, Var b, std::size_t groups) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols != bv.cols) {
    throw DimensionError("concat(rows): column mismatch " + shape_str(av) + " vs " + shape_str(bv));
  }
  if (groups == 0 || av.rows % groups || bv.rows % groups) {
    throw DimensionError("concat(rows): " + std::to_string(groups) + " groups do not divide " +
                         shape_str(av) + " and " + shape_str(bv));
  }
  const std::size_t na = av.rows / groups, nb = bv.rows / groups, w = av.cols;
  Tensor out(av.rows + bv.rows, w);
  for (std::size_t g = 0; g < groups; ++g) {
    std::copy_n(av.data.begin() + g * na * w, na * w, out.data.begin() + g * (na + nb) * w);
    std::copy_n(bv.data.begin() + g * nb * w, nb * w, out.data.begin() + (g * (na + nb) + na) * w);
  }
  return a.tape->record(std::move(out), {a, b},
                        [groups, na, nb, w](const Tape&, const Tensor& gr, std::span<Tensor* const> gi) {
                          for (std::size_t g = 0; g < groups; ++g) {
                            const double* src = gr.data.data() + g * (na + nb) * w;
                            if (gi[0]) {
                              double* dst = gi[0]->data.data() + g * na * w;
                              for (std::size_t i = 0; i < na * w; ++i) dst[i] += src[i];
                            }
                            if (gi[1]) {
                              double* dst = gi[1]->data.data() + g * nb * w;
                              for (std::size_t i = 0; i < nb * w; ++i) dst[i] += src[na * w + i];
                            }
                          }
                        });
}

inline Var concat(Axis axis, Var a, Var b) {
  if (axis == Axis::rows) return concat_rows_grouped(a, b, 1);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rows != bv.rows) {
    throw DimensionError("concat(cols): row mismatch " + shape_str(av) + " vs " + shape_str(bv));
  }
  const std::size_t wa = av.cols, wb = bv.cols;
  Tensor out(av.rows, wa + wb);
  for (std::size_t r = 0; r < av.rows; ++r) {
    std::copy_n(av.data.begin() + r * wa, wa, out.data.begin() + r * (wa + wb));
    std::copy_n(bv.data.begin() + r * wb, wb, out.data.begin() + r * (wa + wb) + wa);
  }
  return a.tape->record(std::move(out), {a, b},
                        [wa, wb](const Tape&, const Tensor& g, std::span<Tensor* const> gi) {
                          for (std::size_t r = 0; r < g.rows; ++r) {
                            const double* src = g.data.data() + r * (wa + wb);
                            if (gi[0])
                              for (std::size_t c = 0; c < wa; ++c) gi[0]->data[r * wa + c] += src[c];
                            if (gi[1])
                              for (std::size_t c = 0; c < wb; ++c) gi[1]->data[r * wb + c] += src[wa + c];
                          }
                        });
}

/// Row-wise concatenation of any number of equally wide tensors.
inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat(rows): no operands");
  const std::size_t w = parts[0].cols();
  std::size_t rows = 0;
  for (Var p : parts) {
    if (p.cols() != w) {
      throw DimensionError("concat(rows): column mismatch " + shape_str(parts[0].value()) + " vs " +
                           shape_str(p.value()));
    }
    rows += p.rows();
  }
  Tensor out(rows, w);
  std::vector<std::size_t> offsets;
  std::size_t at = 0;
  for (Var p : parts) {
    offsets.push_back(at);
    std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + at);
    at += p.value().size();
  }
  return parts[0].tape->record(std::move(out), parts,
                               [offsets = std::move(offsets)](const Tape&, const Tensor& g, std::span<Tensor* const> gi) {
                                 for (std::size_t k = 0; k < gi.size(); ++k) {
                                   if (!gi[k]) continue;
                                   for (std::size_t i = 0; i < gi[k]->size(); ++i) gi[k]->data[i] += g.data[offsets[k] + i];
                                 }
                               });
}

/// Column-wise concatenation of any number of equally tall tensors.
inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat(cols): no operands");
  Var acc = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) acc = concat(Axis::cols, acc, parts[i]);
  return acc;
}

/// Extracts columns [c0, c0 + width).
inline Var slice_cols(Var a, std::size_t c0, std::size_t width) {
  const Tensor& av = a.value();
  if (c0 + width > av.cols) {
    throw DimensionError("slice_cols: [" + std::to_string(c0) + ", " + std::to_string(c0 + width) +
                         ") outside " + shape_str(av));
  }
  const std::size_t w = av.cols;
  Tensor out(av.rows, width);
  for (std::size_t r = 0; r < av.rows; ++r)
    std::copy_n(av.data.begin() + r * w + c0, width, out.data.begin() + r * width);
  return a.tape->record(std::move(out), {a},
                        [c0, width, w](const Tape&, const Tensor& g, std::span<Tensor* const> gi) {
                          for (std::size_t r = 0; r < g.rows; ++r)
                            for (std::size_t c = 0; c < width; ++c) gi[0]->data[r * w + c0 + c] += g(r, c);
                        });
}

inline std::vector<Var> split_cols(Var a, std::span<const std::size_t> widths) {
  const std::size_t total = std::accumulate(widths.begin(), widths.end(), std::size_t{0});
  if (total != a.cols()) {
    throw DimensionError("split_cols: widths sum to " + std::to_string(total) + " but tensor is " +
                         shape_str(a.value()));
  }
  std::vector<Var> parts;
  parts.reserve(widths.size());
  std::size_t c0 = 0;
  for (std::size_t w : widths) {
    parts.push_back(slice_cols(a, c0, w));
    c0 += w;
  }
  return parts;
}

inline std::vector<Var> split_cols(Var a, std::initializer_list<std::size_t> widths) {
  return split_cols(a, std::span<const std::size_t>(widths.begin(), widths.size()));
}

/// Repeats every row `times` times in place: row r becomes rows r*times .. r*times+times-1.
inline Var repeat_rows(Var a, std::size_t times) {
  const Tensor& av = a.value();
  const std::size_t w = av.cols;
  Tensor out(av.rows * times, w);
  for (std::size_t r = 0; r < av.rows; ++r)
    for (std::size_t k = 0; k < times; ++k)
      std::copy_n(av.data.begin() + r * w, w, out.data.begin() + (r * times + k) * w);
  return a.tape->record(std::move(out), {a}, [times, w](const Tape&, const Tensor& g, std::span<Tensor* const> gi) {
    for (std::size_t r = 0; r < gi[0]->rows; ++r)
      for (std::size_t k = 0; k < times; ++k)
        for (std::size_t c = 0; c < w; ++c) gi[0]->data[r * w + c] += g.data[(r * times + k) * w + c];
  });
}

enum class Unary { sigmoid, tanh, relu };

inline Var ew_unary(Unary kind, Var a) {
  const Tensor& av = a.value();
  Tensor out(av.rows, av.cols);
  using P = Eigen::Array<double, 4, 1>;
  const std::size_t n = av.data.size();
  switch (kind) {
    case Unary::sigmoid:
      detail::packetwise(av.data.data(), out.data.data(), n, [](const P& v) -> P { return (1.0 + (-v).exp()).inverse(); });
      break;
    case Unary::tanh: {
      detail::packetwise(av.data.data(), out.data.data(), n, [](const P& v) -> P { return (-2.0 * v.abs()).exp(); });
      for (std::size_t i = 0; i < out.data.size(); ++i) {
        const double v = av.data[i], e = out.data[i];
        // (1 - e)/(1 + e) cancels near zero, where a short series is exact to rounding
        const double x2 = v * v;
        const double mag = std::abs(v) < 1e-2 ? std::abs(v) * (1.0 - x2 * (1.0 / 3 - x2 * (2.0 / 15 - x2 * (17.0 / 315))))
                                              : (1.0 - e) / (1.0 + e);
        out.data[i] = v < 0 ? -mag : mag;
      }
      break;
    }
    case Unary::relu: detail::view(out).array() = detail::view(av).array().max(0.0); break;
  }
  const std::size_t ia = a.id;
  Tape* tape = a.tape;
  const std::size_t io = tape->size();  // id the result will receive
  return tape->record(std::move(out), {a}, [kind, ia, io](const Tape& t, const Tensor& g, std::span<Tensor* const> gi) {
    const auto y = detail::view(t.value(io)).array();
    const auto gv = detail::view(g).array();
    auto dm = detail::view(*gi[0]);
    switch (kind) {
      case Unary::sigmoid: dm.array() += gv * y * (1.0 - y); break;
      case Unary::tanh: dm.array() += gv * (1.0 - y.square()); break;
      case Unary::relu: dm.array() += (detail::view(t.value(ia)).array() > 0.0).select(gv, 0.0); break;
    }
  });
}

inline Var sigmoid(Var a) { return ew_unary(Unary::sigmoid, a); }
inline Var tanh(Var a) { return ew_unary(Unary::tanh, a); }
inline Var relu(Var a) { return ew_unary(Unary::relu, a); }

enum class Binary { add, sub, mul };

/// Element-wise op. Operands must agree in each dimension or have extent 1
/// there (a single row or a single column is broadcast).
inline Var ew_binary(Binary kind, Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t rows = std::max(av.rows, bv.rows), cols = std::max(av.cols, bv.cols);
  auto fits = [&](const Tensor& t) {
    return (t.rows == rows || t.rows == 1) && (t.cols == cols || t.cols == 1);
  };
  if (!fits(av) || !fits(bv)) {
    throw DimensionError("element-wise op: incompatible shapes " + shape_str(av) + " and " + shape_str(bv));
  }
  // stride 0 along a broadcast axis
  const std::size_t ars = av.rows == 1 ? 0 : av.cols, acs = av.cols == 1 ? 0 : 1;
  const std::size_t brs = bv.rows == 1 ? 0 : bv.cols, bcs = bv.cols == 1 ? 0 : 1;
  Tensor out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* pa = av.data.data() + r * ars;
    const double* pb = bv.data.data() + r * brs;
    double* po = out.data.data() + r * cols;
    switch (kind) {
      case Binary::add: for (std::size_t c = 0; c < cols; ++c) po[c] = pa[c * acs] + pb[c * bcs]; break;
      case Binary::sub: for (std::size_t c = 0; c < cols; ++c) po[c] = pa[c * acs] - pb[c * bcs]; break;
      case Binary::mul: for (std::size_t c = 0; c < cols; ++c) po[c] = pa[c * acs] * pb[c * bcs]; break;
    }
  }
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(
      std::move(out), {a, b},
      [kind, ia, ib, ars, acs, brs, bcs, cols](const Tape& t, const Tensor& g, std::span<Tensor* const> gi) {
        // d(out)/d(operand) is 1, -1 or the other operand
        auto accumulate = [&](Tensor* dst, std::size_t rs, std::size_t cs, double sign, const Tensor* other,
                              std::size_t ors, std::size_t ocs) {
          if (!dst) return;
          for (std::size_t r = 0; r < g.rows; ++r) {
            const double* pg = g.data.data() + r * cols;
            double* pd = dst->data.data() + r * rs;
            if (!other && cs == 1) {
              for (std::size_t c = 0; c < cols; ++c) pd[c] += sign * pg[c];
            } else if (!other) {
              double s = 0.0;
              for (std::size_t c = 0; c < cols; ++c) s += pg[c];
              pd[0] += sign * s;
            } else {
              const double* po = other->data.data() + r * ors;
              if (cs == 1 && ocs == 1) {
                for (std::size_t c = 0; c < cols; ++c) pd[c] += pg[c] * po[c];
              } else {
                for (std::size_t c = 0; c < cols; ++c) pd[c * cs] += pg[c] * po[c * ocs];
              }
            }
          }
        };
        const bool prod = kind == Binary::mul;
        accumulate(gi[0], ars, acs, 1.0, prod ? &t.value(ib) : nullptr, brs, bcs);
        accumulate(gi[1], brs, bcs, kind == Binary::sub ? -1.0 : 1.0, prod ? &t.value(ia) : nullptr, ars, acs);
      });
}

inline Var add(Var a, Var b) { return ew_binary(Binary::add, a, b); }
inline Var sub(Var a, Var b) { return ew_binary(Binary::sub, a, b); }
inline Var mul(Var a, Var b) { return ew_binary(Binary::mul, a, b); }

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& x : out.data) x *= s;
  return a.tape->record(std::move(out), {a}, [s](const Tape&, const Tensor& g, std::span<Tensor* const> gi) {
    for (std::size_t i = 0; i < g.size(); ++i) gi[0]->data[i] += s * g.data[i];
  });
}

/// Adds a constant to every element.
inline Var add_scalar(Var a, double s) {
  Tensor out = a.value();
  for (double& x : out.data) x += s;
  return a.tape->record(std::move(out), {a}, [](const Tape&, const Tensor& g, std::span<Tensor* const> gi) {
    for (std::size_t i = 0; i < g.size(); ++i) gi[0]->data[i] += g.data[i];
  });
}

inline Tensor softmax_rows_value(const Tensor& a) {
  Tensor out(a.rows, a.cols);
  for (std::size_t r = 0; r < a.rows; ++r) {
    auto in = a.row(r);
    auto o = out.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t c = 0; c < a.cols; ++c) z += (o[c] = std::exp(in[c] - mx));
    for (double& v : o) v /= z;
  }
  return out;
}

inline Var softmax_rows(Var a) {
  Tape* tape = a.tape;
  const std::size_t io = tape->size();
  return tape->record(softmax_rows_value(a.value()), {a},
                      [io](const Tape& t, const Tensor& g, std::span<Tensor* const> gi) {
                        const Tensor& y = t.value(io);
                        for (std::size_t r = 0; r < g.rows; ++r) {
                          auto yr = y.row(r);
                          auto gr = g.row(r);
                          double dot = 0.0;
                          for (std::size_t c = 0; c < g.cols; ++c) dot += gr[c] * yr[c];
                          auto d = gi[0]->row(r);
                          for (std::size_t c = 0; c < g.cols; ++c) d[c] += yr[c] * (gr[c] - dot);
                        }
                      });
}

enum class Reduce { sum, mean };

inline Var reduce(Reduce kind, Var a) {
  const Tensor& av = a.value();
  const double total = std::accumulate(av.data.begin(), av.data.end(), 0.0);
  const double n = static_cast<double>(av.size());
  const double k = kind == Reduce::sum ? 1.0 : (n > 0 ? 1.0 / n : 0.0);
  return a.tape->record(Tensor::scalar(total * k), {a},
                        [k](const Tape&, const Tensor& g, std::span<Tensor* const> gi) {
                          const double s = g.data[0] * k;
                          for (double& v : gi[0]->data) v += s;
                        });
}

inline Var sum(Var a) { return reduce(Reduce::sum, a); }
inline Var mean(Var a) { return reduce(Reduce::mean, a); }

namespace detail {

// out[i][j] += sum_k a[i][k] b[j][k] for row-major blocks (a: n x d, b: m x d)
inline void add_nt(const double* a, const double* b, double* out, std::size_t n, std::size_t m, std::size_t d) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) acc += a[i * d + k] * b[j * d + k];
      out[i * m + j] += acc;
    }
}

// out[i][:] += sum_k a[i][k] b[k][:] (a: n x k, b: k x c)
inline void add_nn(const double* a, const double* b, double* out, std::size_t n, std::size_t kk, std::size_t c) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < kk; ++k) {
      const double w = a[i * kk + k];
      const double* brow = b + k * c;
      double* orow = out + i * c;
      for (std::size_t j = 0; j < c; ++j) orow[j] += w * brow[j];
    }
}

// out[k][:] += sum_i a[i][k] b[i][:] (a: n x kk, b: n x c)
inline void add_tn(const double* a, const double* b, double* out, std::size_t n, std::size_t kk, std::size_t c) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < kk; ++k) {
      const double w = a[i * kk + k];
      const double* brow = b + i * c;
      double* orow = out + k * c;
      for (std::size_t j = 0; j < c; ++j) orow[j] += w * brow[j];
    }
}

}  // namespace detail

/// Block-wise a_g * b_g^T: `a` is G blocks of na x d, `b` G blocks of nb x d;
/// the result is G blocks of na x nb. Blocks are small, so plain loops.
inline Var grouped_matmul_nt(Var a, Var b, std::size_t groups) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols != bv.cols || groups == 0 || av.rows % groups || bv.rows % groups) {
    throw DimensionError("grouped_matmul_nt: " + shape_str(av) + " and " + shape_str(bv) + " in " +
                         std::to_string(groups) + " groups");
  }
  const std::size_t na = av.rows / groups, nb = bv.rows / groups, d = av.cols;
  Tensor out(av.rows, nb);
  for (std::size_t g = 0; g < groups; ++g) {
    detail::add_nt(av.data.data() + g * na * d, bv.data.data() + g * nb * d, out.data.data() + g * na * nb, na, nb, d);
  }
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b},
                        [ia, ib, groups, na, nb, d](const Tape& t, const Tensor& gr, std::span<Tensor* const> gi) {
                          const double* x = t.value(ia).data.data();
                          const double* y = t.value(ib).data.data();
                          for (std::size_t g = 0; g < groups; ++g) {
                            const double* gg = gr.data.data() + g * na * nb;
                            // d/da = G b, d/db = G^T a
                            if (gi[0]) detail::add_nn(gg, y + g * nb * d, gi[0]->data.data() + g * na * d, na, nb, d);
                            if (gi[1]) detail::add_tn(gg, x + g * na * d, gi[1]->data.data() + g * nb * d, na, nb, d);
                          }
                        });
}

/// Block-wise a_g * b_g: `a` is G blocks of na x k, `b` G blocks of k x c.
inline Var grouped_matmul(Var a, Var b, std::size_t groups) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (groups == 0 || av.rows % groups || bv.rows != groups * av.cols) {
    throw DimensionError("grouped_matmul: " + shape_str(av) + " and " + shape_str(bv) + " in " +
                         std::to_string(groups) + " groups");
  }
  const std::size_t na = av.rows / groups, k = av.cols, c = bv.cols;
  Tensor out(av.rows, c);
  for (std::size_t g = 0; g < groups; ++g) {
    detail::add_nn(av.data.data() + g * na * k, bv.data.data() + g * k * c, out.data.data() + g * na * c, na, k, c);
  }
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b},
                        [ia, ib, groups, na, k, c](const Tape& t, const Tensor& gr, std::span<Tensor* const> gi) {
                          const double* x = t.value(ia).data.data();
                          const double* y = t.value(ib).data.data();
                          for (std::size_t g = 0; g < groups; ++g) {
                            const double* gg = gr.data.data() + g * na * c;
                            // d/da = G b^T, d/db = a^T G
                            if (gi[0]) detail::add_nt(gg, y + g * k * c, gi[0]->data.data() + g * na * k, na, k, c);
                            if (gi[1]) detail::add_tn(x + g * na * k, gg, gi[1]->data.data() + g * k * c, na, k, c);
                          }
                        });
}

// ---------------------------------------------------------------------------
// Named parameter collections and the finite-difference oracle

using ParamMap = std::map<std::string, Tensor>;

/// Central differences (f(p + eps e) - f(p - eps e)) / 2 eps for every coordinate.
inline ParamMap finite_diff_grad(const std::function<double(const ParamMap&)>& f, ParamMap params, double eps) {
  if (!(eps > 0)) throw ContractError("finite_diff_grad: eps must be positive");
  ParamMap grads;
  for (auto& [name, tensor] : params) {
    Tensor g(tensor.rows, tensor.cols);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double orig = tensor.data[i];
      tensor.data[i] = orig + eps;
      const double up = f(params);
      tensor.data[i] = orig - eps;
      const double down = f(params);
      tensor.data[i] = orig;
      g.data[i] = (up - down) / (2.0 * eps);
    }
    grads.emplace(name, std::move(g));
  }
  return grads;
}

/// |a - b| / max(1e-8, |a| + |b|)
inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max(1e-8, std::abs(a) + std::abs(b));
}

inline double max_relative_error(const ParamMap& a, const ParamMap& b) {
  double worst = 0.0;
  for (const auto& [name, ta] : a) {
    auto it = b.find(name);
    if (it == b.end() || !it->second.same_shape(ta)) {
      throw ContractError("gradient maps disagree on parameter '" + name + "'");
    }
    for (std::size_t i = 0; i < ta.size(); ++i) worst = std::max(worst, relative_error(ta.data[i], it->second.data[i]));
  }
  if (a.size() != b.size()) throw ContractError("gradient maps have different key sets");
  return worst;
}

}  // namespace relmem
