#pragma once

// Seeded generators and exact answer oracles for the toy tasks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "relmem/tensor.hpp"

namespace relmem {

enum class TaskKind { nth_farthest, copy, reverse, double_ };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::nth_farthest: return "nth_farthest";
    case TaskKind::copy: return "copy";
    case TaskKind::reverse: return "reverse";
    case TaskKind::double_: return "double";
  }
  return "?";
}

/// Accepts both "nth_farthest" and "nth-farthest".
inline TaskKind parse_task(std::string name) {
  std::replace(name.begin(), name.end(), '-', '_');
  if (name == "nth_farthest") return TaskKind::nth_farthest;
  if (name == "copy") return TaskKind::copy;
  if (name == "reverse") return TaskKind::reverse;
  if (name == "double") return TaskKind::double_;
  throw ContractError("unknown task '" + name + "' (expected nth_farthest, copy, reverse or double)");
}

// ---------------------------------------------------------------------------
// Nth farthest

struct NthFarthestEpisode {
  std::vector<std::vector<double>> vectors;  // presentation order
  std::vector<std::size_t> labels;           // label of vectors[t], a permutation of 1..seq_len
  std::size_t n = 1;
  std::size_t m = 1;
  std::size_t target = 1;

  bool operator==(const NthFarthestEpisode&) const = default;
};

/// Label of the n-th farthest vector (Euclidean) from the vector labelled m.
/// Equal distances rank the smaller label first.
inline std::size_t nth_farthest_oracle(const std::vector<std::vector<double>>& vectors,
                                       const std::vector<std::size_t>& labels, std::size_t n, std::size_t m) {
  if (vectors.size() != labels.size()) throw ContractError("nth_farthest_oracle: vectors and labels differ in length");
  auto ref = std::find(labels.begin(), labels.end(), m);
  if (ref == labels.end()) throw ContractError("nth_farthest_oracle: label m=" + std::to_string(m) + " is absent");
  if (n < 1 || n > labels.size()) {
    throw ContractError("nth_farthest_oracle: n=" + std::to_string(n) + " outside 1.." + std::to_string(labels.size()));
  }
  const auto& origin = vectors[static_cast<std::size_t>(ref - labels.begin())];
  std::vector<std::pair<double, std::size_t>> ranked;  // (squared distance, label)
  for (std::size_t t = 0; t < vectors.size(); ++t) {
    double d = 0.0;
    for (std::size_t k = 0; k < origin.size(); ++k) d += (vectors[t][k] - origin[k]) * (vectors[t][k] - origin[k]);
    ranked.emplace_back(d, labels[t]);
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  return ranked[n - 1].second;
}

inline NthFarthestEpisode gen_nth_farthest(std::mt19937_64& rng, std::size_t dim, std::size_t seq_len) {
  if (seq_len < 2) throw ContractError("nth_farthest: seq_len must be >= 2");
  std::uniform_real_distribution<double> coord(-1.0, 1.0);
  NthFarthestEpisode ep;
  ep.vectors.assign(seq_len, std::vector<double>(dim));
  for (auto& v : ep.vectors) {
    for (double& x : v) {
      do x = coord(rng);
      while (x == -1.0);
    }
  }
  ep.labels.resize(seq_len);
  std::iota(ep.labels.begin(), ep.labels.end(), std::size_t{1});
  std::shuffle(ep.labels.begin(), ep.labels.end(), rng);
  std::uniform_int_distribution<std::size_t> pick(1, seq_len);
  ep.n = pick(rng);
  ep.m = pick(rng);
  ep.target = nth_farthest_oracle(ep.vectors, ep.labels, ep.n, ep.m);
  return ep;
}

inline std::size_t nth_farthest_input_width(std::size_t dim, std::size_t seq_len) { return dim + 3 * seq_len; }

struct EncodedEpisode {
  Tensor inputs;             // T x (dim + 3 seq_len)
  std::size_t target_class;  // target label - 1
};

/// Row t = [vector_t ; onehot(label_t) ; onehot(n) ; onehot(m)].
inline EncodedEpisode encode_nth_farthest(const NthFarthestEpisode& ep) {
  const std::size_t len = ep.vectors.size();
  const std::size_t dim = len ? ep.vectors[0].size() : 0;
  Tensor x(len, nth_farthest_input_width(dim, len));
  for (std::size_t t = 0; t < len; ++t) {
    auto row = x.row(t);
    std::copy(ep.vectors[t].begin(), ep.vectors[t].end(), row.begin());
    row[dim + ep.labels[t] - 1] = 1.0;
    row[dim + len + ep.n - 1] = 1.0;
    row[dim + 2 * len + ep.m - 1] = 1.0;
  }
  return {std::move(x), ep.target - 1};
}

// ---------------------------------------------------------------------------
// Memorization: copy, reverse, double

struct SeqSample {
  TaskKind kind = TaskKind::copy;
  std::vector<std::size_t> input_tokens;
  std::vector<std::size_t> target_tokens;

  bool operator==(const SeqSample&) const = default;
};

/// copy: x; reverse: x reversed; double: x followed by x.
inline std::vector<std::size_t> memorization_oracle(TaskKind kind, const std::vector<std::size_t>& input) {
  switch (kind) {
    case TaskKind::copy: return input;
    case TaskKind::reverse: return {input.rbegin(), input.rend()};
    case TaskKind::double_: {
      auto out = input;
      out.insert(out.end(), input.begin(), input.end());
      return out;
    }
    case TaskKind::nth_farthest: break;
  }
  throw ContractError("memorization_oracle: nth_farthest is not a memorization task");
}

inline std::size_t memorization_target_length(TaskKind kind, std::size_t length) {
  return kind == TaskKind::double_ ? 2 * length : length;
}

inline SeqSample gen_memorization(std::mt19937_64& rng, TaskKind kind, std::size_t vocab_size, std::size_t length) {
  if (vocab_size < 2) throw ContractError("memorization: vocab_size must be >= 2");
  if (length < 1) throw ContractError("memorization: length must be >= 1");
  std::uniform_int_distribution<std::size_t> tok(0, vocab_size - 1);
  SeqSample s;
  s.kind = kind;
  s.input_tokens.resize(length);
  for (auto& t : s.input_tokens) t = tok(rng);
  s.target_tokens = memorization_oracle(kind, s.input_tokens);
  return s;
}

/// Input symbols are the vocab plus GO (= vocab_size) and PAD (= vocab_size + 1).
inline std::size_t memorization_input_width(std::size_t vocab_size) { return vocab_size + 2; }

struct EncodedSample {
  Tensor inputs;                     // steps x (vocab + 2)
  std::vector<std::size_t> targets;  // per step, meaningful where mask = 1
  std::vector<std::uint8_t> mask;    // 1 on answer steps
};

/// Presentation of the input tokens, one GO step, then one PAD step per
/// target token. The model never sees target tokens.
inline EncodedSample encode_memorization(const SeqSample& s, std::size_t vocab_size) {
  const std::size_t len = s.input_tokens.size(), answer = s.target_tokens.size();
  const std::size_t steps = len + 1 + answer;
  const std::size_t go = vocab_size, pad = vocab_size + 1;
  EncodedSample e{Tensor(steps, memorization_input_width(vocab_size)), std::vector<std::size_t>(steps, 0),
                  std::vector<std::uint8_t>(steps, 0)};
  for (std::size_t t = 0; t < len; ++t) {
    if (s.input_tokens[t] >= vocab_size) throw ContractError("memorization: token outside vocabulary");
    e.inputs(t, s.input_tokens[t]) = 1.0;
  }
  e.inputs(len, go) = 1.0;
  for (std::size_t k = 0; k < answer; ++k) {
    const std::size_t t = len + 1 + k;
    e.inputs(t, pad) = 1.0;
    e.targets[t] = s.target_tokens[k];
    e.mask[t] = 1;
  }
  return e;
}

}  // namespace relmem
