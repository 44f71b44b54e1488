#pragma once

// JSON configs, checkpoints and traces; JSONL datasets.

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "relmem/trainer.hpp"

namespace relmem {

using json = nlohmann::json;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Config

namespace detail {

inline const json* field(const json& obj, const char* key) {
  auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

inline void read_count(const json& obj, const char* key, const std::string& path, std::size_t& out) {
  if (const json* v = field(obj, key)) {
    if (!v->is_number_unsigned()) throw ConfigError(path, "expected a non-negative integer");
    out = v->get<std::size_t>();
  }
}

inline void read_real(const json& obj, const char* key, const std::string& path, double& out) {
  if (const json* v = field(obj, key)) {
    if (!v->is_number()) throw ConfigError(path, "expected a number");
    out = v->get<double>();
  }
}

inline void read_bool(const json& obj, const char* key, const std::string& path, bool& out) {
  if (const json* v = field(obj, key)) {
    if (!v->is_boolean()) throw ConfigError(path, "expected true or false");
    out = v->get<bool>();
  }
}

template <class E>
void read_enum(const json& obj, const char* key, const std::string& path,
               std::initializer_list<std::pair<const char*, E>> names, E& out) {
  const json* v = field(obj, key);
  if (!v) return;
  if (v->is_string()) {
    for (const auto& [name, value] : names) {
      if (v->get<std::string>() == name) {
        out = value;
        return;
      }
    }
  }
  std::string allowed;
  for (const auto& [name, _] : names) allowed += (allowed.empty() ? "" : ", ") + std::string(name);
  throw ConfigError(path, "expected one of " + allowed);
}

inline void check_keys(const json& obj, const std::string& path, std::initializer_list<const char*> known) {
  if (!obj.is_object()) throw ConfigError(path.empty() ? "config" : path, "expected an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw ConfigError(path.empty() ? it.key() : path + "." + it.key(), "unknown field");
  }
}

}  // namespace detail

inline std::string to_string(GateStyle g) { return g == GateStyle::unit ? "unit" : "memory"; }
inline std::string to_string(InitMode m) { return m == InitMode::identity_padded ? "identity_padded" : "random_normal"; }

inline GateStyle parse_gate_style(const std::string& s) {
  if (s == "unit") return GateStyle::unit;
  if (s == "memory") return GateStyle::memory;
  throw ConfigError("gate_style", "expected unit or memory");
}

/// Reads a training config; omitted fields keep their defaults. Throws
/// ConfigError naming the field on any malformed or invalid entry.
inline TrainConfig config_from_json(const json& j) {
  using namespace detail;
  TrainConfig c;
  check_keys(j, "", {"model", "task", "dim", "seq_len", "vocab", "length", "rmc", "lstm", "head", "lr", "batch", "steps",
                     "clip", "seed", "eval_every", "log_wall_time"});
  read_enum(j, "model", "model", {{"rmc", ModelKind::rmc}, {"lstm", ModelKind::lstm}}, c.model);
  read_enum(j, "task", "task",
            {{"nth_farthest", TaskKind::nth_farthest},
             {"nth-farthest", TaskKind::nth_farthest},
             {"copy", TaskKind::copy},
             {"reverse", TaskKind::reverse},
             {"double", TaskKind::double_}},
            c.task);
  read_count(j, "dim", "dim", c.dim);
  read_count(j, "seq_len", "seq_len", c.seq_len);
  read_count(j, "vocab", "vocab", c.vocab);
  read_count(j, "length", "length", c.length);
  if (const json* r = field(j, "rmc")) {
    check_keys(*r, "rmc", {"mem_slots", "mem_size", "num_heads", "num_blocks", "gate_style", "use_output_gate",
                           "forget_bias", "key_size", "init_mode", "input_size"});
    read_count(*r, "mem_slots", "rmc.mem_slots", c.rmc.mem_slots);
    read_count(*r, "mem_size", "rmc.mem_size", c.rmc.mem_size);
    read_count(*r, "num_heads", "rmc.num_heads", c.rmc.num_heads);
    read_count(*r, "num_blocks", "rmc.num_blocks", c.rmc.num_blocks);
    read_enum(*r, "gate_style", "rmc.gate_style", {{"unit", GateStyle::unit}, {"memory", GateStyle::memory}},
              c.rmc.gate_style);
    read_bool(*r, "use_output_gate", "rmc.use_output_gate", c.rmc.use_output_gate);
    read_real(*r, "forget_bias", "rmc.forget_bias", c.rmc.forget_bias);
    read_count(*r, "key_size", "rmc.key_size", c.rmc.key_size);
    read_enum(*r, "init_mode", "rmc.init_mode",
              {{"identity_padded", InitMode::identity_padded}, {"random_normal", InitMode::random_normal}},
              c.rmc.init_mode);
  }
  if (const json* l = field(j, "lstm")) {
    check_keys(*l, "lstm", {"hidden_size", "forget_bias", "input_size"});
    read_count(*l, "hidden_size", "lstm.hidden_size", c.lstm.hidden_size);
    read_real(*l, "forget_bias", "lstm.forget_bias", c.lstm.forget_bias);
  }
  if (const json* h = field(j, "head")) {
    check_keys(*h, "head", {"hidden_layers", "hidden_units"});
    read_count(*h, "hidden_layers", "head.hidden_layers", c.head.hidden_layers);
    read_count(*h, "hidden_units", "head.hidden_units", c.head.hidden_units);
  }
  read_real(j, "lr", "lr", c.lr);
  read_count(j, "batch", "batch", c.batch);
  read_count(j, "steps", "steps", c.steps);
  read_real(j, "clip", "clip", c.clip);
  if (const json* s = field(j, "seed")) {
    if (!s->is_number_unsigned()) throw ConfigError("seed", "expected a non-negative integer");
    c.seed = s->get<std::uint64_t>();
  }
  read_count(j, "eval_every", "eval_every", c.eval_every);
  read_bool(j, "log_wall_time", "log_wall_time", c.log_wall_time);
  c.validate();
  return c.resolved();
}

/// Every field, defaults included.
inline json config_to_json(const TrainConfig& raw) {
  const TrainConfig c = raw.resolved();
  return {
      {"model", to_string(c.model)},
      {"task", to_string(c.task)},
      {"dim", c.dim},
      {"seq_len", c.seq_len},
      {"vocab", c.vocab},
      {"length", c.length},
      {"rmc",
       {{"mem_slots", c.rmc.mem_slots},
        {"mem_size", c.rmc.mem_size},
        {"num_heads", c.rmc.num_heads},
        {"num_blocks", c.rmc.num_blocks},
        {"gate_style", to_string(c.rmc.gate_style)},
        {"use_output_gate", c.rmc.use_output_gate},
        {"forget_bias", c.rmc.forget_bias},
        {"key_size", c.rmc.key_size},
        {"init_mode", to_string(c.rmc.init_mode)},
        {"input_size", c.rmc.input_size}}},
      {"lstm", {{"hidden_size", c.lstm.hidden_size}, {"forget_bias", c.lstm.forget_bias}, {"input_size", c.lstm.input_size}}},
      {"head", {{"hidden_layers", c.head.hidden_layers}, {"hidden_units", c.head.hidden_units}}},
      {"lr", c.lr},
      {"batch", c.batch},
      {"steps", c.steps},
      {"clip", c.clip},
      {"seed", c.seed},
      {"eval_every", c.eval_every},
      {"log_wall_time", c.log_wall_time},
  };
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(path + ": " + e.what());
  }
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path);
  out << text;
}

inline std::string dump(const json& j) { return j.dump(2) + "\n"; }

// ---------------------------------------------------------------------------
// Tensors and checkpoints

inline json tensor_to_json(const Tensor& t) { return {{"shape", {t.rows, t.cols}}, {"values", t.data}}; }

inline Tensor tensor_from_json(const json& j, const std::string& what) {
  try {
    const auto shape = j.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 2) throw FormatError(what + ": shape must have two entries");
    return Tensor(shape[0], shape[1], j.at("values").get<std::vector<double>>());
  } catch (const json::exception& e) {
    throw FormatError(what + ": " + e.what());
  } catch (const DimensionError& e) {
    throw FormatError(what + ": " + e.what());
  }
}

inline json param_map_to_json(const ParamMap& params) {
  json j = json::object();
  for (const auto& [name, t] : params) j[name] = tensor_to_json(t);
  return j;
}

inline ParamMap param_map_from_json(const json& j, const std::string& what) {
  if (!j.is_object()) throw FormatError(what + ": expected an object");
  ParamMap out;
  for (auto it = j.begin(); it != j.end(); ++it) out.emplace(it.key(), tensor_from_json(*it, what + "." + it.key()));
  return out;
}

inline json checkpoint_to_json(const Checkpoint& c) {
  const AdamState& o = c.optimizer;
  return {
      {"format_version", c.format_version},
      {"config", config_to_json(c.config)},
      {"params", param_map_to_json(flatten(c.params))},
      {"optimizer",
       {{"step", o.step},
        {"beta1", o.beta1},
        {"beta2", o.beta2},
        {"epsilon", o.epsilon},
        {"lr", o.lr},
        {"m", param_map_to_json(o.m)},
        {"v", param_map_to_json(o.v)}}},
      {"rng_state", c.rng_state},
      {"step", c.step},
      {"best_batch_accuracy", c.best_batch_accuracy},
  };
}

inline Checkpoint checkpoint_from_json(const json& j) {
  Checkpoint c;
  try {
    c.format_version = j.at("format_version").get<std::size_t>();
    if (c.format_version != Checkpoint::kFormatVersion) {
      throw FormatError("unsupported checkpoint format_version " + std::to_string(c.format_version));
    }
    c.config = config_from_json(j.at("config"));
    c.params = init_model(c.config);
    unflatten(c.params, param_map_from_json(j.at("params"), "params"));
    const json& o = j.at("optimizer");
    c.optimizer.step = o.at("step").get<std::uint64_t>();
    c.optimizer.beta1 = o.at("beta1").get<double>();
    c.optimizer.beta2 = o.at("beta2").get<double>();
    c.optimizer.epsilon = o.at("epsilon").get<double>();
    c.optimizer.lr = o.at("lr").get<double>();
    c.optimizer.m = param_map_from_json(o.at("m"), "optimizer.m");
    c.optimizer.v = param_map_from_json(o.at("v"), "optimizer.v");
    c.rng_state = j.at("rng_state").get<std::string>();
    c.step = j.at("step").get<std::size_t>();
    c.best_batch_accuracy = j.at("best_batch_accuracy").get<double>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed checkpoint: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("malformed checkpoint config: ") + e.what());
  } catch (const ContractError& e) {
    throw FormatError(std::string("malformed checkpoint: ") + e.what());
  } catch (const DimensionError& e) {
    throw FormatError(std::string("malformed checkpoint: ") + e.what());
  }
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) { write_text_file(path, dump(checkpoint_to_json(c))); }
inline Checkpoint load_checkpoint(const std::string& path) { return checkpoint_from_json(read_json_file(path)); }

// ---------------------------------------------------------------------------
// Datasets (one JSON object per line)

inline json episode_to_json(const NthFarthestEpisode& e) {
  return {{"task", "nth_farthest"}, {"vectors", e.vectors}, {"labels", e.labels}, {"n", e.n}, {"m", e.m}, {"target", e.target}};
}

inline NthFarthestEpisode episode_from_json(const json& j) {
  try {
    NthFarthestEpisode e;
    e.vectors = j.at("vectors").get<std::vector<std::vector<double>>>();
    e.labels = j.at("labels").get<std::vector<std::size_t>>();
    e.n = j.at("n").get<std::size_t>();
    e.m = j.at("m").get<std::size_t>();
    e.target = j.at("target").get<std::size_t>();
    return e;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed nth_farthest episode: ") + e.what());
  }
}

inline json sample_to_json(const SeqSample& s) {
  return {{"task", to_string(s.kind)}, {"input", s.input_tokens}, {"target", s.target_tokens}};
}

inline SeqSample sample_from_json(const json& j) {
  try {
    SeqSample s;
    s.kind = parse_task(j.at("task").get<std::string>());
    s.input_tokens = j.at("input").get<std::vector<std::size_t>>();
    s.target_tokens = j.at("target").get<std::vector<std::size_t>>();
    return s;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed memorization sample: ") + e.what());
  } catch (const ContractError& e) {
    throw FormatError(std::string("malformed memorization sample: ") + e.what());
  }
}

struct DatasetOptions {
  std::size_t dim = 4;
  std::size_t seq_len = 4;
  std::size_t vocab = 10;
  std::size_t length = 5;
};

/// `count` lines of JSONL, reproducible from `seed`.
inline std::string generate_dataset(TaskKind task, std::size_t count, std::uint64_t seed, const DatasetOptions& opt) {
  Rng rng(seed);
  std::string out;
  for (std::size_t i = 0; i < count; ++i) {
    const json line = task == TaskKind::nth_farthest ? episode_to_json(gen_nth_farthest(rng, opt.dim, opt.seq_len))
                                                     : sample_to_json(gen_memorization(rng, task, opt.vocab, opt.length));
    out += line.dump() + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention traces

inline json matrix_to_json(const Tensor& t) {
  json rows = json::array();
  for (std::size_t r = 0; r < t.rows; ++r) rows.push_back(std::vector<double>(t.row(r).begin(), t.row(r).end()));
  return rows;
}

/// weights[timestep][block][head] = N x (N + 1) matrix.
inline json traces_to_json(const std::vector<AttentionTrace>& traces) {
  json steps = json::array();
  for (const auto& tr : traces) {
    json blocks = json::array();
    for (const auto& heads : tr.weights) {
      json hs = json::array();
      for (const auto& w : heads) hs.push_back(matrix_to_json(w));
      blocks.push_back(std::move(hs));
    }
    steps.push_back(std::move(blocks));
  }
  return steps;
}

}  // namespace relmem
