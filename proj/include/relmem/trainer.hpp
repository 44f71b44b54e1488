#pragma once

// Training and evaluation: recurrent core -> MLP head -> softmax cross-entropy,
// on freshly generated batches every step.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "relmem/lstm.hpp"
#include "relmem/rmc.hpp"
#include "relmem/tasks.hpp"

namespace relmem {

/// Invalid configuration; `field` names the offending entry.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& what)
      : std::invalid_argument(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ModelKind { rmc, lstm };

inline std::string to_string(ModelKind k) { return k == ModelKind::rmc ? "rmc" : "lstm"; }

struct HeadConfig {
  std::size_t hidden_layers = 4;
  std::size_t hidden_units = 256;
};

struct TrainConfig {
  ModelKind model = ModelKind::rmc;
  TaskKind task = TaskKind::nth_farthest;
  // nth farthest
  std::size_t dim = 4;
  std::size_t seq_len = 4;
  // memorization
  std::size_t vocab = 10;
  std::size_t length = 5;

  RmcConfig rmc;
  LstmConfig lstm;
  HeadConfig head;

  double lr = 1e-4;
  std::size_t batch = 64;
  std::size_t steps = 20000;
  double clip = 1.0;
  std::uint64_t seed = 1;
  std::size_t eval_every = 100;
  bool log_wall_time = true;  // false writes wall_seconds = 0 for byte-stable metrics

  std::size_t input_size() const {
    return task == TaskKind::nth_farthest ? nth_farthest_input_width(dim, seq_len) : memorization_input_width(vocab);
  }
  std::size_t num_classes() const { return task == TaskKind::nth_farthest ? seq_len : vocab; }
  std::size_t core_output_size() const {
    return model == ModelKind::rmc ? rmc.total_units() : lstm.hidden_size;
  }

  /// Copies the task-derived input width into the model configs.
  TrainConfig resolved() const {
    TrainConfig c = *this;
    c.rmc.input_size = c.input_size();
    c.lstm.input_size = c.input_size();
    c.rmc.key_size = c.rmc.resolved_key_size();
    return c;
  }

  void validate() const {
    auto at_least_one = [](std::size_t v, const char* field) {
      if (v < 1) throw ConfigError(field, "must be >= 1");
    };
    if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("lr", "must be a positive finite number");
    if (!(clip > 0)) throw ConfigError("clip", "must be positive");
    at_least_one(batch, "batch");
    at_least_one(eval_every, "eval_every");
    at_least_one(head.hidden_units, "head.hidden_units");
    if (task == TaskKind::nth_farthest) {
      at_least_one(dim, "dim");
      if (seq_len < 2) throw ConfigError("seq_len", "must be >= 2");
    } else {
      if (vocab < 2) throw ConfigError("vocab", "must be >= 2");
      at_least_one(length, "length");
    }
    if (model == ModelKind::rmc) {
      at_least_one(rmc.mem_slots, "rmc.mem_slots");
      at_least_one(rmc.mem_size, "rmc.mem_size");
      at_least_one(rmc.num_heads, "rmc.num_heads");
      at_least_one(rmc.num_blocks, "rmc.num_blocks");
      if (rmc.mem_size % rmc.num_heads) throw ConfigError("rmc.num_heads", "must divide rmc.mem_size");
    } else {
      at_least_one(lstm.hidden_size, "lstm.hidden_size");
    }
  }
};

// ---------------------------------------------------------------------------
// Model = recurrent core + output head

template <class T>
struct ModelParamsT {
  std::variant<RmcParamsT<T>, LstmParamsT<T>> core;
  MlpT<T> head;

  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    std::visit([&](const auto& c) { c.visit(prefix + "core.", f); }, core);
    head.visit(prefix + "head.", f);
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) {
    std::visit([&](auto& c) { c.visit(prefix + "core.", f); }, core);
    head.visit(prefix + "head.", f);
  }
  template <class F>
  auto map(F&& f) const -> ModelParamsT<decltype(f(std::declval<const T&>()))> {
    using U = decltype(f(std::declval<const T&>()));
    ModelParamsT<U> out;
    out.core = std::visit([&](const auto& c) -> std::variant<RmcParamsT<U>, LstmParamsT<U>> { return c.map(f); }, core);
    out.head = head.map(f);
    return out;
  }
};

using ModelParams = ModelParamsT<Tensor>;

/// Head: `hidden_layers` relu layers of `hidden_units`, then a linear projection to the classes.
inline Mlp init_head(Rng& rng, std::size_t in, const HeadConfig& head, std::size_t classes) {
  std::vector<std::size_t> dims{in};
  for (std::size_t i = 0; i < head.hidden_layers; ++i) dims.push_back(head.hidden_units);
  dims.push_back(classes);
  return init_mlp(rng, dims);
}

inline ModelParams init_model(const TrainConfig& raw) {
  const TrainConfig config = raw.resolved();
  Rng rng(config.seed);
  ModelParams p;
  if (config.model == ModelKind::rmc) {
    p.core = init_rmc_params(config.rmc, rng);
  } else {
    p.core = init_lstm_params(config.lstm, rng);
  }
  p.head = init_head(rng, config.core_output_size(), config.head, config.num_classes());
  return p;
}

/// One batch laid out per timestep; the logits rows of supervised steps are
/// stacked step-major and `targets` follows that order.
struct Batch {
  std::vector<Tensor> step_inputs;          // T tensors of B x input_size
  std::vector<std::size_t> supervised_steps;
  std::vector<std::size_t> targets;
};

inline Batch make_batch(Rng& rng, const TrainConfig& config, std::size_t batch_size) {
  Batch b;
  if (config.task == TaskKind::nth_farthest) {
    const std::size_t width = nth_farthest_input_width(config.dim, config.seq_len);
    b.step_inputs.assign(config.seq_len, Tensor(batch_size, width));
    for (std::size_t i = 0; i < batch_size; ++i) {
      auto enc = encode_nth_farthest(gen_nth_farthest(rng, config.dim, config.seq_len));
      for (std::size_t t = 0; t < config.seq_len; ++t) {
        std::copy(enc.inputs.row(t).begin(), enc.inputs.row(t).end(), b.step_inputs[t].row(i).begin());
      }
      b.targets.push_back(enc.target_class);
    }
    b.supervised_steps = {config.seq_len - 1};
    return b;
  }
  std::vector<EncodedSample> samples;
  for (std::size_t i = 0; i < batch_size; ++i) {
    samples.push_back(encode_memorization(gen_memorization(rng, config.task, config.vocab, config.length), config.vocab));
  }
  const std::size_t steps = samples[0].inputs.rows, width = samples[0].inputs.cols;
  b.step_inputs.assign(steps, Tensor(batch_size, width));
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t i = 0; i < batch_size; ++i) {
      std::copy(samples[i].inputs.row(t).begin(), samples[i].inputs.row(t).end(), b.step_inputs[t].row(i).begin());
    }
    if (samples[0].mask[t]) {
      b.supervised_steps.push_back(t);
      for (std::size_t i = 0; i < batch_size; ++i) b.targets.push_back(samples[i].targets[t]);
    }
  }
  return b;
}

/// Core outputs (B x core_output_size) for every timestep.
inline std::vector<Var> core_outputs(Tape& tape, const ModelParamsT<Var>& p, const TrainConfig& config,
                                     std::span<const Var> xs, std::size_t batch_size,
                                     std::vector<AttentionTrace>* traces = nullptr) {
  if (const auto* rmc = std::get_if<RmcParamsT<Var>>(&p.core)) {
    const RmcState s0 = init_state(config.rmc, config.seed, batch_size);
    auto r = rmc_unroll(*rmc, config.rmc, {tape.constant(s0.memory), tape.constant(s0.hidden)}, xs, batch_size);
    if (traces) *traces = std::move(r.traces);
    return r.outputs;
  }
  const auto& lstm = std::get<LstmParamsT<Var>>(p.core);
  const LstmState s0 = init_lstm_state(config.lstm, batch_size);
  return lstm_unroll(lstm, config.lstm, {tape.constant(s0.hidden), tape.constant(s0.cell)}, xs).outputs;
}

/// Logits for the supervised steps of `batch`, stacked step-major.
inline Var forward_logits(Tape& tape, const ModelParamsT<Var>& p, const TrainConfig& config, const Batch& batch) {
  std::vector<Var> xs;
  for (const auto& x : batch.step_inputs) xs.push_back(tape.constant(x));
  const std::size_t batch_size = batch.step_inputs.at(0).rows;
  auto outs = core_outputs(tape, p, config, xs, batch_size);
  std::vector<Var> supervised;
  for (std::size_t t : batch.supervised_steps) supervised.push_back(outs[t]);
  return mlp_apply(p.head, concat_rows(supervised));
}

inline std::size_t count_correct(const Tensor& logits, std::span<const std::size_t> targets) {
  std::size_t correct = 0;
  for (std::size_t r = 0; r < logits.rows; ++r) {
    auto row = logits.row(r);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    correct += best == targets[r];
  }
  return correct;
}

// ---------------------------------------------------------------------------
// Training

struct MetricsRow {
  std::size_t step = 0;
  double loss = 0.0;
  double batch_accuracy = 0.0;
  double best_batch_accuracy = 0.0;
  double wall_seconds = 0.0;

  bool operator==(const MetricsRow&) const = default;
};

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "step,loss,batch_accuracy,best_batch_accuracy,wall_seconds\n";
  for (const auto& r : rows) {
    os << r.step << ',' << r.loss << ',' << r.batch_accuracy << ',' << r.best_batch_accuracy << ',' << r.wall_seconds
       << '\n';
  }
  return os.str();
}

struct Checkpoint {
  static constexpr std::size_t kFormatVersion = 1;

  std::size_t format_version = kFormatVersion;
  TrainConfig config;
  ModelParams params;
  AdamState optimizer;
  std::string rng_state;
  std::size_t step = 0;
  double best_batch_accuracy = 0.0;
};

struct StepStats {
  double loss = 0.0;
  double batch_accuracy = 0.0;
};

/// Owns parameters, optimizer state, and the data stream of one run.
class Trainer {
 public:
  explicit Trainer(const TrainConfig& config)
      : config_(config.resolved()), params_(init_model(config_)), data_rng_(data_seed(config_.seed)) {
    config_.validate();
    optimizer_.lr = config_.lr;
  }

  explicit Trainer(const Checkpoint& ckpt)
      : config_(ckpt.config.resolved()),
        params_(ckpt.params),
        optimizer_(ckpt.optimizer),
        step_(ckpt.step),
        best_(ckpt.best_batch_accuracy) {
    config_.validate();
    std::istringstream is(ckpt.rng_state);
    is >> data_rng_;
    if (!is) throw ContractError("checkpoint rng state is unreadable");
  }

  StepStats step() {
    if (!timer_started_) {
      start_ = std::chrono::steady_clock::now();
      timer_started_ = true;
    }
    const Batch batch = make_batch(data_rng_, config_, config_.batch);
    Tape tape;
    const auto bound = bind(tape, params_);
    Var logits = forward_logits(tape, bound, config_, batch);
    Var loss = softmax_xent(logits, batch.targets);
    const double loss_value = loss.value().data[0];
    if (!std::isfinite(loss_value)) {
      throw TrainingError("non-finite loss at step " + std::to_string(step_ + 1));
    }
    const auto grads = gradients_of(bound, backward(tape, loss));
    ParamMap flat = flatten(params_);
    adam_step(flat, clip_global_norm(flatten(grads), config_.clip), optimizer_);
    unflatten(params_, flat);

    const StepStats stats{loss_value,
                          double(count_correct(logits.value(), batch.targets)) / double(batch.targets.size())};
    ++step_;
    best_ = std::max(best_, stats.batch_accuracy);
    if (step_ % config_.eval_every == 0 || step_ == config_.steps) {
      const double wall =
          config_.log_wall_time ? std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count() : 0.0;
      history_.push_back({step_, stats.loss, stats.batch_accuracy, best_, wall});
    }
    return stats;
  }

  /// Runs until the configured step count.
  void run() {
    while (step_ < config_.steps) step();
  }

  Checkpoint checkpoint() const {
    std::ostringstream os;
    os << data_rng_;
    return {Checkpoint::kFormatVersion, config_, params_, optimizer_, os.str(), step_, best_};
  }

  const TrainConfig& config() const { return config_; }
  const ModelParams& params() const { return params_; }
  const std::vector<MetricsRow>& history() const { return history_; }
  std::size_t steps_taken() const { return step_; }
  double best_batch_accuracy() const { return best_; }

  static std::uint64_t data_seed(std::uint64_t seed) { return seed ^ 0x9e3779b97f4a7c15ULL; }

 private:
  TrainConfig config_;
  ModelParams params_;
  AdamState optimizer_;
  Rng data_rng_;
  std::size_t step_ = 0;
  double best_ = 0.0;
  std::vector<MetricsRow> history_;
  bool timer_started_ = false;
  std::chrono::steady_clock::time_point start_;
};

struct TrainResult {
  std::vector<MetricsRow> history;
  Checkpoint checkpoint;
};

inline TrainResult train(const TrainConfig& config) {
  Trainer trainer(config);
  trainer.run();
  return {trainer.history(), trainer.checkpoint()};
}

// ---------------------------------------------------------------------------
// Evaluation

/// Accuracy of `params` on `num_batches` fresh batches: per episode for
/// nth_farthest, per answer character for memorization tasks.
inline double evaluate(const ModelParams& params, const TrainConfig& raw, std::size_t num_batches, std::uint64_t seed) {
  const TrainConfig config = raw.resolved();
  Rng rng(seed);
  std::size_t correct = 0, total = 0;
  for (std::size_t i = 0; i < num_batches; ++i) {
    const Batch batch = make_batch(rng, config, config.batch);
    Tape tape;
    const auto bound = params.map([&](const Tensor& t) { return tape.constant(t); });
    Var logits = forward_logits(tape, bound, config, batch);
    correct += count_correct(logits.value(), batch.targets);
    total += batch.targets.size();
  }
  return total ? double(correct) / double(total) : 0.0;
}

inline double evaluate(const Checkpoint& ckpt, TaskKind task, std::size_t num_batches, std::uint64_t seed) {
  if (task != ckpt.config.task) {
    throw ContractError("checkpoint was trained on " + to_string(ckpt.config.task) + ", not " + to_string(task));
  }
  return evaluate(ckpt.params, ckpt.config, num_batches, seed);
}

/// Attention weights of an RMC model on one pre-encoded sequence (T x input).
inline std::vector<AttentionTrace> attention_traces(const ModelParams& params, const TrainConfig& raw,
                                                    const Tensor& inputs) {
  const TrainConfig config = raw.resolved();
  if (config.model != ModelKind::rmc) throw ContractError("no attention to dump: model is " + to_string(config.model));
  if (inputs.cols != config.input_size()) {
    throw DimensionError("episode width " + std::to_string(inputs.cols) + " does not match model input width " +
                         std::to_string(config.input_size()));
  }
  Tape tape;
  const auto bound = params.map([&](const Tensor& t) { return tape.constant(t); });
  std::vector<Var> xs;
  for (std::size_t t = 0; t < inputs.rows; ++t) {
    xs.push_back(tape.constant(Tensor(1, inputs.cols, std::vector<double>(inputs.row(t).begin(), inputs.row(t).end()))));
  }
  std::vector<AttentionTrace> traces;
  core_outputs(tape, bound, config, xs, 1, &traces);
  return traces;
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckReport {
  double max_relative_error = 0.0;
  bool pass = false;
  std::size_t parameters = 0;
};

struct GradCheckOptions {
  ModelKind model = ModelKind::rmc;
  GateStyle gate_style = GateStyle::unit;
  std::size_t num_blocks = 1;
  bool use_output_gate = false;
  double eps = 1e-5;
  double tol = 1e-4;
  std::uint64_t seed = 7;
  std::size_t timesteps = 3;
};

/// backward() against central differences on sum(w . outputs) over a short
/// unroll, with fixed random weights w. RMC: N=2, F=8, 2 heads; LSTM: hidden 8.
inline GradCheckReport grad_check_model(const GradCheckOptions& opt) {
  constexpr std::size_t kInput = 5;
  constexpr std::size_t kMaxParams = 20000;
  Rng rng(opt.seed);
  RmcConfig rc;
  rc.mem_slots = 2;
  rc.mem_size = 8;
  rc.num_heads = 2;
  rc.num_blocks = opt.num_blocks;
  rc.gate_style = opt.gate_style;
  rc.use_output_gate = opt.use_output_gate;
  rc.input_size = kInput;
  LstmConfig lc;
  lc.hidden_size = 8;
  lc.input_size = kInput;

  RmcParams rmc_shape;
  LstmParams lstm_shape;
  ParamMap params;
  if (opt.model == ModelKind::rmc) {
    rmc_shape = init_rmc_params(rc, rng);
    params = flatten(rmc_shape);
  } else {
    lstm_shape = init_lstm_params(lc, rng);
    params = flatten(lstm_shape);
  }
  std::size_t count = 0;
  for (auto& [_, t] : params) {
    count += t.size();
    // move off the structured initial values (unit gains, zero biases)
    for (double& v : t.data) v += std::normal_distribution<double>(0.0, 0.1)(rng);
  }
  if (count > kMaxParams) throw ContractError("gradient check limited to " + std::to_string(kMaxParams) + " parameters");

  std::vector<Tensor> inputs;
  for (std::size_t t = 0; t < opt.timesteps; ++t) inputs.push_back(normal_tensor(rng, 1, kInput, 1.0));
  const std::size_t out_width = opt.model == ModelKind::rmc ? rc.total_units() : lc.hidden_size;
  std::vector<Tensor> weights;
  for (std::size_t t = 0; t < opt.timesteps; ++t) weights.push_back(normal_tensor(rng, 1, out_width, 1.0));
  const RmcState rmc0 = init_state(rc, opt.seed);
  const LstmState lstm0 = init_lstm_state(lc);

  auto build = [&](Tape& tape, const ParamMap& values, std::map<std::string, Var>* leaves) {
    auto leaf = [&](const Tensor& t) { return tape.leaf(t); };
    auto record = [&](const std::string& name, const Var& v) {
      if (leaves) leaves->emplace(name, v);
    };
    std::vector<Var> xs;
    for (const auto& x : inputs) xs.push_back(tape.constant(x));
    std::vector<Var> outs;
    if (opt.model == ModelKind::rmc) {
      RmcParams p = rmc_shape;
      unflatten(p, values);
      const auto bound = p.map(leaf);
      bound.visit("", record);
      outs = rmc_unroll(bound, rc, {tape.constant(rmc0.memory), tape.constant(rmc0.hidden)}, xs).outputs;
    } else {
      LstmParams p = lstm_shape;
      unflatten(p, values);
      const auto bound = p.map(leaf);
      bound.visit("", record);
      outs = lstm_unroll(bound, lc, {tape.constant(lstm0.hidden), tape.constant(lstm0.cell)}, xs).outputs;
    }
    Var total = sum(mul(outs[0], tape.constant(weights[0])));
    for (std::size_t t = 1; t < outs.size(); ++t) total = add(total, sum(mul(outs[t], tape.constant(weights[t]))));
    return total;
  };

  Tape tape;
  std::map<std::string, Var> leaves;
  Var loss = build(tape, params, &leaves);
  const Gradients g = backward(tape, loss);
  ParamMap analytic;
  for (const auto& [name, v] : leaves) analytic.emplace(name, g[v]);

  const ParamMap numeric = finite_diff_grad(
      [&](const ParamMap& values) {
        Tape t;
        return build(t, values, nullptr).value().data[0];
      },
      params, opt.eps);

  GradCheckReport report;
  report.parameters = count;
  report.max_relative_error = max_relative_error(analytic, numeric);
  report.pass = report.max_relative_error < opt.tol;
  return report;
}

}  // namespace relmem
