// relmem: train, evaluate and inspect relational memory models.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "relmem/io.hpp"

namespace fs = std::filesystem;
using namespace relmem;

namespace {

constexpr int kUsageError = 2;
constexpr int kRuntimeError = 1;

struct RunOutputs {
  std::string metrics;
  std::string checkpoint;
  std::string resolved;
};

RunOutputs run_training(const TrainConfig& config) {
  Trainer trainer(config);
  trainer.run();
  return {metrics_csv(trainer.history()), dump(checkpoint_to_json(trainer.checkpoint())),
          dump(config_to_json(trainer.config()))};
}

void write_run(const fs::path& dir, const RunOutputs& out) {
  fs::create_directories(dir);
  write_text_file((dir / "metrics.csv").string(), out.metrics);
  write_text_file((dir / "checkpoint.json").string(), out.checkpoint);
  write_text_file((dir / "resolved-config.json").string(), out.resolved);
}

TrainConfig load_config(const std::string& path, std::optional<std::uint64_t> seed) {
  json j = read_json_file(path);
  if (seed && j.is_object()) j["seed"] = *seed;
  return config_from_json(j);
}

int cmd_train(const std::string& config_path, const std::string& out_dir, std::optional<std::uint64_t> seed) {
  const TrainConfig config = load_config(config_path, seed);
  write_run(out_dir, run_training(config));
  std::cout << "wrote " << out_dir << "/{metrics.csv,checkpoint.json,resolved-config.json}\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint_path, std::size_t batches, std::uint64_t seed,
             const std::optional<std::string>& task) {
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  const TaskKind kind = task ? parse_task(*task) : ckpt.config.task;
  const double acc = evaluate(ckpt, kind, batches, seed);
  std::cout << "accuracy=" << json(acc).dump() << "\n";
  return 0;
}

int cmd_gen(const std::string& task, std::size_t count, std::uint64_t seed, const std::string& out_path,
            const DatasetOptions& opt) {
  const TaskKind kind = parse_task(task);
  if (kind == TaskKind::nth_farthest && opt.seq_len < 2) throw ContractError("--seq-len must be >= 2");
  if (kind != TaskKind::nth_farthest && (opt.vocab < 2 || opt.length < 1)) {
    throw ContractError("--vocab must be >= 2 and --length >= 1");
  }
  write_text_file(out_path, generate_dataset(kind, count, seed, opt));
  return 0;
}

std::string read_line(const std::string& path, std::size_t index) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path);
  std::string line;
  for (std::size_t i = 0; std::getline(in, line); ++i) {
    if (i == index) return line;
  }
  throw FormatError(path + " has no line " + std::to_string(index));
}

int cmd_dump_attention(const std::string& checkpoint_path, const std::string& episode_path, const std::string& out_path,
                       std::size_t index) {
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  const TrainConfig& config = ckpt.config;
  if (config.model != ModelKind::rmc) {
    std::cerr << "error: no attention to dump (checkpoint model is " << to_string(config.model) << ")\n";
    return kRuntimeError;
  }
  json line;
  try {
    line = json::parse(read_line(episode_path, index));
  } catch (const json::parse_error& e) {
    throw FormatError(episode_path + ": " + e.what());
  }
  json meta;
  Tensor inputs;
  if (config.task == TaskKind::nth_farthest) {
    const NthFarthestEpisode ep = episode_from_json(line);
    if (ep.vectors.size() != config.seq_len || ep.vectors.empty() || ep.vectors[0].size() != config.dim) {
      throw ContractError("episode does not match the checkpoint's task (dim " + std::to_string(config.dim) +
                          ", seq_len " + std::to_string(config.seq_len) + ")");
    }
    inputs = encode_nth_farthest(ep).inputs;
    meta = episode_to_json(ep);
  } else {
    const SeqSample s = sample_from_json(line);
    if (s.kind != config.task || s.input_tokens.size() != config.length) {
      throw ContractError("sample does not match the checkpoint's task (" + to_string(config.task) + ", length " +
                          std::to_string(config.length) + ")");
    }
    inputs = encode_memorization(s, config.vocab).inputs;
    meta = sample_to_json(s);
  }
  const auto traces = attention_traces(ckpt.params, config, inputs);
  const std::size_t n = config.rmc.mem_slots;
  const json out = {
      {"model", "rmc"},
      {"task", to_string(config.task)},
      {"episode", meta},
      {"shape", {traces.size(), config.rmc.num_blocks, config.rmc.num_heads, n, n + 1}},
      {"weights", traces_to_json(traces)},
  };
  write_text_file(out_path, dump(out));
  return 0;
}

int cmd_gradcheck(const std::string& model, const std::string& gate_style, std::size_t blocks, double eps, double tol) {
  GradCheckOptions opt;
  if (model == "rmc") {
    opt.model = ModelKind::rmc;
  } else if (model == "lstm") {
    opt.model = ModelKind::lstm;
  } else {
    throw ContractError("--model must be rmc or lstm");
  }
  opt.gate_style = parse_gate_style(gate_style);
  opt.num_blocks = blocks;
  opt.eps = eps;
  opt.tol = tol;
  const auto report = grad_check_model(opt);
  std::cout << "parameters=" << report.parameters << "\n"
            << "max_relative_error=" << json(report.max_relative_error).dump() << "\n"
            << (report.pass ? "PASS" : "FAIL") << " (tol " << json(tol).dump() << ")\n";
  return report.pass ? 0 : kRuntimeError;
}

/// {"base": {...}, "grid": {"lr": [...], "rmc.mem_slots": [...]}} -> one run per grid point.
int cmd_sweep(const std::string& sweep_path, const std::string& out_dir) {
  const json sweep_file = read_json_file(sweep_path);
  if (!sweep_file.is_object() || !sweep_file.contains("base") || !sweep_file.contains("grid") || !sweep_file["grid"].is_object()) {
    throw FormatError("sweep file needs a \"base\" config and a \"grid\" object");
  }
  std::vector<std::pair<std::string, json>> axes;
  for (auto it = sweep_file["grid"].begin(); it != sweep_file["grid"].end(); ++it) {
    if (!it->is_array() || it->empty()) throw ConfigError("grid." + it.key(), "expected a non-empty list");
    axes.emplace_back(it.key(), *it);
  }
  // cartesian product, last axis fastest
  std::vector<json> points{sweep_file["base"]};
  std::vector<json> labels{json::object()};
  for (const auto& [path, values] : axes) {
    std::vector<json> next_points, next_labels;
    for (std::size_t p = 0; p < points.size(); ++p) {
      for (const auto& v : values) {
        json cfg = points[p];
        std::string pointer = "/" + path;
        std::replace(pointer.begin(), pointer.end(), '.', '/');
        cfg[json::json_pointer(pointer)] = v;
        json label = labels[p];
        label[path] = v;
        next_points.push_back(std::move(cfg));
        next_labels.push_back(std::move(label));
      }
    }
    points = std::move(next_points);
    labels = std::move(next_labels);
  }
  std::vector<TrainConfig> configs;
  for (const auto& p : points) configs.push_back(config_from_json(p));  // validate all before any output

  json index = json::array();
  for (std::size_t i = 0; i < configs.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "point_%03zu", i);
    write_run(fs::path(out_dir) / name, run_training(configs[i]));
    index.push_back({{"dir", name}, {"values", labels[i]}});
    std::cout << name << " " << labels[i].dump() << "\n";
  }
  write_text_file((fs::path(out_dir) / "sweep.json").string(), dump(index));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Relational memory core: training, evaluation and analysis"};
  app.require_subcommand(1);

  std::string config_path, out_dir, checkpoint_path, episode_path, task, out_path;
  std::uint64_t seed = 1;
  std::size_t batches = 100, count = 1, index = 0, blocks = 1;
  double eps = 1e-5, tol = 1e-4;
  std::string model = "rmc", gate_style = "unit";
  DatasetOptions data;

  auto* train = app.add_subcommand("train", "Train a model from a JSON config");
  train->add_option("--config", config_path, "Training config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out_dir, "Output directory")->required();
  auto* train_seed = train->add_option("--seed", seed, "Override the config seed");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on fresh batches");
  eval->add_option("--checkpoint", checkpoint_path, "Checkpoint (JSON)")->required();
  eval->add_option("--batches", batches, "Number of batches")->check(CLI::PositiveNumber);
  eval->add_option("--seed", seed, "Evaluation data seed");
  auto* eval_task = eval->add_option("--task", task, "Expected task; must match the checkpoint");

  auto* gen = app.add_subcommand("gen", "Write a JSONL dataset");
  gen->add_option("--task", task, "nth-farthest, copy, reverse or double")->required();
  gen->add_option("--count", count, "Number of lines");
  gen->add_option("--seed", seed, "Generator seed");
  gen->add_option("--out", out_path, "Output JSONL path")->required();
  gen->add_option("--dim", data.dim, "Vector dimension (nth-farthest)");
  gen->add_option("--seq-len", data.seq_len, "Sequence length (nth-farthest)");
  gen->add_option("--vocab", data.vocab, "Vocabulary size (memorization)");
  gen->add_option("--length", data.length, "Input length (memorization)");

  auto* dump_cmd = app.add_subcommand("dump-attention", "Write per-step attention weights of an RMC checkpoint");
  dump_cmd->add_option("--checkpoint", checkpoint_path, "RMC checkpoint")->required();
  dump_cmd->add_option("--episode", episode_path, "JSONL file holding the episode")->required();
  dump_cmd->add_option("--index", index, "Line of the episode file to use");
  dump_cmd->add_option("--out", out_path, "Output JSON path")->required();

  auto* grad = app.add_subcommand("gradcheck", "Compare backprop with finite differences");
  grad->add_option("--model", model, "rmc or lstm");
  grad->add_option("--gate-style", gate_style, "unit or memory")->check(CLI::IsMember({"unit", "memory"}));
  grad->add_option("--blocks", blocks, "Attention blocks (rmc)")->check(CLI::PositiveNumber);
  grad->add_option("--eps", eps, "Finite-difference step");
  grad->add_option("--tol", tol, "Maximum relative error");

  auto* sweep = app.add_subcommand("sweep", "Train every point of a config grid");
  sweep->add_option("--config", config_path, "Sweep file with base config and grid")->required()->check(CLI::ExistingFile);
  sweep->add_option("--out", out_dir, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      return cmd_train(config_path, out_dir, *train_seed ? std::optional<std::uint64_t>(seed) : std::nullopt);
    }
    if (eval->parsed()) {
      return cmd_eval(checkpoint_path, batches, seed, *eval_task ? std::optional<std::string>(task) : std::nullopt);
    }
    if (gen->parsed()) return cmd_gen(task, count, seed, out_path, data);
    if (dump_cmd->parsed()) return cmd_dump_attention(checkpoint_path, episode_path, out_path, index);
    if (grad->parsed()) return cmd_gradcheck(model, gate_style, blocks, eps, tol);
    if (sweep->parsed()) return cmd_sweep(config_path, out_dir);
  } catch (const ConfigError& e) {
    std::cerr << "invalid config: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kUsageError;
}
