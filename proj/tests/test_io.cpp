#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "relmem/io.hpp"

using namespace relmem;
namespace fs = std::filesystem;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.rmc.mem_slots = 2;
  c.rmc.mem_size = 8;
  c.head.hidden_layers = 1;
  c.head.hidden_units = 8;
  c.batch = 4;
  c.steps = 3;
  c.eval_every = 1;
  c.log_wall_time = false;
  return c;
}

fs::path temp_file(const std::string& name) { return fs::temp_directory_path() / ("relmem_io_" + name); }

std::string field_of(const json& j) {
  try {
    config_from_json(j);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "<valid>";
}

bool bitwise_equal(const ParamMap& a, const ParamMap& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [k, t] : a) {
    const auto it = b.find(k);
    if (it == b.end() || it->second.rows != t.rows || it->second.cols != t.cols) return false;
    if (std::memcmp(t.data.data(), it->second.data.data(), t.data.size() * sizeof(double)) != 0) return false;
  }
  return true;
}

}  // namespace

TEST(ConfigJson, RoundTripKeepsEveryField) {
  TrainConfig c = small_config();
  c.model = ModelKind::lstm;
  c.task = TaskKind::reverse;
  c.rmc.gate_style = GateStyle::memory;
  c.rmc.use_output_gate = true;
  c.rmc.init_mode = InitMode::random_normal;
  c.lstm.forget_bias = 0.25;
  c.lr = 3.5e-4;
  c.seed = 123456789012345ULL;
  const json j = config_to_json(c);
  EXPECT_EQ(config_to_json(config_from_json(j)), j);
  EXPECT_EQ(config_from_json(j).seed, c.seed);
}

TEST(ConfigJson, OmittedFieldsKeepDefaults) {
  const TrainConfig c = config_from_json(json::object());
  EXPECT_EQ(config_to_json(c), config_to_json(TrainConfig{}));
}

TEST(ConfigJson, ErrorsNameTheField) {
  EXPECT_EQ(field_of({{"lr", -1e-3}}), "lr");
  EXPECT_EQ(field_of({{"lr", "fast"}}), "lr");
  EXPECT_EQ(field_of({{"batch", -4}}), "batch");
  EXPECT_EQ(field_of({{"batch", 0}}), "batch");
  EXPECT_EQ(field_of({{"model", "gru"}}), "model");
  EXPECT_EQ(field_of({{"task", "sort"}}), "task");
  EXPECT_EQ(field_of({{"rmc", {{"num_heads", 3}}}}), "rmc.num_heads");
  EXPECT_EQ(field_of({{"rmc", {{"gate_style", "row"}}}}), "rmc.gate_style");
  EXPECT_EQ(field_of({{"rmc", {{"slots", 4}}}}), "rmc.slots");
  EXPECT_EQ(field_of({{"learning_rate", 0.1}}), "learning_rate");
  EXPECT_EQ(field_of({{"head", {{"hidden_units", 0}}}}), "head.hidden_units");
  EXPECT_EQ(field_of(json::array()), "config");
  EXPECT_EQ(field_of({{"lr", 1e-3}, {"rmc", {{"gate_style", "memory"}}}}), "<valid>");
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  Trainer t(small_config());
  t.run();
  const fs::path a = temp_file("a.json"), b = temp_file("b.json");
  save_checkpoint(t.checkpoint(), a.string());
  const Checkpoint loaded = load_checkpoint(a.string());
  save_checkpoint(loaded, b.string());
  std::ifstream fa(a), fb(b);
  const std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
  EXPECT_FALSE(sa.empty());
  EXPECT_EQ(sa, sb);
  fs::remove(a);
  fs::remove(b);
}

TEST(Checkpoint, ParametersAndOptimizerRoundTripBitwise) {
  for (ModelKind model : {ModelKind::rmc, ModelKind::lstm}) {
    TrainConfig c = small_config();
    c.model = model;
    Trainer t(c);
    t.run();
    const Checkpoint original = t.checkpoint();
    const Checkpoint back = checkpoint_from_json(json::parse(checkpoint_to_json(original).dump()));
    EXPECT_TRUE(bitwise_equal(flatten(back.params), flatten(original.params)));
    EXPECT_TRUE(bitwise_equal(back.optimizer.m, original.optimizer.m));
    EXPECT_TRUE(bitwise_equal(back.optimizer.v, original.optimizer.v));
    EXPECT_EQ(back.optimizer.step, original.optimizer.step);
    EXPECT_EQ(back.rng_state, original.rng_state);
    EXPECT_EQ(back.step, 3u);
    EXPECT_EQ(back.best_batch_accuracy, original.best_batch_accuracy);
    EXPECT_EQ(config_to_json(back.config), config_to_json(original.config));
  }
}

TEST(Checkpoint, ResumedTrainingContinuesIdentically) {
  TrainConfig c = small_config();
  c.steps = 4;
  Trainer straight(c);
  straight.run();
  TrainConfig part = c;
  part.steps = 2;
  Trainer first(part);
  first.run();
  json j = checkpoint_to_json(first.checkpoint());
  j["config"]["steps"] = 4;
  Trainer resumed(checkpoint_from_json(json::parse(j.dump())));
  resumed.run();
  EXPECT_TRUE(bitwise_equal(flatten(resumed.params()), flatten(straight.params())));
}

TEST(Checkpoint, RejectsUnknownFormatVersion) {
  json j = checkpoint_to_json(Trainer(small_config()).checkpoint());
  j["format_version"] = 2;
  EXPECT_THROW(checkpoint_from_json(j), FormatError);
  try {
    checkpoint_from_json(j);
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("format_version 2"), std::string::npos);
  }
}

TEST(Checkpoint, RejectsMalformedContent) {
  const json good = checkpoint_to_json(Trainer(small_config()).checkpoint());
  json missing = good;
  missing.erase("optimizer");
  EXPECT_THROW(checkpoint_from_json(missing), FormatError);
  json wrong_shape = good;
  wrong_shape["params"]["head.0.bias"]["shape"] = {1, 3};
  wrong_shape["params"]["head.0.bias"]["values"] = {0.0, 0.0, 0.0};
  EXPECT_THROW(checkpoint_from_json(wrong_shape), FormatError);
  json bad_config = good;
  bad_config["config"]["lr"] = 0;
  EXPECT_THROW(checkpoint_from_json(bad_config), FormatError);
  EXPECT_THROW(load_checkpoint(temp_file("does_not_exist.json").string()), FormatError);
}

TEST(Dataset, LinesRoundTripAndMatchOracles) {
  DatasetOptions opt;
  const std::string nf = generate_dataset(TaskKind::nth_farthest, 50, 7, opt);
  std::istringstream in(nf);
  std::string line;
  std::size_t count = 0;
  while (std::getline(in, line)) {
    const auto ep = episode_from_json(json::parse(line));
    EXPECT_EQ(ep.target, nth_farthest_oracle(ep.vectors, ep.labels, ep.n, ep.m));
    EXPECT_EQ(episode_to_json(ep).dump(), line);
    ++count;
  }
  EXPECT_EQ(count, 50u);
  EXPECT_EQ(generate_dataset(TaskKind::nth_farthest, 50, 7, opt), nf);
  EXPECT_NE(generate_dataset(TaskKind::nth_farthest, 50, 8, opt), nf);

  std::istringstream mem(generate_dataset(TaskKind::double_, 20, 7, opt));
  while (std::getline(mem, line)) {
    const auto s = sample_from_json(json::parse(line));
    EXPECT_EQ(s.kind, TaskKind::double_);
    EXPECT_EQ(s.target_tokens, memorization_oracle(s.kind, s.input_tokens));
  }
}

TEST(Dataset, MalformedLinesAreFormatErrors) {
  EXPECT_THROW(episode_from_json(json{{"vectors", 3}}), FormatError);
  EXPECT_THROW(sample_from_json(json{{"task", "sort"}, {"input", {1}}, {"target", {1}}}), FormatError);
}

TEST(Traces, JsonNestingIsStepBlockHeadRow) {
  TrainConfig c = small_config();
  c.rmc.num_blocks = 2;
  c = c.resolved();
  Rng rng(4);
  const auto traces =
      attention_traces(init_model(c), c, encode_nth_farthest(gen_nth_farthest(rng, c.dim, c.seq_len)).inputs);
  const json j = traces_to_json(traces);
  ASSERT_EQ(j.size(), c.seq_len);
  for (const auto& step : j) {
    ASSERT_EQ(step.size(), 2u);
    for (const auto& block : step) {
      ASSERT_EQ(block.size(), c.rmc.num_heads);
      for (const auto& head : block) {
        ASSERT_EQ(head.size(), 2u);
        for (const auto& row : head) {
          ASSERT_EQ(row.size(), 3u);
          double s = 0;
          for (const auto& w : row) s += w.get<double>();
          EXPECT_NEAR(s, 1.0, 1e-9);
        }
      }
    }
  }
}
