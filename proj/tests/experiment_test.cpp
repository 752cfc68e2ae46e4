// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "hyperdec/experiment.hpp"

namespace hyperdec {
namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("hyperdec_exp_" + name);
  fs::remove_all(dir);
  return dir;
}

ExperimentConfig tiny(const fs::path& out) {
  ExperimentConfig cfg;
  cfg.model.d_model = 16;
  cfg.model.n_heads = 2;
  cfg.model.d_ff = 32;
  cfg.model.enc_adapter_dim = 4;
  cfg.model.dec_adapter_dim = 4;
  cfg.model.hypernet_bottleneck = 8;
  cfg.train.total_steps = 20;
  cfg.train.warmup_steps = 5;
  cfg.train.eval_every = 10;
  cfg.train.batch_size = 8;
  cfg.train.eval_examples = 10;
  cfg.suite_scale = 0.05;
  cfg.out_dir = out;
  return cfg;
}

TEST(Config, JsonRoundTrip) {
  ExperimentConfig cfg = tiny("somewhere/else");
  cfg.model.enc_mode = AdaptationMode::task;
  cfg.model.adapter_input_post_layernorm = true;
  cfg.train.peak_lr = 1.25e-3f;
  cfg.suite_seed = 9;
  cfg.prefix = PrefixPolicy::unnamed;
  cfg.label = "x";
  const auto j = to_json(cfg);
  const ExperimentConfig back = config_from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(to_json(back), j);
  EXPECT_EQ(back.model.enc_mode, AdaptationMode::task);
  EXPECT_EQ(back.train.peak_lr, 1.25e-3f);
}

TEST(Config, ErrorsNameTheField) {
  auto field_of = [](const std::string& text) {
    try {
      config_from_json(nlohmann::json::parse(text)).validate();
    } catch (const ConfigError& e) {
      return e.field();
    }
    return std::string("<none>");
  };
  EXPECT_EQ(field_of(R"({"model": {"d_model": "wide"}})"), "model.d_model");
  EXPECT_EQ(field_of(R"({"train": {"batch_size": -1}})"), "train.batch_size");
  EXPECT_EQ(field_of(R"({"train": {"total_stpes": 10}})"), "train.total_stpes");
  EXPECT_EQ(field_of(R"({"model": {"enc_mode": "sideways"}})"), "model.enc_mode");
  EXPECT_EQ(field_of(R"({"model": {"n_heads": 5}})"), "model.n_heads");
  EXPECT_EQ(field_of(R"({"suite_scale": 0})"), "suite_scale");
  EXPECT_EQ(field_of(R"({"model": {"vocab_size": 20}})"), "model.vocab_size");
  EXPECT_EQ(field_of(R"({"seed": 1})"), "seed");
  EXPECT_EQ(field_of("{}"), "<none>");
}

TEST(Config, ModeLabels) {
  ExperimentConfig cfg;
  apply_mode(cfg, "task-generated-post_ln");
  EXPECT_EQ(cfg.model.enc_mode, AdaptationMode::task);
  EXPECT_EQ(cfg.model.dec_mode, AdaptationMode::generated);
  EXPECT_TRUE(cfg.model.adapter_input_post_layernorm);
  apply_mode(cfg, "full_finetune");
  EXPECT_TRUE(cfg.model.full_finetune);
  EXPECT_FALSE(cfg.model.adapter_input_post_layernorm);
  EXPECT_THROW(apply_mode(cfg, "manual"), ConfigError);
  EXPECT_THROW(apply_mode(cfg, "manual-generated-wide"), ConfigError);
}

TEST(Run, WritesEveryArtifactAndReplays) {
  const fs::path out = scratch("run") / "nested";
  ExperimentConfig cfg = tiny(out);
  const RunSummary a = run(cfg);
  const fs::path dir = out / cfg.label;
  for (const char* f : {"config.json", "metrics.jsonl", "loss.csv", "best.ckpt", "summary.json"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  EXPECT_FALSE(fs::exists(dir / "FAILED"));
  EXPECT_EQ(config_from_json(nlohmann::json::parse(slurp(dir / "config.json"))).label, cfg.label);
  const auto summary = nlohmann::json::parse(slurp(dir / "summary.json"));
  EXPECT_EQ(summary["test"].size(), 6u);
  EXPECT_DOUBLE_EQ(summary["test_mean"].get<double>(), a.test_mean);
  Seq2SeqModel reloaded(cfg.model, 77);
  reloaded.load(dir / "best.ckpt");
  const TaskSuite suite = build_suite(cfg.suite_seed, {cfg.prefix, cfg.suite_scale});
  EXPECT_EQ(evaluate_split(reloaded, suite, Split::test), a.test);

  const std::string metrics = slurp(dir / "metrics.jsonl"), loss = slurp(dir / "loss.csv");
  const RunSummary b = run(cfg);
  EXPECT_EQ(slurp(dir / "metrics.jsonl"), metrics);
  EXPECT_EQ(slurp(dir / "loss.csv"), loss);
  EXPECT_EQ(a.test, b.test);
  EXPECT_EQ(a.ood, b.ood);
  fs::remove_all(out.parent_path());
}

TEST(Run, DivergenceLeavesAFailedMarker) {
  const fs::path out = scratch("diverge");
  ExperimentConfig cfg = tiny(out);
  cfg.train.peak_lr = 1e30f;
  cfg.train.warmup_steps = 0;
  EXPECT_THROW(run(cfg), DivergenceError);
  EXPECT_TRUE(fs::exists(out / cfg.label / "FAILED"));
  EXPECT_FALSE(fs::exists(out / cfg.label / "summary.json"));
  fs::remove_all(out);
}

TEST(Matrix, TwelveDistinctRows) {
  const auto configs = matrix_configs(tiny("m"));
  ASSERT_EQ(configs.size(), 12u);
  std::set<std::string> labels;
  for (const auto& c : configs) labels.insert(c.label);
  EXPECT_EQ(labels.size(), 12u);
  EXPECT_TRUE(configs[0].model.full_finetune);
  EXPECT_FALSE(configs[10].model.use_mlp);
  EXPECT_TRUE(configs[11].model.adapter_input_post_layernorm);
}

TEST(Matrix, TableMatchesAccounting) {
  const fs::path out = scratch("matrix");
  ExperimentConfig base = tiny(out);
  base.train.total_steps = 4;
  base.train.warmup_steps = 1;
  base.train.eval_every = 4;
  base.train.eval_examples = 2;
  const auto rows = run_matrix(base, 2);
  ASSERT_EQ(rows.size(), 12u);
  const ModelConfig& m = base.model;
  const CountInputs in{m.n_enc_layers, m.d_model, m.enc_adapter_dim, m.n_tasks,
                       m.hypernet_bottleneck, m.task_embed_dim, m.layer_embed_dim};
  Count base_count = 0;
  for (const auto& r : rows) {
    if (r.label == "full_finetune") {
      EXPECT_DOUBLE_EQ(r.trainable_percent, 100.0);
      base_count = r.base;
    }
  }
  ASSERT_GT(base_count, 0u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.base, base_count);
    Count expected = 0;
    if (r.label == "manual-manual") expected = 2 * count_adapters(in.l, in.a, in.d);
    if (r.label == "task-task") expected = count_task_hypernet(in);
    if (r.label == "manual-generated") expected = count_hyperdecoder(in);
    if (expected) {
      EXPECT_EQ(r.trainable, expected) << r.label;
      EXPECT_DOUBLE_EQ(r.trainable_percent, trainable_fraction(expected, base_count));
    }
  }
  std::istringstream csv(slurp(out / "table.csv"));
  std::string line;
  std::size_t n = 0;
  while (std::getline(csv, line)) ++n;
  EXPECT_EQ(n, 13u);
  EXPECT_NE(slurp(out / "table.txt").find("manual-generated-no_mlp"), std::string::npos);
  fs::remove_all(out);
}

int cli(const std::string& args) {
  const int status = std::system((std::string(HYPERDEC_CLI) + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Cli, ExitCodes) {
  const fs::path out = scratch("cli");
  fs::create_directories(out);
  std::ofstream(out / "bad.json") << R"({"model": {"d_model": 7, "n_heads": 2}})";
  std::ofstream(out / "broken.json") << "{ not json";
  ExperimentConfig div = tiny(out);
  div.train.peak_lr = 1e30f;
  div.train.warmup_steps = 0;
  std::ofstream(out / "diverge.json") << to_json(div).dump();
  std::ofstream(out / "ok.json") << to_json(tiny(out)).dump();
  EXPECT_EQ(cli("--config " + (out / "bad.json").string()), 2);
  EXPECT_EQ(cli("--config " + (out / "broken.json").string()), 2);
  EXPECT_EQ(cli("--mode sideways-manual"), 2);
  EXPECT_EQ(cli("--config " + (out / "diverge.json").string()), 3);
  EXPECT_EQ(cli("--config " + (out / "ok.json").string() + " --account"), 0);
  EXPECT_EQ(cli("--config " + (out / "ok.json").string() + " --steps 5 --seed 3 --mode task-generated"), 0);
  const auto cfg = config_from_json(nlohmann::json::parse(slurp(out / "task-generated" / "config.json")));
  EXPECT_EQ(cfg.train.total_steps, 5u);
  EXPECT_EQ(cfg.model_seed, 3u);
  EXPECT_EQ(cfg.model.enc_mode, AdaptationMode::task);
  EXPECT_TRUE(fs::exists(out / "account.csv"));
  fs::remove_all(out);
}

}  // namespace
}  // namespace hyperdec
