// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "hyperdec/accounting.hpp"
#include "hyperdec/analysis.hpp"
#include "hyperdec/tasks.hpp"
#include "hyperdec/trainer.hpp"

namespace hyperdec {

struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  std::uint64_t suite_seed = 0;
  /// Seeds model initialisation; the training stream uses train.seed.
  std::uint64_t model_seed = 0;
  double suite_scale = 1.0;
  PrefixPolicy prefix = PrefixPolicy::named;
  std::filesystem::path out_dir = "runs";
  std::string label = "manual-generated";

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
/// Missing keys keep their defaults; unknown keys and wrong types throw
/// ConfigError with the dotted field name.
ExperimentConfig config_from_json(const nlohmann::json& j, ExperimentConfig base = {});
ExperimentConfig load_config(const std::filesystem::path& path);

/// Applies a mode label: "<enc>-<dec>" over none/manual/task/generated,
/// optionally suffixed "-no_mlp" or "-post_ln", or "full_finetune".
void apply_mode(ExperimentConfig& cfg, const std::string& label);

struct RunSummary {
  std::string label;
  std::filesystem::path dir;
  std::size_t best_step = 0;
  double best_dev_mean = 0.0;
  std::vector<std::string> tasks;
  std::vector<double> test, ood;
  double test_mean = 0.0;
  double ood_mean = 0.0;
  Count trainable = 0;
  Count base = 0;
  double trainable_percent = 0.0;
};

nlohmann::json to_json(const RunSummary& s);

/// Score of every task on a split; task-conditioned sides use the mean task
/// embedding on the ood split.
std::vector<double> evaluate_split(Seq2SeqModel& model, const TaskSuite& suite, Split split);

/// Trains one configuration into out_dir/label and scores the best state on
/// the test and ood splits. The directory receives config.json,
/// metrics.jsonl, loss.csv, best.ckpt and summary.json. A failed run leaves a
/// FAILED file with the error and rethrows.
RunSummary run(const ExperimentConfig& cfg);
/// As run(), keeping the trained model (holding its best state) for analysis.
RunSummary run(const ExperimentConfig& cfg, Seq2SeqModel& model_out);

/// Full finetuning, every encoder/decoder pairing of manual, task and
/// generated, and the no-MLP and post-layernorm Manual-Generated variants.
std::vector<ExperimentConfig> matrix_configs(const ExperimentConfig& base);
/// Runs every matrix row (parallel > 1 runs rows concurrently) and writes
/// table.txt and table.csv into base.out_dir. Throws naming the failing row.
std::vector<RunSummary> run_matrix(const ExperimentConfig& base, std::size_t parallel = 1);
std::string matrix_table_text(const std::vector<RunSummary>& rows);
std::string matrix_table_csv(const std::vector<RunSummary>& rows);

struct EmbeddingAnalysis {
  PermutationTest by_label;
  std::vector<double> explained;
};

/// Writes embeddings_{dev,train}.csv, projection_dev.csv and analysis.json
/// into dir. The silhouette uses the classification tasks' dev records.
EmbeddingAnalysis analyse_embeddings(const Seq2SeqModel& model, const TaskSuite& suite,
                                     const std::filesystem::path& dir, std::uint64_t seed);

}  // namespace hyperdec
