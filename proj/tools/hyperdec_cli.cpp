// SPDX-License-Identifier: Apache-2.0
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "hyperdec/experiment.hpp"

namespace {

constexpr int kConfigExit = 2;
constexpr int kDivergenceExit = 3;
constexpr int kInternalExit = 4;

using namespace hyperdec;

void write_probe(Seq2SeqModel& model, const TaskSuite& suite, const std::filesystem::path& dir,
                 std::uint64_t seed) {
  ProbeConfig pc;
  pc.seed = seed;
  const ProbeResult probe = encoder_probe(model, suite, pc);
  const auto full = evaluate_split(model, suite, Split::dev);
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < probe.tasks.size(); ++i) {
    j[probe.tasks[i]] = {{"probe", probe.accuracy[i]}, {"full", full[suite.task_index(probe.tasks[i])]}};
  }
  std::ofstream(dir / "probe.json") << j.dump(2) << '\n';
  std::cout << j.dump(2) << '\n';
}

int run_cli(int argc, char** argv) {
  CLI::App app{"Hyperdecoder experiments on the synthetic task suite"};
  std::string config_path, mode, out, checkpoint;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::optional<Count> base_params;
  bool matrix = false, account = false, export_embeddings = false, probe = false;
  std::size_t parallel = 1;
  app.add_option("--config", config_path, "JSON experiment config")->check(CLI::ExistingFile);
  app.add_option("--mode", mode, "enc-dec mode label, e.g. manual-generated or full_finetune");
  app.add_option("--seed", seed, "model and training seed");
  app.add_option("--steps", steps, "total training steps");
  app.add_option("--out", out, "output directory");
  app.add_flag("--matrix", matrix, "run the full ablation matrix");
  app.add_flag("--account", account, "print the parameter accounting table");
  app.add_option("--base-params", base_params, "base parameter count for --account (default: instantiate)");
  app.add_flag("--export-embeddings", export_embeddings, "dump pooled embeddings and clustering statistics");
  app.add_flag("--probe", probe, "train linear probes on the frozen encoder");
  app.add_option("--checkpoint", checkpoint, "analyse this checkpoint instead of training")->check(CLI::ExistingFile);
  app.add_option("--parallel", parallel, "matrix rows run concurrently")->check(CLI::PositiveNumber);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kConfigExit;
  }

  ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
  if (!mode.empty()) apply_mode(cfg, mode);
  if (seed) {
    cfg.model_seed = *seed;
    cfg.train.seed = *seed;
  }
  if (steps) {
    cfg.train.total_steps = *steps;
    cfg.train.warmup_steps = std::min(cfg.train.warmup_steps, *steps);
  }
  if (!out.empty()) cfg.out_dir = out;
  cfg.validate();

  if (account) {
    const CountInputs in{cfg.model.n_enc_layers,   cfg.model.d_model,         cfg.model.enc_adapter_dim,
                         cfg.model.n_tasks,        cfg.model.hypernet_bottleneck, cfg.model.task_embed_dim,
                         cfg.model.layer_embed_dim};
    const Count base = base_params ? *base_params : count_base(Seq2SeqModel(cfg.model, cfg.model_seed));
    const auto rows = account_table(in, base);
    std::cout << format_text(rows) << '\n' << format_csv(rows);
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream(cfg.out_dir / "account.csv") << format_csv(rows);
    return 0;
  }

  if (matrix) {
    const auto rows = run_matrix(cfg, parallel);
    std::cout << matrix_table_text(rows);
    return 0;
  }

  Seq2SeqModel model(cfg.model, cfg.model_seed);
  std::filesystem::path dir = cfg.out_dir / cfg.label;
  if (checkpoint.empty()) {
    const RunSummary s = run(cfg, model);
    std::cout << to_json(s).dump(2) << '\n';
  } else {
    model.load(checkpoint);
    std::filesystem::create_directories(dir);
  }
  if (export_embeddings || probe) {
    const TaskSuite suite = build_suite(cfg.suite_seed, {cfg.prefix, cfg.suite_scale});
    if (export_embeddings) {
      const EmbeddingAnalysis a = analyse_embeddings(model, suite, dir, cfg.train.seed);
      std::cout << "silhouette " << a.by_label.observed << " permuted " << a.by_label.mean << " +- " << a.by_label.sd
                << '\n';
    }
    if (probe) write_probe(model, suite, dir, cfg.train.seed);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const hyperdec::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigExit;
  } catch (const hyperdec::DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << '\n';
    return kDivergenceExit;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kInternalExit;
  }
}
