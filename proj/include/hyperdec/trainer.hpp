// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hyperdec/model.hpp"
#include "hyperdec/random.hpp"
#include "hyperdec/tasks.hpp"

namespace hyperdec {

struct TrainConfig {
  float peak_lr = 3e-4f;
  std::size_t warmup_steps = 100;
  std::size_t total_steps = 2000;
  std::size_t batch_size = 32;
  std::size_t eval_every = 500;
  float weight_decay = 0.0f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  std::uint64_t seed = 0;
  /// Dev examples per task at each evaluation; 0 uses the whole split.
  std::size_t eval_examples = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Linear 0 -> peak over [0, warmup], then peak -> 0 over [warmup, total].
float lr_at(std::size_t step, const TrainConfig& cfg);

struct ParamPartition {
  std::vector<NamedParam> trainable, frozen;
};

ParamPartition partition(const Seq2SeqModel& model);

/// Decoupled-weight-decay Adam over a fixed set of tensors; moments persist
/// across steps.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, const TrainConfig& cfg);

  /// One update at the given learning rate. Every tensor must hold a
  /// gradient; throws TapeError naming the first that does not.
  void step(float lr);
  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> m_, v_;
  TrainConfig cfg_;
  std::size_t t_ = 0;
};

/// Draws task i with probability sizes[i] / sum(sizes).
std::size_t proportional_sample(std::span<const std::size_t> sizes, Rng& rng);
std::size_t proportional_sample(const TaskSuite& suite, Rng& rng);

/// Padded seq2seq batch with teacher-forcing inputs.
Seq2SeqBatch make_batch(const std::vector<const Example*>& examples);

/// Greedy-decoding metric of every task on a split, in task order.
std::vector<double> evaluate(const Seq2SeqModel& model, const TaskSuite& suite, Split split,
                             std::size_t max_examples = 0);
/// Greedy predictions for a list of examples, batched.
std::vector<std::vector<TokenId>> predict(const Seq2SeqModel& model, const std::vector<Example>& examples);

std::string metric_name(TaskKind kind);

struct EvalRecord {
  std::size_t step;
  std::string task;
  std::string metric_name;
  double value;
};

struct LossRecord {
  std::size_t step;
  std::string task;
  double loss;
};

struct TrainResult {
  std::vector<LossRecord> losses;
  std::vector<EvalRecord> evals;
  std::size_t best_step = 0;
  double best_dev_mean = 0.0;
  /// Parameter values at the best evaluation.
  NamedTensors best_state;
};

/// Where train() streams its logs; empty paths are skipped.
struct TrainOutputs {
  std::filesystem::path metrics_jsonl;
  std::filesystem::path loss_csv;
  std::filesystem::path best_checkpoint;
};

/// Multi-task training with one proportionally sampled task per batch.
/// Evaluates on every task's dev split at step 0, every eval_every steps and
/// at the end, keeping the state with the best unweighted mean dev metric.
/// The model is left holding the final (not the best) state. Throws
/// DivergenceError on a non-finite loss.
TrainResult train(Seq2SeqModel& model, const TaskSuite& suite, const TrainConfig& cfg,
                  const TrainOutputs& outputs = {});

}  // namespace hyperdec
