// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "hyperdec/model.hpp"
#include "hyperdec/tasks.hpp"
#include "hyperdec/trainer.hpp"

namespace hyperdec {

struct EmbeddingRecord {
  std::string task;
  std::size_t example_id = 0;
  /// Gold class digit, or "-" for transduction tasks.
  std::string label;
  std::string prediction;
  std::vector<float> e;
};

/// Pooled decoder-conditioning embedding and greedy prediction for every
/// example of a split (at most max_per_task per task when nonzero). Throws
/// UnsupportedModeError unless the decoder side is generated.
std::vector<EmbeddingRecord> export_embeddings(const Seq2SeqModel& model, const TaskSuite& suite, Split split,
                                               std::size_t max_per_task = 0);

/// Header "task,example_id,label,prediction,e_0,...,e_{d-1}".
void write_embeddings_csv(std::ostream& out, const std::vector<EmbeddingRecord>& records);
std::vector<EmbeddingRecord> read_embeddings_csv(std::istream& in);

struct Projection {
  /// [records x k], mean-centred.
  std::vector<std::vector<double>> coords;
  /// Share of total variance per component, descending.
  std::vector<double> explained;
};

/// Top-k principal components. Each component's sign is fixed so that its
/// largest-magnitude loading is positive.
Projection pca_project(const std::vector<std::vector<double>>& points, std::size_t k);
Projection pca_project(const std::vector<EmbeddingRecord>& records, std::size_t k);
/// Embedding CSV columns followed by pc_0..pc_{k-1}.
void write_projection_csv(std::ostream& out, const std::vector<EmbeddingRecord>& records, const Projection& p);

/// Mean silhouette with Euclidean distance. Needs at least two groups and
/// two members per group; throws std::invalid_argument otherwise.
double silhouette(const std::vector<std::vector<double>>& points, const std::vector<std::string>& groups);

enum class GroupKey { predicted_label, task };
double label_separation(const std::vector<EmbeddingRecord>& records, GroupKey key);

struct PermutationTest {
  double observed = 0.0;
  double mean = 0.0;
  double sd = 0.0;
  /// (observed - mean) / sd.
  double z() const { return sd > 0.0 ? (observed - mean) / sd : 0.0; }
};

/// Silhouette under the true grouping against shuffled groupings.
PermutationTest permutation_test(const std::vector<EmbeddingRecord>& records, GroupKey key,
                                 std::size_t permutations, std::uint64_t seed);

struct ProbeConfig {
  float lr = 2e-5f;
  std::size_t epochs = 3;
  std::size_t batch_size = 32;
  /// Warmup steps as a share of the probe's total steps.
  double warmup_fraction = 0.1;
  std::uint64_t seed = 0;
};

struct ProbeTask {
  std::string name;
  std::size_t classes = 0;
  std::vector<std::vector<float>> train_x, dev_x;
  std::vector<int> train_y, dev_y;
};

/// Fresh pooling MLP shared across tasks plus one linear softmax head per
/// task, trained jointly on fixed features. Returns dev accuracy per task.
std::vector<double> train_probe(const std::vector<ProbeTask>& tasks, std::size_t d, const ProbeConfig& cfg);

/// Masked mean of the adapter-augmented encoder output, one row per example.
std::vector<std::vector<float>> encoder_features(const Seq2SeqModel& model, const std::vector<Example>& examples);

struct ProbeResult {
  std::vector<std::string> tasks;
  std::vector<double> accuracy;
};

/// Probes on the frozen encoder for the named tasks (every classification
/// task when empty). Throws std::invalid_argument for a transduction task.
ProbeResult encoder_probe(const Seq2SeqModel& model, const TaskSuite& suite, const ProbeConfig& cfg,
                          const std::vector<std::string>& task_names = {});

}  // namespace hyperdec
