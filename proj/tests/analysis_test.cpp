// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <sstream>

#include "hyperdec/analysis.hpp"

namespace hyperdec {
namespace {

ModelConfig small_model(AdaptationMode enc, AdaptationMode dec) {
  ModelConfig cfg;
  cfg.vocab_size = kSuiteVocab;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.enc_adapter_dim = 4;
  cfg.dec_adapter_dim = 4;
  cfg.enc_mode = enc;
  cfg.dec_mode = dec;
  return cfg;
}

const TaskSuite& small_suite() {
  static const TaskSuite s = build_suite(0, {PrefixPolicy::named, 0.05});
  return s;
}

TEST(Export, OneRecordPerExample) {
  Seq2SeqModel model(small_model(AdaptationMode::manual, AdaptationMode::generated), 0);
  const auto records = export_embeddings(model, small_suite(), Split::dev);
  std::size_t expected = 0;
  for (const auto& d : small_suite().data) expected += d.dev.size();
  ASSERT_EQ(records.size(), expected);
  for (const auto& r : records) {
    EXPECT_EQ(r.e.size(), 16u);
    const bool classification = small_suite().specs[small_suite().task_index(r.task)].kind == TaskKind::classification;
    EXPECT_EQ(r.label == "-", !classification);
  }
  EXPECT_EQ(export_embeddings(model, small_suite(), Split::dev, 3).size(), 3 * small_suite().size());
}

TEST(Export, IdenticalInputsGiveIdenticalRows) {
  Seq2SeqModel model(small_model(AdaptationMode::manual, AdaptationMode::generated), 1);
  TaskSuite twice = small_suite();
  twice.data[0].dev = {twice.data[0].dev[0], twice.data[0].dev[1], twice.data[0].dev[0]};
  const auto records = export_embeddings(model, twice, Split::dev, 3);
  EXPECT_EQ(records[0].e, records[2].e);
  EXPECT_NE(records[0].e, records[1].e);
}

TEST(Export, RequiresGeneratedDecoder) {
  Seq2SeqModel model(small_model(AdaptationMode::manual, AdaptationMode::manual), 0);
  EXPECT_THROW(export_embeddings(model, small_suite(), Split::dev), UnsupportedModeError);
}

TEST(Export, CsvRoundTripKeepsSixSignificantDigits) {
  Seq2SeqModel model(small_model(AdaptationMode::manual, AdaptationMode::generated), 2);
  const auto records = export_embeddings(model, small_suite(), Split::dev, 5);
  std::stringstream buf;
  write_embeddings_csv(buf, records);
  std::string header;
  std::getline(std::stringstream(buf.str()), header);
  EXPECT_EQ(header.rfind("task,example_id,label,prediction,e_0,e_1,", 0), 0u);
  EXPECT_EQ(header.substr(header.size() - 5), ",e_15");
  const auto back = read_embeddings_csv(buf);
  ASSERT_EQ(back.size(), records.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].task, records[i].task);
    EXPECT_EQ(back[i].example_id, records[i].example_id);
    EXPECT_EQ(back[i].label, records[i].label);
    EXPECT_EQ(back[i].prediction, records[i].prediction);
    for (std::size_t j = 0; j < records[i].e.size(); ++j) {
      const double v = records[i].e[j];
      EXPECT_LE(std::abs(back[i].e[j] - v), 5e-7 * std::abs(v) + 1e-30);
    }
  }
  std::stringstream bad("task,example_id,label,prediction,e_0\ncopy,0,-,a b\n");
  EXPECT_THROW(read_embeddings_csv(bad), std::invalid_argument);
}

std::vector<std::vector<double>> random_points(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::vector<std::vector<double>> pts(n, std::vector<double>(d));
  for (auto& p : pts) {
    for (auto& v : p) v = g(rng);
  }
  return pts;
}

double dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

TEST(Pca, CollinearPointsHaveOneComponent) {
  std::vector<std::vector<double>> pts;
  for (int i = 0; i < 20; ++i) pts.push_back({1.0 + i, 2.0 - 0.5 * i, 3.0 * i});
  const Projection p = pca_project(pts, 2);
  EXPECT_NEAR(p.explained[0], 1.0, 1e-6);
  EXPECT_NEAR(p.explained[1], 0.0, 1e-6);
}

TEST(Pca, IsometricOnDataInsideTheSubspace) {
  // points in a random 3-dimensional subspace of R^10
  const auto coeffs = random_points(50, 3, 4);
  const auto basis = random_points(3, 10, 5);
  std::vector<std::vector<double>> pts(50, std::vector<double>(10, 0.0));
  for (std::size_t i = 0; i < 50; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t j = 0; j < 10; ++j) pts[i][j] += coeffs[i][c] * basis[c][j];
    }
  }
  const Projection p = pca_project(pts, 3);
  double worst = 0.0;
  for (std::size_t i = 0; i < 50; ++i) {
    for (std::size_t j = i + 1; j < 50; ++j) {
      const double orig = dist(pts[i], pts[j]);
      worst = std::max(worst, std::abs(dist(p.coords[i], p.coords[j]) - orig) / orig);
    }
  }
  EXPECT_LT(worst, 1e-4);
  EXPECT_NEAR(p.explained[0] + p.explained[1] + p.explained[2], 1.0, 1e-9);
}

TEST(Pca, RatiosDescendAndSumToAtMostOne) {
  const Projection p = pca_project(random_points(40, 8, 6), 8);
  double total = 0.0;
  for (std::size_t i = 0; i < p.explained.size(); ++i) {
    total += p.explained[i];
    if (i) EXPECT_LE(p.explained[i], p.explained[i - 1]);
  }
  EXPECT_LE(total, 1.0 + 1e-6);
}

TEST(Pca, RecordOrderOnlyPermutesCoordinates) {
  auto pts = random_points(30, 5, 7);
  const Projection a = pca_project(pts, 2);
  std::vector<std::size_t> order(30);
  for (std::size_t i = 0; i < 30; ++i) order[i] = (i * 7) % 30;
  std::vector<std::vector<double>> shuffled;
  for (auto i : order) shuffled.push_back(pts[i]);
  const Projection b = pca_project(shuffled, 2);
  for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(a.explained[c], b.explained[c], 1e-10);
  for (std::size_t i = 0; i < 30; ++i) {
    for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(std::abs(b.coords[i][c]), std::abs(a.coords[order[i]][c]), 1e-9);
  }
}

TEST(Pca, RejectsBadSizes) {
  EXPECT_THROW(pca_project(random_points(10, 3, 0), 4), std::invalid_argument);
  EXPECT_THROW(pca_project(random_points(2, 3, 0), 2), std::invalid_argument);
}

// Direct O(n^2) silhouette from the definition.
double brute_silhouette(const std::vector<std::vector<double>>& pts, const std::vector<std::string>& g) {
  double total = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    std::map<std::string, std::pair<double, int>> sums;
    for (std::size_t j = 0; j < pts.size(); ++j) {
      if (j == i) continue;
      auto& s = sums[g[j]];
      s.first += dist(pts[i], pts[j]);
      ++s.second;
    }
    const double a = sums[g[i]].first / sums[g[i]].second;
    double b = 1e300;
    for (const auto& [name, s] : sums) {
      if (name != g[i]) b = std::min(b, s.first / s.second);
    }
    total += (b - a) / std::max(a, b);
  }
  return total / static_cast<double>(pts.size());
}

TEST(Silhouette, MatchesTheDefinition) {
  const auto pts = random_points(60, 4, 8);
  std::vector<std::string> g;
  for (std::size_t i = 0; i < 60; ++i) g.push_back(std::to_string(i % 3));
  EXPECT_NEAR(silhouette(pts, g), brute_silhouette(pts, g), 1e-9);
}

TEST(Silhouette, SeparatedClustersScoreHigh) {
  auto pts = random_points(100, 4, 9);
  std::vector<std::string> g;
  for (std::size_t i = 0; i < 100; ++i) {
    if (i % 2) pts[i][0] += 100.0;
    g.push_back(i % 2 ? "far" : "near");
  }
  EXPECT_GT(silhouette(pts, g), 0.9);
}

TEST(Silhouette, RandomGroupsScoreNearZero) {
  const auto pts = random_points(1000, 4, 10);
  std::mt19937_64 rng(11);
  std::vector<std::string> g;
  for (std::size_t i = 0; i < 1000; ++i) g.push_back(std::to_string(rng() % 3));
  EXPECT_LT(std::abs(silhouette(pts, g)), 0.1);
}

TEST(Silhouette, RejectsDegenerateGroupings) {
  const auto pts = random_points(6, 2, 12);
  EXPECT_THROW(silhouette(pts, {"a", "a", "a", "a", "a", "a"}), std::invalid_argument);
  EXPECT_THROW(silhouette(pts, {"a", "a", "a", "a", "a", "b"}), std::invalid_argument);
}

TEST(Silhouette, PermutationTestSeparatesRealClusters) {
  auto pts = random_points(80, 3, 13);
  std::vector<EmbeddingRecord> records;
  for (std::size_t i = 0; i < 80; ++i) {
    EmbeddingRecord r;
    r.task = "parity";
    r.prediction = i % 2 ? "1" : "0";
    for (double v : pts[i]) r.e.push_back(static_cast<float>(v + (i % 2 ? 3.0 : 0.0)));
    records.push_back(r);
  }
  const PermutationTest t = permutation_test(records, GroupKey::predicted_label, 100, 0);
  EXPECT_DOUBLE_EQ(t.observed, label_separation(records, GroupKey::predicted_label));
  EXPECT_GT(t.z(), 3.0);
  EXPECT_LT(std::abs(t.mean), 0.1);
  EXPECT_THROW(label_separation(records, GroupKey::task), std::invalid_argument);
}

TEST(Probe, SeparableFeaturesAreLearnt) {
  std::mt19937_64 rng(14);
  std::normal_distribution<float> g;
  ProbeTask task{"toy", 2, {}, {}, {}, {}};
  for (int i = 0; i < 400; ++i) {
    std::vector<float> x(8);
    for (auto& v : x) v = g(rng);
    const int y = x[0] + 0.5f * x[3] > 0.0f;
    x[0] += y ? 0.5f : -0.5f;
    (i < 300 ? task.train_x : task.dev_x).push_back(x);
    (i < 300 ? task.train_y : task.dev_y).push_back(y);
  }
  ProbeConfig cfg;
  cfg.lr = 1e-2f;
  cfg.epochs = 30;
  const auto acc = train_probe({task}, 8, cfg);
  EXPECT_EQ(acc[0], 1.0);
}

TEST(Probe, LeavesTheModelUntouchedAndRejectsTransduction) {
  Seq2SeqModel model(small_model(AdaptationMode::manual, AdaptationMode::generated), 3);
  const NamedTensors before = model.state();
  const ProbeResult r = encoder_probe(model, small_suite(), ProbeConfig{});
  EXPECT_EQ(r.tasks, std::vector<std::string>({"parity", "max_class", "mod_sum"}));
  for (double a : r.accuracy) {
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 1.0);
  }
  const NamedTensors after = model.state();
  ASSERT_EQ(before.size(), after.size());
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto x = before[i].second.data(), y = after[i].second.data();
    EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin(), y.end())) << before[i].first;
  }
  EXPECT_THROW(encoder_probe(model, small_suite(), ProbeConfig{}, {"copy"}), std::invalid_argument);
}

TEST(Probe, FeaturesAreTheMaskedEncoderMean) {
  Seq2SeqModel model(small_model(AdaptationMode::manual, AdaptationMode::none), 4);
  const std::vector<Example> examples = {small_suite().data[3].dev[0], small_suite().data[3].dev[1]};
  const auto batched = encoder_features(model, examples);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto alone = encoder_features(model, {examples[i]});
    for (std::size_t j = 0; j < 16; ++j) EXPECT_NEAR(batched[i][j], alone[0][j], 1e-5);
  }
}

}  // namespace
}  // namespace hyperdec
