// SPDX-License-Identifier: Apache-2.0
#include "hyperdec/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <Eigen/Dense>

#include "hyperdec/ops.hpp"

namespace hyperdec {
namespace {

constexpr std::size_t kChunk = 64;

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

void write_record_fields(std::ostream& out, const EmbeddingRecord& r) {
  out << r.task << ',' << r.example_id << ',' << r.label << ',' << r.prediction;
  for (float v : r.e) out << ',' << v;
}

std::vector<std::vector<double>> as_points(const std::vector<EmbeddingRecord>& records) {
  std::vector<std::vector<double>> pts;
  pts.reserve(records.size());
  for (const auto& r : records) pts.emplace_back(r.e.begin(), r.e.end());
  return pts;
}

std::vector<std::string> groups_of(const std::vector<EmbeddingRecord>& records, GroupKey key) {
  std::vector<std::string> g;
  g.reserve(records.size());
  for (const auto& r : records) g.push_back(key == GroupKey::task ? r.task : r.prediction);
  return g;
}

std::vector<std::size_t> checked_group_ids(const std::vector<std::string>& groups, std::size_t& count) {
  std::map<std::string, std::size_t> ids;
  std::vector<std::size_t> out;
  out.reserve(groups.size());
  for (const auto& g : groups) out.push_back(ids.emplace(g, ids.size()).first->second);
  count = ids.size();
  if (count < 2) throw std::invalid_argument("silhouette: need at least two groups");
  std::vector<std::size_t> sizes(count, 0);
  for (auto id : out) ++sizes[id];
  for (const auto& [name, id] : ids) {
    if (sizes[id] < 2) throw std::invalid_argument("silhouette: group '" + name + "' has fewer than two members");
  }
  return out;
}

double silhouette_from(const Eigen::MatrixXd& dist, const std::vector<std::size_t>& ids, std::size_t count) {
  const std::size_t n = ids.size();
  std::vector<std::size_t> sizes(count, 0);
  for (auto id : ids) ++sizes[id];
  std::vector<double> per_group(count);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(per_group.begin(), per_group.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) per_group[ids[j]] += dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    const double a = per_group[ids[i]] / static_cast<double>(sizes[ids[i]] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < count; ++g) {
      if (g != ids[i]) b = std::min(b, per_group[g] / static_cast<double>(sizes[g]));
    }
    const double m = std::max(a, b);
    total += m > 0.0 ? (b - a) / m : 0.0;
  }
  return total / static_cast<double>(n);
}

Eigen::MatrixXd distances(const std::vector<std::vector<double>>& points) {
  const auto n = static_cast<Eigen::Index>(points.size());
  const auto d = static_cast<Eigen::Index>(points.empty() ? 0 : points[0].size());
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (static_cast<Eigen::Index>(points[static_cast<std::size_t>(i)].size()) != d) {
      throw std::invalid_argument("silhouette: points differ in dimension");
    }
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = points[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  const Eigen::VectorXd sq = x.rowwise().squaredNorm();
  Eigen::MatrixXd dist = (-2.0 * x * x.transpose()).colwise() + sq;
  dist.rowwise() += sq.transpose();
  return dist.cwiseMax(0.0).cwiseSqrt();
}

}  // namespace

std::vector<EmbeddingRecord> export_embeddings(const Seq2SeqModel& model, const TaskSuite& suite, Split split,
                                               std::size_t max_per_task) {
  if (model.config().dec_mode != AdaptationMode::generated) {
    throw UnsupportedModeError("export_embeddings: decoder side is " + to_string(model.config().dec_mode) +
                               ", not generated");
  }
  std::vector<EmbeddingRecord> out;
  for (std::size_t t = 0; t < suite.size(); ++t) {
    const auto& all = suite.data[t].split(split);
    const std::size_t n = max_per_task == 0 ? all.size() : std::min(all.size(), max_per_task);
    const std::vector<Example> examples(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n));
    const auto preds = predict(model, examples);
    for (std::size_t start = 0; start < n; start += kChunk) {
      const std::size_t end = std::min(n, start + kChunk);
      std::vector<std::vector<TokenId>> src;
      std::vector<std::size_t> tasks;
      for (std::size_t i = start; i < end; ++i) {
        src.push_back(examples[i].input);
        tasks.push_back(t);
      }
      Tape tape = Tape::no_grad();
      const Tensor e = model.pooled_embedding(tape, make_token_batch(src), tasks);
      const std::size_t d = e.shape()[1];
      for (std::size_t i = start; i < end; ++i) {
        EmbeddingRecord r;
        r.task = suite.specs[t].name;
        r.example_id = i;
        r.label = examples[i].label >= 0 ? std::to_string(examples[i].label) : "-";
        r.prediction = tokens_string(preds[i]);
        const auto row = e.data().subspan((i - start) * d, d);
        r.e.assign(row.begin(), row.end());
        out.push_back(std::move(r));
      }
    }
  }
  return out;
}

void write_embeddings_csv(std::ostream& out, const std::vector<EmbeddingRecord>& records) {
  const std::size_t d = records.empty() ? 0 : records[0].e.size();
  out << "task,example_id,label,prediction";
  for (std::size_t i = 0; i < d; ++i) out << ",e_" << i;
  out << '\n';
  const auto old = out.precision(9);
  for (const auto& r : records) {
    if (r.e.size() != d) throw std::invalid_argument("write_embeddings_csv: embedding width differs between records");
    write_record_fields(out, r);
    out << '\n';
  }
  out.precision(old);
}

std::vector<EmbeddingRecord> read_embeddings_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument("read_embeddings_csv: empty input");
  const auto header = split_csv(line);
  if (header.size() < 4 || header[0] != "task" || header[3] != "prediction") {
    throw std::invalid_argument("read_embeddings_csv: unexpected header '" + line + "'");
  }
  const std::size_t d = header.size() - 4;
  std::vector<EmbeddingRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != header.size()) {
      throw std::invalid_argument("read_embeddings_csv: line " + std::to_string(lineno) + " has " +
                                  std::to_string(f.size()) + " fields, expected " + std::to_string(header.size()));
    }
    EmbeddingRecord r{f[0], std::stoul(f[1]), f[2], f[3], {}};
    r.e.reserve(d);
    for (std::size_t i = 0; i < d; ++i) r.e.push_back(std::stof(f[4 + i]));
    out.push_back(std::move(r));
  }
  return out;
}

Projection pca_project(const std::vector<std::vector<double>>& points, std::size_t k) {
  const std::size_t n = points.size();
  const std::size_t d = n == 0 ? 0 : points[0].size();
  if (k == 0 || k > d) throw std::invalid_argument("pca_project: k must be in [1, d]");
  if (n < k + 1) throw std::invalid_argument("pca_project: need at least k+1 points");
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i) {
    if (points[i].size() != d) throw std::invalid_argument("pca_project: points differ in dimension");
    for (std::size_t j = 0; j < d; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = points[i][j];
  }
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = x.transpose() * x / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  // eigenvalues ascend
  const Eigen::VectorXd values = solver.eigenvalues().cwiseMax(0.0);
  const double total = values.sum();
  Eigen::MatrixXd basis(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(k));
  Projection p;
  for (std::size_t c = 0; c < k; ++c) {
    const auto col = static_cast<Eigen::Index>(d - 1 - c);
    Eigen::VectorXd v = solver.eigenvectors().col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    basis.col(static_cast<Eigen::Index>(c)) = v;
    p.explained.push_back(total > 0.0 ? values(col) / total : 0.0);
  }
  const Eigen::MatrixXd proj = x * basis;
  p.coords.assign(n, std::vector<double>(k));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < k; ++c) p.coords[i][c] = proj(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
  }
  return p;
}

Projection pca_project(const std::vector<EmbeddingRecord>& records, std::size_t k) {
  return pca_project(as_points(records), k);
}

void write_projection_csv(std::ostream& out, const std::vector<EmbeddingRecord>& records, const Projection& p) {
  if (p.coords.size() != records.size()) throw std::invalid_argument("write_projection_csv: size mismatch");
  const std::size_t d = records.empty() ? 0 : records[0].e.size();
  const std::size_t k = p.explained.size();
  out << "task,example_id,label,prediction";
  for (std::size_t i = 0; i < d; ++i) out << ",e_" << i;
  for (std::size_t i = 0; i < k; ++i) out << ",pc_" << i;
  out << '\n';
  const auto old = out.precision(9);
  for (std::size_t i = 0; i < records.size(); ++i) {
    write_record_fields(out, records[i]);
    for (double c : p.coords[i]) out << ',' << c;
    out << '\n';
  }
  out.precision(old);
}

double silhouette(const std::vector<std::vector<double>>& points, const std::vector<std::string>& groups) {
  if (points.size() != groups.size()) throw std::invalid_argument("silhouette: points and groups differ in size");
  std::size_t count = 0;
  const auto ids = checked_group_ids(groups, count);
  return silhouette_from(distances(points), ids, count);
}

double label_separation(const std::vector<EmbeddingRecord>& records, GroupKey key) {
  return silhouette(as_points(records), groups_of(records, key));
}

PermutationTest permutation_test(const std::vector<EmbeddingRecord>& records, GroupKey key,
                                 std::size_t permutations, std::uint64_t seed) {
  std::size_t count = 0;
  auto ids = checked_group_ids(groups_of(records, key), count);
  const Eigen::MatrixXd dist = distances(as_points(records));
  PermutationTest result;
  result.observed = silhouette_from(dist, ids, count);
  Rng rng = Rng::stream(seed, "permutation");
  std::vector<double> scores;
  for (std::size_t p = 0; p < permutations; ++p) {
    std::shuffle(ids.begin(), ids.end(), rng.engine());
    scores.push_back(silhouette_from(dist, ids, count));
  }
  if (!scores.empty()) {
    result.mean = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
    double var = 0.0;
    for (double s : scores) var += (s - result.mean) * (s - result.mean);
    result.sd = scores.size() > 1 ? std::sqrt(var / static_cast<double>(scores.size() - 1)) : 0.0;
  }
  return result;
}

std::vector<double> train_probe(const std::vector<ProbeTask>& tasks, std::size_t d, const ProbeConfig& cfg) {
  if (cfg.batch_size == 0 || cfg.epochs == 0) throw std::invalid_argument("train_probe: empty schedule");
  Rng rng = Rng::stream(cfg.seed, "probe");
  PoolingMlp mlp = init_pooling_mlp(d, rng);
  for (Tensor* t : {&mlp.w1, &mlp.b1, &mlp.w2, &mlp.b2}) t->set_requires_grad(true);
  std::vector<Tensor> weights, biases;
  std::vector<Tensor> params = {mlp.w1, mlp.b1, mlp.w2, mlp.b2};
  for (const auto& t : tasks) {
    if (t.classes < 2) throw std::invalid_argument("train_probe: task " + t.name + " has fewer than two classes");
    if (t.train_x.size() != t.train_y.size() || t.dev_x.size() != t.dev_y.size()) {
      throw std::invalid_argument("train_probe: features and labels differ in size for " + t.name);
    }
    const float bound = 1.0f / std::sqrt(static_cast<float>(d));
    weights.push_back(uniform_tensor({d, t.classes}, bound, rng, true));
    biases.push_back(Tensor::zeros({t.classes}, true));
    params.push_back(weights.back());
    params.push_back(biases.back());
  }

  auto rows = [&](const std::vector<std::vector<float>>& x, std::span<const std::size_t> idx) {
    std::vector<float> flat;
    flat.reserve(idx.size() * d);
    for (auto i : idx) {
      if (x[i].size() != d) throw std::invalid_argument("train_probe: feature width differs from d");
      flat.insert(flat.end(), x[i].begin(), x[i].end());
    }
    return Tensor::from({idx.size(), d}, std::move(flat));
  };
  auto forward = [&](Tape& tape, std::size_t t, const Tensor& x) {
    const Tensor h = relu(tape, add_bias(tape, matmul(tape, x, mlp.w1), mlp.b1));
    const Tensor z = add_bias(tape, matmul(tape, h, mlp.w2), mlp.b2);
    return add_bias(tape, matmul(tape, z, weights[t]), biases[t]);
  };

  // task-homogeneous batches, reshuffled every epoch
  std::vector<std::pair<std::size_t, std::vector<std::size_t>>> plan;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::vector<std::pair<std::size_t, std::vector<std::size_t>>> epoch;
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      std::vector<std::size_t> order(tasks[t].train_x.size());
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng.engine());
      for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
        epoch.emplace_back(t, std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(s),
                                                       order.begin() + static_cast<std::ptrdiff_t>(
                                                                           std::min(order.size(), s + cfg.batch_size))));
      }
    }
    std::shuffle(epoch.begin(), epoch.end(), rng.engine());
    plan.insert(plan.end(), epoch.begin(), epoch.end());
  }

  TrainConfig sched;
  sched.peak_lr = cfg.lr;
  sched.total_steps = plan.size();
  sched.warmup_steps = static_cast<std::size_t>(std::round(cfg.warmup_fraction * static_cast<double>(plan.size())));
  // heads keep their own moments so a task's head only moves on its batches
  AdamW shared({mlp.w1, mlp.b1, mlp.w2, mlp.b2}, sched);
  std::vector<AdamW> heads;
  for (std::size_t t = 0; t < tasks.size(); ++t) heads.emplace_back(std::vector<Tensor>{weights[t], biases[t]}, sched);
  for (std::size_t step = 0; step < plan.size(); ++step) {
    const auto& [t, idx] = plan[step];
    for (auto& p : params) p.zero_grad();
    Tape tape;
    std::vector<TokenId> targets;
    for (auto i : idx) targets.push_back(tasks[t].train_y[i]);
    const Tensor logits = forward(tape, t, rows(tasks[t].train_x, idx));
    tape.backward(softmax_cross_entropy(tape, logits, targets, kIgnoreTarget));
    const float lr = lr_at(step + 1, sched);
    shared.step(lr);
    heads[t].step(lr);
  }

  std::vector<double> accuracy;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const auto& task = tasks[t];
    if (task.dev_x.empty()) {
      accuracy.push_back(0.0);
      continue;
    }
    std::vector<std::size_t> idx(task.dev_x.size());
    std::iota(idx.begin(), idx.end(), 0);
    Tape tape = Tape::no_grad();
    const Tensor logits = forward(tape, t, rows(task.dev_x, idx));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto row = logits.data().subspan(i * task.classes, task.classes);
      const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      correct += best == task.dev_y[i];
    }
    accuracy.push_back(static_cast<double>(correct) / static_cast<double>(idx.size()));
  }
  return accuracy;
}

std::vector<std::vector<float>> encoder_features(const Seq2SeqModel& model, const std::vector<Example>& examples) {
  std::vector<std::vector<float>> out;
  out.reserve(examples.size());
  const std::size_t d = model.config().d_model;
  for (std::size_t start = 0; start < examples.size(); start += kChunk) {
    const std::size_t end = std::min(examples.size(), start + kChunk);
    std::vector<std::vector<TokenId>> src;
    std::vector<std::size_t> tasks;
    for (std::size_t i = start; i < end; ++i) {
      src.push_back(examples[i].input);
      tasks.push_back(examples[i].task);
    }
    const TokenBatch batch = make_token_batch(src);
    Tape tape = Tape::no_grad();
    const Tensor h = model.encode(tape, batch, tasks);
    const Tensor flat = reshape(tape, h, {batch.batch * batch.len, d});
    const Tensor pooled = mean_pool(tape, flat, batch.mask, batch.batch);
    for (std::size_t i = 0; i < batch.batch; ++i) {
      const auto row = pooled.data().subspan(i * d, d);
      out.emplace_back(row.begin(), row.end());
    }
  }
  return out;
}

ProbeResult encoder_probe(const Seq2SeqModel& model, const TaskSuite& suite, const ProbeConfig& cfg,
                          const std::vector<std::string>& task_names) {
  std::vector<std::size_t> chosen;
  if (task_names.empty()) {
    for (std::size_t t = 0; t < suite.size(); ++t) {
      if (suite.specs[t].kind == TaskKind::classification) chosen.push_back(t);
    }
  } else {
    for (const auto& name : task_names) chosen.push_back(suite.task_index(name));
  }
  ProbeResult result;
  std::vector<ProbeTask> tasks;
  for (auto t : chosen) {
    if (suite.specs[t].kind != TaskKind::classification) {
      throw std::invalid_argument("encoder_probe: task " + suite.specs[t].name + " is not a classification task");
    }
    ProbeTask p;
    p.name = suite.specs[t].name;
    p.train_x = encoder_features(model, suite.data[t].train);
    p.dev_x = encoder_features(model, suite.data[t].dev);
    int most = 0;
    for (const auto& ex : suite.data[t].train) {
      p.train_y.push_back(ex.label);
      most = std::max(most, ex.label);
    }
    for (const auto& ex : suite.data[t].dev) {
      p.dev_y.push_back(ex.label);
      most = std::max(most, ex.label);
    }
    p.classes = static_cast<std::size_t>(most) + 1;
    result.tasks.push_back(p.name);
    tasks.push_back(std::move(p));
  }
  result.accuracy = train_probe(tasks, model.config().d_model, cfg);
  return result;
}

}  // namespace hyperdec
