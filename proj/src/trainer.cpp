// SPDX-License-Identifier: Apache-2.0
#include "hyperdec/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace hyperdec {

void TrainConfig::validate() const {
  if (total_steps == 0) throw ConfigError("total_steps", "must be >= 1");
  if (warmup_steps > total_steps) {
    throw ConfigError("warmup_steps", std::to_string(warmup_steps) + " exceeds total_steps " +
                                          std::to_string(total_steps));
  }
  if (batch_size == 0) throw ConfigError("batch_size", "must be >= 1");
  if (eval_every == 0) throw ConfigError("eval_every", "must be >= 1");
  if (!(peak_lr >= 0.0f)) throw ConfigError("peak_lr", "must be non-negative");
  if (!(weight_decay >= 0.0f)) throw ConfigError("weight_decay", "must be non-negative");
  if (!(beta1 >= 0.0f && beta1 < 1.0f)) throw ConfigError("beta1", "must lie in [0, 1)");
  if (!(beta2 >= 0.0f && beta2 < 1.0f)) throw ConfigError("beta2", "must lie in [0, 1)");
  if (!(eps > 0.0f)) throw ConfigError("eps", "must be positive");
}

float lr_at(std::size_t step, const TrainConfig& cfg) {
  if (step > cfg.total_steps) {
    throw std::out_of_range("lr_at: step " + std::to_string(step) + " beyond total_steps " +
                            std::to_string(cfg.total_steps));
  }
  const double peak = cfg.peak_lr;
  if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps) {
    return static_cast<float>(peak * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps));
  }
  const double span = static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return static_cast<float>(peak * static_cast<double>(cfg.total_steps - step) / span);
}

ParamPartition partition(const Seq2SeqModel& model) {
  ParamPartition p;
  for (const auto& np : model.params()) (model.is_trainable(np) ? p.trainable : p.frozen).push_back(np);
  return p;
}

AdamW::AdamW(std::vector<Tensor> params, const TrainConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0f);
    v_.emplace_back(p.numel(), 0.0f);
  }
}

void AdamW::step(float lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) {
      throw TapeError("AdamW: trainable tensor " + std::to_string(i) + " " + shape_str(params_[i].shape()) +
                      " has no gradient");
    }
  }
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto w = params_[i].data();
    auto g = params_[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = static_cast<float>(b1 * m[j] + (1.0 - b1) * g[j]);
      v[j] = static_cast<float>(b2 * v[j] + (1.0 - b2) * static_cast<double>(g[j]) * g[j]);
      const double update = (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
      w[j] = static_cast<float>(w[j] - lr * (update + cfg_.weight_decay * static_cast<double>(w[j])));
    }
  }
}

std::size_t proportional_sample(std::span<const std::size_t> sizes, Rng& rng) {
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (total == 0) throw std::invalid_argument("proportional_sample: no examples in any task");
  std::size_t pick = rng.index(total);
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (pick < sizes[i]) return i;
    pick -= sizes[i];
  }
  return sizes.size() - 1;
}

std::size_t proportional_sample(const TaskSuite& suite, Rng& rng) {
  std::vector<std::size_t> sizes;
  for (const auto& d : suite.data) sizes.push_back(d.train.size());
  return proportional_sample(sizes, rng);
}

Seq2SeqBatch make_batch(const std::vector<const Example*>& examples) {
  std::vector<std::vector<TokenId>> src, tgt_in;
  Seq2SeqBatch b;
  std::size_t m = 0;
  for (const auto* ex : examples) m = std::max(m, ex->target.size());
  for (const auto* ex : examples) {
    src.push_back(ex->input);
    std::vector<TokenId> in{kStartToken};
    in.insert(in.end(), ex->target.begin(), ex->target.end() - 1);
    tgt_in.push_back(std::move(in));
    for (std::size_t i = 0; i < m; ++i) b.tgt_out.push_back(i < ex->target.size() ? ex->target[i] : kIgnoreTarget);
    b.task_ids.push_back(ex->task);
  }
  b.src = make_token_batch(src);
  b.tgt_in = make_token_batch(tgt_in);
  return b;
}

std::string metric_name(TaskKind kind) { return kind == TaskKind::classification ? "accuracy" : "exact_match"; }

std::vector<std::vector<TokenId>> predict(const Seq2SeqModel& model, const std::vector<Example>& examples) {
  constexpr std::size_t kChunk = 128;
  std::vector<std::vector<TokenId>> out;
  for (std::size_t start = 0; start < examples.size(); start += kChunk) {
    const std::size_t end = std::min(examples.size(), start + kChunk);
    std::vector<std::vector<TokenId>> src;
    std::vector<std::size_t> tasks;
    std::size_t longest = 0;
    for (std::size_t i = start; i < end; ++i) {
      src.push_back(examples[i].input);
      tasks.push_back(examples[i].task);
      longest = std::max(longest, examples[i].target.size());
    }
    auto preds = model.greedy_decode(make_token_batch(src), tasks, longest);
    for (auto& p : preds) out.push_back(std::move(p));
  }
  return out;
}

std::vector<double> evaluate(const Seq2SeqModel& model, const TaskSuite& suite, Split split,
                             std::size_t max_examples) {
  std::vector<double> out;
  for (std::size_t task = 0; task < suite.size(); ++task) {
    const auto& all = suite.data[task].split(split);
    const std::size_t n = max_examples == 0 ? all.size() : std::min(all.size(), max_examples);
    const std::vector<Example> subset(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n));
    std::vector<std::vector<TokenId>> targets;
    for (const auto& ex : subset) targets.push_back(ex.target);
    out.push_back(metric(suite.specs[task].kind, predict(model, subset), targets));
  }
  return out;
}

namespace {

NamedTensors snapshot(const Seq2SeqModel& model) {
  NamedTensors out;
  for (const auto& p : model.params()) out.emplace_back(p.name, p.tensor.clone());
  return out;
}

}  // namespace

TrainResult train(Seq2SeqModel& model, const TaskSuite& suite, const TrainConfig& cfg, const TrainOutputs& outputs) {
  cfg.validate();
  if (suite.vocab_size() > model.config().vocab_size) {
    throw ConfigError("vocab_size", "model vocabulary " + std::to_string(model.config().vocab_size) +
                                        " is smaller than the suite's " + std::to_string(suite.vocab_size()));
  }
  if (suite.max_sequence() > model.config().max_len) {
    throw ConfigError("max_len", "model max_len " + std::to_string(model.config().max_len) +
                                     " is shorter than the suite's longest sequence " +
                                     std::to_string(suite.max_sequence()));
  }
  std::ofstream metrics_out, loss_out;
  if (!outputs.metrics_jsonl.empty()) metrics_out.open(outputs.metrics_jsonl, std::ios::trunc);
  if (!outputs.loss_csv.empty()) {
    loss_out.open(outputs.loss_csv, std::ios::trunc);
    loss_out.precision(9);
    loss_out << "step,task,loss\n";
  }

  const ParamPartition part = partition(model);
  std::vector<Tensor> trainable;
  for (const auto& p : part.trainable) trainable.push_back(p.tensor);
  AdamW opt(trainable, cfg);
  Rng rng = Rng::stream(cfg.seed, "train.sampling");
  TrainResult result;
  bool have_best = false;

  auto run_eval = [&](std::size_t step) {
    const auto scores = evaluate(model, suite, Split::dev, cfg.eval_examples);
    for (std::size_t t = 0; t < suite.size(); ++t) {
      EvalRecord r{step, suite.specs[t].name, metric_name(suite.specs[t].kind), scores[t]};
      if (metrics_out.is_open()) {
        nlohmann::json j = {{"step", r.step}, {"task", r.task}, {"metric_name", r.metric_name}, {"value", r.value}};
        metrics_out << j.dump() << '\n';
      }
      result.evals.push_back(std::move(r));
    }
    if (metrics_out.is_open()) metrics_out.flush();
    const double mean = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
    if (!have_best || mean > result.best_dev_mean) {
      have_best = true;
      result.best_dev_mean = mean;
      result.best_step = step;
      result.best_state = snapshot(model);
      if (!outputs.best_checkpoint.empty()) save_checkpoint(outputs.best_checkpoint, result.best_state);
    }
  };

  run_eval(0);
  for (std::size_t step = 1; step <= cfg.total_steps; ++step) {
    const std::size_t task = proportional_sample(suite, rng);
    const auto& pool = suite.data[task].train;
    std::vector<const Example*> picked;
    for (std::size_t i = 0; i < cfg.batch_size; ++i) picked.push_back(&pool[rng.index(pool.size())]);
    const Seq2SeqBatch batch = make_batch(picked);

    double loss_value = 0.0;
    if (trainable.empty()) {
      Tape tape = Tape::no_grad();
      loss_value = model.loss(tape, batch).item();
    } else {
      for (auto& t : trainable) t.zero_grad();
      Tape tape;
      Tensor loss = model.loss(tape, batch);
      loss_value = loss.item();
      if (std::isfinite(loss_value)) {
        tape.backward(loss);
        opt.step(lr_at(step, cfg));
      }
    }
    if (!std::isfinite(loss_value)) {
      throw DivergenceError("loss became " + std::to_string(loss_value) + " at step " + std::to_string(step) +
                            " on task " + suite.specs[task].name);
    }
    result.losses.push_back({step, suite.specs[task].name, loss_value});
    if (loss_out.is_open()) loss_out << step << ',' << suite.specs[task].name << ',' << loss_value << '\n';
    if (step % cfg.eval_every == 0 || step == cfg.total_steps) run_eval(step);
  }
  return result;
}

}  // namespace hyperdec
