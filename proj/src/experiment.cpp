// SPDX-License-Identifier: Apache-2.0
#include "hyperdec/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

namespace hyperdec {
namespace {

using nlohmann::json;

class Reader {
 public:
  Reader(const json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError(prefix_.empty() ? "<root>" : prefix_, "expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.emplace_back(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw ConfigError(name(key), "expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_unsigned() && !(it->is_number_integer() && it->template get<long long>() >= 0)) {
          throw ConfigError(name(key), "expected a non-negative integer");
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw ConfigError(name(key), "expected a number");
      } else {
        if (!it->is_string()) throw ConfigError(name(key), "expected a string");
      }
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(name(key), e.what());
    }
  }

  void mode(const char* key, AdaptationMode& out) {
    std::string text = to_string(out);
    get(key, text);
    try {
      out = parse_mode(text);
    } catch (const std::exception& e) {
      throw ConfigError(name(key), e.what());
    }
  }

  const json* child(const char* key) {
    seen_.emplace_back(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string name(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (std::find(seen_.begin(), seen_.end(), key) == seen_.end()) throw ConfigError(name(key), "unknown field");
    }
  }

 private:
  const json& j_;
  std::string prefix_;
  std::vector<std::string> seen_;
};

json model_json(const ModelConfig& m) {
  return {{"vocab_size", m.vocab_size},
          {"d_model", m.d_model},
          {"n_enc_layers", m.n_enc_layers},
          {"n_dec_layers", m.n_dec_layers},
          {"n_heads", m.n_heads},
          {"d_ff", m.d_ff},
          {"max_len", m.max_len},
          {"enc_adapter_dim", m.enc_adapter_dim},
          {"dec_adapter_dim", m.dec_adapter_dim},
          {"hypernet_bottleneck", m.hypernet_bottleneck},
          {"layer_embed_dim", m.layer_embed_dim},
          {"task_embed_dim", m.task_embed_dim},
          {"n_tasks", m.n_tasks},
          {"enc_mode", to_string(m.enc_mode)},
          {"dec_mode", to_string(m.dec_mode)},
          {"use_mlp", m.use_mlp},
          {"adapter_input_post_layernorm", m.adapter_input_post_layernorm},
          {"full_finetune", m.full_finetune}};
}

json train_json(const TrainConfig& t) {
  return {{"peak_lr", t.peak_lr},           {"warmup_steps", t.warmup_steps}, {"total_steps", t.total_steps},
          {"batch_size", t.batch_size},     {"eval_every", t.eval_every},     {"weight_decay", t.weight_decay},
          {"beta1", t.beta1},               {"beta2", t.beta2},               {"eps", t.eps},
          {"seed", t.seed},                 {"eval_examples", t.eval_examples}};
}

void read_model(const json& j, ModelConfig& m) {
  Reader r(j, "model");
  r.get("vocab_size", m.vocab_size);
  r.get("d_model", m.d_model);
  r.get("n_enc_layers", m.n_enc_layers);
  r.get("n_dec_layers", m.n_dec_layers);
  r.get("n_heads", m.n_heads);
  r.get("d_ff", m.d_ff);
  r.get("max_len", m.max_len);
  r.get("enc_adapter_dim", m.enc_adapter_dim);
  r.get("dec_adapter_dim", m.dec_adapter_dim);
  r.get("hypernet_bottleneck", m.hypernet_bottleneck);
  r.get("layer_embed_dim", m.layer_embed_dim);
  r.get("task_embed_dim", m.task_embed_dim);
  r.get("n_tasks", m.n_tasks);
  r.mode("enc_mode", m.enc_mode);
  r.mode("dec_mode", m.dec_mode);
  r.get("use_mlp", m.use_mlp);
  r.get("adapter_input_post_layernorm", m.adapter_input_post_layernorm);
  r.get("full_finetune", m.full_finetune);
  r.finish();
}

void read_train(const json& j, TrainConfig& t) {
  Reader r(j, "train");
  r.get("peak_lr", t.peak_lr);
  r.get("warmup_steps", t.warmup_steps);
  r.get("total_steps", t.total_steps);
  r.get("batch_size", t.batch_size);
  r.get("eval_every", t.eval_every);
  r.get("weight_decay", t.weight_decay);
  r.get("beta1", t.beta1);
  r.get("beta2", t.beta2);
  r.get("eps", t.eps);
  r.get("seed", t.seed);
  r.get("eval_examples", t.eval_examples);
  r.finish();
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace

void ExperimentConfig::validate() const {
  try {
    model.validate();
  } catch (const ConfigError& e) {
    throw ConfigError("model." + e.field(), std::string(e.what()).substr(e.field().size() + 2));
  }
  try {
    train.validate();
  } catch (const ConfigError& e) {
    throw ConfigError("train." + e.field(), std::string(e.what()).substr(e.field().size() + 2));
  }
  if (!(suite_scale > 0.0)) throw ConfigError("suite_scale", "must be positive");
  if (label.empty()) throw ConfigError("label", "must not be empty");
  if (out_dir.empty()) throw ConfigError("out_dir", "must not be empty");
  if (model.vocab_size < kSuiteVocab) {
    throw ConfigError("model.vocab_size", "the task suite needs " + std::to_string(kSuiteVocab) + " tokens");
  }
  if (model.n_tasks < kTaskCount) {
    throw ConfigError("model.n_tasks", "the task suite has " + std::to_string(kTaskCount) + " tasks");
  }
}

json to_json(const ExperimentConfig& cfg) {
  return {{"model", model_json(cfg.model)},
          {"train", train_json(cfg.train)},
          {"suite_seed", cfg.suite_seed},
          {"model_seed", cfg.model_seed},
          {"suite_scale", cfg.suite_scale},
          {"prefix", to_string(cfg.prefix)},
          {"out_dir", cfg.out_dir.string()},
          {"label", cfg.label}};
}

ExperimentConfig config_from_json(const json& j, ExperimentConfig cfg) {
  Reader r(j, "");
  if (const json* m = r.child("model")) read_model(*m, cfg.model);
  if (const json* t = r.child("train")) read_train(*t, cfg.train);
  r.get("suite_seed", cfg.suite_seed);
  r.get("model_seed", cfg.model_seed);
  r.get("suite_scale", cfg.suite_scale);
  std::string prefix = to_string(cfg.prefix);
  r.get("prefix", prefix);
  cfg.prefix = parse_prefix_policy(prefix);
  std::string out = cfg.out_dir.string();
  r.get("out_dir", out);
  cfg.out_dir = out;
  r.get("label", cfg.label);
  r.finish();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config", std::string("malformed JSON: ") + e.what());
  }
  return config_from_json(j);
}

void apply_mode(ExperimentConfig& cfg, const std::string& label) {
  cfg.label = label;
  cfg.model.use_mlp = true;
  cfg.model.adapter_input_post_layernorm = false;
  cfg.model.full_finetune = false;
  if (label == "full_finetune") {
    cfg.model.enc_mode = AdaptationMode::none;
    cfg.model.dec_mode = AdaptationMode::none;
    cfg.model.full_finetune = true;
    return;
  }
  std::vector<std::string> parts;
  std::stringstream in(label);
  for (std::string p; std::getline(in, p, '-');) parts.push_back(p);
  if (parts.size() < 2 || parts.size() > 3) throw ConfigError("mode", "cannot parse '" + label + "'");
  try {
    cfg.model.enc_mode = parse_mode(parts[0]);
    cfg.model.dec_mode = parse_mode(parts[1]);
  } catch (const std::exception& e) {
    throw ConfigError("mode", e.what());
  }
  if (parts.size() == 3) {
    if (parts[2] == "no_mlp") {
      cfg.model.use_mlp = false;
    } else if (parts[2] == "post_ln") {
      cfg.model.adapter_input_post_layernorm = true;
    } else {
      throw ConfigError("mode", "unknown variant '" + parts[2] + "'");
    }
  }
}

json to_json(const RunSummary& s) {
  json test = json::object(), ood = json::object();
  for (std::size_t i = 0; i < s.tasks.size(); ++i) {
    test[s.tasks[i]] = s.test[i];
    ood[s.tasks[i]] = s.ood[i];
  }
  return {{"label", s.label},         {"best_step", s.best_step}, {"best_dev_mean", s.best_dev_mean},
          {"test", test},             {"test_mean", s.test_mean}, {"ood", ood},
          {"ood_mean", s.ood_mean},   {"trainable", s.trainable}, {"base", s.base},
          {"trainable_percent", s.trainable_percent}};
}

std::vector<double> evaluate_split(Seq2SeqModel& model, const TaskSuite& suite, Split split) {
  const TaskConditioning before = model.task_conditioning();
  model.set_task_conditioning(split == Split::ood ? TaskConditioning::mean_embedding : TaskConditioning::by_id);
  std::vector<double> out;
  try {
    out = evaluate(model, suite, split);
  } catch (...) {
    model.set_task_conditioning(before);
    throw;
  }
  model.set_task_conditioning(before);
  return out;
}

RunSummary run(const ExperimentConfig& cfg, Seq2SeqModel& model_out) {
  cfg.validate();
  const std::filesystem::path dir = cfg.out_dir / cfg.label;
  std::filesystem::create_directories(dir);
  std::filesystem::remove(dir / "FAILED");
  std::filesystem::remove(dir / "summary.json");
  try {
    {
      std::ofstream out(dir / "config.json", std::ios::trunc);
      out << to_json(cfg).dump(2) << '\n';
    }
    const TaskSuite suite = build_suite(cfg.suite_seed, {cfg.prefix, cfg.suite_scale});
    Seq2SeqModel model(cfg.model, cfg.model_seed);
    const TrainResult result =
        train(model, suite, cfg.train, {dir / "metrics.jsonl", dir / "loss.csv", dir / "best.ckpt"});
    model.load_state(result.best_state);

    RunSummary s;
    s.label = cfg.label;
    s.dir = dir;
    s.best_step = result.best_step;
    s.best_dev_mean = result.best_dev_mean;
    for (const auto& spec : suite.specs) s.tasks.push_back(spec.name);
    s.test = evaluate_split(model, suite, Split::test);
    s.ood = evaluate_split(model, suite, Split::ood);
    s.test_mean = mean_of(s.test);
    s.ood_mean = mean_of(s.ood);
    s.trainable = count_trainable(model);
    s.base = count_base(model);
    s.trainable_percent = trainable_fraction(s.trainable, s.base);
    {
      std::ofstream out(dir / "summary.json", std::ios::trunc);
      out << to_json(s).dump(2) << '\n';
    }
    model_out = std::move(model);
    return s;
  } catch (const std::exception& e) {
    write_text(dir / "FAILED", std::string(e.what()) + "\n");
    throw;
  }
}

RunSummary run(const ExperimentConfig& cfg) {
  Seq2SeqModel scratch(cfg.model, cfg.model_seed);
  return run(cfg, scratch);
}

std::vector<ExperimentConfig> matrix_configs(const ExperimentConfig& base) {
  std::vector<std::string> labels = {"full_finetune"};
  for (const char* enc : {"manual", "task", "generated"}) {
    for (const char* dec : {"manual", "task", "generated"}) labels.push_back(std::string(enc) + "-" + dec);
  }
  labels.emplace_back("manual-generated-no_mlp");
  labels.emplace_back("manual-generated-post_ln");
  std::vector<ExperimentConfig> out;
  for (const auto& label : labels) {
    ExperimentConfig c = base;
    apply_mode(c, label);
    out.push_back(std::move(c));
  }
  return out;
}

std::vector<RunSummary> run_matrix(const ExperimentConfig& base, std::size_t parallel) {
  const auto configs = matrix_configs(base);
  for (const auto& c : configs) c.validate();
  std::vector<RunSummary> rows(configs.size());
  std::vector<std::string> errors(configs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < configs.size(); i = next++) {
      try {
        rows[i] = run(configs[i]);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(parallel, 1, configs.size());
  if (threads == 1) {
    for (std::size_t i = 0; i < configs.size(); ++i) {
      try {
        rows[i] = run(configs[i]);
      } catch (const DivergenceError& e) {
        throw DivergenceError(configs[i].label + ": " + e.what());
      } catch (const ConfigError& e) {
        throw ConfigError(e.field(), configs[i].label + ": " + e.what());
      }
    }
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    for (std::size_t i = 0; i < configs.size(); ++i) {
      if (!errors[i].empty()) throw std::runtime_error("matrix row " + configs[i].label + " failed: " + errors[i]);
    }
  }
  std::filesystem::create_directories(base.out_dir);
  write_text(base.out_dir / "table.txt", matrix_table_text(rows));
  write_text(base.out_dir / "table.csv", matrix_table_csv(rows));
  return rows;
}

std::string matrix_table_text(const std::vector<RunSummary>& rows) {
  std::size_t width = 4;
  for (const auto& r : rows) width = std::max(width, r.label.size());
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(width)) << "mode" << std::right << std::setw(12) << "trainable%"
      << std::setw(11) << "test_mean" << std::setw(10) << "ood_mean" << '\n';
  out << std::fixed;
  for (const auto& r : rows) {
    out << std::left << std::setw(static_cast<int>(width)) << r.label << std::right << std::setprecision(3)
        << std::setw(12) << r.trainable_percent << std::setprecision(4) << std::setw(11) << r.test_mean
        << std::setw(10) << r.ood_mean << '\n';
  }
  return out.str();
}

std::string matrix_table_csv(const std::vector<RunSummary>& rows) {
  std::ostringstream out;
  out << "mode,trainable,base,trainable_percent,test_mean,ood_mean\n" << std::setprecision(10);
  for (const auto& r : rows) {
    out << r.label << ',' << r.trainable << ',' << r.base << ',' << r.trainable_percent << ',' << r.test_mean << ','
        << r.ood_mean << '\n';
  }
  return out.str();
}

EmbeddingAnalysis analyse_embeddings(const Seq2SeqModel& model, const TaskSuite& suite,
                                     const std::filesystem::path& dir, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  const auto dev = export_embeddings(model, suite, Split::dev);
  const auto train_records = export_embeddings(model, suite, Split::train, 500);
  {
    std::ofstream out(dir / "embeddings_dev.csv", std::ios::trunc);
    write_embeddings_csv(out, dev);
  }
  {
    std::ofstream out(dir / "embeddings_train.csv", std::ios::trunc);
    write_embeddings_csv(out, train_records);
  }
  EmbeddingAnalysis a;
  const Projection p = pca_project(dev, 2);
  a.explained = p.explained;
  {
    std::ofstream out(dir / "projection_dev.csv", std::ios::trunc);
    write_projection_csv(out, dev, p);
  }
  // predictions seen only once cannot form a silhouette group
  std::map<std::string, std::size_t> seen;
  for (const auto& r : dev) {
    if (r.label != "-") ++seen[r.prediction];
  }
  std::vector<EmbeddingRecord> classification;
  for (const auto& r : dev) {
    if (r.label != "-" && seen[r.prediction] >= 2) classification.push_back(r);
  }
  std::size_t groups = 0;
  for (const auto& [name, n] : seen) groups += n >= 2;
  if (groups >= 2) {
    a.by_label = permutation_test(classification, GroupKey::predicted_label, 100, seed);
  } else {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    a.by_label = {nan, nan, nan};
  }
  const json j = {{"silhouette_predicted_label", a.by_label.observed},
                  {"permutation_mean", a.by_label.mean},
                  {"permutation_sd", a.by_label.sd},
                  {"z", a.by_label.z()},
                  {"pca_explained", a.explained}};
  write_text(dir / "analysis.json", j.dump(2) + "\n");
  return a;
}

}  // namespace hyperdec
