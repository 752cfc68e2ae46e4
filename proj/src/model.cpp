// SPDX-License-Identifier: Apache-2.0
#include "hyperdec/model.hpp"

#include <algorithm>
#include <map>

namespace hyperdec {

std::string to_string(ParamRole role) {
  switch (role) {
    case ParamRole::base:
      return "base";
    case ParamRole::enc_adapter:
      return "enc_adapter";
    case ParamRole::dec_adapter:
      return "dec_adapter";
    case ParamRole::enc_hyper:
      return "enc_hyper";
    case ParamRole::dec_hyper:
      return "dec_hyper";
    case ParamRole::enc_task:
      return "enc_task";
    case ParamRole::dec_task:
      return "dec_task";
  }
  return "?";
}

Seq2SeqModel::Seq2SeqModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng base_rng = Rng::stream(seed, "base");
  base_ = init_base(cfg_, base_rng);

  struct Side {
    AdaptationMode mode;
    std::size_t layers, a;
    const char* name;
    std::vector<AdapterParams>* manual;
    std::optional<HyperdecoderState>* gen;
    std::optional<TaskHypernetState>* task;
  };
  const Side sides[] = {
      {cfg_.enc_mode, cfg_.n_enc_layers, cfg_.enc_adapter_dim, "enc", &enc_manual_, &enc_gen_, &enc_task_},
      {cfg_.dec_mode, cfg_.n_dec_layers, cfg_.dec_adapter_dim, "dec", &dec_manual_, &dec_gen_, &dec_task_}};
  for (const auto& s : sides) {
    Rng rng = Rng::stream(seed, std::string("adapt.") + s.name);
    switch (s.mode) {
      case AdaptationMode::none:
        break;
      case AdaptationMode::manual:
        for (std::size_t i = 0; i < s.layers; ++i) s.manual->push_back(init_adapter(cfg_.d_model, s.a, rng));
        break;
      case AdaptationMode::generated:
        *s.gen = init_hyper(cfg_.d_model, s.a, cfg_.hypernet_bottleneck, cfg_.layer_embed_dim, s.layers, rng);
        break;
      case AdaptationMode::task:
        *s.task = init_task_hyper(cfg_.n_tasks, cfg_.task_embed_dim, cfg_.d_model, s.a, cfg_.hypernet_bottleneck,
                                  cfg_.layer_embed_dim, s.layers, rng);
        break;
    }
  }
  register_params();
}

void Seq2SeqModel::register_params() {
  params_.clear();
  for_each_base(base_, [&](const std::string& name, Tensor& t) { params_.push_back({name, t, ParamRole::base}); });
  auto add_adapters = [&](const std::string& prefix, std::vector<AdapterParams>& list, ParamRole role) {
    for (std::size_t i = 0; i < list.size(); ++i) {
      const std::string n = prefix + "." + std::to_string(i);
      params_.push_back({n + ".w_down", list[i].w_down, role});
      params_.push_back({n + ".b_down", list[i].b_down, role});
      params_.push_back({n + ".w_up", list[i].w_up, role});
      params_.push_back({n + ".b_up", list[i].b_up, role});
    }
  };
  auto add_core = [&](const std::string& n, HypernetCore& c, ParamRole role) {
    const std::pair<const char*, Tensor*> entries[] = {{"w0", &c.w0}, {"b0", &c.b0}, {"w1", &c.w1}, {"b1", &c.b1},
                                                       {"w2", &c.w2}, {"b2", &c.b2}, {"w3", &c.w3}, {"b3", &c.b3},
                                                       {"w4", &c.w4}, {"b4", &c.b4}};
    for (const auto& [k, t] : entries) params_.push_back({n + "." + k, *t, role});
  };
  auto add_gen = [&](const std::string& n, HyperdecoderState& s, ParamRole role) {
    params_.push_back({n + ".mlp.w1", s.mlp.w1, role});
    params_.push_back({n + ".mlp.b1", s.mlp.b1, role});
    params_.push_back({n + ".mlp.w2", s.mlp.w2, role});
    params_.push_back({n + ".mlp.b2", s.mlp.b2, role});
    add_core(n, s.hyper, role);
    params_.push_back({n + ".layer_embeds", s.layer_embeds, role});
  };
  auto add_task = [&](const std::string& n, TaskHypernetState& s, ParamRole role) {
    params_.push_back({n + ".task_embeds", s.task_embeds, role});
    params_.push_back({n + ".layer_embeds", s.layer_embeds, role});
    add_core(n, s.hyper, role);
  };
  add_adapters("enc.adapter", enc_manual_, ParamRole::enc_adapter);
  add_adapters("dec.adapter", dec_manual_, ParamRole::dec_adapter);
  if (enc_gen_) add_gen("enc.hyper", *enc_gen_, ParamRole::enc_hyper);
  if (dec_gen_) add_gen("dec.hyper", *dec_gen_, ParamRole::dec_hyper);
  if (enc_task_) add_task("enc.task", *enc_task_, ParamRole::enc_task);
  if (dec_task_) add_task("dec.task", *dec_task_, ParamRole::dec_task);
  for (auto& p : params_) p.tensor.set_requires_grad(is_trainable(p));
}

std::size_t Seq2SeqModel::parameter_count(bool trainable) const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (is_trainable(p) == trainable) n += p.tensor.numel();
  }
  return n;
}

std::vector<AdapterParams> Seq2SeqModel::side_adapters(Tape& tape, AdaptationMode mode,
                                                       const std::vector<AdapterParams>& manual,
                                                       const std::optional<TaskHypernetState>& task,
                                                       const std::optional<HyperdecoderState>& gen,
                                                       const Tensor* enc_h, const TokenBatch& src,
                                                       std::span<const std::size_t> task_ids) const {
  switch (mode) {
    case AdaptationMode::none:
      return {};
    case AdaptationMode::manual:
      return manual;
    case AdaptationMode::task: {
      if (conditioning_ == TaskConditioning::mean_embedding) return task_hypernet_generate_mean(tape, *task);
      if (task_ids.size() != src.batch) {
        throw ShapeError("task adapters need one task id per example, got " + std::to_string(task_ids.size()) +
                         " for a batch of " + std::to_string(src.batch));
      }
      const bool uniform = std::all_of(task_ids.begin(), task_ids.end(), [&](auto t) { return t == task_ids[0]; });
      return uniform ? task_hypernet_generate(tape, task_ids[0], *task) : task_hypernet_generate(tape, task_ids, *task);
    }
    case AdaptationMode::generated:
      return generate_decoder_adapters(tape, *enc_h, src.mask, src.batch, *gen, cfg_.use_mlp);
  }
  return {};
}

std::vector<AdapterParams> Seq2SeqModel::encoder_adapters(Tape& tape, const TokenBatch& src,
                                                          std::span<const std::size_t> task_ids) const {
  if (cfg_.enc_mode != AdaptationMode::generated) {
    return side_adapters(tape, cfg_.enc_mode, enc_manual_, enc_task_, enc_gen_, nullptr, src, task_ids);
  }
  // first pass: the unadapted encoder supplies the conditioning embedding
  Tensor plain = hyperdec::encode(tape, base_, cfg_, src, {});
  return side_adapters(tape, cfg_.enc_mode, enc_manual_, enc_task_, enc_gen_, &plain, src, task_ids);
}

Tensor Seq2SeqModel::encode(Tape& tape, const TokenBatch& src, std::span<const std::size_t> task_ids) const {
  const auto adapters = encoder_adapters(tape, src, task_ids);
  return hyperdec::encode(tape, base_, cfg_, src, adapters);
}

std::vector<AdapterParams> Seq2SeqModel::decoder_adapters(Tape& tape, const Tensor& enc_h, const TokenBatch& src,
                                                          std::span<const std::size_t> task_ids) const {
  return side_adapters(tape, cfg_.dec_mode, dec_manual_, dec_task_, dec_gen_, &enc_h, src, task_ids);
}

Tensor Seq2SeqModel::logits(Tape& tape, const Seq2SeqBatch& batch) const {
  Tensor enc_h = encode(tape, batch.src, batch.task_ids);
  const auto adapters = decoder_adapters(tape, enc_h, batch.src, batch.task_ids);
  return hyperdec::decode(tape, base_, cfg_, enc_h, batch.src, batch.tgt_in, adapters);
}

Tensor Seq2SeqModel::loss(Tape& tape, const Seq2SeqBatch& batch) const {
  return softmax_cross_entropy(tape, logits(tape, batch), batch.tgt_out, kIgnoreTarget);
}

Tensor Seq2SeqModel::pooled_embedding(Tape& tape, const TokenBatch& src, std::span<const std::size_t> task_ids) const {
  if (!dec_gen_) {
    throw UnsupportedModeError("pooled embedding needs a generated decoder side, model has " +
                               to_string(cfg_.dec_mode));
  }
  Tensor enc_h = encode(tape, src, task_ids);
  return pool_embed(tape, enc_h, src.mask, src.batch, dec_gen_->mlp, cfg_.use_mlp);
}

std::vector<std::vector<TokenId>> Seq2SeqModel::greedy_decode(const TokenBatch& src,
                                                              std::span<const std::size_t> task_ids,
                                                              std::size_t max_steps) const {
  Tape tape = Tape::no_grad();
  Tensor enc_h = encode(tape, src, task_ids);
  const auto adapters = decoder_adapters(tape, enc_h, src, task_ids);
  const std::size_t batch = src.batch, vocab = cfg_.vocab_size;
  const std::size_t steps = std::min(max_steps, cfg_.max_len);
  std::vector<std::vector<TokenId>> out(batch);
  std::vector<bool> done(batch, false);
  std::vector<std::vector<TokenId>> prefix(batch, std::vector<TokenId>{kStartToken});
  for (std::size_t step = 0; step < steps; ++step) {
    TokenBatch tb = make_token_batch(prefix);
    Tensor logits = hyperdec::decode(tape, base_, cfg_, enc_h, src, tb, adapters);
    const auto values = logits.data();
    const std::size_t len = tb.len;
    bool all_done = true;
    for (std::size_t b = 0; b < batch; ++b) {
      if (done[b]) continue;
      const float* row = values.data() + (b * len + len - 1) * vocab;
      const auto next = static_cast<TokenId>(std::max_element(row, row + vocab) - row);
      if (next == kEndToken) {
        done[b] = true;
        continue;
      }
      out[b].push_back(next);
      prefix[b].push_back(next);
      all_done = false;
    }
    if (all_done) break;
  }
  return out;
}

NamedTensors Seq2SeqModel::state() const {
  NamedTensors out;
  for (const auto& p : params_) out.emplace_back(p.name, p.tensor);
  return out;
}

void Seq2SeqModel::load_state(const NamedTensors& tensors) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : tensors) by_name[name] = &t;
  if (by_name.size() != params_.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(by_name.size()) + " tensors, model has " +
                          std::to_string(params_.size()));
  }
  for (auto& p : params_) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw CheckpointError("checkpoint lacks tensor " + p.name);
    if (it->second->shape() != p.tensor.shape()) {
      throw CheckpointError("tensor " + p.name + " has shape " + shape_str(it->second->shape()) + ", model expects " +
                            shape_str(p.tensor.shape()));
    }
  }
  for (auto& p : params_) std::ranges::copy(by_name[p.name]->data(), p.tensor.data().begin());
}

TokenBatch make_token_batch(const std::vector<std::vector<TokenId>>& seqs) {
  TokenBatch tb;
  tb.batch = seqs.size();
  for (const auto& s : seqs) tb.len = std::max(tb.len, s.size());
  tb.ids.assign(tb.batch * tb.len, kPadToken);
  tb.mask.assign(tb.batch * tb.len, 0);
  for (std::size_t b = 0; b < tb.batch; ++b) {
    for (std::size_t i = 0; i < seqs[b].size(); ++i) {
      tb.ids[b * tb.len + i] = seqs[b][i];
      tb.mask[b * tb.len + i] = 1;
    }
  }
  return tb;
}

}  // namespace hyperdec
