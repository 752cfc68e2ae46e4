// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hyperdec/adaptation.hpp"
#include "hyperdec/checkpoint.hpp"
#include "hyperdec/transformer.hpp"

namespace hyperdec {

class UnsupportedModeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class ParamRole { base, enc_adapter, dec_adapter, enc_hyper, dec_hyper, enc_task, dec_task };

std::string to_string(ParamRole role);

struct NamedParam {
  std::string name;
  Tensor tensor;
  ParamRole role;
};

inline constexpr TokenId kIgnoreTarget = -1;

struct Seq2SeqBatch {
  TokenBatch src;
  /// Start token followed by the target without its last token.
  TokenBatch tgt_in;
  /// Target tokens aligned with tgt_in; kIgnoreTarget past each target's end.
  std::vector<TokenId> tgt_out;
  std::vector<std::size_t> task_ids;
};

/// How task-mode sides pick their conditioning embedding.
enum class TaskConditioning { by_id, mean_embedding };

class Seq2SeqModel {
 public:
  /// Base weights depend only on (seed, base dims), so every adaptation mode
  /// built from one seed shares the same frozen transformer.
  Seq2SeqModel(const ModelConfig& cfg, std::uint64_t seed);
  // parameters are shared handles; a copy would alias them
  Seq2SeqModel(const Seq2SeqModel&) = delete;
  Seq2SeqModel& operator=(const Seq2SeqModel&) = delete;
  Seq2SeqModel(Seq2SeqModel&&) = default;
  Seq2SeqModel& operator=(Seq2SeqModel&&) = default;

  const ModelConfig& config() const { return cfg_; }
  const BaseParams& base() const { return base_; }
  const std::vector<NamedParam>& params() const { return params_; }
  bool is_trainable(const NamedParam& p) const { return cfg_.full_finetune || p.role != ParamRole::base; }
  std::size_t parameter_count(bool trainable) const;

  std::vector<AdapterParams>& enc_manual() { return enc_manual_; }
  std::vector<AdapterParams>& dec_manual() { return dec_manual_; }
  HyperdecoderState* enc_generator() { return enc_gen_ ? &*enc_gen_ : nullptr; }
  HyperdecoderState* dec_generator() { return dec_gen_ ? &*dec_gen_ : nullptr; }
  TaskHypernetState* enc_task() { return enc_task_ ? &*enc_task_ : nullptr; }
  TaskHypernetState* dec_task() { return dec_task_ ? &*dec_task_ : nullptr; }

  void set_task_conditioning(TaskConditioning c) { conditioning_ = c; }
  TaskConditioning task_conditioning() const { return conditioning_; }

  /// Encoder adapters for this batch; empty when the encoder side is none.
  std::vector<AdapterParams> encoder_adapters(Tape& tape, const TokenBatch& src,
                                              std::span<const std::size_t> task_ids) const;
  /// Final encoder states with the configured encoder adapters.
  Tensor encode(Tape& tape, const TokenBatch& src, std::span<const std::size_t> task_ids) const;
  std::vector<AdapterParams> decoder_adapters(Tape& tape, const Tensor& enc_h, const TokenBatch& src,
                                              std::span<const std::size_t> task_ids) const;
  /// Logits [batch x m x V].
  Tensor logits(Tape& tape, const Seq2SeqBatch& batch) const;
  Tensor loss(Tape& tape, const Seq2SeqBatch& batch) const;
  /// The decoder hypernetwork's conditioning embedding e, [batch x d].
  /// Throws UnsupportedModeError unless the decoder side is generated.
  Tensor pooled_embedding(Tape& tape, const TokenBatch& src, std::span<const std::size_t> task_ids) const;
  /// Greedy decoding; each result excludes the end token.
  std::vector<std::vector<TokenId>> greedy_decode(const TokenBatch& src, std::span<const std::size_t> task_ids,
                                                  std::size_t max_steps) const;

  NamedTensors state() const;
  /// Copies values into the existing tensors; names and shapes must match exactly.
  void load_state(const NamedTensors& tensors);
  void save(const std::filesystem::path& path) const { save_checkpoint(path, state()); }
  void load(const std::filesystem::path& path) { load_state(load_checkpoint(path)); }

 private:
  std::vector<AdapterParams> side_adapters(Tape& tape, AdaptationMode mode, const std::vector<AdapterParams>& manual,
                                           const std::optional<TaskHypernetState>& task,
                                           const std::optional<HyperdecoderState>& gen, const Tensor* enc_h,
                                           const TokenBatch& src, std::span<const std::size_t> task_ids) const;
  void register_params();

  ModelConfig cfg_;
  BaseParams base_;
  std::vector<AdapterParams> enc_manual_, dec_manual_;
  std::optional<HyperdecoderState> enc_gen_, dec_gen_;
  std::optional<TaskHypernetState> enc_task_, dec_task_;
  TaskConditioning conditioning_ = TaskConditioning::by_id;
  std::vector<NamedParam> params_;
};

/// Pads sequences into a TokenBatch, right-padded with kPadToken.
TokenBatch make_token_batch(const std::vector<std::vector<TokenId>>& seqs);

}  // namespace hyperdec
