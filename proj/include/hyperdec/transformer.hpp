// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "hyperdec/adapter.hpp"
#include "hyperdec/ops.hpp"
#include "hyperdec/random.hpp"
#include "hyperdec/tensor.hpp"

namespace hyperdec {

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& field, const std::string& what)
      : std::invalid_argument(field + ": " + what), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

inline constexpr TokenId kPadToken = 0;
inline constexpr TokenId kStartToken = 1;
inline constexpr TokenId kEndToken = 2;

/// Which adapters a side of the model carries.
enum class AdaptationMode { none, manual, task, generated };

std::string to_string(AdaptationMode mode);
/// Accepts "none", "manual", "task", "generated" (case-insensitive).
AdaptationMode parse_mode(std::string_view text);

struct ModelConfig {
  std::size_t vocab_size = 40;
  std::size_t d_model = 64;
  std::size_t n_enc_layers = 2;
  std::size_t n_dec_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t max_len = 16;
  std::size_t enc_adapter_dim = 8;
  std::size_t dec_adapter_dim = 8;
  std::size_t hypernet_bottleneck = 16;
  std::size_t layer_embed_dim = 8;
  std::size_t task_embed_dim = 8;
  std::size_t n_tasks = 6;
  AdaptationMode enc_mode = AdaptationMode::manual;
  AdaptationMode dec_mode = AdaptationMode::generated;
  bool use_mlp = true;
  bool adapter_input_post_layernorm = false;
  /// Every parameter trains; both modes must be none.
  bool full_finetune = false;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }
};

struct AttentionParams {
  Tensor wq, wk, wv, wo;  // [d x d]
};

struct FeedForwardParams {
  Tensor w1, b1, w2, b2;  // [d x d_ff], [d_ff], [d_ff x d], [d]
};

struct LayerNormParams {
  Tensor gain, bias;
};

struct EncoderLayer {
  LayerNormParams ln_attn;
  AttentionParams self_attn;
  LayerNormParams ln_ff;
  FeedForwardParams ff;
};

struct DecoderLayer {
  LayerNormParams ln_self;
  AttentionParams self_attn;
  LayerNormParams ln_cross;
  AttentionParams cross_attn;
  LayerNormParams ln_ff;
  FeedForwardParams ff;
};

/// The frozen transformer. Token embeddings double as the output projection.
struct BaseParams {
  Tensor tok_emb;  // [V x d]
  Tensor enc_pos, dec_pos;  // [max_len x d]
  std::vector<EncoderLayer> enc;
  std::vector<DecoderLayer> dec;
  LayerNormParams enc_final, dec_final;
};

BaseParams init_base(const ModelConfig& cfg, Rng& rng);

/// Visits every base tensor with a stable dotted name.
template <typename F>
void for_each_base(BaseParams& p, F&& f) {
  auto ln = [&](const std::string& n, LayerNormParams& l) {
    f(n + ".gain", l.gain);
    f(n + ".bias", l.bias);
  };
  auto attn = [&](const std::string& n, AttentionParams& a) {
    f(n + ".wq", a.wq);
    f(n + ".wk", a.wk);
    f(n + ".wv", a.wv);
    f(n + ".wo", a.wo);
  };
  auto ff = [&](const std::string& n, FeedForwardParams& x) {
    f(n + ".w1", x.w1);
    f(n + ".b1", x.b1);
    f(n + ".w2", x.w2);
    f(n + ".b2", x.b2);
  };
  f(std::string("base.tok_emb"), p.tok_emb);
  f(std::string("base.enc_pos"), p.enc_pos);
  f(std::string("base.dec_pos"), p.dec_pos);
  for (std::size_t i = 0; i < p.enc.size(); ++i) {
    const std::string n = "base.enc." + std::to_string(i);
    ln(n + ".ln_attn", p.enc[i].ln_attn);
    attn(n + ".self_attn", p.enc[i].self_attn);
    ln(n + ".ln_ff", p.enc[i].ln_ff);
    ff(n + ".ff", p.enc[i].ff);
  }
  for (std::size_t i = 0; i < p.dec.size(); ++i) {
    const std::string n = "base.dec." + std::to_string(i);
    ln(n + ".ln_self", p.dec[i].ln_self);
    attn(n + ".self_attn", p.dec[i].self_attn);
    ln(n + ".ln_cross", p.dec[i].ln_cross);
    attn(n + ".cross_attn", p.dec[i].cross_attn);
    ln(n + ".ln_ff", p.dec[i].ln_ff);
    ff(n + ".ff", p.dec[i].ff);
  }
  ln("base.enc_final", p.enc_final);
  ln("base.dec_final", p.dec_final);
}

/// Token ids of a padded batch, row-major [batch x len]; mask flags real tokens.
struct TokenBatch {
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> mask;
  std::size_t batch = 0;
  std::size_t len = 0;
};

/// softmax(QKᵀ/√d_head + mask)V over heads, then the output projection.
/// x_q [batch x nq x d], x_kv [batch x nk x d].
Tensor attention(Tape& tape, const Tensor& x_q, const Tensor& x_kv, const AttentionParams& p, std::size_t batch,
                 std::size_t heads, const AttentionMask& mask);

/// x + FF(LN(x)) + Adapter(z) with z = x, or z = LN(x) when `adapter_on_normed`.
/// A null adapter leaves the plain residual block.
Tensor ff_with_adapter(Tape& tape, const Tensor& x, const LayerNormParams& ln, const FeedForwardParams& ff,
                       const AdapterParams* adapter, bool adapter_on_normed);

/// Encoder hidden states [batch x n x d]. `adapters` is empty or holds one
/// entry per encoder layer.
Tensor encode(Tape& tape, const BaseParams& p, const ModelConfig& cfg, const TokenBatch& src,
              std::span<const AdapterParams> adapters);

/// Decoder logits [batch x m x V] for a prefix starting with the start token.
Tensor decode(Tape& tape, const BaseParams& p, const ModelConfig& cfg, const Tensor& enc_h,
              const TokenBatch& src, const TokenBatch& prefix, std::span<const AdapterParams> adapters);

}  // namespace hyperdec
