// SPDX-License-Identifier: Apache-2.0
#include "hyperdec/transformer.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

namespace hyperdec {

std::string to_string(AdaptationMode mode) {
  switch (mode) {
    case AdaptationMode::none:
      return "none";
    case AdaptationMode::manual:
      return "manual";
    case AdaptationMode::task:
      return "task";
    case AdaptationMode::generated:
      return "generated";
  }
  return "?";
}

AdaptationMode parse_mode(std::string_view text) {
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "none") return AdaptationMode::none;
  if (lower == "manual") return AdaptationMode::manual;
  if (lower == "task") return AdaptationMode::task;
  if (lower == "generated") return AdaptationMode::generated;
  throw ConfigError("mode", "unknown adaptation mode '" + std::string(text) + "'");
}

void ModelConfig::validate() const {
  auto positive = [](const char* field, std::size_t v) {
    if (v == 0) throw ConfigError(field, "must be >= 1");
  };
  positive("vocab_size", vocab_size);
  positive("d_model", d_model);
  positive("n_enc_layers", n_enc_layers);
  positive("n_dec_layers", n_dec_layers);
  positive("n_heads", n_heads);
  positive("d_ff", d_ff);
  positive("max_len", max_len);
  positive("enc_adapter_dim", enc_adapter_dim);
  positive("dec_adapter_dim", dec_adapter_dim);
  positive("hypernet_bottleneck", hypernet_bottleneck);
  positive("layer_embed_dim", layer_embed_dim);
  positive("task_embed_dim", task_embed_dim);
  positive("n_tasks", n_tasks);
  if (d_model % n_heads != 0) {
    throw ConfigError("n_heads", "d_model " + std::to_string(d_model) + " is not divisible by " +
                                     std::to_string(n_heads) + " heads");
  }
  if (vocab_size <= static_cast<std::size_t>(kEndToken)) {
    throw ConfigError("vocab_size", "must leave room for the pad, start and end tokens");
  }
  if (full_finetune && (enc_mode != AdaptationMode::none || dec_mode != AdaptationMode::none)) {
    throw ConfigError("full_finetune", "requires enc_mode and dec_mode none");
  }
}

namespace {

Tensor fan_in(Shape shape, Rng& rng) {
  const float bound = std::sqrt(3.0f / static_cast<float>(shape[0]));
  return uniform_tensor(std::move(shape), bound, rng);
}

LayerNormParams init_ln(std::size_t d) { return {Tensor::full({d}, 1.0f), Tensor::zeros({d})}; }

AttentionParams init_attn(std::size_t d, Rng& rng) {
  return {fan_in({d, d}, rng), fan_in({d, d}, rng), fan_in({d, d}, rng), fan_in({d, d}, rng)};
}

FeedForwardParams init_ff(std::size_t d, std::size_t f, Rng& rng) {
  return {fan_in({d, f}, rng), Tensor::zeros({f}), fan_in({f, d}, rng), Tensor::zeros({d})};
}

Tensor ln_apply(Tape& tape, const Tensor& x, const LayerNormParams& p) { return layer_norm(tape, x, p.gain, p.bias); }

void check_batch(const char* what, const TokenBatch& b, const ModelConfig& cfg) {
  if (b.batch == 0 || b.len == 0 || b.ids.size() != b.batch * b.len || b.mask.size() != b.ids.size()) {
    throw ShapeError(std::string(what) + ": token batch of " + std::to_string(b.ids.size()) + " ids / " +
                     std::to_string(b.mask.size()) + " flags does not match " + std::to_string(b.batch) + "x" +
                     std::to_string(b.len));
  }
  if (b.len > cfg.max_len) {
    throw ShapeError(std::string(what) + ": sequence length " + std::to_string(b.len) + " exceeds max_len " +
                     std::to_string(cfg.max_len));
  }
  for (std::size_t i = 0; i < b.ids.size(); ++i) {
    if (b.ids[i] < 0 || static_cast<std::size_t>(b.ids[i]) >= cfg.vocab_size) {
      throw IndexError(std::string(what) + ": token id " + std::to_string(b.ids[i]) + " at position " +
                       std::to_string(i) + " outside vocabulary of " + std::to_string(cfg.vocab_size));
    }
  }
}

// token plus position embedding, shaped [batch x len x d]
Tensor embed(Tape& tape, const BaseParams& p, const Tensor& pos_table, const TokenBatch& b) {
  std::vector<TokenId> positions(b.ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<TokenId>(i % b.len);
  Tensor x = add(tape, gather_rows(tape, p.tok_emb, b.ids), gather_rows(tape, pos_table, positions));
  return reshape(tape, x, {b.batch, b.len, p.tok_emb.cols()});
}

void check_adapters(const char* side, std::span<const AdapterParams> adapters, std::size_t layers) {
  if (!adapters.empty() && adapters.size() != layers) {
    throw ShapeError(std::string(side) + ": " + std::to_string(adapters.size()) + " adapters for " +
                     std::to_string(layers) + " layers");
  }
}

}  // namespace

BaseParams init_base(const ModelConfig& cfg, Rng& rng) {
  const std::size_t d = cfg.d_model;
  BaseParams p;
  p.tok_emb = normal_tensor({cfg.vocab_size, d}, 1.0f, rng);
  p.enc_pos = normal_tensor({cfg.max_len, d}, 1.0f, rng);
  p.dec_pos = normal_tensor({cfg.max_len, d}, 1.0f, rng);
  for (std::size_t i = 0; i < cfg.n_enc_layers; ++i) {
    p.enc.push_back({init_ln(d), init_attn(d, rng), init_ln(d), init_ff(d, cfg.d_ff, rng)});
  }
  for (std::size_t i = 0; i < cfg.n_dec_layers; ++i) {
    p.dec.push_back(
        {init_ln(d), init_attn(d, rng), init_ln(d), init_attn(d, rng), init_ln(d), init_ff(d, cfg.d_ff, rng)});
  }
  p.enc_final = init_ln(d);
  p.dec_final = init_ln(d);
  return p;
}

Tensor attention(Tape& tape, const Tensor& x_q, const Tensor& x_kv, const AttentionParams& p, std::size_t batch,
                 std::size_t heads, const AttentionMask& mask) {
  Tensor q = matmul(tape, x_q, p.wq);
  Tensor k = matmul(tape, x_kv, p.wk);
  Tensor v = matmul(tape, x_kv, p.wv);
  return matmul(tape, attention_core(tape, q, k, v, batch, heads, mask), p.wo);
}

Tensor ff_with_adapter(Tape& tape, const Tensor& x, const LayerNormParams& ln, const FeedForwardParams& ff,
                       const AdapterParams* adapter, bool adapter_on_normed) {
  Tensor h = ln_apply(tape, x, ln);
  Tensor f = add_bias(tape, matmul(tape, relu(tape, add_bias(tape, matmul(tape, h, ff.w1), ff.b1)), ff.w2), ff.b2);
  Tensor y = add(tape, x, f);
  if (adapter == nullptr) return y;
  return add(tape, y, adapter_forward(tape, adapter_on_normed ? h : x, *adapter));
}

Tensor encode(Tape& tape, const BaseParams& p, const ModelConfig& cfg, const TokenBatch& src,
              std::span<const AdapterParams> adapters) {
  check_batch("encode", src, cfg);
  check_adapters("encode", adapters, p.enc.size());
  AttentionMask mask{src.mask, false};
  Tensor x = embed(tape, p, p.enc_pos, src);
  for (std::size_t i = 0; i < p.enc.size(); ++i) {
    const auto& layer = p.enc[i];
    Tensor h = ln_apply(tape, x, layer.ln_attn);
    x = add(tape, x, attention(tape, h, h, layer.self_attn, src.batch, cfg.n_heads, mask));
    x = ff_with_adapter(tape, x, layer.ln_ff, layer.ff, adapters.empty() ? nullptr : &adapters[i],
                        cfg.adapter_input_post_layernorm);
  }
  return ln_apply(tape, x, p.enc_final);
}

Tensor decode(Tape& tape, const BaseParams& p, const ModelConfig& cfg, const Tensor& enc_h,
              const TokenBatch& src, const TokenBatch& prefix, std::span<const AdapterParams> adapters) {
  check_batch("decode", prefix, cfg);
  check_adapters("decode", adapters, p.dec.size());
  if (prefix.batch != src.batch || enc_h.numel() != src.batch * src.len * cfg.d_model) {
    throw ShapeError("decode: encoder states " + shape_str(enc_h.shape()) + " do not match source batch " +
                     std::to_string(src.batch) + "x" + std::to_string(src.len) + " or prefix batch " +
                     std::to_string(prefix.batch));
  }
  for (std::size_t b = 0; b < prefix.batch; ++b) {
    if (prefix.ids[b * prefix.len] != kStartToken) {
      throw ShapeError("decode: prefix " + std::to_string(b) + " does not begin with the start token");
    }
  }
  AttentionMask self_mask{{}, true};
  AttentionMask cross_mask{src.mask, false};
  Tensor x = embed(tape, p, p.dec_pos, prefix);
  for (std::size_t i = 0; i < p.dec.size(); ++i) {
    const auto& layer = p.dec[i];
    Tensor h = ln_apply(tape, x, layer.ln_self);
    x = add(tape, x, attention(tape, h, h, layer.self_attn, prefix.batch, cfg.n_heads, self_mask));
    h = ln_apply(tape, x, layer.ln_cross);
    x = add(tape, x, attention(tape, h, enc_h, layer.cross_attn, prefix.batch, cfg.n_heads, cross_mask));
    x = ff_with_adapter(tape, x, layer.ln_ff, layer.ff, adapters.empty() ? nullptr : &adapters[i],
                        cfg.adapter_input_post_layernorm);
  }
  Tensor h = ln_apply(tape, x, p.dec_final);
  return scale(tape, matmul_transposed(tape, h, p.tok_emb), 1.0f / std::sqrt(static_cast<float>(cfg.d_model)));
}

}  // namespace hyperdec
