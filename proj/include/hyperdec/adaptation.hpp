// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hyperdec/adapter.hpp"
#include "hyperdec/random.hpp"
#include "hyperdec/tape.hpp"
#include "hyperdec/tensor.hpp"

namespace hyperdec {

/// Two d x d linear layers with a ReLU between them.
struct PoolingMlp {
  Tensor w1, b1, w2, b2;
};

/// h = ReLU(W_0 [e; l_i] + b_0), then one linear head per adapter array.
struct HypernetCore {
  Tensor w0, b0;  // [in x b], [b]
  Tensor w1, b1;  // W_u head: [b x a*d], [a*d]
  Tensor w2, b2;  // W_d head: [b x d*a], [d*a]
  Tensor w3, b3;  // b_u head: [b x d], [d]
  Tensor w4, b4;  // b_d head: [b x a], [a]
  std::size_t d = 0, a = 0;

  std::size_t input_dim() const { return w0.shape()[0]; }
  std::size_t bottleneck() const { return w0.shape()[1]; }
  /// Sets W_1..W_4 and b_1..b_4 to zero.
  void zero_heads();
};

/// Input-conditioned generator: pooled encoder output -> per-layer adapters.
struct HyperdecoderState {
  PoolingMlp mlp;
  HypernetCore hyper;
  Tensor layer_embeds;  // [layers x e_l]
};

/// Task-conditioned generator for one side of the model.
struct TaskHypernetState {
  Tensor task_embeds;  // [tasks x e_t]
  Tensor layer_embeds;  // [layers x e_l]
  HypernetCore hyper;
};

/// Mean of each example's unmasked rows, optionally through the MLP.
/// enc_h [batch x n x d] -> [batch x d].
Tensor pool_embed(Tape& tape, const Tensor& enc_h, std::span<const std::uint8_t> mask, std::size_t batch,
                  const PoolingMlp& mlp, bool use_mlp);

/// Adapters for one layer from conditioning rows e [batch x in-e_l] and the
/// layer embedding l_i [e_l]. A rank-1 e yields one shared adapter; a rank-2 e
/// yields per-example adapters.
AdapterParams hypernet_generate(Tape& tape, const Tensor& e, const Tensor& l_i, const HypernetCore& core);

/// Row i of a layer-embedding table as an [e_l] tensor on the tape.
Tensor layer_embedding(Tape& tape, const Tensor& table, std::size_t i);

/// One per-example adapter per layer, conditioned on the pooled encoder output.
std::vector<AdapterParams> generate_decoder_adapters(Tape& tape, const Tensor& enc_h,
                                                     std::span<const std::uint8_t> mask, std::size_t batch,
                                                     const HyperdecoderState& state, bool use_mlp);

/// Adapters for every layer from a single task embedding. Throws IndexError
/// for an unknown task id.
std::vector<AdapterParams> task_hypernet_generate(Tape& tape, std::size_t task_id, const TaskHypernetState& state);
/// Per-example task conditioning for batches that mix tasks.
std::vector<AdapterParams> task_hypernet_generate(Tape& tape, std::span<const std::size_t> task_ids,
                                                  const TaskHypernetState& state);
/// Out-of-domain conditioning on the mean of the learnt task embeddings.
std::vector<AdapterParams> task_hypernet_generate_mean(Tape& tape, const TaskHypernetState& state);

PoolingMlp init_pooling_mlp(std::size_t d, Rng& rng);
/// W_0 fan-in uniform; W_u and W_d heads scaled so generated weights match
/// the variance of init_adapter for a unit-norm conditioning input; W_3, W_4
/// and every head bias zero so generated biases start at exactly 0.
HypernetCore init_hypernet_core(std::size_t input_dim, std::size_t bottleneck, std::size_t d, std::size_t a,
                                Rng& rng);
HyperdecoderState init_hyper(std::size_t d, std::size_t a, std::size_t bottleneck, std::size_t layer_embed_dim,
                             std::size_t layers, Rng& rng);
TaskHypernetState init_task_hyper(std::size_t tasks, std::size_t task_embed_dim, std::size_t d, std::size_t a,
                                  std::size_t bottleneck, std::size_t layer_embed_dim, std::size_t layers, Rng& rng);

inline constexpr float kLayerEmbedScale = 0.01f;

}  // namespace hyperdec
