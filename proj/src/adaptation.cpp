// SPDX-License-Identifier: Apache-2.0
#include "hyperdec/adaptation.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "hyperdec/ops.hpp"

namespace hyperdec {

void HypernetCore::zero_heads() {
  for (Tensor* t : {&w1, &b1, &w2, &b2, &w3, &b3, &w4, &b4}) std::ranges::fill(t->data(), 0.0f);
}

Tensor pool_embed(Tape& tape, const Tensor& enc_h, std::span<const std::uint8_t> mask, std::size_t batch,
                  const PoolingMlp& mlp, bool use_mlp) {
  Tensor e = mean_pool(tape, enc_h, mask, batch);
  if (!use_mlp) return e;
  Tensor h = relu(tape, add_bias(tape, matmul(tape, e, mlp.w1), mlp.b1));
  return add_bias(tape, matmul(tape, h, mlp.w2), mlp.b2);
}

AdapterParams hypernet_generate(Tape& tape, const Tensor& e, const Tensor& l_i, const HypernetCore& core) {
  const bool shared = e.rank() == 1;
  const std::size_t rows = shared ? 1 : e.shape()[0];
  if (e.rank() > 2 || e.cols() + l_i.numel() != core.input_dim()) {
    throw ShapeError("hypernet: conditioning " + shape_str(e.shape()) + " with layer embedding " +
                     shape_str(l_i.shape()) + " does not fit an input of " + std::to_string(core.input_dim()));
  }
  const std::size_t d = core.d, a = core.a;
  Tensor in = concat_cols(tape, shared ? reshape(tape, e, {1, e.numel()}) : e, broadcast_rows(tape, l_i, rows));
  Tensor h = relu(tape, add_bias(tape, matmul(tape, in, core.w0), core.b0));
  Tensor w_up = add_bias(tape, matmul(tape, h, core.w1), core.b1);
  Tensor w_down = add_bias(tape, matmul(tape, h, core.w2), core.b2);
  Tensor b_up = add_bias(tape, matmul(tape, h, core.w3), core.b3);
  Tensor b_down = add_bias(tape, matmul(tape, h, core.w4), core.b4);
  AdapterParams p;
  p.per_example = !shared;
  if (shared) {
    p.w_up = reshape(tape, w_up, {a, d});
    p.w_down = reshape(tape, w_down, {d, a});
    p.b_up = reshape(tape, b_up, {d});
    p.b_down = reshape(tape, b_down, {a});
  } else {
    p.w_up = reshape(tape, w_up, {rows, a, d});
    p.w_down = reshape(tape, w_down, {rows, d, a});
    p.b_up = b_up;
    p.b_down = b_down;
  }
  return p;
}

Tensor layer_embedding(Tape& tape, const Tensor& table, std::size_t i) {
  const TokenId id = static_cast<TokenId>(i);
  return reshape(tape, gather_rows(tape, table, std::span<const TokenId>(&id, 1)), {table.cols()});
}

std::vector<AdapterParams> generate_decoder_adapters(Tape& tape, const Tensor& enc_h,
                                                     std::span<const std::uint8_t> mask, std::size_t batch,
                                                     const HyperdecoderState& state, bool use_mlp) {
  Tensor e = pool_embed(tape, enc_h, mask, batch, state.mlp, use_mlp);
  std::vector<AdapterParams> out;
  for (std::size_t i = 0; i < state.layer_embeds.shape()[0]; ++i) {
    out.push_back(hypernet_generate(tape, e, layer_embedding(tape, state.layer_embeds, i), state.hyper));
  }
  return out;
}

namespace {

std::vector<AdapterParams> per_layer(Tape& tape, const Tensor& e, const TaskHypernetState& state) {
  std::vector<AdapterParams> out;
  for (std::size_t i = 0; i < state.layer_embeds.shape()[0]; ++i) {
    out.push_back(hypernet_generate(tape, e, layer_embedding(tape, state.layer_embeds, i), state.hyper));
  }
  return out;
}

void check_task(std::size_t task_id, const TaskHypernetState& state) {
  if (task_id >= state.task_embeds.shape()[0]) {
    throw IndexError("task hypernet: task id " + std::to_string(task_id) + " outside " +
                     std::to_string(state.task_embeds.shape()[0]) + " learnt tasks");
  }
}

}  // namespace

std::vector<AdapterParams> task_hypernet_generate(Tape& tape, std::size_t task_id, const TaskHypernetState& state) {
  check_task(task_id, state);
  return per_layer(tape, layer_embedding(tape, state.task_embeds, task_id), state);
}

std::vector<AdapterParams> task_hypernet_generate(Tape& tape, std::span<const std::size_t> task_ids,
                                                  const TaskHypernetState& state) {
  std::vector<TokenId> ids;
  for (auto t : task_ids) {
    check_task(t, state);
    ids.push_back(static_cast<TokenId>(t));
  }
  return per_layer(tape, gather_rows(tape, state.task_embeds, ids), state);
}

std::vector<AdapterParams> task_hypernet_generate_mean(Tape& tape, const TaskHypernetState& state) {
  const std::vector<std::uint8_t> all(state.task_embeds.shape()[0], 1);
  return per_layer(tape, mean_pool(tape, state.task_embeds, all), state);
}

namespace {

Tensor fan_in(Shape shape, Rng& rng) {
  const float bound = std::sqrt(3.0f / static_cast<float>(shape[0]));
  return uniform_tensor(std::move(shape), bound, rng);
}

// Uniform head whose product with h has the target variance per entry.
// With W_0 of variance 1/in and a unit-norm input, E|h|² = bottleneck / (2 in).
Tensor hyperfan_head(std::size_t in, std::size_t bottleneck, std::size_t cols, double target, Rng& rng) {
  const double head_var = target * 2.0 * static_cast<double>(in) / static_cast<double>(bottleneck);
  return uniform_tensor({bottleneck, cols}, static_cast<float>(std::sqrt(3.0 * head_var)), rng);
}

}  // namespace

PoolingMlp init_pooling_mlp(std::size_t d, Rng& rng) {
  return {fan_in({d, d}, rng), Tensor::zeros({d}), fan_in({d, d}, rng), Tensor::zeros({d})};
}

HypernetCore init_hypernet_core(std::size_t input_dim, std::size_t bottleneck, std::size_t d, std::size_t a,
                                Rng& rng) {
  HypernetCore c;
  c.d = d;
  c.a = a;
  c.w0 = fan_in({input_dim, bottleneck}, rng);
  c.b0 = Tensor::zeros({bottleneck});
  const double up_var = static_cast<double>(kAdapterUpScale) * kAdapterUpScale / static_cast<double>(a);
  c.w1 = hyperfan_head(input_dim, bottleneck, a * d, up_var, rng);
  c.b1 = Tensor::zeros({a * d});
  c.w2 = hyperfan_head(input_dim, bottleneck, d * a, 1.0 / static_cast<double>(d), rng);
  c.b2 = Tensor::zeros({d * a});
  c.w3 = Tensor::zeros({bottleneck, d});
  c.b3 = Tensor::zeros({d});
  c.w4 = Tensor::zeros({bottleneck, a});
  c.b4 = Tensor::zeros({a});
  return c;
}

HyperdecoderState init_hyper(std::size_t d, std::size_t a, std::size_t bottleneck, std::size_t layer_embed_dim,
                             std::size_t layers, Rng& rng) {
  HyperdecoderState s;
  s.mlp = init_pooling_mlp(d, rng);
  s.hyper = init_hypernet_core(d + layer_embed_dim, bottleneck, d, a, rng);
  s.layer_embeds = normal_tensor({layers, layer_embed_dim}, kLayerEmbedScale, rng);
  return s;
}

TaskHypernetState init_task_hyper(std::size_t tasks, std::size_t task_embed_dim, std::size_t d, std::size_t a,
                                  std::size_t bottleneck, std::size_t layer_embed_dim, std::size_t layers, Rng& rng) {
  TaskHypernetState s;
  s.task_embeds = normal_tensor({tasks, task_embed_dim}, 1.0f / std::sqrt(static_cast<float>(task_embed_dim)), rng);
  s.layer_embeds = normal_tensor({layers, layer_embed_dim}, kLayerEmbedScale, rng);
  s.hyper = init_hypernet_core(task_embed_dim + layer_embed_dim, bottleneck, d, a, rng);
  return s;
}

}  // namespace hyperdec
