// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hyperdec/tape.hpp"
#include "hyperdec/tensor.hpp"

// Differentiable primitives. Every op takes the tape it records on; when the
// tape is not recording, or no input requires a gradient, nothing is recorded.
//
// Tensors of rank > 2 are treated as a matrix of rows() x cols() wherever an
// op works row-wise.
namespace hyperdec {

inline constexpr float kLayerNormEps = 1e-6f;

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
/// a · bᵀ for a [.. x k] and b [n x k].
Tensor matmul_transposed(Tape& tape, const Tensor& a, const Tensor& b);
/// Per-group product: x [G*r x k] split into G contiguous row blocks, w [G x k x m].
Tensor grouped_matmul(Tape& tape, const Tensor& x, const Tensor& w);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, float factor);
/// x [.. x c] plus a bias of c values added to every row.
Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias);
/// x [G*r x c] plus bias [G x c]; group g's bias is added to its r rows.
Tensor add_grouped_bias(Tape& tape, const Tensor& x, const Tensor& bias);

/// max(0, x); the subgradient at 0 is 0.
Tensor relu(Tape& tape, const Tensor& x);
/// Row-wise softmax, stabilized by subtracting the row max.
Tensor softmax(Tape& tape, const Tensor& x);
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  float eps = kLayerNormEps);

/// Mean negative log-likelihood over positions whose target is not
/// `ignore_id`. Returns 0 (with zero gradient) when every position is ignored.
Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, std::span<const TokenId> targets,
                             TokenId ignore_id);

/// Masked mean of each group of rows: x [G*n x d], mask of G*n flags (nonzero keeps
/// the row) -> [G x d]. Throws DegenerateInputError when a group keeps no rows.
Tensor mean_pool(Tape& tape, const Tensor& x, std::span<const std::uint8_t> mask, std::size_t groups);
/// Single-sequence form: x [n x d] -> [d].
Tensor mean_pool(Tape& tape, const Tensor& x, std::span<const std::uint8_t> mask);

/// Row lookup: table [V x d], ids -> [ids.size() x d]. Gradients scatter-add.
Tensor gather_rows(Tape& tape, const Tensor& table, std::span<const TokenId> ids);
/// [r x p] ++ [r x q] -> [r x (p+q)].
Tensor concat_cols(Tape& tape, const Tensor& a, const Tensor& b);
/// Repeats a vector of c values into [rows x c].
Tensor broadcast_rows(Tape& tape, const Tensor& v, std::size_t rows);
Tensor reshape(Tape& tape, const Tensor& x, Shape shape);
Tensor sum(Tape& tape, const Tensor& x);

struct AttentionMask {
  /// batch * n_keys flags, nonzero = visible. Empty means every key is visible.
  std::vector<std::uint8_t> key_valid;
  /// Query i may only see keys j <= i (requires n_queries == n_keys).
  bool causal = false;
};

/// Multi-head scaled dot-product attention without projections.
/// q [B*nq x D], k and v [B*nk x D]; heads split D evenly. Returns [B*nq x D]
/// with heads concatenated. Every query row must see at least one key.
Tensor attention_core(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch,
                      std::size_t heads, const AttentionMask& mask);

/// The attention weights attention_core would use, laid out [B][H][nq][nk].
std::vector<float> attention_weights(const Tensor& q, const Tensor& k, std::size_t batch, std::size_t heads,
                                     const AttentionMask& mask);

}  // namespace hyperdec
