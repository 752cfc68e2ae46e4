// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "hyperdec/random.hpp"
#include "hyperdec/tape.hpp"
#include "hyperdec/tensor.hpp"

namespace hyperdec {

/// Adapter weights for one layer. Shared adapters hold W_d [d x a], b_d [a],
/// W_u [a x d], b_u [d]; per-example adapters carry a leading batch extent
/// on every array.
struct AdapterParams {
  Tensor w_down, b_down, w_up, b_up;
  bool per_example = false;

  std::size_t model_dim() const { return w_down.shape()[w_down.rank() - 2]; }
  std::size_t bottleneck() const { return w_down.shape().back(); }
};

/// W_u · ReLU(W_d · x + b_d) + b_u, row-wise. For per-example adapters the
/// rows of x are split into as many contiguous blocks as there are examples.
Tensor adapter_forward(Tape& tape, const Tensor& x, const AdapterParams& p);

inline constexpr float kAdapterUpScale = 0.001f;

/// Directly initialized adapter: W_d with fan-in variance 1/d, W_u with
/// variance kAdapterUpScale² / a, zero biases.
AdapterParams init_adapter(std::size_t d, std::size_t a, Rng& rng);
AdapterParams zero_adapter(std::size_t d, std::size_t a);

}  // namespace hyperdec
