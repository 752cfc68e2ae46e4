// SPDX-License-Identifier: Apache-2.0
#include "hyperdec/adapter.hpp"

#include <cmath>

#include "hyperdec/ops.hpp"

namespace hyperdec {

Tensor adapter_forward(Tape& tape, const Tensor& x, const AdapterParams& p) {
  const std::size_t d = p.model_dim();
  if (x.cols() != d) {
    throw ShapeError("adapter: input " + shape_str(x.shape()) + " does not end in model dim " + std::to_string(d));
  }
  if (!p.per_example) {
    Tensor h = relu(tape, add_bias(tape, matmul(tape, x, p.w_down), p.b_down));
    return add_bias(tape, matmul(tape, h, p.w_up), p.b_up);
  }
  Tensor h = relu(tape, add_grouped_bias(tape, grouped_matmul(tape, x, p.w_down), p.b_down));
  return add_grouped_bias(tape, grouped_matmul(tape, h, p.w_up), p.b_up);
}

AdapterParams init_adapter(std::size_t d, std::size_t a, Rng& rng) {
  // uniform on [-s, s] has variance s²/3
  AdapterParams p;
  p.w_down = uniform_tensor({d, a}, std::sqrt(3.0f / static_cast<float>(d)), rng);
  p.b_down = Tensor::zeros({a});
  p.w_up = uniform_tensor({a, d}, kAdapterUpScale * std::sqrt(3.0f / static_cast<float>(a)), rng);
  p.b_up = Tensor::zeros({d});
  return p;
}

AdapterParams zero_adapter(std::size_t d, std::size_t a) {
  return {Tensor::zeros({d, a}), Tensor::zeros({a}), Tensor::zeros({a, d}), Tensor::zeros({d}), false};
}

}  // namespace hyperdec
