// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "hyperdec/tensor.hpp"

namespace hyperdec {

struct Tensor::Impl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;
  bool requires_grad = false;
  std::uint64_t tape_id = 0;
  std::size_t node = 0;
};

}  // namespace hyperdec
