// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "hyperdec/tensor.hpp"

namespace hyperdec {

/// Ordered record of primitive operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so inputs always precede the node
/// that consumes them. backward() walks the list once in reverse.
///
/// Intermediate gradients are reset at the start of every backward pass;
/// leaf gradients (parameters) accumulate until zero_grad() is called, so two
/// backward passes over the same tape give exactly twice the leaf gradient of
/// a linear graph.
class Tape {
 public:
  /// Receives the gradient of the node's output.
  using BackwardFn = std::function<void(std::span<const float>)>;

  explicit Tape(bool recording = true);
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  /// A tape that never records; forward passes run without graph overhead.
  static Tape no_grad() { return Tape(false); }

  bool recording() const noexcept { return recording_; }
  std::uint64_t id() const noexcept { return id_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// True when the op producing a result from `inputs` must be recorded.
  bool should_record(std::initializer_list<const Tensor*> inputs) const;

  /// Attaches `output` to a new node. `rule` accumulates into whichever of
  /// the op's inputs require gradients.
  void record(Tensor& output, BackwardFn rule);

  void backward(const Tensor& loss);

  /// Drops every node; tensors created on this tape become leaves.
  void reset();

 private:
  struct Node {
    Tensor output;
    BackwardFn rule;
  };

  bool recording_ = true;
  std::uint64_t id_ = 0;
  std::vector<Node> nodes_;
};

}  // namespace hyperdec
