// SPDX-License-Identifier: Apache-2.0
#include "hyperdec/tape.hpp"

#include <atomic>

#include "tensor_impl.hpp"

namespace hyperdec {

namespace {

std::uint64_t next_tape_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

}  // namespace

Tape::Tape(bool recording) : recording_(recording), id_(next_tape_id()) {}

bool Tape::should_record(std::initializer_list<const Tensor*> inputs) const {
  if (!recording_) return false;
  for (const Tensor* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

void Tape::record(Tensor& output, BackwardFn rule) {
  auto& im = output.impl();
  im.requires_grad = true;
  im.tape_id = id_;
  im.node = nodes_.size();
  nodes_.push_back(Node{output, std::move(rule)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw TapeError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (loss.tape_id() != id_ || loss.node_index() >= nodes_.size() ||
      !nodes_[loss.node_index()].output.same_storage(loss)) {
    throw TapeError("loss was not recorded on this tape");
  }
  for (auto& node : nodes_) {
    auto& im = node.output.impl();
    im.grad.assign(im.data.size(), 0.0f);
  }
  loss.impl().grad[0] = 1.0f;
  for (std::size_t i = loss.node_index() + 1; i-- > 0;) {
    auto& node = nodes_[i];
    node.rule(node.output.impl().grad);
  }
}

void Tape::reset() {
  nodes_.clear();
  id_ = next_tape_id();
}

}  // namespace hyperdec
