// SPDX-License-Identifier: Apache-2.0
#include "hyperdec/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "tensor_impl.hpp"

namespace hyperdec {

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

namespace {

void check_extents(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have rank >= 1, got []");
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  check_extents(shape);
  auto impl = std::make_shared<Impl>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
  check_extents(shape);
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                     " values, got " + std::to_string(values.size()));
  }
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) { return from({1}, {value}, requires_grad); }

Tensor::Impl& Tensor::impl() const {
  if (!impl_) throw TapeError("use of an undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }
std::size_t Tensor::numel() const { return impl().data.size(); }
std::size_t Tensor::cols() const { return impl().shape.back(); }
std::size_t Tensor::rows() const { return numel() / cols(); }

std::span<float> Tensor::data() { return impl().data; }
std::span<const float> Tensor::data() const { return impl().data; }

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() needs a single-element tensor, got " + shape_str(shape()));
  return impl().data[0];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }
void Tensor::set_requires_grad(bool value) {
  impl().requires_grad = value;
  if (!value) impl().grad.clear();
}

bool Tensor::has_grad() const { return !impl().grad.empty(); }

std::span<const float> Tensor::grad() const {
  if (impl().grad.empty()) throw TapeError("tensor " + shape_str(shape()) + " has no gradient");
  return impl().grad;
}

std::span<float> Tensor::grad_mut() {
  if (impl().grad.empty()) throw TapeError("tensor " + shape_str(shape()) + " has no gradient");
  return impl().grad;
}

void Tensor::zero_grad() {
  auto& im = impl();
  if (!im.requires_grad) return;
  im.grad.assign(im.data.size(), 0.0f);
}

void Tensor::clear_grad() { impl().grad.clear(); }

Tensor Tensor::clone() const {
  auto copy = std::make_shared<Impl>();
  copy->shape = impl().shape;
  copy->data = impl().data;
  return Tensor(std::move(copy));
}

std::uint64_t Tensor::tape_id() const { return impl().tape_id; }
std::size_t Tensor::node_index() const { return impl().node; }

std::span<float> accumulate_target(const Tensor& t) {
  auto& im = t.impl();
  if (!im.requires_grad) throw TapeError("gradient requested for a tensor that does not require it");
  if (im.grad.empty()) im.grad.assign(im.data.size(), 0.0f);
  return im.grad;
}

}  // namespace hyperdec
