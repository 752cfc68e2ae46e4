// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hyperdec {

using Shape = std::vector<std::size_t>;
using TokenId = std::int32_t;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Raised when operand extents disagree. Messages always name the shapes involved.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Input that has no meaningful result, e.g. a mean over zero rows.
class DegenerateInputError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Dense row-major f32 array with an optional gradient buffer.
///
/// Copies share storage (handle semantics, like a framework tensor); use
/// clone() for an independent deep copy. A tensor produced by a recorded
/// operation remembers which tape node created it.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  /// Extent of the last axis.
  std::size_t cols() const;
  /// Product of all leading extents.
  std::size_t rows() const;

  std::span<float> data();
  std::span<const float> data() const;
  float item() const;
  float at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  /// Gradient buffer; throws TapeError when none has been accumulated.
  std::span<const float> grad() const;
  std::span<float> grad_mut();
  /// Allocates (if needed) and zero-fills the gradient buffer. No-op when requires_grad is false.
  void zero_grad();
  void clear_grad();

  /// Deep copy of values only: detached, no gradient, not on any tape.
  Tensor clone() const;

  /// True when both handles refer to the same storage.
  bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

  std::uint64_t tape_id() const;
  std::size_t node_index() const;

 private:
  struct Impl;
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  Impl& impl() const;

  std::shared_ptr<Impl> impl_;

  friend class Tape;
  friend std::span<float> accumulate_target(const Tensor& t);
};

/// Gradient buffer of `t`, allocated as zeros on first use. Only valid for
/// tensors that require gradients; backward rules call this on their inputs.
std::span<float> accumulate_target(const Tensor& t);

}  // namespace hyperdec
