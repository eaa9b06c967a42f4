#pragma once
// Dense row-major tensors and the reverse-mode tape that records operations
// on them.
//
// A Tensor is a shared handle: copies alias the same storage, which is what
// lets a Tape hold references to parameters and deliver gradients back to
// them. Use clone() for an independent copy.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fluiddiff {

enum class DType : std::uint8_t { Float32 = 0, Float64 = 1 };

template <typename T> constexpr DType dtype_of();
template <> constexpr DType dtype_of<float>() { return DType::Float32; }
template <> constexpr DType dtype_of<double>() { return DType::Float64; }

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when an operation would produce or consume non-finite values.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T& operator[](std::size_t i) { return impl_->data[i]; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }
  T item() const;

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  /// Gradient buffer; allocated (zeroed) on first access. Gradients are
  /// mutable through any handle to the same storage.
  std::span<T> grad() const;
  void zero_grad() const;

  /// Detached deep copy of the values (no grad, requires_grad off).
  Tensor clone() const;

  bool is_same(const Tensor& other) const { return impl_ == other.impl_; }

  /// True when every element is finite.
  bool all_finite() const;

 private:
  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

/// Ordered record of differentiable operations. Operations are appended in
/// execution order, so the list is topologically sorted by construction;
/// backward() replays it in reverse.
///
/// A tape created with recording=false is an inference context: operations
/// evaluate but nothing is stored.
template <typename T>
class Tape {
 public:
  struct Record {
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    std::function<void()> backward;
  };

  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  std::size_t size() const { return records_.size(); }

  /// True when an operation over these inputs must be recorded.
  bool needs_grad(std::initializer_list<const Tensor<T>*> inputs) const;

  void record(std::vector<Tensor<T>> inputs, Tensor<T> output, std::function<void()> backward);

  /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable tensor with
  /// requires_grad. Leaf gradients accumulate across calls; the caller resets
  /// them. The tape is consumed.
  void backward(const Tensor<T>& loss);

  void reset() { records_.clear(); }

 private:
  bool recording_;
  std::vector<Record> records_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace fluiddiff
