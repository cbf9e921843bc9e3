#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ccl {

using Index = std::int64_t;
using Shape = std::vector<Index>;

// Raised when tensor extents do not line up.
class DimensionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a caller violates a precondition that is not a shape mismatch.
class ContractError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a forward result contains NaN or Inf.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string shape_str(const Shape& shape);
Index shape_numel(const Shape& shape);

// Dense row-major tensor. Storage is shared between copies and reshapes;
// values are treated as immutable once a tensor has been handed to the
// autograd graph.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : storage_(std::make_shared<std::vector<T>>()) {}
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index numel() const { return static_cast<Index>(storage_->size()); }
  // Negative axes count from the back.
  Index dim(Index axis) const;

  std::span<T> data() { return {storage_->data(), storage_->size()}; }
  std::span<const T> data() const { return {storage_->data(), storage_->size()}; }
  T* ptr() { return storage_->data(); }
  const T* ptr() const { return storage_->data(); }

  T& operator[](Index i) { return (*storage_)[static_cast<std::size_t>(i)]; }
  const T& operator[](Index i) const { return (*storage_)[static_cast<std::size_t>(i)]; }

  T item() const;

  // Metadata-only view sharing storage.
  Tensor reshape(Shape shape) const;
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return storage_ == other.storage_; }
  bool all_finite() const;

 private:
  Shape shape_;
  std::shared_ptr<std::vector<T>> storage_;
};

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t);

}  // namespace ccl
