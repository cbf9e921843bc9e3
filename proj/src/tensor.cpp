#include "ccl/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace ccl {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 0) throw DimensionError("negative extent in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill)
    : shape_(std::move(shape)),
      storage_(std::make_shared<std::vector<T>>(static_cast<std::size_t>(shape_numel(shape_)), fill)) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data)
    : shape_(std::move(shape)), storage_(std::make_shared<std::vector<T>>(std::move(data))) {
  if (shape_numel(shape_) != static_cast<Index>(storage_->size())) {
    throw DimensionError("shape " + shape_str(shape_) + " does not match " +
                         std::to_string(storage_->size()) + " values");
  }
}

template <typename T>
Index Tensor<T>::dim(Index axis) const {
  const Index r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
  }
  return shape_[static_cast<std::size_t>(axis)];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
  return (*storage_)[0];
}

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(shape_, std::vector<T>(*storage_));
}

template <typename T>
bool Tensor<T>::all_finite() const {
  for (T v : *storage_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.ptr(), b.ptr(), sizeof(T) * static_cast<std::size_t>(a.numel())) == 0;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  T m = 0;
  for (Index i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  std::vector<To> out(static_cast<std::size_t>(t.numel()));
  for (Index i = 0; i < t.numel(); ++i) out[static_cast<std::size_t>(i)] = static_cast<To>(t[i]);
  return Tensor<To>(t.shape(), std::move(out));
}

template class Tensor<float>;
template class Tensor<double>;
template bool bit_equal(const Tensor<float>&, const Tensor<float>&);
template bool bit_equal(const Tensor<double>&, const Tensor<double>&);
template float max_abs_diff(const Tensor<float>&, const Tensor<float>&);
template double max_abs_diff(const Tensor<double>&, const Tensor<double>&);
template Tensor<float> cast(const Tensor<double>&);
template Tensor<double> cast(const Tensor<float>&);
template Tensor<float> cast(const Tensor<float>&);
template Tensor<double> cast(const Tensor<double>&);

}  // namespace ccl
