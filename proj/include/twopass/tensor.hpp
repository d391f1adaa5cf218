#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "twopass/error.hpp"

namespace twopass {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

enum class Precision { f32, f64 };

/// Reference-counted dense array with an optional gradient buffer. Copies
/// share storage; parameters are Tensors held by the model and referenced by
/// every op that uses them.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.impl_ = std::make_shared<Storage>();
    t.impl_->values.assign(shape_numel(shape), T(0));
    t.impl_->shape = std::move(shape);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (values.size() != shape_numel(shape)) {
      throw ShapeError("Tensor::from: " + std::to_string(values.size()) + " values for shape " +
                       shape_string(shape));
    }
    Tensor t;
    t.impl_ = std::make_shared<Storage>();
    t.impl_->shape = std::move(shape);
    t.impl_->values = std::move(values);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  explicit operator bool() const { return impl_ != nullptr; }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  /// Size of `axis`; negative axes count from the end.
  std::size_t dim(int axis) const {
    const int r = static_cast<int>(rank());
    const int a = axis < 0 ? r + axis : axis;
    if (a < 0 || a >= r) throw ShapeError("dim: axis out of range for " + shape_string(shape()));
    return impl_->shape[a];
  }
  std::size_t numel() const { return impl_->values.size(); }

  std::span<T> values() { return impl_->values; }
  std::span<const T> values() const { return impl_->values; }
  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor is not a scalar " + shape_string(shape()));
    return impl_->values[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient buffer, zero-initialised on first access.
  std::span<T> grad() {
    if (impl_->grad.empty()) impl_->grad.assign(numel(), T(0));
    return impl_->grad;
  }
  std::span<const T> grad() const { return impl_->grad; }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }

  bool shares_storage_with(const Tensor& other) const { return impl_ == other.impl_; }

  /// Deep copy of the values; the copy has no gradient.
  Tensor clone() const { return from(shape(), impl_->values, requires_grad()); }

 private:
  struct Storage {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> impl_;
};

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParameterList = std::vector<NamedParameter<T>>;

}  // namespace twopass
