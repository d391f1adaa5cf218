#pragma once

// Reverse-mode differentiation over an explicit tape.
//
// Ops append a backward closure to the tape when recording is on and any
// input requires a gradient. backward() walks the tape in reverse, so each
// recorded op runs exactly once. Gradients of intermediate tensors are reset
// at the start of every backward(); gradients of leaf tensors (parameters)
// accumulate across calls until zero_grad().
//
// Broadcasting is limited to leading dimensions: a second operand whose
// shape is a suffix of the first is repeated over the leading axes.

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <vector>

#include "twopass/corpus.hpp"
#include "twopass/kernels.hpp"
#include "twopass/tensor.hpp"

namespace twopass {

/// 1 = masked. Shared so that backward closures can keep it alive.
using Mask = std::shared_ptr<const std::vector<std::uint8_t>>;

template <typename T>
class Tape {
 public:
  explicit Tape(bool record = true, kernels::Backend backend = kernels::Backend::parallel)
      : record_(record), backend_(backend) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  kernels::Backend backend() const { return backend_; }
  std::size_t size() const { return ops_.size(); }
  void clear();

  /// Seeds d(loss)/d(loss) = 1 and propagates. `loss` must hold one value.
  void backward(const Tensor<T>& loss);

  /// [..., m, k] x [k, n] -> [..., m, n]; or batched when b has the same
  /// leading dims as a. transpose_b multiplies by bᵀ instead.
  Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);
  /// Swaps the last two axes.
  Tensor<T> transpose(const Tensor<T>& a);
  Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
  Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
  Tensor<T> scale(const Tensor<T>& a, T factor);
  Tensor<T> relu(const Tensor<T>& a);
  Tensor<T> softmax(const Tensor<T>& a);
  Tensor<T> log_softmax(const Tensor<T>& a);
  Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                       T eps = T(1e-6));
  /// Rows of `table` [V, H] gathered by `ids`; result shape leading + [H].
  Tensor<T> embedding(const Tensor<T>& table, std::span<const TokenId> ids, Shape leading);
  /// Rows of `a` viewed as [N, last] picked by index; result [rows.size(), last].
  Tensor<T> gather_rows(const Tensor<T>& a, std::span<const std::size_t> rows);
  /// Concatenation along the last axis.
  Tensor<T> concat(std::span<const Tensor<T>> parts);
  /// [start, start+length) of the last axis.
  Tensor<T> slice(const Tensor<T>& a, std::size_t start, std::size_t length);
  /// Replaces masked entries with `value`. The mask covers a's shape or a suffix of it.
  Tensor<T> masked_fill(const Tensor<T>& a, const Mask& mask, T value);
  Tensor<T> reshape(const Tensor<T>& a, Shape shape);
  Tensor<T> sum(const Tensor<T>& a);
  /// Σ_i weights[i] · a[i, targets[i]] over the rows of a viewed as [N, V].
  Tensor<T> pick_sum(const Tensor<T>& a, std::span<const TokenId> targets,
                     std::span<const T> weights);
  /// Inverted dropout. Identity when rate is 0.
  Tensor<T> dropout(const Tensor<T>& a, T rate, std::mt19937_64& rng);

 private:
  bool wants_grad(std::initializer_list<const Tensor<T>*> inputs) const;
  Tensor<T> output(Shape shape, bool grad);
  void record(const Tensor<T>& out, std::function<void()> fn);

  std::vector<std::function<void()>> ops_;
  std::vector<Tensor<T>> outputs_;
  bool record_;
  kernels::Backend backend_;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace twopass
