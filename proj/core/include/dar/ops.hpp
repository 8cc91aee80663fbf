#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "dar/tensor.hpp"

// Differentiable operations. Shapes must match exactly; the only implicit
// broadcast is a bias vector added along the last axis (add_bias) or per
// channel inside conv2d. Everything else goes through explicit ops such as
// repeat_batch.

namespace dar {

/// [m×k]·[k×n] -> [m×n], or batched [B×m×k]·[B×k×n] -> [B×m×n].
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// Swaps the last two axes of a 2-D or 3-D tensor.
template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x);

/// Cross-correlation. x is [C×H×W] or [B×C×H×W]; kernels [O×C×k×k]; bias
/// [O] or undefined.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& kernels,
                      const BasicTensor<T>& bias, std::size_t stride, std::size_t padding);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);

/// Max pooling over the last two axes. Ties resolve to the first maximum in
/// row-major window order.
template <typename T>
BasicTensor<T> maxpool2d(const BasicTensor<T>& x, std::size_t window, std::size_t stride);

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis);

/// Mean over the batch of -log softmax(logits)[label], evaluated with
/// max-subtracted log-sum-exp. Optional per-example weights multiply each
/// term before the batch mean.
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const std::int32_t> labels,
                             std::span<const T> weights = {});

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor);

/// x[..., n] + bias[n].
template <typename T>
BasicTensor<T> add_bias(const BasicTensor<T>& x, const BasicTensor<T>& bias);

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);

/// General axis permutation: out.shape[i] = x.shape[axes[i]].
template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<std::size_t>& axes);

/// Mean over one axis (the axis is removed).
template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x, std::size_t axis);

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x);

/// Sum of absolute values (L1 norm).
template <typename T>
BasicTensor<T> abs_sum(const BasicTensor<T>& x);

/// Sum of squares.
template <typename T>
BasicTensor<T> square_sum(const BasicTensor<T>& x);

/// Stacks `batch` copies of x along a new leading axis.
template <typename T>
BasicTensor<T> repeat_batch(const BasicTensor<T>& x, std::size_t batch);

/// out[b] = x[b, index[b]] for a [B×C] input.
template <typename T>
BasicTensor<T> pick(const BasicTensor<T>& x, std::span<const std::int32_t> index);

}  // namespace dar
