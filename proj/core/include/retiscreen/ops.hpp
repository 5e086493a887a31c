#pragma once

#include <cstddef>
#include <span>

#include "retiscreen/tensor.hpp"

// Differentiable operations on BasicTensor. Every op is instantiated for float
// (used by the models) and double (used by gradient checks).
namespace retiscreen::dl {

/// 2-D cross-correlation. input is N×C×H×W, kernel is O×C×KH×KW; output is
/// N×O×OH×OW with OH = (H + 2·padding − KH)/stride + 1.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, std::size_t stride = 1,
                      std::size_t padding = 0);

/// Adds bias[c] to every element of channel c of an N×C×H×W tensor.
template <typename T>
BasicTensor<T> add_channel_bias(const BasicTensor<T>& input, const BasicTensor<T>& bias);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input);

/// Non-overlapping max pooling (window = stride). Ties go to the first element
/// in row-major window order.
template <typename T>
BasicTensor<T> max_pool2d(const BasicTensor<T>& input, std::size_t window = 2);

/// N×C×H×W → N×C spatial mean.
template <typename T>
BasicTensor<T> global_average_pool(const BasicTensor<T>& input);

/// y = x·Wᵀ + b for x N×I, W O×I, b O.
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& input, const BasicTensor<T>& weight, const BasicTensor<T>& bias);

/// Row-wise softmax of an N×K tensor.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits);

/// Weighted mean cross-entropy of softmax(logits) against class indices:
/// Σ wᵢ·(−log pᵢ[targetᵢ]) / Σ wᵢ. Empty weights mean all ones.
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const int> targets,
                             std::span<const double> sample_weights = {});

/// Sum of all elements, as a 1-element tensor.
template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& input);

/// Σ over rows r and columns k of x[r,k]·coefficients[k] for an N×K tensor.
template <typename T>
BasicTensor<T> weighted_sum(const BasicTensor<T>& input, std::span<const T> coefficients);

}  // namespace retiscreen::dl
