#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "clner/num/random.hpp"
#include "clner/num/tensor.hpp"

// Differentiable primitives. Matrix ops take 2-D tensors; elementwise ops
// accept any shape. Shape errors throw std::invalid_argument naming both
// operand shapes.
namespace clner::num {

Tensor matmul(const Tensor& a, const Tensor& b);

// b may equal a's shape, or be a row vector ([c] or [1, c]) added to each row.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

Tensor sigmoid(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor tanh(const Tensor& a);

// axis 0: normalize each column; axis 1: normalize each row.
Tensor softmax(const Tensor& a, int axis);
Tensor log_softmax(const Tensor& a, int axis);

Tensor transpose(const Tensor& a);
Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end);
Tensor concat(const std::vector<Tensor>& parts, int axis);

Tensor sum(const Tensor& a);
// Reduces one axis of a matrix, keeping it as size 1.
Tensor sum(const Tensor& a, int axis);
Tensor mean(const Tensor& a);

// Inverted dropout: kept activations are scaled by 1 / (1 - rate).
Tensor dropout(const Tensor& a, double rate, bool train, Rng& rng);

// Rows of `table` selected by `ids`.
Tensor embedding(const Tensor& table, std::span<const std::size_t> ids);

// Row-wise normalization with learned [1, c] gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// out[r] = a[r, index[r]].
Tensor pick(const Tensor& a, std::span<const std::size_t> index);

}  // namespace clner::num
