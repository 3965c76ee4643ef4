// SPDX-License-Identifier: Apache-2.0
#pragma once

// Value-level tensor kernels. No broadcasting: elementwise operands must have
// identical shapes; use expand() to replicate along an axis explicitly.

#include <cstddef>
#include <vector>

#include "spanlab/tensor.hpp"

namespace spanlab::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

/// Rank-2 (m x k)(k x n), or batched rank-3 (B x m x k)(B x k x n).
Tensor matmul(const Tensor& a, const Tensor& b);
/// Swaps the last two axes of a rank-2 or rank-3 tensor.
Tensor transpose(const Tensor& a);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);

// Reductions drop the reduced axis.
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a, std::size_t axis);
Tensor max(const Tensor& a, std::size_t axis);
/// Flat index into `a` of the first maximal element along each reduced lane.
std::vector<std::size_t> argmax_flat(const Tensor& a, std::size_t axis);
Tensor logsumexp(const Tensor& a, std::size_t axis);
double sum_all(const Tensor& a);

Tensor concat(const std::vector<const Tensor*>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
/// Inserts a new axis at `axis` holding `count` copies.
Tensor expand(const Tensor& a, std::size_t axis, std::size_t count);
Tensor reshape(const Tensor& a, Shape shape);

/// Row gather on a rank-3 tensor: out[b, j, :] = a[b, index[b][j], :].
Tensor gather_rows(const Tensor& a, const std::vector<std::vector<std::size_t>>& index);
/// Scatter-add adjoint of gather_rows back into a tensor of shape `shape`.
Tensor scatter_rows(const Tensor& g, const std::vector<std::vector<std::size_t>>& index,
                    const Shape& shape);

/// Order of the rows of an (n x m) block sorted lexicographically by value,
/// ties broken toward the lower row index.
std::vector<std::size_t> canonical_row_order(std::span<const double> rows,
                                             std::size_t n, std::size_t m);

/// Sum over axis 1 of a (B x n x m) tensor, accumulating each set's rows in
/// canonical (value-sorted) order with pairwise tree summation. The result is
/// bit-identical under any reordering of the rows within a set.
Tensor set_sum(const Tensor& a);

}  // namespace spanlab::ops
