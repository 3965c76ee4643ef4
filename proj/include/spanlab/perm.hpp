// SPDX-License-Identifier: Apache-2.0
#pragma once

// Differentiable permutation machinery: temperature Sinkhorn normalization,
// the permutation network, and exact/greedy hard matchings.

#include <cstddef>
#include <vector>

#include "spanlab/autodiff.hpp"
#include "spanlab/nn.hpp"

namespace spanlab::perm {

/// Nonnegative square matrix whose rows and columns each sum to one.
struct DoublyStochastic {
  Tensor matrix;

  std::size_t size() const { return matrix.rank() ? matrix.dim(0) : 0; }
  /// max over rows and columns of |sum - 1|.
  double max_marginal_error() const;
  bool valid(double tol = 1e-6) const;
};

/// A permutation of n items. source[i] is the input row that lands in output
/// row i when the permutation is applied to a set; the lifted 0/1 matrix M has
/// M[source[i]][i] = 1 so that apply_soft(M, X) = Mᵀ X reindexes rows.
struct PermMatrix {
  std::vector<std::size_t> source;

  std::size_t size() const { return source.size(); }
  bool is_bijection() const;
  Tensor to_matrix() const;
  PermMatrix inverse() const;
  static PermMatrix identity(std::size_t n);
};

/// exp(logits / tau) alternately row- then column-normalized `iterations`
/// times, computed in log space and fully unrolled on the tape. Accepts a
/// single (n x n) matrix or a (B x n x n) batch.
Var sinkhorn(const Var& logits, double temperature, int iterations);
DoublyStochastic sinkhorn(const Tensor& logits, double temperature, int iterations);

/// PN(X) = sinkhorn(relu(X W), tau, l) with W of shape (d x n).
struct PermutationNetwork {
  std::string name = "pn";
  std::size_t dim = 0;
  std::size_t set_size = 0;
  double temperature = 0.1;
  int iterations = 100;

  void init(nn::Params& params, Rng& rng) const;
  /// (n x d) or (B x n x d) sets -> (n x n) or (B x n x n) soft permutations.
  Var forward(const nn::BoundParams& p, const Var& sets) const;
};

DoublyStochastic pn_forward(const PermutationNetwork& pn, const Tensor& w, const Tensor& x);

/// Pᵀ X for (n x n, n x m) or batched (B x n x n, B x n x m) operands. Each
/// output entry is accumulated over set elements in a canonical value-sorted
/// order, so relabelling the elements consistently in P and X does not change
/// a single bit of the result.
Var apply_soft(const Var& p, const Var& x);
Tensor apply_soft(const Tensor& p, const Tensor& x);

/// Direct row reindexing: out[i] = x[perm.source[i]].
Tensor apply_hard(const PermMatrix& perm, const Tensor& x);

/// Exact maximum-weight assignment (Hungarian, O(n^3)) over the lifted matrix,
/// ties broken toward the lexicographically smallest `source`.
PermMatrix hard_match(const Tensor& score);

/// Repeatedly fixes the largest remaining entry (lowest index on ties).
PermMatrix greedy_round(const Tensor& p);

}  // namespace spanlab::perm
