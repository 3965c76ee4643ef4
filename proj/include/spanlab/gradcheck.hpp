// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <vector>

#include "spanlab/autodiff.hpp"

namespace spanlab {

/// Scalar objective built on a tape from one leaf.
using ScalarFn = std::function<Var(Tape&, const Var&)>;
/// Scalar objective built on a tape from several leaves.
using MultiScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_leaf = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

/// max_k |g_k - ĝ_k| / max(1e-8, |g_k| + |ĝ_k|), ĝ the central difference
/// with step h. Throws DomainError if f is non-finite at any probe.
double finite_difference_check(const ScalarFn& f, const Tensor& x, double h = 1e-5);

GradCheckReport finite_difference_check(const MultiScalarFn& f,
                                        const std::vector<Tensor>& xs, double h = 1e-5);

}  // namespace spanlab
