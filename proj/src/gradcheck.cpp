// SPDX-License-Identifier: Apache-2.0
#include "spanlab/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace spanlab {

namespace {

double evaluate(const MultiScalarFn& f, const std::vector<Tensor>& xs) {
  Tape tape(false);
  std::vector<Var> leaves;
  leaves.reserve(xs.size());
  for (const Tensor& x : xs) leaves.push_back(tape.constant(x));
  const double v = f(tape, leaves).value().item();
  if (!std::isfinite(v)) throw DomainError("gradcheck: objective is not finite");
  return v;
}

}  // namespace

GradCheckReport finite_difference_check(const MultiScalarFn& f,
                                        const std::vector<Tensor>& xs, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("gradcheck: step must be positive");

  Tape tape;
  std::vector<Var> leaves;
  for (const Tensor& x : xs) leaves.push_back(tape.leaf(x));
  const Var loss = f(tape, leaves);
  if (!std::isfinite(loss.value().item())) {
    throw DomainError("gradcheck: objective is not finite");
  }
  const Gradients grads = tape.backward(loss);

  GradCheckReport report;
  std::vector<Tensor> probe = xs;
  for (std::size_t l = 0; l < xs.size(); ++l) {
    const Tensor& g = grads.at(leaves[l]);
    for (std::size_t k = 0; k < xs[l].size(); ++k) {
      const double orig = probe[l][k];
      probe[l][k] = orig + h;
      const double up = evaluate(f, probe);
      probe[l][k] = orig - h;
      const double down = evaluate(f, probe);
      probe[l][k] = orig;

      const double numeric = (up - down) / (2.0 * h);
      const double err =
          std::abs(g[k] - numeric) / std::max(1e-8, std::abs(g[k]) + std::abs(numeric));
      ++report.checked;
      if (err > report.max_rel_error || report.checked == 1) {
        report.max_rel_error = err;
        report.worst_leaf = l;
        report.worst_index = k;
        report.analytic = g[k];
        report.numeric = numeric;
      }
    }
  }
  return report;
}

double finite_difference_check(const ScalarFn& f, const Tensor& x, double h) {
  MultiScalarFn wrapped = [&f](Tape& t, const std::vector<Var>& v) { return f(t, v[0]); };
  return finite_difference_check(wrapped, std::vector<Tensor>{x}, h).max_rel_error;
}

}  // namespace spanlab
