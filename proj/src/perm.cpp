// SPDX-License-Identifier: Apache-2.0
#include "spanlab/perm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace spanlab::perm {

double DoublyStochastic::max_marginal_error() const {
  const std::size_t n = size();
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0, col = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      row += matrix.at(i, j);
      col += matrix.at(j, i);
    }
    worst = std::max({worst, std::abs(row - 1.0), std::abs(col - 1.0)});
  }
  return worst;
}

bool DoublyStochastic::valid(double tol) const {
  if (matrix.rank() != 2 || matrix.dim(0) != matrix.dim(1)) return false;
  for (double v : matrix.data()) {
    if (!(v >= 0.0) || !std::isfinite(v)) return false;
  }
  return max_marginal_error() <= tol;
}

bool PermMatrix::is_bijection() const {
  std::vector<bool> seen(source.size(), false);
  for (std::size_t s : source) {
    if (s >= source.size() || seen[s]) return false;
    seen[s] = true;
  }
  return true;
}

Tensor PermMatrix::to_matrix() const {
  const std::size_t n = source.size();
  Tensor m(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) m.at(source[i], i) = 1.0;
  return m;
}

PermMatrix PermMatrix::inverse() const {
  PermMatrix inv{std::vector<std::size_t>(source.size())};
  for (std::size_t i = 0; i < source.size(); ++i) inv.source[source[i]] = i;
  return inv;
}

PermMatrix PermMatrix::identity(std::size_t n) {
  PermMatrix p{std::vector<std::size_t>(n)};
  std::iota(p.source.begin(), p.source.end(), std::size_t{0});
  return p;
}

Var sinkhorn(const Var& logits, double temperature, int iterations) {
  const Tensor& v = logits.value();
  if (!(temperature > 0.0)) throw std::invalid_argument("sinkhorn: temperature must be > 0");
  if (iterations < 1) throw std::invalid_argument("sinkhorn: iterations must be >= 1");
  if (v.rank() != 2 && v.rank() != 3) {
    throw ShapeError("sinkhorn: expected (n x n) or (B x n x n), got " + shape_str(v.shape()));
  }
  const std::size_t row_axis = v.rank() - 1;
  const std::size_t col_axis = v.rank() - 2;
  const std::size_t n = v.dim(row_axis);
  if (n == 0 || v.dim(col_axis) != n) {
    throw ShapeError("sinkhorn: logits must be square and non-empty, got " +
                     shape_str(v.shape()));
  }
  if (!v.all_finite()) throw DomainError("sinkhorn: non-finite logits");

  Var log_p = ad::scale(logits, 1.0 / temperature);
  for (int it = 0; it < iterations; ++it) {
    log_p = ad::sub(log_p, ad::expand(ad::logsumexp(log_p, row_axis), row_axis, n));
    log_p = ad::sub(log_p, ad::expand(ad::logsumexp(log_p, col_axis), col_axis, n));
  }
  return ad::exp(log_p);
}

DoublyStochastic sinkhorn(const Tensor& logits, double temperature, int iterations) {
  Tape tape(false);
  return {sinkhorn(tape.constant(logits), temperature, iterations).value()};
}

void PermutationNetwork::init(nn::Params& params, Rng& rng) const {
  params[name + ".weight"] = nn::xavier_init(Shape{dim, set_size}, rng);
}

Var PermutationNetwork::forward(const nn::BoundParams& p, const Var& sets) const {
  const Tensor& x = sets.value();
  const bool batched = x.rank() == 3;
  if ((x.rank() != 2 && !batched) || x.dim(x.rank() - 2) != set_size ||
      x.dim(x.rank() - 1) != dim) {
    throw ShapeError("pn_forward: expected sets of " + std::to_string(set_size) + " x " +
                     std::to_string(dim) + ", got " + shape_str(x.shape()));
  }
  auto it = p.find(name + ".weight");
  if (it == p.end()) throw std::out_of_range("missing parameter '" + name + ".weight'");
  const std::size_t batch = batched ? x.dim(0) : 1;

  const Var flat = ad::reshape(sets, Shape{batch * set_size, dim});
  Var logits = ad::relu(ad::matmul(flat, it->second));
  logits = ad::reshape(logits, batched ? Shape{batch, set_size, set_size}
                                       : Shape{set_size, set_size});
  return sinkhorn(logits, temperature, iterations);
}

DoublyStochastic pn_forward(const PermutationNetwork& pn, const Tensor& w, const Tensor& x) {
  Tape tape(false);
  nn::BoundParams p{{pn.name + ".weight", tape.constant(w)}};
  return {pn.forward(p, tape.constant(x)).value()};
}

Var apply_soft(const Var& p, const Var& x) {
  const Tensor& pv = p.value();
  const Tensor& xv = x.value();
  const bool batched = pv.rank() == 3;
  const bool shapes_ok =
      (pv.rank() == 2 || batched) && xv.rank() == pv.rank() &&
      pv.dim(pv.rank() - 1) == pv.dim(pv.rank() - 2) &&
      xv.dim(xv.rank() - 2) == pv.dim(pv.rank() - 2) && (!batched || xv.dim(0) == pv.dim(0));
  if (!shapes_ok) throw ShapeError("apply_soft", pv.shape(), xv.shape());

  const std::size_t batch = batched ? pv.dim(0) : 1;
  const std::size_t n = pv.dim(pv.rank() - 1);
  const std::size_t m = xv.dim(xv.rank() - 1);

  // Sort the elements of each set by (x row, p row) so the reduction over
  // elements always runs in the same order.
  std::vector<std::vector<std::size_t>> order(batch);
  std::vector<double> keys(n * (m + n));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(xv.data().data() + (b * n + i) * m, m, keys.data() + i * (m + n));
      std::copy_n(pv.data().data() + (b * n + i) * n, n, keys.data() + i * (m + n) + m);
    }
    order[b] = ops::canonical_row_order(keys, n, m + n);
  }

  const Var p3 = batched ? p : ad::reshape(p, Shape{1, n, n});
  const Var x3 = batched ? x : ad::reshape(x, Shape{1, n, m});
  const Var ps = ad::gather_rows(p3, order);
  const Var xs = ad::gather_rows(x3, std::move(order));
  const Var out = ad::matmul(ad::transpose(ps), xs);
  return batched ? out : ad::reshape(out, Shape{n, m});
}

Tensor apply_soft(const Tensor& p, const Tensor& x) {
  Tape tape(false);
  return apply_soft(tape.constant(p), tape.constant(x)).value();
}

Tensor apply_hard(const PermMatrix& perm, const Tensor& x) {
  if (x.rank() != 2 || x.dim(0) != perm.size()) {
    throw ShapeError("apply_hard", Shape{perm.size()}, x.shape());
  }
  const std::size_t m = x.dim(1);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    std::copy_n(x.data().data() + perm.source[i] * m, m, out.data().data() + i * m);
  }
  return out;
}

namespace {

// Minimum-cost assignment on a square cost matrix (row-major, n x n).
// Returns (assignment row -> column, total cost).
std::pair<std::vector<std::size_t>, double> hungarian_min(const std::vector<double>& cost,
                                                          std::size_t n) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = match[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> assign(n);
  double total = 0.0;
  for (std::size_t j = 1; j <= n; ++j) assign[match[j] - 1] = j - 1;
  for (std::size_t i = 0; i < n; ++i) total += cost[i * n + assign[i]];
  return {assign, total};
}

// Best assignment weight over the rows/cols not yet fixed.
double best_weight(const Tensor& w, const std::vector<std::size_t>& rows,
                   const std::vector<std::size_t>& cols) {
  const std::size_t k = rows.size();
  if (k == 0) return 0.0;
  std::vector<double> cost(k * k);
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t b = 0; b < k; ++b) cost[a * k + b] = -w.at(rows[a], cols[b]);
  return -hungarian_min(cost, k).second;
}

}  // namespace

PermMatrix hard_match(const Tensor& score) {
  if (score.rank() != 2 || score.dim(0) != score.dim(1)) {
    throw ShapeError("hard_match: expected square matrix, got " + shape_str(score.shape()));
  }
  if (!score.all_finite()) throw DomainError("hard_match: non-finite score");
  const std::size_t n = score.dim(0);
  // Output position i takes source row source[i]: an assignment on scoreᵀ.
  const Tensor w = ops::transpose(score);

  std::vector<std::size_t> rows(n), cols(n);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  std::iota(cols.begin(), cols.end(), std::size_t{0});
  const double optimum = best_weight(w, rows, cols);
  const double tol = 1e-10 * (1.0 + std::abs(optimum));

  // Fix positions left to right, taking the smallest source that still
  // admits an optimal completion.
  PermMatrix out{std::vector<std::size_t>(n)};
  double fixed = 0.0;
  std::vector<std::size_t> free_pos(rows.begin() + 1, rows.end());
  for (std::size_t i = 0; i < n; ++i) {
    if (i > 0) free_pos.erase(free_pos.begin());
    for (std::size_t c = 0; c < cols.size(); ++c) {
      const std::size_t src = cols[c];
      std::vector<std::size_t> rest = cols;
      rest.erase(rest.begin() + static_cast<std::ptrdiff_t>(c));
      const double total = fixed + w.at(i, src) + best_weight(w, free_pos, rest);
      if (total >= optimum - tol) {
        out.source[i] = src;
        fixed += w.at(i, src);
        cols = std::move(rest);
        break;
      }
    }
  }
  return out;
}

PermMatrix greedy_round(const Tensor& p) {
  if (p.rank() != 2 || p.dim(0) != p.dim(1)) {
    throw ShapeError("greedy_round: expected square matrix, got " + shape_str(p.shape()));
  }
  const std::size_t n = p.dim(0);
  std::vector<std::size_t> entries(n * n);
  std::iota(entries.begin(), entries.end(), std::size_t{0});
  std::stable_sort(entries.begin(), entries.end(),
                   [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
  std::vector<bool> row_used(n, false), col_used(n, false);
  PermMatrix out{std::vector<std::size_t>(n)};
  std::size_t placed = 0;
  for (std::size_t e : entries) {
    const std::size_t r = e / n, c = e % n;
    if (row_used[r] || col_used[c]) continue;
    row_used[r] = col_used[c] = true;
    out.source[c] = r;
    if (++placed == n) break;
  }
  return out;
}

}  // namespace spanlab::perm
