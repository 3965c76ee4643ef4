// SPDX-License-Identifier: Apache-2.0
#pragma once

// Independent reference implementations used only by tests. Nothing here
// shares code with the library paths they check.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <queue>
#include <vector>

namespace oracle {

/// Max over all n! assignments of sum_i w[i][p[i]] (row-major n x n).
inline double brute_force_assignment(const std::vector<double>& w, std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  double best = -std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += w[i * n + p[i]];
    best = std::max(best, s);
  } while (std::next_permutation(p.begin(), p.end()));
  return best;
}

/// BFS augmenting paths (Edmonds-Karp) on a dense capacity matrix.
inline long long edmonds_karp(std::vector<std::vector<long long>> cap, std::size_t source,
                              std::size_t sink) {
  const std::size_t n = cap.size();
  long long flow = 0;
  while (true) {
    std::vector<std::ptrdiff_t> parent(n, -1);
    parent[source] = static_cast<std::ptrdiff_t>(source);
    std::queue<std::size_t> q;
    q.push(source);
    while (!q.empty() && parent[sink] < 0) {
      const std::size_t u = q.front();
      q.pop();
      for (std::size_t v = 0; v < n; ++v) {
        if (parent[v] < 0 && cap[u][v] > 0) {
          parent[v] = static_cast<std::ptrdiff_t>(u);
          q.push(v);
        }
      }
    }
    if (parent[sink] < 0) return flow;
    long long bottleneck = std::numeric_limits<long long>::max();
    for (std::size_t v = sink; v != source; v = static_cast<std::size_t>(parent[v])) {
      bottleneck = std::min(bottleneck, cap[static_cast<std::size_t>(parent[v])][v]);
    }
    for (std::size_t v = sink; v != source; v = static_cast<std::size_t>(parent[v])) {
      const auto u = static_cast<std::size_t>(parent[v]);
      cap[u][v] -= bottleneck;
      cap[v][u] += bottleneck;
    }
    flow += bottleneck;
  }
}

/// Max over k-subsets of the summed pairwise distances, distances computed
/// as sqrt of accumulated squares; subsets enumerated by bitmask.
inline double exhaustive_kary(const std::vector<std::vector<double>>& pts, std::size_t k) {
  const std::size_t n = pts.size();
  double best = -1.0;
  for (unsigned mask = 0; mask < (1u << n); ++mask) {
    if (static_cast<std::size_t>(__builtin_popcount(mask)) != k) continue;
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!(mask >> i & 1u)) continue;
      for (std::size_t j = i + 1; j < n; ++j) {
        if (!(mask >> j & 1u)) continue;
        double sq = 0.0;
        for (std::size_t c = 0; c < pts[i].size(); ++c) {
          sq += (pts[i][c] - pts[j][c]) * (pts[i][c] - pts[j][c]);
        }
        s += std::sqrt(sq);
      }
    }
    best = std::max(best, s);
  }
  return best;
}

/// Nearest-rank percentile by counting: the smallest value v such that at
/// least ceil(r n / 100) elements are <= v.
inline double counting_percentile(const std::vector<double>& xs, double r) {
  const auto n = static_cast<double>(xs.size());
  const double need = std::ceil(r * n / 100.0 - 1e-12);
  double best = std::numeric_limits<double>::infinity();
  for (double v : xs) {
    const double le = static_cast<double>(std::count_if(xs.begin(), xs.end(),
                                                        [v](double u) { return u <= v; }));
    if (le >= need) best = std::min(best, v);
  }
  return best;
}

}  // namespace oracle
