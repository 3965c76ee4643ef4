// SPDX-License-Identifier: Apache-2.0
#include "spanlab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace spanlab::ops {

namespace {

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

template <typename F>
Tensor zip(const char* op, const Tensor& a, const Tensor& b, F f) {
  require_same(op, a, b);
  Tensor out(a.shape());
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0, n = a.size(); i < n; ++i) po[i] = f(pa[i], pb[i]);
  return out;
}

template <typename F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape());
  const double* pa = a.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0, n = a.size(); i < n; ++i) po[i] = f(pa[i]);
  return out;
}

// Splits a shape into (outer, axis extent, inner) around `axis`.
struct Lanes {
  std::size_t outer = 1, extent = 1, inner = 1;
};

Lanes lanes(const char* op, const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(s));
  }
  Lanes l;
  for (std::size_t i = 0; i < axis; ++i) l.outer *= s[i];
  l.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) l.inner *= s[i];
  return l;
}

Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out = s;
  out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  return out;
}

// c[m x n] += a[m x k] * b[k x n]
void gemm_acc(const double* a, const double* b, double* c, std::size_t m,
              std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

double pairwise_sum(const double* v, std::size_t n) {
  if (n == 0) return 0.0;
  if (n == 1) return v[0];
  const std::size_t half = n / 2;
  return pairwise_sum(v, half) + pairwise_sum(v + half, n - half);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return zip("add", a, b, [](double x, double y) { return x + y; });
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return zip("sub", a, b, [](double x, double y) { return x - y; });
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return zip("mul", a, b, [](double x, double y) { return x * y; });
}
Tensor div(const Tensor& a, const Tensor& b) {
  return zip("div", a, b, [](double x, double y) { return x / y; });
}
Tensor scale(const Tensor& a, double c) {
  return map(a, [c](double x) { return x * c; });
}
Tensor add_scalar(const Tensor& a, double c) {
  return map(a, [c](double x) { return x + c; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() == 2 && b.rank() == 2) {
    if (a.dim(1) != b.dim(0)) throw ShapeError("matmul", a.shape(), b.shape());
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out(Shape{m, n});
    gemm_acc(a.data().data(), b.data().data(), out.data().data(), m, k, n);
    return out;
  }
  if (a.rank() == 3 && b.rank() == 3) {
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
      throw ShapeError("matmul", a.shape(), b.shape());
    }
    const std::size_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    Tensor out(Shape{B, m, n});
    for (std::size_t t = 0; t < B; ++t) {
      gemm_acc(a.data().data() + t * m * k, b.data().data() + t * k * n,
               out.data().data() + t * m * n, m, k, n);
    }
    return out;
  }
  throw ShapeError("matmul", a.shape(), b.shape());
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2 && a.rank() != 3) {
    throw ShapeError("transpose: expected rank 2 or 3, got " + shape_str(a.shape()));
  }
  const std::size_t B = a.rank() == 3 ? a.dim(0) : 1;
  const std::size_t r = a.dim(a.rank() - 2), c = a.dim(a.rank() - 1);
  Shape s = a.shape();
  std::swap(s[s.size() - 2], s[s.size() - 1]);
  Tensor out(std::move(s));
  for (std::size_t t = 0; t < B; ++t) {
    const double* src = a.data().data() + t * r * c;
    double* dst = out.data().data() + t * r * c;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) dst[j * r + i] = src[i * c + j];
  }
  return out;
}

Tensor relu(const Tensor& a) {
  return map(a, [](double x) { return x > 0.0 ? x : 0.0; });
}
Tensor sigmoid(const Tensor& a) {
  return map(a, [](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
}
Tensor tanh(const Tensor& a) {
  return map(a, [](double x) { return std::tanh(x); });
}
Tensor exp(const Tensor& a) {
  return map(a, [](double x) { return std::exp(x); });
}
Tensor log(const Tensor& a) {
  for (double v : a.data()) {
    if (!(v > 0.0)) {
      throw DomainError("log: non-positive input " + std::to_string(v));
    }
  }
  return map(a, [](double x) { return std::log(x); });
}

Tensor sum(const Tensor& a, std::size_t axis) {
  const Lanes l = lanes("sum", a.shape(), axis);
  Tensor out(drop_axis(a.shape(), axis));
  const double* pa = a.data().data();
  double* po = out.data().data();
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t e = 0; e < l.extent; ++e) {
      const double* src = pa + (o * l.extent + e) * l.inner;
      double* dst = po + o * l.inner;
      for (std::size_t i = 0; i < l.inner; ++i) dst[i] += src[i];
    }
  return out;
}

Tensor mean(const Tensor& a, std::size_t axis) {
  const std::size_t n = lanes("mean", a.shape(), axis).extent;
  if (n == 0) throw ShapeError("mean: empty axis");
  return scale(sum(a, axis), 1.0 / static_cast<double>(n));
}

std::vector<std::size_t> argmax_flat(const Tensor& a, std::size_t axis) {
  const Lanes l = lanes("max", a.shape(), axis);
  if (l.extent == 0) throw ShapeError("max: empty axis");
  std::vector<std::size_t> idx(l.outer * l.inner);
  const double* pa = a.data().data();
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t i = 0; i < l.inner; ++i) {
      std::size_t best = o * l.extent * l.inner + i;
      for (std::size_t e = 1; e < l.extent; ++e) {
        const std::size_t k = (o * l.extent + e) * l.inner + i;
        if (pa[k] > pa[best]) best = k;
      }
      idx[o * l.inner + i] = best;
    }
  return idx;
}

Tensor max(const Tensor& a, std::size_t axis) {
  const auto idx = argmax_flat(a, axis);
  Tensor out(drop_axis(a.shape(), axis));
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = a[idx[i]];
  return out;
}

Tensor logsumexp(const Tensor& a, std::size_t axis) {
  const Lanes l = lanes("logsumexp", a.shape(), axis);
  if (l.extent == 0) throw ShapeError("logsumexp: empty axis");
  Tensor out(drop_axis(a.shape(), axis));
  const double* pa = a.data().data();
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t i = 0; i < l.inner; ++i) {
      const double* lane = pa + o * l.extent * l.inner + i;
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t e = 0; e < l.extent; ++e) m = std::max(m, lane[e * l.inner]);
      if (!std::isfinite(m)) {
        if (std::isnan(m) || m > 0) throw DomainError("logsumexp: non-finite input");
        out[o * l.inner + i] = m;
        continue;
      }
      double s = 0.0;
      for (std::size_t e = 0; e < l.extent; ++e) s += std::exp(lane[e * l.inner] - m);
      out[o * l.inner + i] = m + std::log(s);
    }
  return out;
}

double sum_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return s;
}

Tensor concat(const std::vector<const Tensor*>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front()->shape();
  Shape out_shape = first;
  std::size_t total = 0;
  for (const Tensor* p : parts) {
    const Shape& s = p->shape();
    bool ok = s.size() == first.size() && axis < s.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) ok = false;
    }
    if (!ok) throw ShapeError("concat", first, s);
    total += s[axis];
  }
  out_shape[axis] = total;
  Tensor out(out_shape);
  const Lanes l = lanes("concat", out_shape, axis);
  std::size_t offset = 0;
  for (const Tensor* p : parts) {
    const std::size_t ext = p->dim(axis);
    const std::size_t chunk = ext * l.inner;
    for (std::size_t o = 0; o < l.outer; ++o) {
      std::copy_n(p->data().data() + o * chunk, chunk,
                  out.data().data() + (o * l.extent + offset) * l.inner);
    }
    offset += ext;
  }
  return out;
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Lanes l = lanes("slice", a.shape(), axis);
  if (begin > end || end > l.extent) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") out of bounds for shape " +
                     shape_str(a.shape()));
  }
  Shape s = a.shape();
  s[axis] = end - begin;
  Tensor out(std::move(s));
  const std::size_t chunk = (end - begin) * l.inner;
  for (std::size_t o = 0; o < l.outer; ++o) {
    std::copy_n(a.data().data() + (o * l.extent + begin) * l.inner, chunk,
                out.data().data() + o * chunk);
  }
  return out;
}

Tensor expand(const Tensor& a, std::size_t axis, std::size_t count) {
  if (axis > a.rank()) {
    throw ShapeError("expand: axis " + std::to_string(axis) + " invalid for shape " +
                     shape_str(a.shape()));
  }
  Shape s = a.shape();
  s.insert(s.begin() + static_cast<std::ptrdiff_t>(axis), count);
  Tensor out(s);
  const Lanes l = lanes("expand", s, axis);
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t e = 0; e < count; ++e) {
      std::copy_n(a.data().data() + o * l.inner, l.inner,
                  out.data().data() + (o * count + e) * l.inner);
    }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) { return a.reshaped(std::move(shape)); }

Tensor gather_rows(const Tensor& a, const std::vector<std::vector<std::size_t>>& index) {
  if (a.rank() != 3 || index.size() != a.dim(0)) {
    throw ShapeError("gather_rows: expected rank-3 input with one index list per "
                     "batch entry, got " + shape_str(a.shape()));
  }
  const std::size_t B = a.dim(0), n = a.dim(1), m = a.dim(2);
  const std::size_t k = index.empty() ? 0 : index.front().size();
  Tensor out(Shape{B, k, m});
  for (std::size_t b = 0; b < B; ++b) {
    if (index[b].size() != k) throw ShapeError("gather_rows: ragged index lists");
    for (std::size_t j = 0; j < k; ++j) {
      if (index[b][j] >= n) throw ShapeError("gather_rows: row index out of range");
      std::copy_n(a.data().data() + (b * n + index[b][j]) * m, m,
                  out.data().data() + (b * k + j) * m);
    }
  }
  return out;
}

Tensor scatter_rows(const Tensor& g, const std::vector<std::vector<std::size_t>>& index,
                    const Shape& shape) {
  Tensor out(shape);
  const std::size_t B = shape[0], n = shape[1], m = shape[2];
  const std::size_t k = g.dim(1);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < k; ++j) {
      const double* src = g.data().data() + (b * k + j) * m;
      double* dst = out.data().data() + (b * n + index[b][j]) * m;
      for (std::size_t c = 0; c < m; ++c) dst[c] += src[c];
    }
  return out;
}

std::vector<std::size_t> canonical_row_order(std::span<const double> rows,
                                             std::size_t n, std::size_t m) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    const double* rx = rows.data() + x * m;
    const double* ry = rows.data() + y * m;
    return std::lexicographical_compare(rx, rx + m, ry, ry + m);
  });
  return order;
}

Tensor set_sum(const Tensor& a) {
  if (a.rank() != 3) {
    throw ShapeError("set_sum: expected (B x n x m), got " + shape_str(a.shape()));
  }
  const std::size_t B = a.dim(0), n = a.dim(1), m = a.dim(2);
  Tensor out(Shape{B, m});
  std::vector<double> column(n);
  for (std::size_t b = 0; b < B; ++b) {
    const std::span<const double> block = a.data().subspan(b * n * m, n * m);
    const auto order = canonical_row_order(block, n, m);
    for (std::size_t c = 0; c < m; ++c) {
      for (std::size_t j = 0; j < n; ++j) column[j] = block[order[j] * m + c];
      out[b * m + c] = pairwise_sum(column.data(), n);
    }
  }
  return out;
}

}  // namespace spanlab::ops
