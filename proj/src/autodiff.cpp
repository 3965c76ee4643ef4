// SPDX-License-Identifier: Apache-2.0
#include "spanlab/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace spanlab {

const Tensor& Var::value() const {
  if (!tape_) throw std::logic_error("Var: not attached to a tape");
  return tape_->value(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

const Tensor& Gradients::at(const Var& leaf) const {
  if (leaf.tape() != tape_) throw std::invalid_argument("gradients: leaf not on this tape");
  auto it = grads_.find(leaf.id());
  if (it == grads_.end()) {
    throw std::invalid_argument("gradients: node " + std::to_string(leaf.id()) +
                                " is not a trainable leaf");
  }
  return it->second;
}

bool Gradients::contains(const Var& leaf) const {
  return leaf.tape() == tape_ && grads_.count(leaf.id()) > 0;
}

Var Tape::leaf(Tensor value, bool trainable) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = trainable && recording_;
  n.trainable_leaf = n.requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn,
                 const char* op) {
  Node n;
  n.value = std::move(value);
  n.op = op;
  if (recording_) {
    for (const Var& v : inputs) {
      if (v.tape() != this) {
        throw std::invalid_argument(std::string(op) + ": operand from another tape");
      }
      n.requires_grad = n.requires_grad || nodes_[v.id()].requires_grad;
    }
    if (n.requires_grad) {
      n.inputs.reserve(inputs.size());
      for (const Var& v : inputs) n.inputs.push_back(v.id());
      n.backward = std::move(fn);
    }
  }
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.shape() != n.value.shape() || n.grad.size() != n.value.size()) {
    n.grad = Tensor(n.value.shape());
  }
  return n.grad;
}

Gradients Tape::backward(const Var& loss) {
  if (!recording_) throw std::logic_error("backward: tape is not recording");
  if (loss.tape() != this) throw std::invalid_argument("backward: loss not on this tape");
  if (loss.value().size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " +
                     shape_str(loss.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  Gradients out;
  out.tape_ = this;
  if (nodes_[loss.id()].requires_grad) {
    grad(loss.id())[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.size() == 0 || !n.backward) continue;
      n.backward(*this, i, n.grad);
    }
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].trainable_leaf) continue;
    out.grads_.emplace(i, nodes_[i].grad.size() ? nodes_[i].grad
                                                : Tensor(nodes_[i].value.shape()));
  }
  return out;
}

namespace ad {
namespace {

Tape& tape_of(const Var& a) {
  if (!a.valid()) throw std::logic_error("op on detached Var");
  return *a.tape();
}

void same_tape(const char* op, const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw std::invalid_argument(std::string(op) + ": mixed tapes");
}

void acc(Tensor& dst, const Tensor& src) {
  double* d = dst.data().data();
  const double* s = src.data().data();
  for (std::size_t i = 0, n = dst.size(); i < n; ++i) d[i] += s[i];
}

template <typename F>
void acc_map(Tensor& dst, std::size_t n, F f) {
  double* d = dst.data().data();
  for (std::size_t i = 0; i < n; ++i) d[i] += f(i);
}

}  // namespace

Var add(const Var& a, const Var& b) {
  same_tape("add", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return tape_of(a).record(
      ops::add(a.value(), b.value()), {a, b},
      [ia, ib](Tape& t, std::size_t, const Tensor& g) {
        if (t.requires_grad(ia)) acc(t.grad(ia), g);
        if (t.requires_grad(ib)) acc(t.grad(ib), g);
      },
      "add");
}

Var sub(const Var& a, const Var& b) {
  same_tape("sub", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return tape_of(a).record(
      ops::sub(a.value(), b.value()), {a, b},
      [ia, ib](Tape& t, std::size_t, const Tensor& g) {
        if (t.requires_grad(ia)) acc(t.grad(ia), g);
        if (t.requires_grad(ib)) acc_map(t.grad(ib), g.size(), [&](std::size_t i) { return -g[i]; });
      },
      "sub");
}

Var mul(const Var& a, const Var& b) {
  same_tape("mul", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return tape_of(a).record(
      ops::mul(a.value(), b.value()), {a, b},
      [ia, ib](Tape& t, std::size_t, const Tensor& g) {
        const Tensor& va = t.value(ia);
        const Tensor& vb = t.value(ib);
        if (t.requires_grad(ia)) acc_map(t.grad(ia), g.size(), [&](std::size_t i) { return g[i] * vb[i]; });
        if (t.requires_grad(ib)) acc_map(t.grad(ib), g.size(), [&](std::size_t i) { return g[i] * va[i]; });
      },
      "mul");
}

Var div(const Var& a, const Var& b) {
  same_tape("div", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return tape_of(a).record(
      ops::div(a.value(), b.value()), {a, b},
      [ia, ib](Tape& t, std::size_t, const Tensor& g) {
        const Tensor& va = t.value(ia);
        const Tensor& vb = t.value(ib);
        if (t.requires_grad(ia)) acc_map(t.grad(ia), g.size(), [&](std::size_t i) { return g[i] / vb[i]; });
        if (t.requires_grad(ib)) {
          acc_map(t.grad(ib), g.size(), [&](std::size_t i) { return -g[i] * va[i] / (vb[i] * vb[i]); });
        }
      },
      "div");
}

Var scale(const Var& a, double c) {
  const std::size_t ia = a.id();
  return tape_of(a).record(
      ops::scale(a.value(), c), {a},
      [ia, c](Tape& t, std::size_t, const Tensor& g) {
        acc_map(t.grad(ia), g.size(), [&](std::size_t i) { return c * g[i]; });
      },
      "scale");
}

Var add_scalar(const Var& a, double c) {
  const std::size_t ia = a.id();
  return tape_of(a).record(
      ops::add_scalar(a.value(), c), {a},
      [ia](Tape& t, std::size_t, const Tensor& g) { acc(t.grad(ia), g); }, "add_scalar");
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var matmul(const Var& a, const Var& b) {
  same_tape("matmul", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return tape_of(a).record(
      ops::matmul(a.value(), b.value()), {a, b},
      [ia, ib](Tape& t, std::size_t, const Tensor& g) {
        if (t.requires_grad(ia)) acc(t.grad(ia), ops::matmul(g, ops::transpose(t.value(ib))));
        if (t.requires_grad(ib)) acc(t.grad(ib), ops::matmul(ops::transpose(t.value(ia)), g));
      },
      "matmul");
}

Var transpose(const Var& a) {
  const std::size_t ia = a.id();
  return tape_of(a).record(
      ops::transpose(a.value()), {a},
      [ia](Tape& t, std::size_t, const Tensor& g) { acc(t.grad(ia), ops::transpose(g)); },
      "transpose");
}

Var relu(const Var& a) {
  const std::size_t ia = a.id();
  return tape_of(a).record(
      ops::relu(a.value()), {a},
      [ia](Tape& t, std::size_t, const Tensor& g) {
        const Tensor& x = t.value(ia);
        acc_map(t.grad(ia), g.size(), [&](std::size_t i) { return x[i] > 0.0 ? g[i] : 0.0; });
      },
      "relu");
}

Var sigmoid(const Var& a) {
  const std::size_t ia = a.id();
  return tape_of(a).record(
      ops::sigmoid(a.value()), {a},
      [ia](Tape& t, std::size_t self, const Tensor& g) {
        const Tensor& y = t.value(self);
        acc_map(t.grad(ia), g.size(), [&](std::size_t i) { return g[i] * y[i] * (1.0 - y[i]); });
      },
      "sigmoid");
}

Var tanh(const Var& a) {
  const std::size_t ia = a.id();
  return tape_of(a).record(
      ops::tanh(a.value()), {a},
      [ia](Tape& t, std::size_t self, const Tensor& g) {
        const Tensor& y = t.value(self);
        acc_map(t.grad(ia), g.size(), [&](std::size_t i) { return g[i] * (1.0 - y[i] * y[i]); });
      },
      "tanh");
}

Var exp(const Var& a) {
  const std::size_t ia = a.id();
  return tape_of(a).record(
      ops::exp(a.value()), {a},
      [ia](Tape& t, std::size_t self, const Tensor& g) {
        const Tensor& y = t.value(self);
        acc_map(t.grad(ia), g.size(), [&](std::size_t i) { return g[i] * y[i]; });
      },
      "exp");
}

Var log(const Var& a) {
  const std::size_t ia = a.id();
  return tape_of(a).record(
      ops::log(a.value()), {a},
      [ia](Tape& t, std::size_t, const Tensor& g) {
        const Tensor& x = t.value(ia);
        acc_map(t.grad(ia), g.size(), [&](std::size_t i) { return g[i] / x[i]; });
      },
      "log");
}

Var square(const Var& a) { return mul(a, a); }

Var sum(const Var& a, std::size_t axis) {
  const std::size_t ia = a.id();
  const std::size_t n = a.dim(axis);
  return tape_of(a).record(
      ops::sum(a.value(), axis), {a},
      [ia, axis, n](Tape& t, std::size_t, const Tensor& g) {
        acc(t.grad(ia), ops::expand(g, axis, n));
      },
      "sum");
}

Var mean(const Var& a, std::size_t axis) {
  const std::size_t n = a.dim(axis);
  if (n == 0) throw ShapeError("mean: empty axis");
  return scale(sum(a, axis), 1.0 / static_cast<double>(n));
}

Var max(const Var& a, std::size_t axis) {
  const std::size_t ia = a.id();
  auto idx = ops::argmax_flat(a.value(), axis);
  Tensor value = ops::max(a.value(), axis);
  return tape_of(a).record(
      std::move(value), {a},
      [ia, idx = std::move(idx)](Tape& t, std::size_t, const Tensor& g) {
        Tensor& ga = t.grad(ia);
        for (std::size_t i = 0; i < idx.size(); ++i) ga[idx[i]] += g[i];
      },
      "max");
}

Var logsumexp(const Var& a, std::size_t axis) {
  const std::size_t ia = a.id();
  const std::size_t n = a.dim(axis);
  return tape_of(a).record(
      ops::logsumexp(a.value(), axis), {a},
      [ia, axis, n](Tape& t, std::size_t self, const Tensor& g) {
        const Tensor& x = t.value(ia);
        const Tensor ge = ops::expand(g, axis, n);
        const Tensor ye = ops::expand(t.value(self), axis, n);
        acc_map(t.grad(ia), x.size(), [&](std::size_t i) {
          return ge[i] == 0.0 ? 0.0 : ge[i] * std::exp(x[i] - ye[i]);
        });
      },
      "logsumexp");
}

Var sum_all(const Var& a) {
  const std::size_t ia = a.id();
  return tape_of(a).record(
      Tensor::scalar(ops::sum_all(a.value())), {a},
      [ia](Tape& t, std::size_t, const Tensor& g) {
        const double gv = g[0];
        Tensor& ga = t.grad(ia);
        acc_map(ga, ga.size(), [gv](std::size_t) { return gv; });
      },
      "sum_all");
}

Var mean_all(const Var& a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean_all: empty tensor");
  return scale(sum_all(a), 1.0 / static_cast<double>(n));
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  std::vector<const Tensor*> values;
  std::vector<std::size_t> ids, extents;
  for (const Var& p : parts) {
    same_tape("concat", parts.front(), p);
    values.push_back(&p.value());
    ids.push_back(p.id());
    extents.push_back(p.value().rank() > axis ? p.dim(axis) : 0);
  }
  Tensor out = ops::concat(values, axis);
  return tape_of(parts.front()).record(
      std::move(out), parts,
      [ids, extents, axis](Tape& t, std::size_t, const Tensor& g) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (t.requires_grad(ids[k])) {
            acc(t.grad(ids[k]), ops::slice(g, axis, offset, offset + extents[k]));
          }
          offset += extents[k];
        }
      },
      "concat");
}

Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const std::size_t ia = a.id();
  return tape_of(a).record(
      ops::slice(a.value(), axis, begin, end), {a},
      [ia, axis, begin](Tape& t, std::size_t, const Tensor& g) {
        Tensor& ga = t.grad(ia);
        const Shape& s = ga.shape();
        std::size_t outer = 1, inner = 1;
        for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
        for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
        const std::size_t ext = s[axis], len = g.dim(axis);
        for (std::size_t o = 0; o < outer; ++o) {
          double* dst = ga.data().data() + (o * ext + begin) * inner;
          const double* src = g.data().data() + o * len * inner;
          for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
        }
      },
      "slice");
}

Var expand(const Var& a, std::size_t axis, std::size_t count) {
  const std::size_t ia = a.id();
  return tape_of(a).record(
      ops::expand(a.value(), axis, count), {a},
      [ia, axis](Tape& t, std::size_t, const Tensor& g) {
        acc(t.grad(ia), ops::sum(g, axis));
      },
      "expand");
}

Var reshape(const Var& a, Shape shape) {
  const std::size_t ia = a.id();
  return tape_of(a).record(
      ops::reshape(a.value(), std::move(shape)), {a},
      [ia](Tape& t, std::size_t, const Tensor& g) {
        Tensor& ga = t.grad(ia);
        acc_map(ga, ga.size(), [&](std::size_t i) { return g[i]; });
      },
      "reshape");
}

Var gather_rows(const Var& a, std::vector<std::vector<std::size_t>> index) {
  const std::size_t ia = a.id();
  Tensor out = ops::gather_rows(a.value(), index);
  return tape_of(a).record(
      std::move(out), {a},
      [ia, index = std::move(index)](Tape& t, std::size_t, const Tensor& g) {
        Tensor& ga = t.grad(ia);
        acc(ga, ops::scatter_rows(g, index, ga.shape()));
      },
      "gather_rows");
}

Var set_sum(const Var& a) {
  const std::size_t ia = a.id();
  const std::size_t n = a.value().rank() == 3 ? a.dim(1) : 0;
  return tape_of(a).record(
      ops::set_sum(a.value()), {a},
      [ia, n](Tape& t, std::size_t, const Tensor& g) {
        acc(t.grad(ia), ops::expand(g, 1, n));
      },
      "set_sum");
}

}  // namespace ad
}  // namespace spanlab
