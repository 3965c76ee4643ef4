// SPDX-License-Identifier: Apache-2.0
#pragma once

// Tape-based reverse-mode differentiation over spanlab::Tensor.
//
// A Tape records every op applied to its Vars in execution order, so the
// record is already topologically sorted. backward() walks it in reverse.
// Only nodes that depend on a trainable leaf carry gradients; everything
// else is treated as a constant and skipped on the way back.
//
// A Tape is single-owner: use one tape from one thread at a time.

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "spanlab/ops.hpp"
#include "spanlab/tensor.hpp"

namespace spanlab {

class Tape;

class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Backward rule: receives the tape, the id of the node being processed and
/// the gradient flowing into its output; accumulates into its inputs.
using BackwardFn = std::function<void(Tape&, std::size_t, const Tensor&)>;

/// dLoss/dLeaf for every trainable leaf on the tape.
class Gradients {
 public:
  const Tensor& at(const Var& leaf) const;
  bool contains(const Var& leaf) const;
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape;
  const Tape* tape_ = nullptr;
  std::map<std::size_t, Tensor> grads_;
};

class Tape {
 public:
  /// With recording off, ops compute values only and backward() is refused.
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool trainable = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records an op. `fn` is only stored when some input requires a gradient.
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn,
             const char* op);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer for node `id`, zero-filled on first access.
  Tensor& grad(std::size_t id);
  std::size_t size() const { return nodes_.size(); }
  bool recording() const { return recording_; }

  Gradients backward(const Var& loss);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    const char* op = "leaf";
    bool requires_grad = false;
    bool trainable_leaf = false;
  };

  bool recording_;
  std::deque<Node> nodes_;
};

namespace ad {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var neg(const Var& a);

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);

Var relu(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);

Var sum(const Var& a, std::size_t axis);
Var mean(const Var& a, std::size_t axis);
/// Gradient flows to the first maximal element of each lane.
Var max(const Var& a, std::size_t axis);
Var logsumexp(const Var& a, std::size_t axis);
Var sum_all(const Var& a);
Var mean_all(const Var& a);

Var concat(const std::vector<Var>& parts, std::size_t axis);
Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end);
Var expand(const Var& a, std::size_t axis, std::size_t count);
Var reshape(const Var& a, Shape shape);
Var gather_rows(const Var& a, std::vector<std::vector<std::size_t>> index);
Var set_sum(const Var& a);

}  // namespace ad
}  // namespace spanlab
