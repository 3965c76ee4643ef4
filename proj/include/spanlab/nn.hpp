// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>

#include "spanlab/autodiff.hpp"
#include "spanlab/rng.hpp"

namespace spanlab::nn {

/// Named parameter tensors. Ordered so iteration (and therefore every
/// optimizer update and checkpoint) is deterministic.
using Params = std::map<std::string, Tensor>;
using BoundParams = std::map<std::string, Var>;
using ParamGrads = std::map<std::string, Tensor>;

/// Registers every parameter as a leaf; those rejected by `trainable` become
/// constants so no gradient is propagated into them.
BoundParams bind(Tape& tape, const Params& params,
                 const std::function<bool(const std::string&)>& trainable = {});
ParamGrads collect(const Gradients& grads, const BoundParams& bound);

/// Uniform on ±sqrt(6 / (fan_in + fan_out)); rank-2 shapes only.
Tensor xavier_init(const Shape& shape, std::uint64_t seed);
Tensor xavier_init(const Shape& shape, Rng& rng);

enum class Activation { none, relu, tanh };

/// y = act(x W + b) on a (rows x in) input.
struct LinearLayer {
  std::string name;
  std::size_t in = 0;
  std::size_t out = 0;
  Activation activation = Activation::none;

  void init(Params& params, Rng& rng) const;
  Var forward(const BoundParams& p, const Var& x) const;
};

/// Single-layer LSTM. Gate weights act on [x_t, h_{t-1}].
struct LSTMCell {
  std::string name;
  std::size_t in = 0;
  std::size_t hidden = 128;
  double forget_bias = 1.0;

  void init(Params& params, Rng& rng) const;
  /// (B x n x in) batch of sequences -> (B x hidden) final hidden states.
  Var forward(const BoundParams& p, const Var& sequences) const;
};

/// Runs one (n x d) sequence from h0 = c0 = 0 and returns h_n.
Var lstm_forward(const LSTMCell& cell, const BoundParams& p, const Var& sequence);

/// Inverted dropout; identity when not training or rate == 0.
Var dropout(const Var& x, double rate, Rng& rng, bool training);

enum class OptimizerKind { adam, sgd };
enum class Direction { minimize, maximize };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Adam/SGD state for a group of parameters. Weight decay enters as an L2
/// term on the objective being descended, so `maximize` on f is exactly
/// `minimize` on -f.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg = {}) : cfg_(cfg) {}

  /// Updates every parameter named in `grads`.
  void step(Params& params, const ParamGrads& grads, Direction dir = Direction::minimize);

  const OptimizerConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return steps_; }
  const std::map<std::string, Tensor>& first_moments() const { return m_; }
  const std::map<std::string, Tensor>& second_moments() const { return v_; }
  void restore(std::uint64_t steps, std::map<std::string, Tensor> m,
               std::map<std::string, Tensor> v);

 private:
  OptimizerConfig cfg_;
  std::uint64_t steps_ = 0;
  std::map<std::string, Tensor> m_;
  std::map<std::string, Tensor> v_;
};

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_global_norm(ParamGrads& grads, double max_norm);

}  // namespace spanlab::nn
