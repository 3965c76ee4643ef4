// SPDX-License-Identifier: Apache-2.0
#include "spanlab/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace spanlab::nn {

BoundParams bind(Tape& tape, const Params& params,
                 const std::function<bool(const std::string&)>& trainable) {
  BoundParams out;
  for (const auto& [name, value] : params) {
    const bool t = !trainable || trainable(name);
    out.emplace(name, tape.leaf(value, t));
  }
  return out;
}

ParamGrads collect(const Gradients& grads, const BoundParams& bound) {
  ParamGrads out;
  for (const auto& [name, var] : bound) {
    if (grads.contains(var)) out.emplace(name, grads.at(var));
  }
  return out;
}

Tensor xavier_init(const Shape& shape, Rng& rng) {
  if (shape.size() != 2) {
    throw ShapeError("xavier_init: expected rank-2 shape, got " + shape_str(shape));
  }
  const double bound = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
  Tensor t(shape);
  for (double& v : t.storage()) v = rng.uniform(-bound, bound);
  return t;
}

Tensor xavier_init(const Shape& shape, std::uint64_t seed) {
  Rng rng(seed);
  return xavier_init(shape, rng);
}

namespace {

const Var& param(const BoundParams& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) throw std::out_of_range("missing parameter '" + name + "'");
  return it->second;
}

Var add_bias(const Var& y, const Var& b) {
  return ad::add(y, ad::expand(b, 0, y.dim(0)));
}

constexpr const char* kGates[4] = {"input", "forget", "output", "cell"};

}  // namespace

void LinearLayer::init(Params& params, Rng& rng) const {
  params[name + ".weight"] = xavier_init(Shape{in, out}, rng);
  params[name + ".bias"] = Tensor(Shape{out});
}

Var LinearLayer::forward(const BoundParams& p, const Var& x) const {
  if (x.value().rank() != 2 || x.dim(1) != in) {
    throw ShapeError(name + ": linear input", x.shape(), Shape{x.value().rank() ? x.dim(0) : 0, in});
  }
  Var y = add_bias(ad::matmul(x, param(p, name + ".weight")), param(p, name + ".bias"));
  switch (activation) {
    case Activation::relu: return ad::relu(y);
    case Activation::tanh: return ad::tanh(y);
    case Activation::none: break;
  }
  return y;
}

void LSTMCell::init(Params& params, Rng& rng) const {
  for (const char* gate : kGates) {
    const std::string g(gate);
    params[name + ".w_" + g] = xavier_init(Shape{in + hidden, hidden}, rng);
    params[name + ".b_" + g] =
        Tensor(Shape{hidden}, g == "forget" ? forget_bias : 0.0);
  }
}

Var LSTMCell::forward(const BoundParams& p, const Var& sequences) const {
  const Tensor& xs = sequences.value();
  if (xs.rank() != 3 || xs.dim(2) != in) {
    throw ShapeError(name + ": lstm input", xs.shape(),
                     Shape{xs.rank() > 0 ? xs.dim(0) : 0, xs.rank() > 1 ? xs.dim(1) : 0, in});
  }
  const std::size_t batch = xs.dim(0), steps = xs.dim(1);
  Tape& tape = *sequences.tape();

  std::vector<Var> ws, bs;
  for (const char* gate : kGates) {
    ws.push_back(param(p, name + ".w_" + gate));
    bs.push_back(param(p, name + ".b_" + gate));
  }
  // Gate blocks side by side: [input | forget | output | cell].
  const Var w = ad::concat(ws, 1);
  const Var b = ad::expand(ad::concat(bs, 0), 0, batch);

  Var h = tape.constant(Tensor(Shape{batch, hidden}));
  Var c = tape.constant(Tensor(Shape{batch, hidden}));
  for (std::size_t t = 0; t < steps; ++t) {
    const Var x_t = ad::reshape(ad::slice(sequences, 1, t, t + 1), Shape{batch, in});
    const Var z = ad::add(ad::matmul(ad::concat({x_t, h}, 1), w), b);
    const Var i_g = ad::sigmoid(ad::slice(z, 1, 0, hidden));
    const Var f_g = ad::sigmoid(ad::slice(z, 1, hidden, 2 * hidden));
    const Var o_g = ad::sigmoid(ad::slice(z, 1, 2 * hidden, 3 * hidden));
    const Var g_g = ad::tanh(ad::slice(z, 1, 3 * hidden, 4 * hidden));
    c = ad::add(ad::mul(f_g, c), ad::mul(i_g, g_g));
    h = ad::mul(o_g, ad::tanh(c));
  }
  return h;
}

Var lstm_forward(const LSTMCell& cell, const BoundParams& p, const Var& sequence) {
  if (sequence.value().rank() != 2) {
    throw ShapeError("lstm_forward: expected (n x d) sequence, got " +
                     shape_str(sequence.shape()));
  }
  const Shape s = sequence.shape();
  const Var h = cell.forward(p, ad::reshape(sequence, Shape{1, s[0], s[1]}));
  return ad::reshape(h, Shape{cell.hidden});
}

Var dropout(const Var& x, double rate, Rng& rng, bool training) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw std::invalid_argument("dropout: rate must lie in [0, 1), got " +
                                std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  Tensor mask(x.shape());
  const double keep = 1.0 / (1.0 - rate);
  for (double& m : mask.storage()) m = rng.bernoulli(rate) ? 0.0 : keep;
  return ad::mul(x, x.tape()->constant(std::move(mask)));
}

void Optimizer::step(Params& params, const ParamGrads& grads, Direction dir) {
  ++steps_;
  const double sign = dir == Direction::minimize ? 1.0 : -1.0;
  const double t = static_cast<double>(steps_);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t);

  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw std::out_of_range("optimizer: unknown parameter " + name);
    Tensor& p = it->second;
    if (p.shape() != g.shape()) throw ShapeError("optimizer step " + name, p.shape(), g.shape());

    if (cfg_.kind == OptimizerKind::sgd) {
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double d = sign * g[i] + cfg_.weight_decay * p[i];
        p[i] -= cfg_.lr * d;
      }
      continue;
    }
    Tensor& m = m_[name];
    Tensor& v = v_[name];
    if (m.shape() != p.shape()) m = Tensor(p.shape());
    if (v.shape() != p.shape()) v = Tensor(p.shape());
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double d = sign * g[i] + cfg_.weight_decay * p[i];
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * d;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * d * d;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      p[i] -= cfg_.lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
    }
  }
}

void Optimizer::restore(std::uint64_t steps, std::map<std::string, Tensor> m,
                        std::map<std::string, Tensor> v) {
  steps_ = steps;
  m_ = std::move(m);
  v_ = std::move(v);
}

double clip_global_norm(ParamGrads& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, g] : grads)
    for (double x : g.data()) sq += x * x;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [_, g] : grads)
      for (double& x : g.storage()) x *= s;
  }
  return norm;
}

}  // namespace spanlab::nn
