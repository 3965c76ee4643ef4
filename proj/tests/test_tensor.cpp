// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <sstream>

#include "doctest.h"
#include "spanlab/autodiff.hpp"
#include "spanlab/gradcheck.hpp"
#include "spanlab/rng.hpp"

using namespace spanlab;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0,
                     double avoid = 0.0) {
  Tensor t(std::move(shape));
  for (double& v : t.storage()) {
    do {
      v = rng.uniform(lo, hi);
    } while (std::abs(v) < avoid);
  }
  return t;
}

// Scalar probe: weighted sum with fixed random weights, so every output
// entry contributes a distinct amount to the gradient.
Var probe(Tape& t, const Var& y, std::uint64_t seed) {
  Rng rng(seed);
  return ad::sum_all(ad::mul(y, t.constant(random_tensor(y.shape(), rng))));
}

}  // namespace

TEST_CASE("relu, matmul and logsumexp examples") {
  Tape t(false);
  const Var x = t.constant(Tensor::matrix({{-1, 2}, {0, -3}}));
  CHECK(ad::relu(x).value() == Tensor::matrix({{0, 2}, {0, 0}}));

  Rng rng(3);
  const Tensor a = random_tensor({3, 3}, rng);
  CHECK(ops::matmul(Tensor::identity(3), a) == a);

  const double lse = ops::logsumexp(Tensor::vector({0, 0}), 0).item();
  CHECK(lse == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(lse == doctest::Approx(0.6931).epsilon(1e-4));
}

TEST_CASE("shape and domain errors name the op") {
  Tape t;
  const Var a = t.leaf(Tensor(Shape{2, 3}));
  const Var b = t.leaf(Tensor(Shape{2, 2}));
  try {
    ad::add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("add") != std::string::npos);
    CHECK(msg.find("(2,3)") != std::string::npos);
    CHECK(msg.find("(2,2)") != std::string::npos);
  }
  CHECK_THROWS_AS(ad::matmul(a, a), ShapeError);
  CHECK_THROWS_AS(ad::log(t.leaf(Tensor::vector({1.0, 0.0}))), DomainError);
  CHECK_THROWS_AS(ad::log(t.leaf(Tensor::vector({-1.0}))), DomainError);
  CHECK_THROWS_AS(ad::slice(a, 1, 2, 4), ShapeError);
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST_CASE("backward examples") {
  {
    Tape t;
    const Var x = t.leaf(Tensor::vector({1, 2, 3}));
    const Gradients g = t.backward(ad::sum_all(ad::mul(x, x)));
    CHECK(g.at(x) == Tensor::vector({2, 4, 6}));
  }
  {
    Tape t;
    const Var x = t.leaf(Tensor::vector({-1, 2}));
    const Gradients g = t.backward(ad::sum_all(ad::relu(x)));
    CHECK(g.at(x) == Tensor::vector({0, 1}));
  }
}

TEST_CASE("backward errors") {
  Tape t;
  const Var x = t.leaf(Tensor::vector({1, 2}));
  CHECK_THROWS_AS(t.backward(ad::mul(x, x)), ShapeError);

  Tape other;
  const Var y = other.leaf(Tensor::vector({1}));
  const Gradients g = t.backward(ad::sum_all(x));
  CHECK_THROWS(g.at(y));
  const Var c = t.constant(Tensor::vector({1}));
  CHECK_THROWS(g.at(c));
  CHECK_THROWS(t.backward(ad::sum_all(y)));
}

TEST_CASE("max propagates to the first maximal element") {
  Tape t;
  const Var x = t.leaf(Tensor::matrix({{1, 3, 3}, {2, 2, 0}}));
  const Var m = ad::max(x, 1);
  CHECK(m.value() == Tensor::vector({3, 2}));
  const Gradients g = t.backward(ad::sum_all(m));
  CHECK(g.at(x) == Tensor::matrix({{0, 1, 0}, {1, 0, 0}}));
}

TEST_CASE("every primitive op matches central differences") {
  Rng rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t r = 1 + rng.index(8), c = 1 + rng.index(8), k = 1 + rng.index(8);
    const std::size_t b = 1 + rng.index(3);
    const std::uint64_t s = rng.next();
    const Tensor x = random_tensor({r, c}, rng);
    const Tensor y = random_tensor({r, c}, rng);
    const Tensor pos = random_tensor({r, c}, rng, 0.5, 2.0);
    const Tensor w = random_tensor({c, k}, rng);
    const Tensor x3 = random_tensor({b, r, c}, rng);
    const Tensor w3 = random_tensor({b, c, k}, rng);
    const Tensor kink = random_tensor({r, c}, rng, -2.0, 2.0, 1e-3);
    CAPTURE(trial);

    auto unary = [&](auto op, const Tensor& in) {
      return finite_difference_check([&](Tape& t, const Var& v) { return probe(t, op(v), s); }, in);
    };
    auto binary = [&](auto op, const Tensor& a, const Tensor& bb) {
      MultiScalarFn f = [&](Tape& t, const std::vector<Var>& v) { return probe(t, op(v[0], v[1]), s); };
      return finite_difference_check(f, {a, bb}).max_rel_error;
    };

    CHECK(binary([](auto a, auto bb) { return ad::add(a, bb); }, x, y) <= 1e-6);
    CHECK(binary([](auto a, auto bb) { return ad::sub(a, bb); }, x, y) <= 1e-6);
    CHECK(binary([](auto a, auto bb) { return ad::mul(a, bb); }, x, y) <= 1e-6);
    CHECK(binary([](auto a, auto bb) { return ad::div(a, bb); }, x, pos) <= 1e-6);
    CHECK(binary([](auto a, auto bb) { return ad::matmul(a, bb); }, x, w) <= 1e-6);
    CHECK(binary([](auto a, auto bb) { return ad::matmul(a, bb); }, x3, w3) <= 1e-6);
    CHECK(unary([](auto v) { return ad::sigmoid(v); }, x) <= 1e-6);
    CHECK(unary([](auto v) { return ad::tanh(v); }, x) <= 1e-6);
    CHECK(unary([](auto v) { return ad::exp(v); }, x) <= 1e-6);
    CHECK(unary([](auto v) { return ad::log(v); }, pos) <= 1e-6);
    CHECK(unary([](auto v) { return ad::transpose(v); }, x) <= 1e-6);
    CHECK(unary([](auto v) { return ad::transpose(v); }, x3) <= 1e-6);
    CHECK(unary([](auto v) { return ad::sum(v, 0); }, x) <= 1e-6);
    CHECK(unary([](auto v) { return ad::mean(v, 1); }, x) <= 1e-6);
    CHECK(unary([](auto v) { return ad::logsumexp(v, 1); }, x) <= 1e-6);
    CHECK(unary([](auto v) { return ad::logsumexp(v, 0); }, x3) <= 1e-6);
    CHECK(unary([](auto v) { return ad::slice(v, 1, 0, v.dim(1) / 2 + 1); }, x) <= 1e-6);
    CHECK(unary([](auto v) { return ad::concat({v, ad::scale(v, 2.0)}, 0); }, x) <= 1e-6);
    CHECK(unary([](auto v) { return ad::expand(v, 1, 3); }, x) <= 1e-6);
    CHECK(unary([](auto v) { return ad::set_sum(v); }, x3) <= 1e-6);
    CHECK(unary([](auto v) { return ad::gather_rows(v, std::vector<std::vector<std::size_t>>(
                                                           v.dim(0), {0, 0, v.dim(1) - 1})); },
                x3) <= 1e-6);
    // Compositions through kinks, sampled away from them.
    CHECK(unary([](auto v) { return ad::relu(v); }, kink) <= 1e-4);
    CHECK(unary([](auto v) { return ad::max(v, 1); }, kink) <= 1e-4);
    CHECK(unary([](auto v) { return ad::max(ad::relu(v), 0); }, kink) <= 1e-4);
  }
}

TEST_CASE("backward is linear in the loss") {
  Rng rng(11);
  const Tensor x0 = random_tensor({4, 5}, rng);
  const Tensor w0 = random_tensor({5, 3}, rng);
  auto grads = [&](double a, double b) {
    Tape t;
    const Var x = t.leaf(x0);
    const Var w = t.leaf(w0);
    const Var y = ad::matmul(x, w);
    const Var l1 = ad::sum_all(ad::tanh(y));
    const Var l2 = ad::sum_all(ad::logsumexp(y, 1));
    return t.backward(ad::add(ad::scale(l1, a), ad::scale(l2, b))).at(x);
  };
  const Tensor g1 = grads(1, 0), g2 = grads(0, 1), g = grads(2.5, -0.75);
  for (std::size_t i = 0; i < g.size(); ++i) {
    CHECK(std::abs(g[i] - (2.5 * g1[i] - 0.75 * g2[i])) <= 1e-12);
  }
}

TEST_CASE("identical inputs give bit-identical results") {
  auto run = [] {
    Rng rng(5);
    Tape t;
    const Var x = t.leaf(random_tensor({6, 4}, rng));
    const Var y = ad::logsumexp(ad::matmul(x, ad::transpose(x)), 1);
    const Var loss = ad::sum_all(ad::sigmoid(y));
    return std::make_pair(loss.value(), t.backward(loss).at(x));
  };
  CHECK(run() == run());
}

TEST_CASE("finite difference check examples") {
  const ScalarFn squares = [](Tape&, const Var& x) { return ad::sum_all(ad::mul(x, x)); };
  CHECK(finite_difference_check(squares, Tensor::vector({1, 2}), 1e-5) <= 1e-8);

  Rng rng(9);
  const ScalarFn sig = [](Tape&, const Var& x) { return ad::sum_all(ad::sigmoid(x)); };
  CHECK(finite_difference_check(sig, random_tensor({4}, rng), 1e-5) <= 1e-6);

  // Square with a doubled backward rule.
  const ScalarFn broken = [](Tape& t, const Var& x) {
    const std::size_t ix = x.id();
    const Var y = t.record(
        ops::mul(x.value(), x.value()), {x},
        [ix](Tape& tt, std::size_t, const Tensor& g) {
          Tensor& gx = tt.grad(ix);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += 2.0 * 2.0 * tt.value(ix)[i] * g[i];
        },
        "bad_square");
    return ad::sum_all(y);
  };
  CHECK(finite_difference_check(broken, Tensor::vector({1.0, -0.5, 2.0})) >= 1e-2);

  const ScalarFn nonfinite = [](Tape&, const Var& x) { return ad::sum_all(ad::scale(x, INFINITY)); };
  CHECK_THROWS_AS(finite_difference_check(nonfinite, Tensor::vector({1.0})), DomainError);
}

TEST_CASE("tensor blob round trip and header layout") {
  Rng rng(1);
  const Tensor t = random_tensor({2, 3, 4}, rng);
  std::stringstream ss;
  write_tensor_blob(ss, t);
  const std::string bytes = ss.str();
  CHECK(bytes.size() == 4 + 4 + 4 + 3 * 8 + 24 * 8);
  CHECK(bytes.substr(0, 4) == "SPTN");
  CHECK(bytes[4] == 1);
  CHECK(bytes[8] == 3);
  CHECK(bytes[12] == 2);
  CHECK(read_tensor_blob(ss) == t);

  std::stringstream scalar;
  write_tensor_blob(scalar, Tensor::scalar(-0.0));
  CHECK(std::signbit(read_tensor_blob(scalar).item()));

  std::stringstream bad("SPTX\x01\x00\x00\x00");
  CHECK_THROWS_AS(read_tensor_blob(bad), FormatError);
  std::stringstream truncated(bytes.substr(0, 30));
  CHECK_THROWS_AS(read_tensor_blob(truncated), FormatError);
}
