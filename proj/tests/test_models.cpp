// SPDX-License-Identifier: Apache-2.0
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "spanlab/models.hpp"

using namespace spanlab;
using namespace spanlab::models;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

/// Applies the same row permutation to every set of a (B x n x d) batch.
Tensor permute_rows(const Tensor& sets, const std::vector<std::size_t>& source) {
  return ops::gather_rows(sets, std::vector<std::vector<std::size_t>>(sets.dim(0), source));
}

ModelSpec small(ModelKind kind, std::size_t n = 5, std::size_t d = 3, std::uint64_t seed = 1) {
  ModelSpec s;
  s.kind = kind;
  s.n = n;
  s.d = d;
  s.L = 2;
  s.hidden = 8;
  s.width = 8;
  s.iterations = 30;
  s.seed = seed;
  return s;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("span with a single element") {
  Model m(small(ModelKind::span, 1));
  Rng rng(2);
  const Tensor x = random_tensor({1, 1, 3}, rng);
  Model plain(small(ModelKind::span_no_apn, 1));
  for (auto& [name, t] : plain.params()) t = m.params().at(name);
  CHECK(m.predict(x) == plain.predict(x));
  CHECK(m.soft_permutations(x) == Tensor(Shape{1, 1, 1}, 1.0));
}

TEST_CASE("span with zero adversary weights is exactly invariant") {
  for (ModelKind kind : {ModelKind::span, ModelKind::span_fc}) {
    Model m(small(kind, 6, 2, 3));
    m.params().at("pn.weight") = Tensor(Shape{2, 6});
    Rng rng(4);
    const Tensor x = random_tensor({4, 6, 2}, rng);
    const Tensor y = m.predict(x);
    for (int trial = 0; trial < 20; ++trial) {
      CHECK(m.predict(permute_rows(x, rng.permutation(6))) == y);
    }
  }
}

TEST_CASE("span is invariant for any adversary weights") {
  // Row i of relu(XW) depends on x_i only, so the soft permutation moves
  // with the rows and P'ᵀ(PX) = P̃ᵀX. Sinkhorn column sums still add rows
  // in input order, so equality holds to rounding rather than bitwise.
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    ModelSpec s = small(ModelKind::span, 5, 3, 10 + trial);
    s.temperature = 1.0;
    Model m(s);
    const Tensor x = random_tensor({3, 5, 3}, rng);
    const Tensor y = m.predict(x);
    for (int p = 0; p < 20; ++p) {
      const Tensor z = m.predict(permute_rows(x, rng.permutation(5)));
      for (std::size_t i = 0; i < y.size(); ++i) CHECK(std::abs(z[i] - y[i]) <= 1e-12);
    }
  }
}

TEST_CASE("span gradient matches finite differences") {
  ModelSpec s = small(ModelKind::span, 6, 3, 7);
  s.L = 1;
  s.temperature = 1.0;
  s.iterations = 20;
  Model m(s);
  Rng rng(8);
  const Tensor x = random_tensor({2, 6, 3}, rng);
  const auto start = std::chrono::steady_clock::now();
  const GradCheckReport r = model_gradcheck(m, x, Tensor(Shape{2, 1}, 1.0));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  CAPTURE(r.worst_leaf);
  CHECK(r.max_rel_error <= 1e-4);
  CHECK(secs < 120.0);

  // The adversary gradient is live.
  Tape tape;
  const auto bound = nn::bind(tape, m.params());
  const Var loss = ad::sum_all(m.forward(bound, tape.constant(x), Mode::train));
  const Tensor g = tape.backward(loss).at(bound.at("pn.weight"));
  double norm = 0.0;
  for (double v : g.data()) norm += v * v;
  CHECK(norm > 0.0);
}

TEST_CASE("other learners pass finite differences") {
  Rng rng(9);
  for (ModelKind kind : {ModelKind::span_fc, ModelKind::deepsets, ModelKind::janossy,
                         ModelKind::span_no_apn, ModelKind::pisgd}) {
    ModelSpec s = small(kind, 4, 2, 11);
    s.temperature = 1.0;
    s.iterations = 10;
    s.arity = 2;
    s.permutations = 2;
    Model m(s);
    CAPTURE(to_string(kind));
    // Inputs away from zero keep relu kinks out of the probe window.
    const Tensor x = random_tensor({2, 4, 2}, rng, 0.2, 1.0);
    CHECK(model_gradcheck(m, x, random_tensor({2, 2}, rng)).max_rel_error <= 1e-4);
  }
}

TEST_CASE("deepsets with identity layers sums the set") {
  ModelSpec s = small(ModelKind::deepsets, 7, 3);
  s.width = 3;
  s.L = 3;
  Model m(s);
  for (const char* layer : {"phi0", "sigma0", "out"}) {
    m.params().at(std::string(layer) + ".weight") = Tensor::identity(3);
    m.params().at(std::string(layer) + ".bias") = Tensor(Shape{3});
  }
  Rng rng(12);
  const Tensor x = random_tensor({1, 7, 3}, rng, 0.0, 5.0);
  const Tensor y = m.predict(x);
  for (std::size_t j = 0; j < 3; ++j) {
    double s2 = 0.0;
    for (std::size_t i = 0; i < 7; ++i) s2 += x[i * 3 + j];
    CHECK(y.at(0, j) == doctest::Approx(s2).epsilon(1e-12));
  }
}

TEST_CASE("deepsets and janossy are bit-identical under permutation") {
  Rng rng(13);
  for (Pooling pool : {Pooling::sum, Pooling::max}) {
    for (std::size_t k : {1u, 2u, 3u}) {
      ModelSpec s = small(k == 1 ? ModelKind::deepsets : ModelKind::janossy, 6, 2, 14);
      s.pooling = pool;
      s.arity = k;
      Model m(s);
      const Tensor x = random_tensor({5, 6, 2}, rng);
      const Tensor y = m.predict(x);
      for (int p = 0; p < 20; ++p) CHECK(m.predict(permute_rows(x, rng.permutation(6))) == y);
    }
  }
}

TEST_CASE("deepsets on one element is sigma(phi(x))") {
  Model m(small(ModelKind::deepsets, 1, 3));
  Rng rng(15);
  const Tensor x = random_tensor({1, 1, 3}, rng);
  Tape t(false);
  const auto p = nn::bind(t, m.params());
  Var h = nn::LinearLayer{"phi0", 3, 8, nn::Activation::relu}.forward(p, t.constant(ops::reshape(x, {1, 3})));
  h = nn::LinearLayer{"sigma0", 8, 8, nn::Activation::relu}.forward(p, h);
  h = nn::LinearLayer{"out", 8, 2}.forward(p, h);
  CHECK(m.predict(x) == h.value());
}

TEST_CASE("janossy with arity one is deepsets") {
  Rng rng(16);
  ModelSpec ds = small(ModelKind::deepsets, 6, 3, 17);
  ModelSpec jp = ds;
  jp.kind = ModelKind::janossy;
  jp.arity = 1;
  Model a(ds), b(jp);
  REQUIRE(a.params() == b.params());
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x = random_tensor({3, 6, 3}, rng);
    const Tensor ya = a.predict(x), yb = b.predict(x);
    for (std::size_t i = 0; i < ya.size(); ++i) CHECK(std::abs(ya[i] - yb[i]) <= 1e-12);
  }
}

TEST_CASE("janossy tuple enumeration") {
  const Tensor x = Tensor(Shape{1, 3, 1}, std::vector<double>{10, 20, 30});
  Tape t(false);
  CHECK(janossy_tuples(t.constant(x), 2).value() == Tensor(Shape{1, 3, 2}, std::vector<double>{10, 20, 10, 30, 20, 30}));
  CHECK(combinations(4, 2) == std::vector<std::vector<std::size_t>>{
                                  {0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}});
  CHECK(binomial(200, 3) == 1313400);
  CHECK(combinations(200, 3).size() == 1313400);
  CHECK(binomial(5, 0) == 1);
  CHECK(binomial(3, 5) == 0);
  CHECK_THROWS(janossy_tuples(t.constant(x), 4));

  ModelSpec s = small(ModelKind::janossy, 3, 1);
  s.arity = 4;
  CHECK_THROWS_AS(Model{s}, std::invalid_argument);
}

TEST_CASE("pi-sgd trivial cases") {
  Rng rng(18);
  Model single(small(ModelKind::pisgd, 1, 3));
  Model plain(small(ModelKind::span_no_apn, 1, 3));
  REQUIRE(single.params() == plain.params());
  const Tensor x1 = random_tensor({2, 1, 3}, rng);
  const Tensor ys = single.predict(x1), yp = plain.predict(x1);
  for (std::size_t i = 0; i < ys.size(); ++i) CHECK(ys[i] == doctest::Approx(yp[i]).epsilon(1e-14));

  // Constant rows: every permutation yields the same sequence.
  Model m(small(ModelKind::pisgd, 5, 2));
  Model direct(small(ModelKind::span_no_apn, 5, 2));
  const Tensor row = random_tensor({1, 1, 2}, rng);
  const Tensor x = ops::reshape(ops::expand(ops::reshape(row, {2}), 0, 5), {1, 5, 2});
  const Tensor avg = m.predict(x), one = direct.predict(x);
  for (std::size_t i = 0; i < avg.size(); ++i) CHECK(avg[i] == doctest::Approx(one[i]).epsilon(1e-14));

  Tape t;
  CHECK_THROWS_AS(m.forward(nn::bind(t, m.params()), t.constant(x), Mode::train), std::invalid_argument);
  Rng r(1);
  CHECK(m.forward(nn::bind(t, m.params()), t.constant(x), Mode::train, &r).value().size() == 2);
}

TEST_CASE("no-apn ablation") {
  Rng rng(19);
  Model m(small(ModelKind::span_no_apn, 6, 2));
  int differ = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x = random_tensor({1, 6, 2}, rng);
    differ += m.predict(x) != m.predict(permute_rows(x, {5, 4, 3, 2, 1, 0}));
  }
  CHECK(differ == 10);

  // With P̃ pinned to the identity the full pipeline is the no-APN model.
  Model full(small(ModelKind::span, 6, 2));
  for (auto& [name, t] : m.params()) t = full.params().at(name);
  const Tensor x = random_tensor({1, 6, 2}, rng);
  Tape t(false);
  const auto p = nn::bind(t, full.params());
  const Var seq = perm::apply_soft(t.constant(ops::reshape(Tensor::identity(6), {1, 6, 6})), t.constant(x));
  const Var h = nn::LSTMCell{"lstm", 2, 8, 1.0}.forward(p, seq);
  CHECK(nn::LinearLayer{"readout", 8, 2}.forward(p, h).value() == m.predict(x));
}

TEST_CASE("hard inference feeds a true permutation of the set") {
  ModelSpec s = small(ModelKind::span, 5, 2, 21);
  s.hard_inference = true;
  Model m(s);
  ModelSpec plain_spec = small(ModelKind::span_no_apn, 5, 2, 21);
  Model plain(plain_spec);
  for (auto& [name, t] : plain.params()) t = m.params().at(name);
  Rng rng(22);
  const Tensor x = random_tensor({1, 5, 2}, rng);
  const Tensor soft = ops::reshape(m.soft_permutations(x), {5, 5});
  const perm::PermMatrix pm = perm::greedy_round(soft);
  const Tensor reordered = ops::reshape(perm::apply_hard(pm, ops::reshape(x, {5, 2})), {1, 5, 2});
  CHECK(m.predict(x) == plain.predict(reordered));
}

TEST_CASE("output and input affine maps") {
  ModelSpec s = small(ModelKind::deepsets, 4, 2);
  Model base(s);
  s.output_shift = {1.0, -2.0};
  s.output_scale = {3.0, 0.5};
  s.input_scale = 1.0;
  Model mapped(s);
  Rng rng(23);
  const Tensor x = random_tensor({2, 4, 2}, rng);
  const Tensor a = base.predict(x), b = mapped.predict(x);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(b.at(i, 0) == a.at(i, 0) * 3.0 + 1.0);
    CHECK(b.at(i, 1) == a.at(i, 1) * 0.5 - 2.0);
  }
  s.output_scale = {1.0};
  CHECK_THROWS_AS(Model{s}, std::invalid_argument);
}

TEST_CASE("spec json round trip and strict keys") {
  ModelSpec s = small(ModelKind::janossy, 6, 2, 0xfeedfacecafebeefULL);
  s.arity = 3;
  s.temperature = 0.1;
  s.output_shift = {0.1, 1.0 / 3.0};
  s.output_scale = {2.5, 1e-7};
  CHECK(spec_from_json(to_json(s)) == s);
  CHECK(spec_from_json(nlohmann::json::parse(to_json(s).dump())) == s);
  nlohmann::json j = to_json(s);
  j["hiden"] = 3;
  CHECK_THROWS_AS(spec_from_json(j), std::invalid_argument);
  CHECK_THROWS_AS(parse_model_kind("lstm"), std::invalid_argument);
}

TEST_CASE("checkpoint round trip is bit exact") {
  const auto dir = std::filesystem::temp_directory_path() / "spanlab_test_ckpt";
  std::filesystem::remove_all(dir);
  Rng rng(24);
  for (ModelKind kind : {ModelKind::span, ModelKind::span_fc, ModelKind::deepsets,
                         ModelKind::janossy, ModelKind::pisgd, ModelKind::span_no_apn}) {
    ModelSpec s = small(kind, 4, 2, 25);
    s.arity = 2;
    s.output_shift = {0.3, -1.1};
    s.output_scale = {1.7, 0.9};
    Model m(s);
    // Perturb so the test is not just re-deriving the seeded init.
    for (auto& [_, t] : m.params())
      for (double& v : t.storage()) v += rng.normal() * 1e-3;
    const auto sub = dir / to_string(kind);
    save_checkpoint(sub, m, {{"note", "x"}}, {{"adam.m.w", random_tensor({3}, rng)}});
    const Checkpoint c = load_checkpoint(sub);
    CHECK(c.spec == s);
    CHECK(c.params == m.params());
    CHECK(c.extra.at("note") == "x");
    CHECK(c.extra_tensors.size() == 1);
    const Tensor x = random_tensor({3, 4, 2}, rng);
    CHECK(c.model().predict(x) == m.predict(x));

    const std::string before = slurp(sub / "manifest.json");
    save_checkpoint(sub, c.model(), c.extra, c.extra_tensors);
    CHECK(slurp(sub / "manifest.json") == before);
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "missing"), FormatError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("forward rejects mismatched set shapes") {
  Model m(small(ModelKind::span, 5, 3));
  Rng rng(26);
  CHECK_THROWS_AS(m.predict(random_tensor({6, 3}, rng)), ShapeError);
  CHECK_THROWS_AS(m.predict(random_tensor({1, 5, 2}, rng)), ShapeError);
}
