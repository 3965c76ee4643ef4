// SPDX-License-Identifier: Apache-2.0
#include "spanlab/models.hpp"

#include <fstream>
#include <limits>
#include <stdexcept>

namespace spanlab::models {

namespace {

constexpr std::uint64_t kPiSgdStream = 0x70697367;  // "pisg"

const std::pair<ModelKind, const char*> kKinds[] = {
    {ModelKind::span, "span"},         {ModelKind::span_no_apn, "span_no_apn"},
    {ModelKind::span_fc, "span_fc"},   {ModelKind::deepsets, "deepsets"},
    {ModelKind::janossy, "janossy"},   {ModelKind::pisgd, "pisgd"},
};

Var batch_rows(const Var& x, std::size_t rows, std::size_t cols) {
  return ad::reshape(x, Shape{rows, cols});
}

}  // namespace

std::string to_string(ModelKind kind) {
  for (const auto& [k, s] : kKinds)
    if (k == kind) return s;
  throw std::invalid_argument("unknown model kind");
}

ModelKind parse_model_kind(const std::string& s) {
  for (const auto& [k, name] : kKinds)
    if (s == name) return k;
  throw std::invalid_argument("unknown model kind '" + s + "'");
}

std::string to_string(Pooling p) { return p == Pooling::sum ? "sum" : "max"; }

Pooling parse_pooling(const std::string& s) {
  if (s == "sum") return Pooling::sum;
  if (s == "max") return Pooling::max;
  throw std::invalid_argument("unknown pooling '" + s + "'");
}

void ModelSpec::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("model: " + m); };
  if (n == 0 || d == 0 || L == 0) fail("n, d and L must be positive");
  if (hidden == 0 || width == 0) fail("hidden and width must be positive");
  if (kind == ModelKind::janossy && (arity == 0 || arity > n)) {
    fail("janossy arity " + std::to_string(arity) + " needs 1 <= k <= n = " + std::to_string(n));
  }
  if (!(temperature > 0.0)) fail("temperature must be positive");
  if (iterations < 1) fail("sinkhorn iterations must be >= 1");
  if (permutations == 0) fail("permutations must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
  if (!(input_scale > 0.0)) fail("input_scale must be positive");
  if (!output_shift.empty() && output_shift.size() != L) fail("output_shift needs L entries");
  if (!output_scale.empty() && output_scale.size() != L) fail("output_scale needs L entries");
  if (output_shift.empty() != output_scale.empty()) fail("output_shift and output_scale go together");
}

nlohmann::json to_json(const ModelSpec& s) {
  return {
      {"kind", to_string(s.kind)},
      {"n", s.n},
      {"d", s.d},
      {"L", s.L},
      {"hidden", s.hidden},
      {"width", s.width},
      {"phi_layers", s.phi_layers},
      {"sigma_layers", s.sigma_layers},
      {"pooling", to_string(s.pooling)},
      {"arity", s.arity},
      {"temperature", s.temperature},
      {"iterations", s.iterations},
      {"permutations", s.permutations},
      {"dropout", s.dropout},
      {"hard_inference", s.hard_inference},
      {"input_scale", s.input_scale},
      {"output_shift", s.output_shift},
      {"output_scale", s.output_scale},
      {"seed", s.seed},
  };
}

ModelSpec spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("model: expected an object");
  ModelSpec s;
  for (const auto& [key, v] : j.items()) {
    if (key == "kind") s.kind = parse_model_kind(v.get<std::string>());
    else if (key == "n") s.n = v.get<std::size_t>();
    else if (key == "d") s.d = v.get<std::size_t>();
    else if (key == "L") s.L = v.get<std::size_t>();
    else if (key == "hidden") s.hidden = v.get<std::size_t>();
    else if (key == "width") s.width = v.get<std::size_t>();
    else if (key == "phi_layers") s.phi_layers = v.get<std::size_t>();
    else if (key == "sigma_layers") s.sigma_layers = v.get<std::size_t>();
    else if (key == "pooling") s.pooling = parse_pooling(v.get<std::string>());
    else if (key == "arity") s.arity = v.get<std::size_t>();
    else if (key == "temperature") s.temperature = v.get<double>();
    else if (key == "iterations") s.iterations = v.get<int>();
    else if (key == "permutations") s.permutations = v.get<std::size_t>();
    else if (key == "dropout") s.dropout = v.get<double>();
    else if (key == "hard_inference") s.hard_inference = v.get<bool>();
    else if (key == "input_scale") s.input_scale = v.get<double>();
    else if (key == "output_shift") s.output_shift = v.get<std::vector<double>>();
    else if (key == "output_scale") s.output_scale = v.get<std::vector<double>>();
    else if (key == "seed") s.seed = v.get<std::uint64_t>();
    else throw std::invalid_argument("model: unknown key '" + key + "'");
  }
  return s;
}

std::size_t binomial(std::size_t n, std::size_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  std::size_t r = 1;
  for (std::size_t i = 1; i <= k; ++i) {
    const std::size_t num = n - k + i;
    if (r > std::numeric_limits<std::size_t>::max() / num) {
      throw std::overflow_error("binomial(" + std::to_string(n) + ", " + std::to_string(k) + ")");
    }
    r = r * num / i;  // exact: r * num is C(n-k+i, i) * i
  }
  return r;
}

std::vector<std::vector<std::size_t>> combinations(std::size_t n, std::size_t k) {
  if (k == 0 || k > n) throw std::invalid_argument("combinations: need 1 <= k <= n");
  std::vector<std::vector<std::size_t>> out;
  out.reserve(binomial(n, k));
  std::vector<std::size_t> c(k);
  for (std::size_t i = 0; i < k; ++i) c[i] = i;
  while (true) {
    out.push_back(c);
    std::size_t i = k;
    while (i > 0 && c[i - 1] == n - k + (i - 1)) --i;
    if (i == 0) break;
    ++c[i - 1];
    for (std::size_t j = i; j < k; ++j) c[j] = c[j - 1] + 1;
  }
  return out;
}

Var janossy_tuples(const Var& sets, std::size_t k) {
  if (sets.value().rank() != 3) {
    throw ShapeError("janossy_tuples: expected (B x n x d), got " + shape_str(sets.shape()));
  }
  const std::size_t batch = sets.dim(0), n = sets.dim(1);
  if (k == 0 || k > n) {
    throw std::invalid_argument("janossy: arity " + std::to_string(k) + " exceeds set size " +
                                std::to_string(n));
  }
  if (k == 1) return sets;
  const auto combos = combinations(n, k);
  std::vector<Var> parts;
  for (std::size_t slot = 0; slot < k; ++slot) {
    std::vector<std::size_t> idx(combos.size());
    for (std::size_t c = 0; c < combos.size(); ++c) idx[c] = combos[c][slot];
    parts.push_back(ad::gather_rows(sets, std::vector<std::vector<std::size_t>>(batch, idx)));
  }
  return ad::concat(parts, 2);
}

Model::Model(ModelSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  pn_ = {"pn", spec_.d, spec_.n, spec_.temperature, spec_.iterations};
  lstm_ = {"lstm", spec_.d, spec_.hidden, 1.0};
  Rng rng(spec_.seed);
  const std::size_t w = spec_.width;
  switch (spec_.kind) {
    case ModelKind::span:
      pn_.init(params_, rng);
      [[fallthrough]];
    case ModelKind::span_no_apn:
    case ModelKind::pisgd:
      lstm_.init(params_, rng);
      nn::LinearLayer{"readout", spec_.hidden, spec_.L}.init(params_, rng);
      break;
    case ModelKind::span_fc: {
      pn_.init(params_, rng);
      std::size_t in = spec_.n * spec_.d;
      for (std::size_t i = 0; i < spec_.sigma_layers; ++i, in = w) {
        nn::LinearLayer{"fc" + std::to_string(i), in, w}.init(params_, rng);
      }
      nn::LinearLayer{"out", in, spec_.L}.init(params_, rng);
      break;
    }
    case ModelKind::deepsets:
    case ModelKind::janossy: {
      std::size_t in = spec_.d * (spec_.kind == ModelKind::janossy ? spec_.arity : 1);
      for (std::size_t i = 0; i < spec_.phi_layers; ++i, in = w) {
        nn::LinearLayer{"phi" + std::to_string(i), in, w}.init(params_, rng);
      }
      for (std::size_t i = 0; i < spec_.sigma_layers; ++i, in = w) {
        nn::LinearLayer{"sigma" + std::to_string(i), in, w}.init(params_, rng);
      }
      nn::LinearLayer{"out", in, spec_.L}.init(params_, rng);
      break;
    }
  }
}

Model::Model(ModelSpec spec, nn::Params params) : Model(std::move(spec)) {
  for (const auto& [name, t] : params_) {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("model: missing parameter '" + name + "'");
    if (it->second.shape() != t.shape()) {
      throw ShapeError("model: parameter '" + name + "'", it->second.shape(), t.shape());
    }
  }
  for (const auto& [name, _] : params) {
    if (!params_.count(name)) throw std::invalid_argument("model: unexpected parameter '" + name + "'");
  }
  params_ = std::move(params);
}

bool Model::is_adversary_param(const std::string& name) { return name.rfind("pn.", 0) == 0; }

Var Model::output_map(const Var& raw) const {
  if (spec_.output_scale.empty()) return raw;
  Tape& t = *raw.tape();
  const std::size_t batch = raw.dim(0);
  const Tensor scale = ops::expand(Tensor(Shape{spec_.L}, spec_.output_scale), 0, batch);
  const Tensor shift = ops::expand(Tensor(Shape{spec_.L}, spec_.output_shift), 0, batch);
  return ad::add(ad::mul(raw, t.constant(scale)), t.constant(shift));
}

Var Model::fc_stack(const nn::BoundParams& p, const std::string& prefix, std::size_t layers,
                    const Var& x, std::size_t out, Mode mode, Rng* rng) const {
  Var h = x;
  const bool drop = mode == Mode::train && rng && spec_.dropout > 0.0;
  for (std::size_t i = 0; i < layers; ++i) {
    h = nn::LinearLayer{prefix + std::to_string(i), h.dim(1), spec_.width, nn::Activation::relu}
            .forward(p, h);
    if (drop) h = nn::dropout(h, spec_.dropout, *rng, true);
  }
  if (out == 0) return h;
  return nn::LinearLayer{"out", h.dim(1), out}.forward(p, h);
}

Var Model::span_body(const nn::BoundParams& p, const Var& sets, Mode mode) const {
  Var ptilde = pn_.forward(p, sets);
  if (mode == Mode::eval && spec_.hard_inference) {
    const Tensor& soft = ptilde.value();
    const std::size_t batch = soft.dim(0), n = soft.dim(1);
    Tensor hard(soft.shape());
    for (std::size_t b = 0; b < batch; ++b) {
      const Tensor one = ops::reshape(ops::slice(soft, 0, b, b + 1), Shape{n, n});
      const Tensor m = perm::greedy_round(one).to_matrix();
      std::copy(m.data().begin(), m.data().end(), hard.storage().begin() + b * n * n);
    }
    ptilde = sets.tape()->constant(std::move(hard));
  }
  return perm::apply_soft(ptilde, sets);
}

Var Model::sequence_head(const nn::BoundParams& p, const Var& seq, Mode mode, Rng* rng) const {
  Var h = lstm_.forward(p, seq);
  if (mode == Mode::train && rng && spec_.dropout > 0.0) h = nn::dropout(h, spec_.dropout, *rng, true);
  return nn::LinearLayer{"readout", spec_.hidden, spec_.L}.forward(p, h);
}

Var Model::deepsets(const nn::BoundParams& p, const Var& sets, Mode mode, Rng* rng) const {
  const std::size_t batch = sets.dim(0), rows = sets.dim(1), in = sets.dim(2);
  Var h = batch_rows(sets, batch * rows, in);
  const bool drop = mode == Mode::train && rng && spec_.dropout > 0.0;
  for (std::size_t i = 0; i < spec_.phi_layers; ++i) {
    h = nn::LinearLayer{"phi" + std::to_string(i), h.dim(1), spec_.width, nn::Activation::relu}
            .forward(p, h);
    if (drop) h = nn::dropout(h, spec_.dropout, *rng, true);
  }
  const std::size_t w = h.dim(1);
  h = ad::reshape(h, Shape{batch, rows, w});
  const Var pooled = spec_.pooling == Pooling::sum ? ad::set_sum(h) : ad::max(h, 1);
  return fc_stack(p, "sigma", spec_.sigma_layers, pooled, spec_.L, mode, rng);
}

Var Model::forward(const nn::BoundParams& p, const Var& sets, Mode mode, Rng* rng) const {
  const Tensor& x = sets.value();
  if (x.rank() != 3 || x.dim(1) != spec_.n || x.dim(2) != spec_.d) {
    throw ShapeError("model " + to_string(spec_.kind) + ": expected sets of shape (B," +
                     std::to_string(spec_.n) + "," + std::to_string(spec_.d) + "), got " +
                     shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0);
  const Var in = spec_.input_scale == 1.0 ? sets : ad::scale(sets, spec_.input_scale);
  Var raw;
  switch (spec_.kind) {
    case ModelKind::span:
      raw = sequence_head(p, span_body(p, in, mode), mode, rng);
      break;
    case ModelKind::span_no_apn:
      raw = sequence_head(p, in, mode, rng);
      break;
    case ModelKind::span_fc: {
      const Var flat = ad::reshape(span_body(p, in, mode), Shape{batch, spec_.n * spec_.d});
      raw = fc_stack(p, "fc", spec_.sigma_layers, flat, spec_.L, mode, rng);
      break;
    }
    case ModelKind::deepsets:
      raw = deepsets(p, in, mode, rng);
      break;
    case ModelKind::janossy: {
      std::vector<std::vector<std::size_t>> order(batch);
      const std::size_t block = spec_.n * spec_.d;
      for (std::size_t b = 0; b < batch; ++b) {
        order[b] = ops::canonical_row_order(in.value().data().subspan(b * block, block), spec_.n,
                                            spec_.d);
      }
      raw = deepsets(p, janossy_tuples(ad::gather_rows(in, std::move(order)), spec_.arity), mode,
                     rng);
      break;
    }
    case ModelKind::pisgd: {
      auto permuted = [&](Rng& r, bool shared) {
        std::vector<std::vector<std::size_t>> idx(batch);
        for (std::size_t b = 0; b < batch; ++b) {
          idx[b] = (shared && b > 0) ? idx[0] : r.permutation(spec_.n);
        }
        return ad::gather_rows(in, std::move(idx));
      };
      if (mode == Mode::train) {
        if (!rng) throw std::invalid_argument("pisgd: training forward needs an rng");
        raw = sequence_head(p, permuted(*rng, false), mode, rng);
      } else {
        Var total;
        for (std::size_t r = 0; r < spec_.permutations; ++r) {
          Rng derived(derive_seed(spec_.seed, kPiSgdStream, r));
          const Var y = sequence_head(p, rng ? permuted(*rng, false) : permuted(derived, true),
                                      mode, nullptr);
          total = r == 0 ? y : ad::add(total, y);
        }
        raw = ad::scale(total, 1.0 / static_cast<double>(spec_.permutations));
      }
      break;
    }
  }
  return output_map(raw);
}

Tensor Model::predict(const Tensor& sets, Rng* rng) const {
  const bool single = sets.rank() == 2;
  Tape tape(false);
  const Var x = tape.constant(single ? ops::reshape(sets, Shape{1, sets.dim(0), sets.dim(1)}) : sets);
  const Tensor y = forward(nn::bind(tape, params_), x, Mode::eval, rng).value();
  return single ? ops::reshape(y, Shape{spec_.L}) : y;
}

Tensor Model::soft_permutations(const Tensor& sets) const {
  if (!spec_.has_adversary()) throw std::invalid_argument("model has no permutation network");
  Tape tape(false);
  const Tensor scaled = spec_.input_scale == 1.0 ? sets : ops::scale(sets, spec_.input_scale);
  return pn_.forward(nn::bind(tape, params_), tape.constant(scaled)).value();
}

GradCheckReport model_gradcheck(const Model& model, const Tensor& sets, const Tensor& probe,
                                double h) {
  std::vector<std::string> names;
  std::vector<Tensor> values;
  for (const auto& [name, t] : model.params()) {
    names.push_back(name);
    values.push_back(t);
  }
  const MultiScalarFn f = [&](Tape& t, const std::vector<Var>& v) {
    nn::BoundParams p;
    for (std::size_t i = 0; i < names.size(); ++i) p.emplace(names[i], v[i]);
    const Var y = model.forward(p, t.constant(sets), Mode::eval);
    return ad::sum_all(ad::mul(y, t.constant(probe)));
  };
  return finite_difference_check(f, values, h);
}

namespace {

void check_name(const std::string& name) {
  if (name.empty() || name.find('/') != std::string::npos || name[0] == '.') {
    throw std::invalid_argument("checkpoint: bad tensor name '" + name + "'");
  }
}

nlohmann::json write_group(const std::filesystem::path& dir, const std::string& sub,
                           const std::map<std::string, Tensor>& tensors) {
  nlohmann::json list = nlohmann::json::array();
  if (tensors.empty()) return list;
  std::filesystem::create_directories(dir / sub);
  for (const auto& [name, t] : tensors) {
    check_name(name);
    const std::string file = sub + "/" + name + ".sptn";
    save_tensor((dir / file).string(), t);
    list.push_back({{"name", name}, {"file", file}, {"shape", t.shape()}});
  }
  return list;
}

std::map<std::string, Tensor> read_group(const std::filesystem::path& dir, const nlohmann::json& list) {
  std::map<std::string, Tensor> out;
  for (const auto& e : list) {
    const auto name = e.at("name").get<std::string>();
    check_name(name);
    Tensor t = load_tensor((dir / e.at("file").get<std::string>()).string());
    if (t.shape() != e.at("shape").get<Shape>()) {
      throw FormatError("checkpoint: tensor '" + name + "' shape disagrees with manifest");
    }
    out.emplace(name, std::move(t));
  }
  return out;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const Model& model, const nlohmann::json& extra,
                     const std::map<std::string, Tensor>& extra_tensors) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest{
      {"format", "spanlab-checkpoint"},
      {"version", 1},
      {"spec", to_json(model.spec())},
      {"tensors", write_group(dir, "params", model.params())},
      {"extra_tensors", write_group(dir, "state", extra_tensors)},
      {"extra", extra},
  };
  std::ofstream os(dir / "manifest.json", std::ios::binary | std::ios::trunc);
  os << manifest.dump(2) << '\n';
  if (!os) throw std::runtime_error("checkpoint: cannot write " + (dir / "manifest.json").string());
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json", std::ios::binary);
  if (!is) throw FormatError("checkpoint: cannot open " + (dir / "manifest.json").string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad manifest: ") + e.what());
  }
  if (m.value("format", "") != "spanlab-checkpoint" || m.value("version", 0) != 1) {
    throw FormatError("checkpoint: unrecognized manifest format");
  }
  Checkpoint c;
  c.spec = spec_from_json(m.at("spec"));
  c.params = read_group(dir, m.at("tensors"));
  c.extra_tensors = read_group(dir, m.at("extra_tensors"));
  c.extra = m.at("extra");
  return c;
}

}  // namespace spanlab::models
