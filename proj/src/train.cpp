// SPDX-License-Identifier: Apache-2.0
#include "spanlab/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>

namespace spanlab::train {

namespace {

enum Stream : std::uint64_t {
  kEpochStream = 0x45504f43,  // batch order per epoch
  kLearnerStream,
  kAdversaryStream,
};

const std::pair<LossKind, const char*> kLosses[] = {
    {LossKind::mse, "mse"},
    {LossKind::eigvec_cosine, "eigvec_cosine"},
    {LossKind::cross_entropy, "cross_entropy"},
};

std::string optimizer_name(nn::OptimizerKind k) { return k == nn::OptimizerKind::adam ? "adam" : "sgd"; }

nn::OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return nn::OptimizerKind::adam;
  if (s == "sgd") return nn::OptimizerKind::sgd;
  throw std::invalid_argument("train: unknown optimizer '" + s + "'");
}

std::int64_t parse_steps(const nlohmann::json& v) {
  if (v.is_string()) {
    if (v.get<std::string>() == "epoch") return -1;
    throw std::invalid_argument("train: step counts are integers or \"epoch\"");
  }
  return v.get<std::int64_t>();
}

nlohmann::json steps_json(std::int64_t s) { return s < 0 ? nlohmann::json("epoch") : nlohmann::json(s); }

std::size_t resolve_steps(std::int64_t s, std::size_t per_epoch) {
  return s < 0 ? per_epoch : static_cast<std::size_t>(s);
}

nn::OptimizerConfig learner_config(const TrainConfig& c) {
  nn::OptimizerConfig o;
  o.kind = c.optimizer;
  o.lr = c.lr;
  o.weight_decay = c.weight_decay;
  return o;
}

nn::OptimizerConfig adversary_config(const TrainConfig& c) {
  nn::OptimizerConfig o;
  o.kind = c.adversary_optimizer;
  o.lr = c.adversary_lr;
  return o;
}

}  // namespace

std::string to_string(LossKind k) {
  for (const auto& [kind, s] : kLosses)
    if (kind == k) return s;
  throw std::invalid_argument("unknown loss kind");
}

LossKind parse_loss_kind(const std::string& s) {
  for (const auto& [kind, name] : kLosses)
    if (s == name) return kind;
  throw std::invalid_argument("train: unknown loss '" + s + "'");
}

LossKind default_loss(tasks::TaskKind task) {
  switch (task) {
    case tasks::TaskKind::spiked: return LossKind::eigvec_cosine;
    case tasks::TaskKind::maxdigit: return LossKind::cross_entropy;
    default: return LossKind::mse;
  }
}

Var loss(LossKind kind, const Var& pred, const Tensor& labels) {
  if (pred.shape() != labels.shape() || pred.value().rank() != 2) {
    throw ShapeError("loss " + to_string(kind), pred.shape(), labels.shape());
  }
  Tape& t = *pred.tape();
  const Var y = t.constant(labels);
  switch (kind) {
    case LossKind::mse:
      return ad::mean_all(ad::square(ad::sub(pred, y)));
    case LossKind::eigvec_cosine: {
      const Tensor pp = ops::sum(ops::mul(pred.value(), pred.value()), 1);
      for (double v : pp.data()) {
        if (!(v > 0.0)) throw DomainError("eigvec_cosine: zero-norm prediction");
      }
      const Var dot = ad::sum(ad::mul(pred, y), 1);
      const Var pnorm = ad::sum(ad::square(pred), 1);
      const Var ynorm = t.constant(ops::sum(ops::mul(labels, labels), 1));
      const Var cos2 = ad::div(ad::square(dot), ad::mul(pnorm, ynorm));
      return ad::add_scalar(ad::neg(ad::mean_all(cos2)), 1.0);
    }
    case LossKind::cross_entropy:
      return ad::mean_all(ad::sub(ad::logsumexp(pred, 1), ad::sum(ad::mul(pred, y), 1)));
  }
  throw std::invalid_argument("unknown loss kind");
}

double loss_eval(LossKind kind, const Tensor& pred, const Tensor& label) {
  Tape t(false);
  const Shape row{1, pred.size()};
  return loss(kind, t.constant(ops::reshape(pred, row)), ops::reshape(label, Shape{1, label.size()}))
      .value()
      .item();
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train: " + m); };
  if (!(lr >= 0.0) || !(adversary_lr >= 0.0)) fail("learning rates must be >= 0");
  if (batch == 0) fail("batch must be positive");
  if (learner_steps < -1 || adversary_steps < -1) fail("step counts are >= 0 or \"epoch\"");
  if (learner_steps == 0) fail("learner_steps must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (!(clip >= 0.0)) fail("clip must be >= 0");
  if (!(divergence > 0.0)) fail("divergence bound must be positive");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {
      {"lr", c.lr},
      {"adversary_lr", c.adversary_lr},
      {"batch", c.batch},
      {"outer_iters", c.outer_iters},
      {"learner_steps", steps_json(c.learner_steps)},
      {"adversary_steps", steps_json(c.adversary_steps)},
      {"loss", to_string(c.loss)},
      {"weight_decay", c.weight_decay},
      {"optimizer", optimizer_name(c.optimizer)},
      {"adversary_optimizer", optimizer_name(c.adversary_optimizer)},
      {"clip", c.clip},
      {"divergence", c.divergence},
      {"checkpoint_every", c.checkpoint_every},
      {"seed", c.seed},
  };
}

TrainConfig train_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("train: expected an object");
  TrainConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "lr") c.lr = v.get<double>();
    else if (key == "adversary_lr") c.adversary_lr = v.get<double>();
    else if (key == "batch") c.batch = v.get<std::size_t>();
    else if (key == "outer_iters") c.outer_iters = v.get<std::size_t>();
    else if (key == "learner_steps") c.learner_steps = parse_steps(v);
    else if (key == "adversary_steps") c.adversary_steps = parse_steps(v);
    else if (key == "loss") c.loss = parse_loss_kind(v.get<std::string>());
    else if (key == "weight_decay") c.weight_decay = v.get<double>();
    else if (key == "optimizer") c.optimizer = parse_optimizer(v.get<std::string>());
    else if (key == "adversary_optimizer") c.adversary_optimizer = parse_optimizer(v.get<std::string>());
    else if (key == "clip") c.clip = v.get<double>();
    else if (key == "divergence") c.divergence = v.get<double>();
    else if (key == "checkpoint_every") c.checkpoint_every = v.get<std::size_t>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else throw std::invalid_argument("train: unknown key '" + key + "'");
  }
  return c;
}

TrainingDiverged::TrainingDiverged(std::size_t o, const std::string& p, std::size_t s, double l)
    : std::runtime_error("training diverged at outer iteration " + std::to_string(o) + ", " + p +
                         " step " + std::to_string(s) + ": batch loss " + std::to_string(l)),
      outer(o),
      phase(p),
      step(s),
      value(l) {}

void write_history_csv(std::ostream& os, const std::vector<HistoryRow>& rows) {
  os << "outer_iter,phase,step,batch_loss\n";
  char buf[64];
  for (const HistoryRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%.17g", r.loss);
    os << r.outer << ',' << r.phase << ',' << r.step << ',' << buf << '\n';
  }
}

TrainState TrainState::start(models::Model model, const TrainConfig& cfg) {
  return TrainState{std::move(model), nn::Optimizer(learner_config(cfg)),
                    nn::Optimizer(adversary_config(cfg)), 0, 0, 0, {}};
}

std::vector<std::size_t> batch_indices(std::size_t dataset_size, std::size_t batch,
                                       std::uint64_t seed, std::uint64_t step) {
  const std::size_t per_epoch = dataset_size / batch;
  if (per_epoch == 0) throw std::invalid_argument("train: fewer sets than one batch");
  const std::uint64_t epoch = step / per_epoch;
  const std::size_t pos = static_cast<std::size_t>(step % per_epoch);
  Rng rng(derive_seed(seed, kEpochStream, epoch));
  const std::vector<std::size_t> order = rng.permutation(dataset_size);
  return {order.begin() + static_cast<std::ptrdiff_t>(pos * batch),
          order.begin() + static_cast<std::ptrdiff_t>((pos + 1) * batch)};
}

namespace {

/// Epoch orders are cached since every step of an epoch needs the same one.
class Batcher {
 public:
  Batcher(std::size_t size, std::size_t batch, std::uint64_t seed)
      : size_(size), batch_(batch), seed_(seed), per_epoch_(size / batch) {
    if (per_epoch_ == 0) throw std::invalid_argument("train: fewer sets than one batch");
  }
  std::size_t per_epoch() const { return per_epoch_; }
  std::vector<std::size_t> at(std::uint64_t step) {
    const std::uint64_t epoch = step / per_epoch_;
    if (epoch != cached_epoch_) {
      Rng rng(derive_seed(seed_, kEpochStream, epoch));
      order_ = rng.permutation(size_);
      cached_epoch_ = epoch;
    }
    const std::size_t pos = static_cast<std::size_t>(step % per_epoch_);
    return {order_.begin() + static_cast<std::ptrdiff_t>(pos * batch_),
            order_.begin() + static_cast<std::ptrdiff_t>((pos + 1) * batch_)};
  }

 private:
  std::size_t size_, batch_;
  std::uint64_t seed_;
  std::size_t per_epoch_;
  std::uint64_t cached_epoch_ = ~std::uint64_t{0};
  std::vector<std::size_t> order_;
};

/// One optimizer step on the parameters selected by `mine`; returns the
/// batch loss before the step.
double step(models::Model& model, nn::Optimizer& opt, const tasks::Dataset& data,
            const std::vector<std::size_t>& idx, const TrainConfig& cfg, bool adversary_phase,
            Rng& rng) {
  Tape tape;
  const auto bound = nn::bind(tape, model.params(), [&](const std::string& name) {
    return models::Model::is_adversary_param(name) == adversary_phase;
  });
  const Var sets = tape.constant(data.batch_elements(idx));
  const Var pred = model.forward(bound, sets, models::Mode::train, &rng);
  const Var l = loss(cfg.loss, pred, data.batch_labels(idx));
  const double value = l.value().item();
  if (!std::isfinite(value) || value > cfg.divergence) return value;
  nn::ParamGrads grads = nn::collect(tape.backward(l), bound);
  if (cfg.clip > 0.0) nn::clip_global_norm(grads, cfg.clip);
  opt.step(model.params(), grads, adversary_phase ? nn::Direction::maximize : nn::Direction::minimize);
  return value;
}

void check(double value, const TrainConfig& cfg, std::size_t outer, const char* phase, std::size_t s) {
  if (!std::isfinite(value) || value > cfg.divergence) throw TrainingDiverged(outer, phase, s, value);
}

}  // namespace

void train(TrainState& state, const tasks::Dataset& data, const TrainConfig& cfg,
           const TrainHooks& hooks) {
  cfg.validate();
  const auto& spec = state.model.spec();
  if (spec.n != data.n() || spec.d != data.d() || spec.L != data.L()) {
    throw std::invalid_argument("train: model dims (n=" + std::to_string(spec.n) + ", d=" +
                                std::to_string(spec.d) + ", L=" + std::to_string(spec.L) +
                                ") do not match the data (n=" + std::to_string(data.n()) +
                                ", d=" + std::to_string(data.d()) + ", L=" + std::to_string(data.L()) + ")");
  }
  Batcher batches(data.items.size(), cfg.batch, cfg.seed);
  const std::size_t learner_steps = resolve_steps(cfg.learner_steps, batches.per_epoch());
  const std::size_t adversary_steps =
      spec.has_adversary() ? resolve_steps(cfg.adversary_steps, batches.per_epoch()) : 0;

  while (state.outer_done < cfg.outer_iters) {
    const std::size_t t = state.outer_done;
    const std::uint64_t first = state.learner_steps_done;
    for (std::size_t s = 0; s < learner_steps; ++s) {
      const std::uint64_t g = state.learner_steps_done;
      Rng rng(derive_seed(cfg.seed, kLearnerStream, g));
      const double v = step(state.model, state.learner, data, batches.at(g), cfg, false, rng);
      check(v, cfg, t, "learner", s);
      state.history.push_back({t, "learner", s, v});
      ++state.learner_steps_done;
    }
    // The adversary replays this iteration's learner batches.
    for (std::size_t j = 0; j < adversary_steps; ++j) {
      const std::uint64_t g = first + j % learner_steps;
      Rng rng(derive_seed(cfg.seed, kAdversaryStream, state.adversary_steps_done));
      const double v = step(state.model, state.adversary, data, batches.at(g), cfg, true, rng);
      check(v, cfg, t, "adversary", j);
      state.history.push_back({t, "adversary", j, v});
      ++state.adversary_steps_done;
    }
    ++state.outer_done;
    if (hooks.on_outer_end) hooks.on_outer_end(state);
    if (hooks.stop_after && state.outer_done >= hooks.stop_after) break;
  }
}

TrainState train_span(models::Model model, const tasks::Dataset& data, const TrainConfig& cfg) {
  if (!model.spec().has_adversary()) throw std::invalid_argument("train_span: model has no permutation network");
  TrainState s = TrainState::start(std::move(model), cfg);
  train(s, data, cfg);
  return s;
}

TrainState train_standard(models::Model model, const tasks::Dataset& data, const TrainConfig& cfg) {
  if (model.spec().has_adversary()) throw std::invalid_argument("train_standard: model has a permutation network");
  TrainState s = TrainState::start(std::move(model), cfg);
  train(s, data, cfg);
  return s;
}

void fit_affine_maps(models::ModelSpec& spec, const tasks::Dataset& data, LossKind kind) {
  spec.output_shift.clear();
  spec.output_scale.clear();
  if (kind != LossKind::mse || data.items.empty()) return;
  const std::size_t L = data.L();
  const double count = static_cast<double>(data.items.size());
  spec.output_shift.assign(L, 0.0);
  spec.output_scale.assign(L, 0.0);
  for (const auto& s : data.items)
    for (std::size_t j = 0; j < L; ++j) spec.output_shift[j] += s.label[j] / count;
  for (const auto& s : data.items) {
    for (std::size_t j = 0; j < L; ++j) {
      const double c = s.label[j] - spec.output_shift[j];
      spec.output_scale[j] += c * c / count;
    }
  }
  for (double& v : spec.output_scale) v = v > 0.0 ? std::sqrt(v) : 1.0;
}

double dataset_loss(const models::Model& model, const tasks::Dataset& data, LossKind kind,
                    std::size_t batch) {
  double total = 0.0;
  for (std::size_t start = 0; start < data.items.size(); start += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.items.size(), start + batch); ++i) idx.push_back(i);
    Tape tape(false);
    const Var pred = tape.constant(model.predict(data.batch_elements(idx)));
    total += loss(kind, pred, data.batch_labels(idx)).value().item() * static_cast<double>(idx.size());
  }
  return data.items.empty() ? 0.0 : total / static_cast<double>(data.items.size());
}

void save_state(const std::filesystem::path& dir, const TrainState& state, const TrainConfig& cfg) {
  std::map<std::string, Tensor> tensors;
  auto moments = [&](const char* who, const nn::Optimizer& opt) {
    for (const auto& [name, t] : opt.first_moments()) tensors[std::string(who) + ".m." + name] = t;
    for (const auto& [name, t] : opt.second_moments()) tensors[std::string(who) + ".v." + name] = t;
  };
  moments("learner", state.learner);
  moments("adversary", state.adversary);
  nlohmann::json history = nlohmann::json::array();
  for (const auto& r : state.history) history.push_back({r.outer, r.phase, r.step, r.loss});
  const nlohmann::json extra{
      {"train", to_json(cfg)},
      {"outer_done", state.outer_done},
      {"learner_steps_done", state.learner_steps_done},
      {"adversary_steps_done", state.adversary_steps_done},
      {"learner_optimizer_steps", state.learner.steps()},
      {"adversary_optimizer_steps", state.adversary.steps()},
      {"history", history},
  };
  models::save_checkpoint(dir, state.model, extra, tensors);
}

TrainState load_state(const std::filesystem::path& dir, TrainConfig* cfg_out) {
  models::Checkpoint c = models::load_checkpoint(dir);
  const nlohmann::json& e = c.extra;
  if (!e.contains("train")) throw FormatError("checkpoint: no training state in " + dir.string());
  const TrainConfig cfg = train_from_json(e.at("train"));
  if (cfg_out) *cfg_out = cfg;
  TrainState s = TrainState::start(c.model(), cfg);
  auto restore = [&](const std::string& who, nn::Optimizer& opt, const char* steps_key) {
    std::map<std::string, Tensor> m, v;
    for (const auto& [name, t] : c.extra_tensors) {
      if (name.rfind(who + ".m.", 0) == 0) m[name.substr(who.size() + 3)] = t;
      if (name.rfind(who + ".v.", 0) == 0) v[name.substr(who.size() + 3)] = t;
    }
    opt.restore(e.at(steps_key).get<std::uint64_t>(), std::move(m), std::move(v));
  };
  restore("learner", s.learner, "learner_optimizer_steps");
  restore("adversary", s.adversary, "adversary_optimizer_steps");
  s.outer_done = e.at("outer_done").get<std::size_t>();
  s.learner_steps_done = e.at("learner_steps_done").get<std::uint64_t>();
  s.adversary_steps_done = e.at("adversary_steps_done").get<std::uint64_t>();
  for (const auto& r : e.at("history")) {
    s.history.push_back({r.at(0).get<std::size_t>(), r.at(1).get<std::string>(),
                         r.at(2).get<std::size_t>(), r.at(3).get<double>()});
  }
  return s;
}

}  // namespace spanlab::train
