// SPDX-License-Identifier: Apache-2.0
#include "spanlab/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>

#include "spanlab/eval.hpp"

namespace spanlab::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum Stream : std::uint64_t {
  kSplitStream = 0x53504c54,
  kGraphPin,
  kGradcheckStream,
};

/// Exit codes.
enum Exit : int { kOk = 0, kCheckFailed = 1, kUsage = 2, kRuntime = 3, kDiverged = 4 };

[[noreturn]] void bad(const std::string& m) { throw std::invalid_argument(m); }

const json& object_or_empty(const json& j, const char* key) {
  static const json empty = json::object();
  if (!j.contains(key)) return empty;
  const json& v = j.at(key);
  if (!v.is_object()) bad(std::string(key) + ": expected an object");
  return v;
}

DataConfig data_from_json(const json& j) {
  DataConfig d;
  for (const auto& [key, v] : j.items()) {
    if (key == "train_fraction") d.train_fraction = v.get<double>();
    else if (key == "val_fraction") d.val_fraction = v.get<double>();
    else if (key == "unbiased_test") d.unbiased_test = v.get<bool>();
    else if (key == "train_file") d.train_file = v.get<std::string>();
    else if (key == "val_file") d.val_file = v.get<std::string>();
    else if (key == "test_file") d.test_file = v.get<std::string>();
    else bad("data: unknown key '" + key + "'");
  }
  return d;
}

json to_json(const DataConfig& d) {
  return {{"train_fraction", d.train_fraction}, {"val_fraction", d.val_fraction},
          {"unbiased_test", d.unbiased_test},   {"train_file", d.train_file},
          {"val_file", d.val_file},             {"test_file", d.test_file}};
}

EvalConfig eval_from_json(const json& j) {
  EvalConfig e;
  for (const auto& [key, v] : j.items()) {
    if (key == "seed") e.seed = v.get<std::uint64_t>();
    else if (key == "permutations") e.permutations = v.get<std::size_t>();
    else bad("eval: unknown key '" + key + "'");
  }
  return e;
}

GradcheckConfig gradcheck_from_json(const json& j) {
  GradcheckConfig g;
  for (const auto& [key, v] : j.items()) {
    if (key == "tolerance") g.tolerance = v.get<double>();
    else if (key == "step") g.step = v.get<double>();
    else bad("gradcheck: unknown key '" + key + "'");
  }
  return g;
}

SweepConfig sweep_from_json(const json& j) {
  SweepConfig s;
  for (const auto& [key, v] : j.items()) {
    if (key == "seeds") {
      s.seeds = v.get<std::vector<std::uint64_t>>();
    } else if (key == "grid") {
      if (!v.is_object()) bad("sweep.grid: expected an object");
      for (const auto& [axis, values] : v.items()) {
        if (!values.is_array() || values.empty()) bad("sweep.grid." + axis + ": expected a non-empty array");
        s.grid.emplace_back(axis, values.get<std::vector<json>>());
      }
    } else {
      bad("sweep: unknown key '" + key + "'");
    }
  }
  if (s.seeds.empty()) bad("sweep.seeds: need at least one seed");
  return s;
}

json to_json(const SweepConfig& s) {
  json grid = json::object();
  for (const auto& [axis, values] : s.grid) grid[axis] = values;
  return {{"seeds", s.seeds}, {"grid", grid}};
}

/// Every grid point, first axis slowest.
std::vector<std::vector<std::pair<std::string, json>>> grid_points(const SweepConfig& s) {
  std::vector<std::vector<std::pair<std::string, json>>> points{{}};
  for (const auto& [axis, values] : s.grid) {
    std::vector<std::vector<std::pair<std::string, json>>> next;
    for (const auto& p : points) {
      for (const auto& v : values) {
        auto q = p;
        q.emplace_back(axis, v);
        next.push_back(std::move(q));
      }
    }
    points = std::move(next);
  }
  return points;
}

/// The model spec the config implies before any data is seen.
models::ModelSpec dims_from_task(const ExperimentConfig& c) {
  models::ModelSpec s = c.model;
  const std::size_t n = c.task.n, d = c.task.element_dim(), L = c.task.label_dim();
  if (s.n != 0 || s.d != 0) {
    if (s.n != n || s.d != d || s.L != L) {
      bad("model dims (n=" + std::to_string(s.n) + ", d=" + std::to_string(s.d) + ", L=" +
          std::to_string(s.L) + ") do not match the task (n=" + std::to_string(n) + ", d=" +
          std::to_string(d) + ", L=" + std::to_string(L) + ")");
    }
  }
  s.n = n;
  s.d = d;
  s.L = L;
  return s;
}

void validate(const ExperimentConfig& c) {
  c.task.validate();
  c.train.validate();
  dims_from_task(c).validate();
  if (c.train.loss == train::LossKind::cross_entropy && c.task.kind != tasks::TaskKind::maxdigit) {
    bad("loss cross_entropy needs the maxdigit task");
  }
  if (c.train.loss == train::LossKind::eigvec_cosine && c.task.kind != tasks::TaskKind::spiked) {
    bad("loss eigvec_cosine needs the spiked task");
  }
  const auto& d = c.data;
  if (!(d.train_fraction > 0.0) || !(d.val_fraction >= 0.0) || !(d.train_fraction + d.val_fraction < 1.0)) {
    bad("data: need train_fraction > 0, val_fraction >= 0 and their sum < 1");
  }
  const bool any = !d.train_file.empty() || !d.val_file.empty() || !d.test_file.empty();
  if (any && (d.train_file.empty() || d.val_file.empty() || d.test_file.empty())) {
    bad("data: give all of train_file, val_file and test_file, or none");
  }
  if (c.eval.permutations < 2) bad("eval.permutations must be >= 2");
  if (!(c.gradcheck.tolerance > 0.0) || !(c.gradcheck.step > 0.0)) bad("gradcheck: tolerance and step must be positive");
  if (c.out.empty()) bad("out: empty output directory");
}

std::string model_id(const models::ModelSpec& s) { return models::to_string(s.kind); }

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

json run_manifest(const std::string& command, const ExperimentConfig& c, const json& extra) {
  json m{{"format", "spanlab-run"}, {"version", 1}, {"command", command}, {"config", to_json(c)}};
  for (const auto& [k, v] : extra.items()) m[k] = v;
  return m;
}

json split_counts(const Splits& s) {
  return {{"train", s.train.items.size()}, {"val", s.val.items.size()}, {"test", s.test.items.size()}};
}

eval::MetricRow loss_row(const tasks::Dataset& data, const models::Model& m, const std::string& metric,
                         double value) {
  return {tasks::to_string(data.config.kind), model_id(m.spec()), m.spec().seed, data.n(), data.d(), metric,
          value, 0.0};
}

std::vector<eval::MetricRow> test_rows(const ExperimentConfig& c, const models::Model& m, const Splits& s) {
  auto rows = eval::task_metrics(m, s.test, model_id(m.spec()), m.spec().seed, c.eval.seed, c.eval.permutations);
  rows.push_back(loss_row(s.test, m, "test_loss", train::dataset_loss(m, s.test, c.train.loss)));
  return rows;
}

void check_dims(const models::ModelSpec& spec, const tasks::Dataset& data, const std::string& what) {
  if (spec.n != data.n() || spec.d != data.d() || spec.L != data.L()) {
    bad("model (n=" + std::to_string(spec.n) + ", d=" + std::to_string(spec.d) + ", L=" + std::to_string(spec.L) +
        ") does not fit " + what + " (n=" + std::to_string(data.n()) + ", d=" + std::to_string(data.d()) +
        ", L=" + std::to_string(data.L()) + ")");
  }
}

/// Training plus artifacts: checkpoint/, history.csv, results.csv, manifest.json.
train::TrainState train_run(const ExperimentConfig& c, const Splits& splits, const fs::path& dir,
                            const std::optional<fs::path>& resume) {
  const models::ModelSpec spec = resolve_model(c, splits.train);
  std::optional<train::TrainState> state;
  if (resume) {
    train::TrainConfig saved;
    state.emplace(train::load_state(*resume, &saved));
    if (!(state->model.spec() == spec)) bad("checkpoint " + resume->string() + " was trained with a different model");
    saved.outer_iters = c.train.outer_iters;
    saved.checkpoint_every = c.train.checkpoint_every;
    if (!(saved == c.train)) bad("checkpoint " + resume->string() + " was trained with a different train block");
  } else {
    state.emplace(train::TrainState::start(models::Model(spec), c.train));
  }
  train::TrainHooks hooks;
  if (c.train.checkpoint_every > 0) {
    hooks.on_outer_end = [&](const train::TrainState& s) {
      if (s.outer_done % c.train.checkpoint_every != 0) return;
      char name[32];
      std::snprintf(name, sizeof name, "iter_%06zu", s.outer_done);
      train::save_state(dir / "checkpoints" / name, s, c.train);
    };
  }
  train::train(*state, splits.train, c.train, hooks);

  fs::create_directories(dir);
  train::save_state(dir / "checkpoint", *state, c.train);
  {
    std::ofstream h(dir / "history.csv", std::ios::binary);
    train::write_history_csv(h, state->history);
  }
  auto rows = test_rows(c, state->model, splits);
  rows.push_back(loss_row(splits.val, state->model, "val_loss",
                          train::dataset_loss(state->model, splits.val, c.train.loss)));
  eval::aggregate_report(dir, rows);
  ExperimentConfig resolved = c;
  resolved.model = spec;
  write_json(dir / "manifest.json", run_manifest("train", resolved, {{"data", split_counts(splits)}}));
  return std::move(*state);
}

int cmd_gen(const ExperimentConfig& c, const fs::path& dir, std::ostream& out) {
  const Splits s = make_splits(c);
  fs::create_directories(dir);
  tasks::save_dataset(dir / "train.jsonl", s.train);
  tasks::save_dataset(dir / "val.jsonl", s.val);
  tasks::save_dataset(dir / "test.jsonl", s.test);
  write_json(dir / "manifest.json", run_manifest("gen", c, {{"data", split_counts(s)}}));
  out << "wrote " << dir.string() << ": train=" << s.train.items.size() << " val=" << s.val.items.size()
      << " test=" << s.test.items.size() << '\n';
  return kOk;
}

int cmd_train(const ExperimentConfig& c, const fs::path& dir, const std::optional<fs::path>& resume,
              std::ostream& out) {
  const Splits s = make_splits(c);
  const auto state = train_run(c, s, dir, resume);
  const double last = state.history.empty() ? std::nan("") : state.history.back().loss;
  out << "trained " << model_id(state.model.spec()) << " on " << tasks::to_string(c.task.kind) << ": "
      << state.outer_done << " outer iterations, last batch loss " << last << ", outputs in " << dir.string()
      << '\n';
  return kOk;
}

int cmd_eval(const ExperimentConfig& c, const fs::path& checkpoint, const fs::path& dir, std::ostream& out) {
  const models::Model m = models::load_checkpoint(checkpoint).model();
  const Splits s = make_splits(c);
  check_dims(m.spec(), s.test, "the test split");
  const auto rows = test_rows(c, m, s);
  eval::aggregate_report(dir, rows);
  write_json(dir / "manifest.json",
             run_manifest("eval", c, {{"checkpoint", checkpoint.string()}, {"eval_seed", c.eval.seed},
                                      {"data", split_counts(s)}}));
  for (const auto& r : rows) out << r.metric << ' ' << r.value << '\n';
  return kOk;
}

int cmd_oracle_verify(const std::vector<std::pair<std::string, tasks::Dataset>>& sets, std::ostream& out) {
  bool ok = true;
  for (const auto& [name, ds] : sets) {
    const auto r = tasks::verify_dataset(ds);
    if (r.ok) out << "ok " << name << " checked=" << r.checked << '\n';
    else out << "FAIL " << name << ": " << r.message << '\n';
    ok = ok && r.ok;
  }
  return ok ? kOk : kCheckFailed;
}

int cmd_gradcheck(const ExperimentConfig& c, std::ostream& out) {
  models::ModelSpec spec = c.model;
  if (spec.n == 0 || spec.d == 0) spec = dims_from_task(c);
  spec.validate();
  const models::Model m(spec);
  Rng rng(derive_seed(spec.seed, kGradcheckStream, 0));
  Tensor sets(Shape{2, spec.n, spec.d}), probe(Shape{2, spec.L});
  for (double& v : sets.storage()) v = rng.uniform(-1.0, 1.0);
  for (double& v : probe.storage()) v = rng.uniform(-1.0, 1.0);
  const auto t0 = std::chrono::steady_clock::now();
  const auto report = models::model_gradcheck(m, sets, probe, c.gradcheck.step);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool pass = report.max_rel_error <= c.gradcheck.tolerance;
  out << json{{"model", model_id(spec)},      {"n", spec.n},
              {"d", spec.d},                  {"hidden", spec.hidden},
              {"max_rel_error", report.max_rel_error}, {"tolerance", c.gradcheck.tolerance},
              {"seconds", secs},              {"pass", pass}}
             .dump()
      << '\n';
  return pass ? kOk : kCheckFailed;
}

struct SweepRun {
  std::size_t point = 0;
  std::uint64_t seed = 0;
  ExperimentConfig config;
  std::optional<models::Model> model;
  double val_loss = std::numeric_limits<double>::infinity();
  std::string error;
};

int cmd_sweep(const ExperimentConfig& c, const fs::path& dir, std::ostream& out) {
  if (!c.sweep) bad("sweep: config has no sweep block");
  const Splits s = make_splits(c);
  if (s.val.items.empty()) bad("sweep: the validation split is empty");
  const auto points = grid_points(*c.sweep);
  std::vector<SweepRun> runs;
  for (std::size_t p = 0; p < points.size(); ++p) {
    for (std::uint64_t seed : c.sweep->seeds) {
      auto set = points[p];
      set.emplace_back("model.seed", seed);
      set.emplace_back("train.seed", seed);
      runs.push_back({p, seed, with_overrides(c, set), std::nullopt, 0.0, ""});
    }
  }
  eval::parallel_for(runs.size(), [&](std::size_t i) {
    SweepRun& r = runs[i];
    try {
      auto state = train::TrainState::start(models::Model(resolve_model(r.config, s.train)), r.config.train);
      train::train(state, s.train, r.config.train);
      r.val_loss = train::dataset_loss(state.model, s.val, r.config.train.loss);
      r.model.emplace(std::move(state.model));
    } catch (const train::TrainingDiverged& e) {
      r.val_loss = std::numeric_limits<double>::infinity();
      r.error = e.what();
    }
  });

  std::vector<double> mean(points.size(), 0.0);
  for (const auto& r : runs) mean[r.point] += r.val_loss / static_cast<double>(c.sweep->seeds.size());
  std::size_t best = 0;
  for (std::size_t p = 1; p < points.size(); ++p)
    if (mean[p] < mean[best]) best = p;
  if (!std::isfinite(mean[best])) throw std::runtime_error("sweep: every grid point diverged");

  json table = json::array();
  for (std::size_t p = 0; p < points.size(); ++p) {
    json settings = json::object();
    for (const auto& [k, v] : points[p]) settings[k] = v;
    json per_seed = json::array();
    for (const auto& r : runs) {
      if (r.point != p) continue;
      json e{{"seed", r.seed}, {"val_loss", std::isfinite(r.val_loss) ? json(r.val_loss) : json(nullptr)}};
      if (!r.error.empty()) e["error"] = r.error;
      per_seed.push_back(e);
    }
    table.push_back({{"settings", settings},
                     {"mean_val_loss", std::isfinite(mean[p]) ? json(mean[p]) : json(nullptr)},
                     {"runs", per_seed}});
  }

  std::vector<eval::MetricRow> rows;
  for (const auto& r : runs) {
    if (r.point != best) continue;
    if (!r.model) throw std::runtime_error("sweep: winning grid point diverged for seed " + std::to_string(r.seed));
    auto t = test_rows(r.config, *r.model, s);
    t.push_back(loss_row(s.val, *r.model, "val_loss", r.val_loss));
    rows.insert(rows.end(), t.begin(), t.end());
    models::save_checkpoint(dir / "winner" / ("seed_" + std::to_string(r.seed)), *r.model);
  }
  eval::aggregate_report(dir, rows);
  write_json(dir / "sweep.json", {{"points", table}, {"best", best}});
  write_json(dir / "manifest.json", run_manifest("sweep", c, {{"data", split_counts(s)}, {"best", table[best]}}));
  out << "best of " << points.size() << " grid points: " << table[best]["settings"].dump()
      << " mean val loss " << mean[best] << '\n';
  return kOk;
}

void report_error(std::ostream& err, const std::string& command, const char* code, const std::string& message) {
  err << json{{"error", code}, {"command", command}, {"message", message}}.dump() << '\n';
}

}  // namespace

ExperimentConfig experiment_from_json(const json& j) {
  if (!j.is_object()) bad("config: expected a JSON object");
  static const char* known[] = {"task", "model", "train", "data", "eval", "gradcheck", "sweep", "out"};
  for (const auto& [key, v] : j.items()) {
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) bad("config: unknown key '" + key + "'");
  }
  ExperimentConfig c;
  try {
    c.task = tasks::task_from_json(object_or_empty(j, "task"));
    c.model = models::spec_from_json(object_or_empty(j, "model"));
    const json& t = object_or_empty(j, "train");
    c.train = train::train_from_json(t);
    if (!t.contains("loss")) c.train.loss = train::default_loss(c.task.kind);
    c.data = data_from_json(object_or_empty(j, "data"));
    c.eval = eval_from_json(object_or_empty(j, "eval"));
    c.gradcheck = gradcheck_from_json(object_or_empty(j, "gradcheck"));
    if (j.contains("sweep")) c.sweep = sweep_from_json(object_or_empty(j, "sweep"));
    if (j.contains("out")) c.out = j.at("out").get<std::string>();
  } catch (const json::exception& e) {
    bad(std::string("config: ") + e.what());
  }
  validate(c);
  if (c.sweep) {
    for (const auto& [axis, values] : c.sweep->grid) {
      if (axis.rfind("model.", 0) != 0 && axis.rfind("train.", 0) != 0) {
        bad("sweep.grid: key '" + axis + "' must start with model. or train.");
      }
      for (const auto& v : values) with_overrides(c, {{axis, v}});
    }
  }
  return c;
}

json to_json(const ExperimentConfig& c) {
  json j{{"task", tasks::to_json(c.task)},
         {"model", models::to_json(c.model)},
         {"train", train::to_json(c.train)},
         {"data", to_json(c.data)},
         {"eval", {{"seed", c.eval.seed}, {"permutations", c.eval.permutations}}},
         {"gradcheck", {{"tolerance", c.gradcheck.tolerance}, {"step", c.gradcheck.step}}},
         {"out", c.out}};
  if (c.sweep) j["sweep"] = to_json(*c.sweep);
  return j;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError("config " + path.string() + ": " + e.what());
  }
  return experiment_from_json(j);
}

Splits make_splits(const ExperimentConfig& c) {
  const auto& d = c.data;
  Splits s;
  if (!d.train_file.empty()) {
    s.train = tasks::load_dataset(d.train_file);
    s.val = tasks::load_dataset(d.val_file);
    s.test = tasks::load_dataset(d.test_file);
    for (const tasks::Dataset* other : {&s.val, &s.test}) {
      if (other->n() != s.train.n() || other->d() != s.train.d() || other->L() != s.train.L()) {
        bad("data: split files disagree on set dimensions");
      }
    }
    return s;
  }
  const std::size_t count = c.task.count;
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(count) * d.train_fraction));
  const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(count) * d.val_fraction));
  if (n_train == 0 || n_train + n_val >= count) bad("data: task.count too small for the split fractions");
  tasks::TaskConfig base = c.task;
  // Every split must see the same flow graph.
  if (base.kind == tasks::TaskKind::maxflow && base.graph_seed == 0) {
    base.graph_seed = derive_seed(c.task.seed, kGraphPin, 0) | 1;
  }
  auto split = [&](std::uint64_t k, std::size_t size, bool biased) {
    tasks::TaskConfig t = base;
    t.count = size;
    t.seed = derive_seed(c.task.seed, kSplitStream, k);
    t.biased = biased;
    return size == 0 ? tasks::Dataset{t, {}} : tasks::generate(t);
  };
  s.train = split(0, n_train, base.biased);
  s.val = split(1, n_val, base.biased);
  s.test = split(2, count - n_train - n_val, d.unbiased_test ? false : base.biased);
  return s;
}

models::ModelSpec resolve_model(const ExperimentConfig& c, const tasks::Dataset& train) {
  models::ModelSpec s = c.model;
  if (s.n != 0 || s.d != 0) check_dims(s, train, "the training data");
  s.n = train.n();
  s.d = train.d();
  s.L = train.L();
  if (c.model.output_shift.empty()) train::fit_affine_maps(s, train, c.train.loss);
  s.validate();
  return s;
}

ExperimentConfig with_overrides(const ExperimentConfig& c, const std::vector<std::pair<std::string, json>>& set) {
  json j = to_json(c);
  for (const auto& [key, v] : set) {
    const auto dot = key.find('.');
    const std::string block = key.substr(0, dot);
    if (dot == std::string::npos || (block != "model" && block != "train")) {
      bad("override '" + key + "': expected model.<field> or train.<field>");
    }
    j[block][key.substr(dot + 1)] = v;
  }
  j.erase("sweep");
  ExperimentConfig out = experiment_from_json(j);
  out.sweep = c.sweep;
  return out;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"spanlab: set-function learning with an adversarial permutation network", "spanlab"};
  app.require_subcommand(1);
  std::string config_path, out_dir, checkpoint;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> files;
  std::string gc_model = "span";
  std::size_t gc_n = 6, gc_d = 3, gc_hidden = 8, gc_L = 1;
  double gc_tau = 1.0;
  int gc_iters = 20;

  auto common = [&](CLI::App* sub, bool needs_config) {
    auto* opt = sub->add_option("--config", config_path, "experiment config (JSON)");
    if (needs_config) opt->required();
    sub->add_option("--out", out_dir, "output directory (default: the config's \"out\")");
    sub->add_option("--seed", seed, "run seed: model init and batching; for gen, the data seed");
  };
  auto* gen = app.add_subcommand("gen", "generate train/val/test datasets");
  common(gen, true);
  auto* trn = app.add_subcommand("train", "train a model; writes checkpoint, history and results");
  common(trn, true);
  trn->add_option("--checkpoint", checkpoint, "resume from this training checkpoint");
  auto* evl = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  common(evl, true);
  evl->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  auto* ver = app.add_subcommand("oracle-verify", "recompute every label with its oracle");
  common(ver, false);
  ver->add_option("datasets", files, "dataset files (.jsonl)");
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of a model's gradients");
  common(gc, false);
  gc->add_option("--model", gc_model, "model kind (without --config)");
  gc->add_option("--n", gc_n, "set size");
  gc->add_option("--d", gc_d, "element dimension");
  gc->add_option("--L", gc_L, "output dimension");
  gc->add_option("--hidden", gc_hidden, "LSTM / FC width");
  gc->add_option("--tau", gc_tau, "Sinkhorn temperature");
  gc->add_option("--iterations", gc_iters, "Sinkhorn iterations");
  auto* swp = app.add_subcommand("sweep", "grid search; best point by validation loss");
  common(swp, true);

  std::vector<std::string> argv(args.rbegin(), args.rend());
  std::string command = args.empty() ? "" : args.front();
  try {
    app.parse(argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    report_error(err, command, "usage", e.what());
    return kUsage;
  }

  try {
    ExperimentConfig c;
    if (!config_path.empty()) {
      c = load_config(config_path);
    } else if (gc->parsed()) {
      c.model.kind = models::parse_model_kind(gc_model);
      c.model.n = gc_n;
      c.model.d = gc_d;
      c.model.L = gc_L;
      c.model.hidden = gc_hidden;
      c.model.width = gc_hidden;
      c.model.temperature = gc_tau;
      c.model.iterations = gc_iters;
    }
    if (seed) {
      if (gen->parsed()) {
        c = experiment_from_json([&] { json j = to_json(c); j["task"]["seed"] = *seed; return j; }());
      } else if (evl->parsed()) {
        c.eval.seed = *seed;
      } else {
        c = with_overrides(c, {{"model.seed", *seed}, {"train.seed", *seed}});
        if (c.sweep) c.sweep->seeds = {*seed};
      }
    }
    const fs::path dir = out_dir.empty() ? fs::path(c.out) : fs::path(out_dir);
    c.out = dir.string();  // manifests record where the run actually went
    if (gen->parsed()) return cmd_gen(c, dir, out);
    if (trn->parsed()) {
      return cmd_train(c, dir, checkpoint.empty() ? std::nullopt : std::optional<fs::path>(checkpoint), out);
    }
    if (evl->parsed()) return cmd_eval(c, checkpoint, out_dir.empty() ? dir / "eval" : dir, out);
    if (ver->parsed()) {
      std::vector<std::pair<std::string, tasks::Dataset>> sets;
      for (const auto& f : files) sets.emplace_back(f, tasks::load_dataset(f));
      if (files.empty()) {
        if (config_path.empty()) bad("oracle-verify: give dataset files or --config");
        Splits s = make_splits(c);
        sets.emplace_back("train", std::move(s.train));
        sets.emplace_back("val", std::move(s.val));
        sets.emplace_back("test", std::move(s.test));
      }
      return cmd_oracle_verify(sets, out);
    }
    if (gc->parsed()) return cmd_gradcheck(c, out);
    if (swp->parsed()) return cmd_sweep(c, dir, out);
  } catch (const train::TrainingDiverged& e) {
    report_error(err, command, "diverged", e.what());
    return kDiverged;
  } catch (const FormatError& e) {
    report_error(err, command, "format", e.what());
    return kRuntime;
  } catch (const std::invalid_argument& e) {
    report_error(err, command, "config", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    report_error(err, command, "runtime", e.what());
    return kRuntime;
  }
  return kUsage;
}

}  // namespace spanlab::cli
