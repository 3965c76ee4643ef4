// SPDX-License-Identifier: Apache-2.0
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "spanlab/cli.hpp"
#include "spanlab/eval.hpp"

using namespace spanlab;
using namespace spanlab::cli;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("spanlab_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  }
  return out;
}

json small_config(const fs::path& out) {
  return {{"task", {{"kind", "percentile"}, {"n", 6}, {"count", 120}, {"seed", 5}}},
          {"model", {{"kind", "span"}, {"hidden", 6}, {"iterations", 15}}},
          {"train", {{"outer_iters", 4}, {"batch", 16}, {"lr", 1e-3}}},
          {"out", out.string()}};
}

fs::path write_config(const fs::path& dir, const json& j) {
  const auto p = dir / "config.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

/// The error channel carries exactly one JSON line with an error code.
void check_error_line(const Result& r, const std::string& code) {
  CHECK(r.code != 0);
  CHECK(r.out.empty());
  REQUIRE(!r.err.empty());
  CHECK(r.err.find('\n') == r.err.size() - 1);
  const json e = json::parse(r.err);
  CHECK(e.at("error") == code);
  CHECK(!e.at("message").get<std::string>().empty());
}

}  // namespace

TEST_CASE("config parse, serialize, parse is the identity") {
  std::vector<json> configs{
      json::object(),
      small_config("/tmp/x"),
      {{"task", {{"kind", "spiked"}, {"n", 30}, {"d", 4}, {"sigma", 0.2}}},
       {"model", {{"kind", "janossy"}, {"arity", 2}, {"pooling", "max"}, {"dropout", 0.2}}},
       {"train", {{"adversary_steps", "epoch"}, {"weight_decay", 0.01}}},
       {"data", {{"train_fraction", 0.6}, {"val_fraction", 0.2}}},
       {"eval", {{"seed", 9}, {"permutations", 5}}},
       {"sweep", {{"seeds", {1, 2, 3}}, {"grid", {{"model.width", {64, 128}}, {"train.weight_decay", {0, 0.1}}}}}}},
      {{"task", {{"kind", "maxdigit"}, {"n", 4}}}, {"data", {{"unbiased_test", true}}}},
  };
  for (const auto& j : configs) {
    const ExperimentConfig c = experiment_from_json(j);
    const json once = to_json(c);
    CHECK(experiment_from_json(once) == c);
    CHECK(to_json(experiment_from_json(once)) == once);
  }
}

TEST_CASE("default losses follow the task") {
  CHECK(experiment_from_json({{"task", {{"kind", "spiked"}, {"d", 3}}}}).train.loss == train::LossKind::eigvec_cosine);
  CHECK(experiment_from_json({{"task", {{"kind", "maxdigit"}, {"n", 4}}}}).train.loss == train::LossKind::cross_entropy);
  CHECK(experiment_from_json({{"task", {{"kind", "maxflow"}}}}).train.loss == train::LossKind::mse);
}

TEST_CASE("unknown keys are rejected at every level") {
  const std::vector<json> bad{
      {{"tasks", json::object()}},
      {{"task", {{"kind", "sum"}, {"size", 3}}}},
      {{"model", {{"hiddden", 3}}}},
      {{"train", {{"epochs", 3}}}},
      {{"data", {{"shuffle", true}}}},
      {{"eval", {{"perms", 3}}}},
      {{"gradcheck", {{"tol", 1}}}},
      {{"sweep", {{"seeds", {1}}, {"grids", json::object()}}}},
      {{"sweep", {{"grid", {{"model.widht", {1, 2}}}}}}},
      {{"sweep", {{"grid", {{"task.n", {1, 2}}}}}}},
  };
  for (const auto& j : bad) CHECK_THROWS_AS(experiment_from_json(j), std::invalid_argument);
}

TEST_CASE("incompatible settings fail before any work") {
  CHECK_THROWS_AS(experiment_from_json({{"task", {{"n", 8}}}, {"model", {{"n", 5}, {"d", 1}}}}), std::invalid_argument);
  CHECK_THROWS_AS(experiment_from_json({{"task", {{"kind", "sum"}}}, {"train", {{"loss", "cross_entropy"}}}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(experiment_from_json({{"task", {{"n", 3}}}, {"model", {{"kind", "janossy"}, {"arity", 4}}}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(experiment_from_json({{"data", {{"train_fraction", 0.9}, {"val_fraction", 0.2}}}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(experiment_from_json({{"data", {{"train_file", "a.jsonl"}}}}), std::invalid_argument);
  CHECK_NOTHROW(experiment_from_json({{"task", {{"n", 8}}}, {"model", {{"n", 8}, {"d", 1}}}}));
}

TEST_CASE("splits are 80/10/10, deterministic and share one flow graph") {
  ExperimentConfig c = experiment_from_json({{"task", {{"kind", "maxflow"}, {"n", 3}, {"count", 50}, {"vertices", 12},
                                                       {"edges", 30}, {"embed_dim", 4}, {"seed", 4}}}});
  const Splits s = make_splits(c);
  CHECK(s.train.items.size() == 40);
  CHECK(s.val.items.size() == 5);
  CHECK(s.test.items.size() == 5);
  CHECK(s.train.config.graph_seed != 0);
  CHECK(s.train.config.graph_seed == s.test.config.graph_seed);
  CHECK(s.train.config.seed != s.test.config.seed);
  for (const auto* d : {&s.train, &s.val, &s.test}) CHECK(tasks::verify_dataset(*d).ok);
  // The shared embedding block is identical across splits.
  const std::size_t V = 12, dim = s.train.d();
  for (std::size_t j = V; j < dim; ++j) CHECK(s.train.items[0].elements[j] == s.test.items[0].elements[j]);
  const Splits again = make_splits(c);
  CHECK(again.train.items == s.train.items);
  CHECK(again.test.items == s.test.items);

  ExperimentConfig m = experiment_from_json({{"task", {{"kind", "maxdigit"}, {"n", 4}, {"count", 40}}},
                                             {"data", {{"unbiased_test", true}}}});
  const Splits ms = make_splits(m);
  CHECK(ms.train.config.biased);
  CHECK_FALSE(ms.test.config.biased);
}

TEST_CASE("overrides patch model and train fields strictly") {
  const ExperimentConfig c = experiment_from_json(small_config("/tmp/x"));
  const ExperimentConfig o = with_overrides(c, {{"model.width", 64}, {"train.weight_decay", 0.1}});
  CHECK(o.model.width == 64);
  CHECK(o.train.weight_decay == 0.1);
  CHECK_THROWS_AS(with_overrides(c, {{"model.nope", 1}}), std::invalid_argument);
  CHECK_THROWS_AS(with_overrides(c, {{"task.n", 1}}), std::invalid_argument);
}

TEST_CASE("gradcheck subcommand on the full SPAN forward") {
  const Result r = run_cli({"gradcheck", "--model", "span", "--n", "6", "--d", "3", "--hidden", "8"});
  CHECK(r.code == 0);
  const json j = json::parse(r.out);
  CHECK(j.at("pass") == true);
  CHECK(j.at("max_rel_error").get<double>() <= 1e-4);
  CHECK(j.at("n") == 6);
}

TEST_CASE("train twice with seed 7 gives byte-identical artifacts") {
  const auto dir = scratch("det");
  const auto cfg = write_config(dir, small_config(dir / "a"));
  REQUIRE(run_cli({"train", "--config", cfg.string(), "--seed", "7", "--out", (dir / "a").string()}).code == 0);
  REQUIRE(run_cli({"train", "--config", cfg.string(), "--seed", "7", "--out", (dir / "b").string()}).code == 0);
  CHECK(tree(dir / "a" / "checkpoint") == tree(dir / "b" / "checkpoint"));
  CHECK(slurp(dir / "a" / "results.csv") == slurp(dir / "b" / "results.csv"));
  CHECK(slurp(dir / "a" / "history.csv") == slurp(dir / "b" / "history.csv"));

  // Re-running into the same directory reproduces everything, manifest included.
  const auto before = tree(dir / "a");
  REQUIRE(run_cli({"train", "--config", cfg.string(), "--seed", "7", "--out", (dir / "a").string()}).code == 0);
  CHECK(tree(dir / "a") == before);

  const json m = json::parse(slurp(dir / "a" / "manifest.json"));
  CHECK(m.at("command") == "train");
  CHECK(m.at("config").at("model").at("seed") == 7);
  CHECK(m.at("config").at("train").at("seed") == 7);
  CHECK(m.at("config").at("model").at("n") == 6);
  // The manifest alone reproduces the run.
  std::ofstream(dir / "from_manifest.json") << m.at("config").dump();
  REQUIRE(run_cli({"train", "--config", (dir / "from_manifest.json").string(), "--out", (dir / "c").string()}).code == 0);
  CHECK(tree(dir / "c" / "checkpoint") == tree(dir / "a" / "checkpoint"));

  std::ifstream in(dir / "a" / "results.csv");
  const auto rows = eval::read_results_csv(in);
  std::ostringstream again;
  eval::write_results_csv(again, rows);
  CHECK(again.str() == slurp(dir / "a" / "results.csv"));
  fs::remove_all(dir);
}

TEST_CASE("eval reproduces the training run's test metrics") {
  const auto dir = scratch("eval");
  const auto cfg = write_config(dir, small_config(dir / "run"));
  REQUIRE(run_cli({"train", "--config", cfg.string()}).code == 0);
  const Result r = run_cli({"eval", "--config", cfg.string(), "--checkpoint", (dir / "run" / "checkpoint").string()});
  CHECK(r.code == 0);
  std::ifstream a(dir / "run" / "results.csv"), b(dir / "run" / "eval" / "results.csv");
  const auto train_rows = eval::read_results_csv(a), eval_rows = eval::read_results_csv(b);
  for (const auto& row : eval_rows) {
    if (!row.seed) continue;
    const auto it = std::find_if(train_rows.begin(), train_rows.end(),
                                 [&](const eval::MetricRow& t) { return t.seed && t.metric == row.metric; });
    REQUIRE(it != train_rows.end());
    CHECK(it->value == row.value);
  }
  fs::remove_all(dir);
}

TEST_CASE("resuming from a periodic checkpoint matches an uninterrupted run") {
  const auto dir = scratch("resume");
  json j = small_config(dir / "full");
  j["train"]["checkpoint_every"] = 2;
  const auto cfg = write_config(dir, j);
  REQUIRE(run_cli({"train", "--config", cfg.string()}).code == 0);
  REQUIRE(fs::exists(dir / "full" / "checkpoints" / "iter_000002"));
  REQUIRE(run_cli({"train", "--config", cfg.string(), "--out", (dir / "resumed").string(), "--checkpoint",
                   (dir / "full" / "checkpoints" / "iter_000002").string()})
              .code == 0);
  CHECK(tree(dir / "full" / "checkpoint") == tree(dir / "resumed" / "checkpoint"));
  CHECK(slurp(dir / "full" / "history.csv") == slurp(dir / "resumed" / "history.csv"));

  // A checkpoint from a different model is refused.
  json other = j;
  other["model"]["hidden"] = 7;
  const auto cfg2 = dir / "other.json";
  std::ofstream(cfg2) << other.dump();
  const Result r = run_cli({"train", "--config", cfg2.string(), "--out", (dir / "x").string(), "--checkpoint",
                            (dir / "full" / "checkpoints" / "iter_000002").string()});
  check_error_line(r, "config");
  fs::remove_all(dir);
}

TEST_CASE("gen and oracle-verify") {
  const auto dir = scratch("gen");
  json j = small_config(dir / "data");
  j["task"] = {{"kind", "kary"}, {"n", 6}, {"d", 2}, {"k", 3}, {"count", 40}};
  const auto cfg = write_config(dir, j);
  REQUIRE(run_cli({"gen", "--config", cfg.string()}).code == 0);
  for (const char* f : {"train.jsonl", "val.jsonl", "test.jsonl"}) REQUIRE(fs::exists(dir / "data" / f));
  const Result ok = run_cli({"oracle-verify", (dir / "data" / "train.jsonl").string(), (dir / "data" / "test.jsonl").string()});
  CHECK(ok.code == 0);
  CHECK(ok.out.find("ok ") == 0);

  // Tamper with one label.
  auto ds = tasks::load_dataset(dir / "data" / "val.jsonl");
  ds.items[1].label.storage()[0] += 1.0;
  tasks::save_dataset(dir / "data" / "bad.jsonl", ds);
  const Result bad = run_cli({"oracle-verify", (dir / "data" / "bad.jsonl").string()});
  CHECK(bad.code == 1);
  CHECK(bad.out.find("FAIL") == 0);
  CHECK(bad.out.find("instance 1") != std::string::npos);

  // Gen with a different data seed changes the data.
  REQUIRE(run_cli({"gen", "--config", cfg.string(), "--seed", "99", "--out", (dir / "d2").string()}).code == 0);
  CHECK(slurp(dir / "d2" / "train.jsonl") != slurp(dir / "data" / "train.jsonl"));
  fs::remove_all(dir);
}

TEST_CASE("sweep picks the grid point with the lowest validation loss") {
  const auto dir = scratch("sweep");
  json j = small_config(dir / "sw");
  j["train"]["outer_iters"] = 3;
  j["sweep"] = {{"seeds", {1, 2}}, {"grid", {{"train.lr", {0.0, 1e-2}}, {"model.hidden", {4}}}}};
  const auto cfg = write_config(dir, j);
  const Result r = run_cli({"sweep", "--config", cfg.string()});
  REQUIRE(r.code == 0);
  const json s = json::parse(slurp(dir / "sw" / "sweep.json"));
  const auto& points = s.at("points");
  REQUIRE(points.size() == 2);
  std::size_t best = 0;
  for (std::size_t p = 1; p < points.size(); ++p)
    if (points[p].at("mean_val_loss").get<double>() < points[best].at("mean_val_loss").get<double>()) best = p;
  CHECK(s.at("best") == best);
  CHECK(fs::exists(dir / "sw" / "winner" / "seed_1" / "manifest.json"));
  std::ifstream in(dir / "sw" / "results.csv");
  const auto rows = eval::read_results_csv(in);
  std::size_t per_seed = 0;
  for (const auto& row : rows) per_seed += row.seed.has_value();
  CHECK(per_seed > 0);
  fs::remove_all(dir);
}

TEST_CASE("errors are one machine-parsable line with a nonzero exit") {
  const auto dir = scratch("errors");
  check_error_line(run_cli({"train"}), "usage");
  check_error_line(run_cli({"frobnicate"}), "usage");
  check_error_line(run_cli({"train", "--config", (dir / "missing.json").string()}), "runtime");
  std::ofstream(dir / "broken.json") << "{\"task\": ";
  check_error_line(run_cli({"train", "--config", (dir / "broken.json").string()}), "format");
  std::ofstream(dir / "unknown.json") << R"({"model": {"widht": 3}})";
  check_error_line(run_cli({"train", "--config", (dir / "unknown.json").string()}), "config");
  check_error_line(run_cli({"oracle-verify", (dir / "nope.jsonl").string()}), "format");

  json j = small_config(dir / "div");
  j["train"]["divergence"] = 1e-12;
  const auto cfg = write_config(dir, j);
  const Result r = run_cli({"train", "--config", cfg.string()});
  check_error_line(r, "diverged");
  CHECK(r.code == 4);
  CHECK(r.err.find("outer iteration 0") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("help exits cleanly") {
  const Result r = run_cli({"--help"});
  CHECK(r.code == 0);
  CHECK(r.out.find("oracle-verify") != std::string::npos);
}

TEST_CASE("shipped experiment configs load") {
  std::size_t loaded = 0;
  for (const auto& e : fs::directory_iterator(fs::path(SPANLAB_SOURCE_DIR) / "configs" / "experiments")) {
    CAPTURE(e.path().string());
    const auto c = cli::load_config(e.path());
    CHECK(cli::experiment_from_json(cli::to_json(c)) == c);
    ++loaded;
  }
  CHECK(loaded >= 5);
}
