// SPDX-License-Identifier: Apache-2.0
#pragma once

// The `spanlab` command line: experiment config files, data splits and the
// subcommands. Lives in the library so tests can drive it in-process.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "spanlab/models.hpp"
#include "spanlab/tasks.hpp"
#include "spanlab/train.hpp"

namespace spanlab::cli {

/// How train/validation/test sets are obtained. With no files, task.count
/// sets are split by fraction; each split is drawn from its own derived seed.
struct DataConfig {
  double train_fraction = 0.8;
  double val_fraction = 0.1;
  bool unbiased_test = false;  // max-digit: draw the test split without position bias
  std::string train_file;
  std::string val_file;
  std::string test_file;
  bool operator==(const DataConfig&) const = default;
};

struct EvalConfig {
  std::uint64_t seed = 0;
  std::size_t permutations = 20;
  bool operator==(const EvalConfig&) const = default;
};

struct GradcheckConfig {
  double tolerance = 1e-4;
  double step = 1e-5;
  bool operator==(const GradcheckConfig&) const = default;
};

/// Grid keys are "model.<field>" or "train.<field>".
struct SweepConfig {
  std::vector<std::uint64_t> seeds{0};
  std::vector<std::pair<std::string, std::vector<nlohmann::json>>> grid;
  bool operator==(const SweepConfig&) const = default;
};

struct ExperimentConfig {
  tasks::TaskConfig task;
  models::ModelSpec model;  // n = d = 0: take dims from the data
  train::TrainConfig train;
  DataConfig data;
  EvalConfig eval;
  GradcheckConfig gradcheck;
  std::optional<SweepConfig> sweep;
  std::string out = "run";
  bool operator==(const ExperimentConfig&) const = default;
};

/// Strict: unknown keys anywhere are errors. A train block without "loss"
/// gets the task's default loss.
ExperimentConfig experiment_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig load_config(const std::filesystem::path& path);

struct Splits {
  tasks::Dataset train, val, test;
};
Splits make_splits(const ExperimentConfig& c);

/// Model spec with dims from the data and output maps fitted to the
/// training labels (unless the config fixes them).
models::ModelSpec resolve_model(const ExperimentConfig& c, const tasks::Dataset& train);

/// Applies "model.x" / "train.x" overrides and re-validates strictly.
ExperimentConfig with_overrides(const ExperimentConfig& c,
                                const std::vector<std::pair<std::string, nlohmann::json>>& set);

/// Entry point; args exclude the program name. Errors are reported as one
/// JSON line on `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace spanlab::cli
