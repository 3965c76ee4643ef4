// SPDX-License-Identifier: Apache-2.0
#pragma once

// Metrics over frozen models and the results table. Evaluation over a
// dataset fans out over SPANLAB_THREADS worker threads; every per-set
// random draw is keyed by the set index, so results do not depend on the
// thread count.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "spanlab/models.hpp"
#include "spanlab/tasks.hpp"

namespace spanlab::eval {

/// Worker count from SPANLAB_THREADS (unset or invalid: hardware threads).
std::size_t thread_count();
/// Runs fn(i) for i in [0, count) on up to `threads` threads.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn,
                  std::size_t threads = thread_count());

/// |y - yhat| / |y|; DomainError when |y| <= 1e-9.
double relative_error(double y, double yhat);
/// |v . vhat| / (|v| |vhat|); DomainError on a zero vector.
double cosine_metric(const Tensor& v, const Tensor& vhat);

/// Eval-mode predictions for every set, (count x L).
Tensor predict_all(const models::Model& model, const tasks::Dataset& data, std::size_t batch = 64);

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // population std over sets
};
Summary summarize(const std::vector<double>& values);

std::vector<double> relative_errors(const models::Model& model, const tasks::Dataset& data);
std::vector<double> cosines(const models::Model& model, const tasks::Dataset& data);

struct Invariance {
  double delta = 0.0;          // max over coordinates of std / |mean|
  double component_std = 0.0;  // max over coordinates of std
  bool flagged = false;        // some |mean| <= 1e-12; that coordinate reports std
};

/// Predictions of `set` under `perms` uniform random row permutations.
Invariance invariance_delta(const models::Model& model, const Tensor& set, std::size_t perms,
                            Rng& rng);
/// One result per set; set i draws its permutations from derive_seed(seed, ., i).
std::vector<Invariance> invariance_deltas(const models::Model& model, const tasks::Dataset& data,
                                          std::size_t perms, std::uint64_t seed);

struct Ablation {
  double max = 0.0;
  double last = 0.0;
  double other = 0.0;
};
/// Which digit the predicted class matches: the largest in the set, the last
/// element's, or neither. A class that is both counts as max.
Ablation ablation_fractions(const models::Model& model, const tasks::Dataset& data);
Ablation ablation_fractions(const Tensor& logits, const tasks::Dataset& data);

struct MetricRow {
  std::string task;
  std::string model;
  std::optional<std::uint64_t> seed;  // empty on rows aggregated over seeds
  std::size_t n = 0;
  std::size_t d = 0;
  std::string metric;
  double value = 0.0;
  double std = 0.0;
  bool operator==(const MetricRow&) const = default;
};

/// Standard metrics of `model` on `data` for the task's kind.
std::vector<MetricRow> task_metrics(const models::Model& model, const tasks::Dataset& data,
                                    const std::string& model_id, std::uint64_t seed,
                                    std::uint64_t eval_seed, std::size_t perms = 20);

/// Mean and std over seeds of rows sharing (task, model, n, d, metric).
std::vector<MetricRow> aggregate(const std::vector<MetricRow>& rows);

void write_results_csv(std::ostream& os, const std::vector<MetricRow>& rows);
std::vector<MetricRow> read_results_csv(std::istream& is);

/// One whitespace table per (task, metric): column "n" then one column per
/// model, "nan" where a run is missing.
void write_plot_data(const std::filesystem::path& dir, const std::vector<MetricRow>& aggregated);

/// results.csv (the given rows followed by their aggregate) plus plot data.
void aggregate_report(const std::filesystem::path& dir, const std::vector<MetricRow>& rows);

}  // namespace spanlab::eval
