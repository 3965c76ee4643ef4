// SPDX-License-Identifier: Apache-2.0
#pragma once

// Alternating min-max trainer for models with a permutation adversary, and
// plain minimization for everything else. Every random draw is derived from
// (seed, stream, step), so a run is a pure function of its inputs and can be
// resumed at any outer-iteration boundary.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "spanlab/models.hpp"
#include "spanlab/tasks.hpp"

namespace spanlab::train {

enum class LossKind { mse, eigvec_cosine, cross_entropy };
std::string to_string(LossKind k);
LossKind parse_loss_kind(const std::string& s);
/// The loss each task is trained with.
LossKind default_loss(tasks::TaskKind task);

/// Mean over the batch of the per-set loss; `pred` and `labels` are (B x L).
Var loss(LossKind kind, const Var& pred, const Tensor& labels);
/// Single-set value.
double loss_eval(LossKind kind, const Tensor& pred, const Tensor& label);

/// Step counts of -1 mean "one pass over the training data".
struct TrainConfig {
  double lr = 1e-4;
  double adversary_lr = 1e-4;
  std::size_t batch = 32;
  std::size_t outer_iters = 30;
  std::int64_t learner_steps = 1;
  std::int64_t adversary_steps = 1;
  LossKind loss = LossKind::mse;
  double weight_decay = 0.0;
  nn::OptimizerKind optimizer = nn::OptimizerKind::adam;
  nn::OptimizerKind adversary_optimizer = nn::OptimizerKind::adam;
  double clip = 5.0;  // global gradient norm; 0 disables
  double divergence = 1e6;
  std::size_t checkpoint_every = 0;  // outer iterations; 0 disables
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

nlohmann::json to_json(const TrainConfig& c);
/// Missing keys keep defaults; unknown keys throw std::invalid_argument.
TrainConfig train_from_json(const nlohmann::json& j);

/// Raised when a batch loss is non-finite or above the divergence bound.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t outer, const std::string& phase, std::size_t step, double loss);
  std::size_t outer;
  std::string phase;
  std::size_t step;
  double value;
};

struct HistoryRow {
  std::size_t outer = 0;
  std::string phase;  // "learner" or "adversary"
  std::size_t step = 0;
  double loss = 0.0;
  bool operator==(const HistoryRow&) const = default;
};

void write_history_csv(std::ostream& os, const std::vector<HistoryRow>& rows);

struct TrainState {
  models::Model model;
  nn::Optimizer learner;
  nn::Optimizer adversary;
  std::size_t outer_done = 0;
  std::uint64_t learner_steps_done = 0;
  std::uint64_t adversary_steps_done = 0;
  std::vector<HistoryRow> history;

  /// Fresh state whose optimizers follow `cfg`.
  static TrainState start(models::Model model, const TrainConfig& cfg);
};

struct TrainHooks {
  /// Called after each outer iteration.
  std::function<void(const TrainState&)> on_outer_end;
  /// Stop once this many outer iterations are done (0: run to the end).
  std::size_t stop_after = 0;
};

/// Runs outer iterations state.outer_done .. cfg.outer_iters - 1. Models
/// with a permutation network alternate a learner phase (W_PN frozen) and an
/// adversary phase (everything else frozen, loss ascended); others only run
/// the learner phase.
void train(TrainState& state, const tasks::Dataset& data, const TrainConfig& cfg,
           const TrainHooks& hooks = {});

/// Convenience wrappers that check the model family.
TrainState train_span(models::Model model, const tasks::Dataset& data, const TrainConfig& cfg);
TrainState train_standard(models::Model model, const tasks::Dataset& data, const TrainConfig& cfg);

/// Indices of the training sets in learner step `step` (epoch-wise shuffle,
/// partial last batch dropped).
std::vector<std::size_t> batch_indices(std::size_t dataset_size, std::size_t batch,
                                       std::uint64_t seed, std::uint64_t step);

/// For mse tasks: output_shift/output_scale from the label mean and std of
/// `data`. Other losses clear the output map. input_scale is left alone: it
/// sets how sharp the permutation logits are, so it is a model choice.
void fit_affine_maps(models::ModelSpec& spec, const tasks::Dataset& data, LossKind loss);

/// Mean loss of a frozen model over `data` (eval mode).
double dataset_loss(const models::Model& model, const tasks::Dataset& data, LossKind loss,
                    std::size_t batch = 64);

/// Checkpoint = model checkpoint + optimizer moments + counters + history.
void save_state(const std::filesystem::path& dir, const TrainState& state, const TrainConfig& cfg);
TrainState load_state(const std::filesystem::path& dir, TrainConfig* cfg = nullptr);

}  // namespace spanlab::train
