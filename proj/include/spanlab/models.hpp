// SPDX-License-Identifier: Apache-2.0
#pragma once

// Set-function learners sharing one batched interface: (B x n x d) sets in,
// (B x L) predictions out.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "spanlab/gradcheck.hpp"
#include "spanlab/nn.hpp"
#include "spanlab/perm.hpp"

namespace spanlab::models {

enum class ModelKind { span, span_no_apn, span_fc, deepsets, janossy, pisgd };
enum class Pooling { sum, max };
enum class Mode { train, eval };

std::string to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& s);
std::string to_string(Pooling p);
Pooling parse_pooling(const std::string& s);

struct ModelSpec {
  ModelKind kind = ModelKind::span;
  std::size_t n = 0;
  std::size_t d = 0;
  std::size_t L = 1;
  std::size_t hidden = 128;
  std::size_t width = 128;
  std::size_t phi_layers = 1;
  std::size_t sigma_layers = 1;
  Pooling pooling = Pooling::sum;
  std::size_t arity = 1;
  double temperature = 0.1;
  int iterations = 100;
  std::size_t permutations = 20;
  double dropout = 0.0;
  bool hard_inference = false;
  // Fixed affine maps around the learner: inputs are multiplied by
  // input_scale, raw outputs become raw * output_scale + output_shift.
  double input_scale = 1.0;
  std::vector<double> output_shift;
  std::vector<double> output_scale;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument on inconsistent fields.
  void validate() const;
  bool has_adversary() const {
    return kind == ModelKind::span || kind == ModelKind::span_fc;
  }
  bool operator==(const ModelSpec&) const = default;
};

nlohmann::json to_json(const ModelSpec& spec);
/// Missing keys keep their defaults; unknown keys throw std::invalid_argument.
ModelSpec spec_from_json(const nlohmann::json& j);

/// C(n, k), throwing on overflow.
std::size_t binomial(std::size_t n, std::size_t k);
/// All k-subsets of {0..n-1}, ascending within each, lexicographic overall.
std::vector<std::vector<std::size_t>> combinations(std::size_t n, std::size_t k);
/// (B x n x d) -> (B x C(n,k) x k*d) tuple rows, ordered as `combinations`.
/// The Janossy model sorts each set into canonical value order first, so
/// the tuples it sees do not depend on how the input rows were labelled.
Var janossy_tuples(const Var& sets, std::size_t k);

class Model {
 public:
  /// Fresh parameters drawn from spec.seed.
  explicit Model(ModelSpec spec);
  Model(ModelSpec spec, nn::Params params);

  const ModelSpec& spec() const { return spec_; }
  ModelSpec& spec() { return spec_; }
  const nn::Params& params() const { return params_; }
  nn::Params& params() { return params_; }

  /// Parameters updated by the maximizing player.
  static bool is_adversary_param(const std::string& name);

  /// (B x n x d) -> (B x L). `rng` drives dropout and the pi-SGD
  /// permutations. Training-mode pi-SGD requires one; eval-mode pi-SGD without
  /// one uses R permutations derived from the spec seed, shared by every set.
  Var forward(const nn::BoundParams& p, const Var& sets, Mode mode, Rng* rng = nullptr) const;

  /// Eval-mode value path. Accepts (n x d) -> (L) or (B x n x d) -> (B x L).
  Tensor predict(const Tensor& sets, Rng* rng = nullptr) const;

  /// Soft permutations the adversary currently produces, (B x n x n).
  Tensor soft_permutations(const Tensor& sets) const;

 private:
  Var span_body(const nn::BoundParams& p, const Var& sets, Mode mode) const;
  Var sequence_head(const nn::BoundParams& p, const Var& seq, Mode mode, Rng* rng) const;
  Var fc_stack(const nn::BoundParams& p, const std::string& prefix, std::size_t layers,
               const Var& x, std::size_t out, Mode mode, Rng* rng) const;
  Var deepsets(const nn::BoundParams& p, const Var& sets, Mode mode, Rng* rng) const;
  Var output_map(const Var& raw) const;

  ModelSpec spec_;
  nn::Params params_;
  perm::PermutationNetwork pn_;
  nn::LSTMCell lstm_;
};

/// Central differences of sum(probe * forward(sets)) against backward, over
/// every parameter tensor. Eval mode, so no dropout.
GradCheckReport model_gradcheck(const Model& model, const Tensor& sets, const Tensor& probe,
                                double h = 1e-5);

/// Checkpoint directory: manifest.json plus one tensor blob per named tensor.
/// `extra` and `extra_tensors` carry caller state (optimizer moments etc).
struct Checkpoint {
  ModelSpec spec;
  nn::Params params;
  nlohmann::json extra;
  std::map<std::string, Tensor> extra_tensors;

  Model model() const { return Model(spec, params); }
};

void save_checkpoint(const std::filesystem::path& dir, const Model& model,
                     const nlohmann::json& extra = nlohmann::json::object(),
                     const std::map<std::string, Tensor>& extra_tensors = {});
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace spanlab::models
