// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic set tasks with exact label oracles, MNIST ingestion, and the
// JSON-lines dataset format.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "spanlab/rng.hpp"
#include "spanlab/tensor.hpp"

namespace spanlab::tasks {

enum class TaskKind { kary, percentile, maxflow, spiked, maxdigit, sum };

std::string to_string(TaskKind kind);
TaskKind parse_task_kind(const std::string& s);

struct TaskConfig {
  TaskKind kind = TaskKind::percentile;
  std::size_t n = 20;
  std::size_t d = 1;  // kary, spiked, sum; derived for the others
  std::size_t k = 2;
  double r = 50.0;
  double sigma = 0.1;
  std::size_t value_range = 0;  // percentile values in [1, value_range]; 0 means n
  std::size_t vertices = 100;
  std::size_t edges = 300;
  std::int64_t cap_lo = 1;
  std::int64_t cap_hi = 20;
  std::size_t embed_dim = 64;
  std::uint64_t graph_seed = 0;
  bool biased = true;
  std::string mnist_images;  // empty: synthetic digit encodings
  std::string mnist_labels;
  std::size_t digit_dim = 16;
  double digit_noise = 0.6;
  std::size_t count = 1000;
  std::uint64_t seed = 0;

  void validate() const;
  /// Element dimension and label length actually produced.
  std::size_t element_dim() const;
  std::size_t label_dim() const;
  bool operator==(const TaskConfig&) const = default;
};

nlohmann::json to_json(const TaskConfig& c);
/// Missing keys keep defaults; unknown keys throw std::invalid_argument.
TaskConfig task_from_json(const nlohmann::json& j);

struct SetInstance {
  Tensor elements;          // n x d
  Tensor label;             // L
  std::vector<int> digits;  // maxdigit only: digit of each element
  bool operator==(const SetInstance&) const = default;
};

struct Dataset {
  TaskConfig config;
  std::vector<SetInstance> items;

  std::size_t n() const { return config.n; }
  std::size_t d() const { return config.element_dim(); }
  std::size_t L() const { return config.label_dim(); }
  /// (count x n x d) elements and (count x L) labels for the given indices.
  Tensor batch_elements(const std::vector<std::size_t>& idx) const;
  Tensor batch_labels(const std::vector<std::size_t>& idx) const;
};

// --- oracles ---------------------------------------------------------------

/// Max over k-subsets of the summed pairwise Euclidean distances. Rows are
/// put in canonical order first, so the value is exactly invariant under
/// row shuffles.
double oracle_kary(const Tensor& x, std::size_t k);

/// Nearest rank: ascending sort, 1-based index ceil(r n / 100).
double oracle_percentile(const std::vector<double>& xs, double r);

struct FlowEdge {
  std::size_t from = 0;
  std::size_t to = 0;
  std::int64_t capacity = 0;
  bool operator==(const FlowEdge&) const = default;
};

struct FlowGraph {
  std::size_t vertices = 0;
  std::vector<FlowEdge> edges;
  std::size_t sink = 0;
};

/// Random digraph in which every vertex reaches the sink (vertex 0): a random
/// in-tree toward the sink plus distinct extra edges, capacities uniform in
/// [cap_lo, cap_hi].
FlowGraph gen_flowgraph(std::size_t vertices, std::size_t edges, std::int64_t cap_lo,
                        std::int64_t cap_hi, std::uint64_t seed);

/// Max flow from the vertex set `sources` to `sink` via a super-source with
/// unbounded edges; DFS augmenting paths (Ford-Fulkerson).
std::int64_t oracle_maxflow(const FlowGraph& g, const std::vector<std::size_t>& sources,
                            std::size_t sink);

/// Capacity matrix flattened and projected to `dim` by a seeded Gaussian
/// matrix with entries N(0, 1/dim).
std::vector<double> graph_embedding(const FlowGraph& g, std::size_t dim, std::uint64_t seed);

/// Unit top eigenvector of sum_i x_i x_iᵀ by power iteration, first nonzero
/// coordinate made positive.
Tensor oracle_top_eigvec(const Tensor& x, int max_iters = 1000, double tol = 1e-10);

/// Flips sign so the first nonzero coordinate is positive.
Tensor canonical_sign(Tensor v);

// --- digits ----------------------------------------------------------------

struct DigitImages {
  Tensor images;            // count x dim, values in [0, 1] for MNIST
  std::vector<int> labels;  // 0..9
};

/// IDX pair: images magic 0x00000803, labels magic 0x00000801, big-endian.
DigitImages load_mnist_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
DigitImages parse_mnist_idx(std::istream& images, std::istream& labels);

/// Deterministic stand-in: per-digit Gaussian prototypes plus isotropic noise.
DigitImages synthetic_digits(std::size_t dim, std::size_t per_class, double noise,
                             std::uint64_t seed);

/// Sets of `set_size` images with distinct digits; label is one-hot of the
/// largest digit. With `biased`, that image is moved to the last position.
Dataset gen_biased_maxdigit(const DigitImages& source, const TaskConfig& cfg);

// --- generation and files --------------------------------------------------

/// Instance i of every task is a pure function of (config, i).
Dataset generate(const TaskConfig& cfg);

void write_dataset(std::ostream& os, const Dataset& ds);
Dataset read_dataset(std::istream& is);
void save_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& path);

struct VerifyResult {
  bool ok = true;
  std::size_t checked = 0;
  std::string message;
};

/// Recomputes every label with its oracle (or by regeneration where the
/// label is a planted quantity) and compares exactly.
VerifyResult verify_dataset(const Dataset& ds);

}  // namespace spanlab::tasks
