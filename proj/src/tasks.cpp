// SPDX-License-Identifier: Apache-2.0
#include "spanlab/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <set>
#include <stdexcept>

#include "spanlab/ops.hpp"

namespace spanlab::tasks {

namespace {

const std::pair<TaskKind, const char*> kKinds[] = {
    {TaskKind::kary, "kary"},       {TaskKind::percentile, "percentile"},
    {TaskKind::maxflow, "maxflow"}, {TaskKind::spiked, "spiked"},
    {TaskKind::maxdigit, "maxdigit"}, {TaskKind::sum, "sum"},
};

// Streams keep instance draws of different tasks unrelated even when they
// share a seed.
enum Stream : std::uint64_t {
  kKaryStream = 1,
  kPercentileStream,
  kFlowStream,
  kSpikedStream,
  kDigitStream,
  kSumStream,
  kGraphStream,
  kEmbedStream,
  kPrototypeStream,
};

[[noreturn]] void bad(const std::string& m) { throw std::invalid_argument("task: " + m); }

Rng instance_rng(const TaskConfig& c, Stream s, std::size_t i) {
  return Rng(derive_seed(c.seed, s, i));
}

std::uint64_t graph_seed(const TaskConfig& c) { return c.graph_seed ? c.graph_seed : c.seed; }

}  // namespace

std::string to_string(TaskKind kind) {
  for (const auto& [k, s] : kKinds)
    if (k == kind) return s;
  bad("unknown kind");
}

TaskKind parse_task_kind(const std::string& s) {
  for (const auto& [k, name] : kKinds)
    if (s == name) return k;
  bad("unknown task kind '" + s + "'");
}

void TaskConfig::validate() const {
  if (n == 0) bad("n must be positive");
  switch (kind) {
    case TaskKind::kary:
      if (k != 2 && k != 3) bad("kary needs k in {2, 3}");
      if (n < k) bad("kary needs n >= k");
      if (d == 0) bad("d must be positive");
      break;
    case TaskKind::percentile:
      if (!(r > 0.0 && r <= 100.0)) bad("percentile r must lie in (0, 100]");
      break;
    case TaskKind::maxflow:
      if (vertices < 2) bad("maxflow needs at least 2 vertices");
      if (edges + 1 < vertices) bad("maxflow needs |E| >= |V| - 1");
      if (edges > vertices * (vertices - 1)) bad("maxflow: too many edges for a simple digraph");
      if (n >= vertices) bad("maxflow subset size must be < |V|");
      if (cap_lo < 1 || cap_hi < cap_lo) bad("maxflow capacities need 1 <= cap_lo <= cap_hi");
      if (embed_dim == 0) bad("embed_dim must be positive");
      break;
    case TaskKind::spiked:
      if (n < 2 || d < 2) bad("spiked needs n > 1 and d >= 2");
      if (!(sigma >= 0.0)) bad("spiked needs sigma >= 0");
      break;
    case TaskKind::maxdigit:
      if (n > 10) bad("maxdigit sets hold distinct digits, so n <= 10");
      if (mnist_images.empty() != mnist_labels.empty()) bad("give both MNIST files or neither");
      if (mnist_images.empty() && digit_dim == 0) bad("digit_dim must be positive");
      break;
    case TaskKind::sum:
      if (d == 0) bad("d must be positive");
      break;
  }
}

std::size_t TaskConfig::element_dim() const {
  switch (kind) {
    case TaskKind::percentile: return 1;
    case TaskKind::maxflow: return vertices + embed_dim;
    case TaskKind::maxdigit: return mnist_images.empty() ? digit_dim : 784;
    default: return d;
  }
}

std::size_t TaskConfig::label_dim() const {
  switch (kind) {
    case TaskKind::spiked: return d;
    case TaskKind::maxdigit: return 10;
    default: return 1;
  }
}

nlohmann::json to_json(const TaskConfig& c) {
  return {
      {"kind", to_string(c.kind)}, {"n", c.n},
      {"d", c.d},                  {"k", c.k},
      {"r", c.r},                  {"sigma", c.sigma},
      {"value_range", c.value_range}, {"vertices", c.vertices},
      {"edges", c.edges},          {"cap_lo", c.cap_lo},
      {"cap_hi", c.cap_hi},        {"embed_dim", c.embed_dim},
      {"graph_seed", c.graph_seed}, {"biased", c.biased},
      {"mnist_images", c.mnist_images}, {"mnist_labels", c.mnist_labels},
      {"digit_dim", c.digit_dim},  {"digit_noise", c.digit_noise},
      {"count", c.count},          {"seed", c.seed},
  };
}

TaskConfig task_from_json(const nlohmann::json& j) {
  if (!j.is_object()) bad("expected an object");
  TaskConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "kind") c.kind = parse_task_kind(v.get<std::string>());
    else if (key == "n") c.n = v.get<std::size_t>();
    else if (key == "d") c.d = v.get<std::size_t>();
    else if (key == "k") c.k = v.get<std::size_t>();
    else if (key == "r") c.r = v.get<double>();
    else if (key == "sigma") c.sigma = v.get<double>();
    else if (key == "value_range") c.value_range = v.get<std::size_t>();
    else if (key == "vertices") c.vertices = v.get<std::size_t>();
    else if (key == "edges") c.edges = v.get<std::size_t>();
    else if (key == "cap_lo") c.cap_lo = v.get<std::int64_t>();
    else if (key == "cap_hi") c.cap_hi = v.get<std::int64_t>();
    else if (key == "embed_dim") c.embed_dim = v.get<std::size_t>();
    else if (key == "graph_seed") c.graph_seed = v.get<std::uint64_t>();
    else if (key == "biased") c.biased = v.get<bool>();
    else if (key == "mnist_images") c.mnist_images = v.get<std::string>();
    else if (key == "mnist_labels") c.mnist_labels = v.get<std::string>();
    else if (key == "digit_dim") c.digit_dim = v.get<std::size_t>();
    else if (key == "digit_noise") c.digit_noise = v.get<double>();
    else if (key == "count") c.count = v.get<std::size_t>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else bad("unknown key '" + key + "'");
  }
  return c;
}

Tensor Dataset::batch_elements(const std::vector<std::size_t>& idx) const {
  const std::size_t block = n() * d();
  Tensor out(Shape{idx.size(), n(), d()});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto src = items.at(idx[b]).elements.data();
    std::copy(src.begin(), src.end(), out.storage().begin() + b * block);
  }
  return out;
}

Tensor Dataset::batch_labels(const std::vector<std::size_t>& idx) const {
  Tensor out(Shape{idx.size(), L()});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto src = items.at(idx[b]).label.data();
    std::copy(src.begin(), src.end(), out.storage().begin() + b * L());
  }
  return out;
}

// --- oracles ---------------------------------------------------------------

double oracle_kary(const Tensor& x, std::size_t k) {
  if (x.rank() != 2) throw ShapeError("oracle_kary: expected (n x d), got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (k < 2 || k > 3 || n < k) bad("oracle_kary needs k in {2,3} and n >= k");
  const auto order = ops::canonical_row_order(x.data(), n, d);
  std::vector<double> dist(n * n, 0.0);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      double sq = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = x[order[a] * d + c] - x[order[b] * d + c];
        sq += diff * diff;
      }
      dist[a * n + b] = dist[b * n + a] = std::sqrt(sq);
    }
  }
  double best = 0.0;
  if (k == 2) {
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = a + 1; b < n; ++b) best = std::max(best, dist[a * n + b]);
  } else {
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = a + 1; b < n; ++b)
        for (std::size_t c = b + 1; c < n; ++c)
          best = std::max(best, dist[a * n + b] + dist[a * n + c] + dist[b * n + c]);
  }
  return best;
}

double oracle_percentile(const std::vector<double>& xs, double r) {
  if (xs.empty()) bad("percentile of an empty set");
  if (!(r > 0.0 && r <= 100.0)) bad("percentile r must lie in (0, 100]");
  std::vector<double> s = xs;
  std::sort(s.begin(), s.end());
  const double n = static_cast<double>(s.size());
  auto rank = static_cast<std::size_t>(std::ceil(r * n / 100.0));
  rank = std::clamp<std::size_t>(rank, 1, s.size());
  return s[rank - 1];
}

FlowGraph gen_flowgraph(std::size_t vertices, std::size_t edges, std::int64_t cap_lo,
                        std::int64_t cap_hi, std::uint64_t seed) {
  if (vertices < 2 || edges + 1 < vertices || edges > vertices * (vertices - 1)) {
    bad("gen_flowgraph: need |V| >= 2 and |V| - 1 <= |E| <= |V|(|V|-1)");
  }
  Rng rng(derive_seed(seed, kGraphStream));
  FlowGraph g;
  g.vertices = vertices;
  g.sink = 0;
  std::set<std::pair<std::size_t, std::size_t>> used;
  auto add = [&](std::size_t u, std::size_t v) {
    used.insert({u, v});
    g.edges.push_back({u, v, rng.uniform_int(cap_lo, cap_hi)});
  };
  // Attach vertices in random order, each pointing at an already attached
  // one, so every vertex has a path to the sink.
  std::vector<std::size_t> order = rng.permutation(vertices - 1);
  std::vector<std::size_t> attached{0};
  for (std::size_t o : order) {
    const std::size_t v = o + 1;
    add(v, attached[rng.index(attached.size())]);
    attached.push_back(v);
  }
  while (g.edges.size() < edges) {
    const std::size_t u = rng.index(vertices), v = rng.index(vertices);
    if (u == v || used.count({u, v})) continue;
    add(u, v);
  }
  return g;
}

std::int64_t oracle_maxflow(const FlowGraph& g, const std::vector<std::size_t>& sources,
                            std::size_t sink) {
  if (sink >= g.vertices) bad("maxflow: sink out of range");
  for (std::size_t h : sources) {
    if (h == sink) bad("maxflow: sink inside the source set");
    if (h >= g.vertices) bad("maxflow: source out of range");
  }
  if (sources.empty()) return 0;
  // Residual graph as adjacency lists over paired arcs; vertex V is the
  // super-source.
  const std::size_t nv = g.vertices + 1, super = g.vertices;
  struct Arc {
    std::size_t to;
    std::int64_t cap;
  };
  std::vector<Arc> arcs;
  std::vector<std::vector<std::size_t>> adj(nv);
  auto link = [&](std::size_t u, std::size_t v, std::int64_t c) {
    adj[u].push_back(arcs.size());
    arcs.push_back({v, c});
    adj[v].push_back(arcs.size());
    arcs.push_back({u, 0});
  };
  std::int64_t total_cap = 0;
  for (const FlowEdge& e : g.edges) {
    link(e.from, e.to, e.capacity);
    total_cap += e.capacity;
  }
  std::vector<std::size_t> distinct(sources.begin(), sources.end());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  // "Unbounded" only needs to exceed any cut.
  for (std::size_t h : distinct) link(super, h, total_cap + 1);

  std::vector<char> seen(nv);
  std::function<std::int64_t(std::size_t, std::int64_t)> dfs = [&](std::size_t u,
                                                                   std::int64_t limit) {
    if (u == sink) return limit;
    seen[u] = 1;
    for (std::size_t a : adj[u]) {
      Arc& arc = arcs[a];
      if (arc.cap <= 0 || seen[arc.to]) continue;
      const std::int64_t pushed = dfs(arc.to, std::min(limit, arc.cap));
      if (pushed > 0) {
        arc.cap -= pushed;
        arcs[a ^ 1].cap += pushed;
        return pushed;
      }
    }
    return std::int64_t{0};
  };
  std::int64_t flow = 0;
  while (true) {
    std::fill(seen.begin(), seen.end(), 0);
    const std::int64_t pushed = dfs(super, std::numeric_limits<std::int64_t>::max());
    if (pushed == 0) return flow;
    flow += pushed;
  }
}

std::vector<double> graph_embedding(const FlowGraph& g, std::size_t dim, std::uint64_t seed) {
  const std::size_t v = g.vertices;
  std::vector<double> cap(v * v, 0.0);
  for (const FlowEdge& e : g.edges) cap[e.from * v + e.to] += static_cast<double>(e.capacity);
  Rng rng(derive_seed(seed, kEmbedStream));
  const double s = 1.0 / std::sqrt(static_cast<double>(dim));
  std::vector<double> out(dim, 0.0);
  // Projection entries are drawn row by row so a larger graph never reuses
  // a smaller one's matrix prefix in a confusing way.
  for (std::size_t i = 0; i < v * v; ++i) {
    for (std::size_t j = 0; j < dim; ++j) {
      const double w = rng.normal() * s;
      out[j] += cap[i] * w;
    }
  }
  // Capacity sums run into the thousands; bring the embedding to unit scale.
  double norm = 0.0;
  for (double x : out) norm += x * x;
  norm = std::sqrt(norm);
  if (norm > 0.0)
    for (double& x : out) x /= norm;
  return out;
}

Tensor canonical_sign(Tensor v) {
  for (double x : v.data()) {
    if (x == 0.0) continue;
    if (x < 0.0)
      for (double& y : v.storage()) y = -y;
    break;
  }
  return v;
}

Tensor oracle_top_eigvec(const Tensor& x, int max_iters, double tol) {
  if (x.rank() != 2) throw ShapeError("oracle_top_eigvec: expected (n x d), got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<double> c(d * d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) c[a * d + b] += x[i * d + a] * x[i * d + b];
  // Fixed start that is not orthogonal to any coordinate axis.
  std::vector<double> v(d), next(d);
  for (std::size_t a = 0; a < d; ++a) v[a] = 1.0 + 0.1 * static_cast<double>(a);
  auto normalize = [](std::vector<double>& u) {
    double s = 0.0;
    for (double t : u) s += t * t;
    s = std::sqrt(s);
    if (s == 0.0) throw DomainError("oracle_top_eigvec: zero covariance");
    for (double& t : u) t /= s;
  };
  normalize(v);
  for (int it = 0; it < max_iters; ++it) {
    for (std::size_t a = 0; a < d; ++a) {
      double s = 0.0;
      for (std::size_t b = 0; b < d; ++b) s += c[a * d + b] * v[b];
      next[a] = s;
    }
    normalize(next);
    double change = 0.0;
    for (std::size_t a = 0; a < d; ++a) change = std::max(change, std::abs(next[a] - v[a]));
    v.swap(next);
    if (change < tol) break;
  }
  return canonical_sign(Tensor(Shape{d}, v));
}

// --- digits ----------------------------------------------------------------

namespace {

std::uint32_t read_be32(std::istream& is, const char* what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError(std::string("idx: truncated ") + what);
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

}  // namespace

DigitImages parse_mnist_idx(std::istream& images, std::istream& labels) {
  const std::uint32_t magic_i = read_be32(images, "image header");
  if (magic_i != 0x00000803) throw FormatError("idx: bad image magic");
  const std::uint32_t count = read_be32(images, "image header");
  const std::uint32_t rows = read_be32(images, "image header");
  const std::uint32_t cols = read_be32(images, "image header");
  const std::uint32_t magic_l = read_be32(labels, "label header");
  if (magic_l != 0x00000801) throw FormatError("idx: bad label magic");
  const std::uint32_t lcount = read_be32(labels, "label header");
  if (lcount != count) throw FormatError("idx: image and label counts differ");
  const std::size_t dim = std::size_t{rows} * cols;
  DigitImages out;
  out.images = Tensor(Shape{count, dim});
  std::vector<unsigned char> buf(dim);
  for (std::size_t i = 0; i < count; ++i) {
    if (!images.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(dim))) {
      throw FormatError("idx: truncated image data");
    }
    for (std::size_t p = 0; p < dim; ++p) out.images[i * dim + p] = buf[p] / 255.0;
  }
  out.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int c = labels.get();
    if (c == std::char_traits<char>::eof()) throw FormatError("idx: truncated label data");
    if (c > 9) throw FormatError("idx: label out of range");
    out.labels[i] = c;
  }
  return out;
}

DigitImages load_mnist_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  std::ifstream fi(images, std::ios::binary), fl(labels, std::ios::binary);
  if (!fi) throw FormatError("idx: cannot open " + images.string());
  if (!fl) throw FormatError("idx: cannot open " + labels.string());
  return parse_mnist_idx(fi, fl);
}

DigitImages synthetic_digits(std::size_t dim, std::size_t per_class, double noise,
                             std::uint64_t seed) {
  Rng proto_rng(derive_seed(seed, kPrototypeStream));
  Tensor protos(Shape{10, dim});
  for (double& v : protos.storage()) v = proto_rng.normal();
  DigitImages out;
  out.images = Tensor(Shape{10 * per_class, dim});
  out.labels.resize(10 * per_class);
  Rng rng(derive_seed(seed, kPrototypeStream, 1));
  for (std::size_t i = 0; i < 10 * per_class; ++i) {
    const int digit = static_cast<int>(i % 10);
    out.labels[i] = digit;
    for (std::size_t j = 0; j < dim; ++j) {
      out.images[i * dim + j] = protos[digit * dim + j] + noise * rng.normal();
    }
  }
  return out;
}

Dataset gen_biased_maxdigit(const DigitImages& source, const TaskConfig& cfg) {
  cfg.validate();
  const std::size_t dim = source.images.dim(1);
  if (dim != cfg.element_dim()) bad("digit images have the wrong dimension");
  std::vector<std::vector<std::size_t>> by_digit(10);
  for (std::size_t i = 0; i < source.labels.size(); ++i) by_digit.at(source.labels[i]).push_back(i);
  for (const auto& v : by_digit)
    if (v.empty()) bad("digit source lacks some digit");
  Dataset ds{cfg, {}};
  ds.items.reserve(cfg.count);
  for (std::size_t i = 0; i < cfg.count; ++i) {
    Rng rng = instance_rng(cfg, kDigitStream, i);
    std::vector<std::size_t> all = rng.permutation(10);
    std::vector<int> digits(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(cfg.n));
    if (cfg.biased) {
      auto top = std::max_element(digits.begin(), digits.end());
      std::iter_swap(top, digits.end() - 1);
    }
    SetInstance inst;
    inst.elements = Tensor(Shape{cfg.n, dim});
    for (std::size_t j = 0; j < cfg.n; ++j) {
      const auto& pool = by_digit[digits[j]];
      const std::size_t img = pool[rng.index(pool.size())];
      for (std::size_t p = 0; p < dim; ++p) inst.elements[j * dim + p] = source.images[img * dim + p];
    }
    inst.label = Tensor(Shape{10});
    inst.label[*std::max_element(digits.begin(), digits.end())] = 1.0;
    inst.digits = std::move(digits);
    ds.items.push_back(std::move(inst));
  }
  return ds;
}

// --- generation ------------------------------------------------------------

namespace {

SetInstance make_kary(const TaskConfig& c, std::size_t i) {
  Rng rng = instance_rng(c, kKaryStream, i);
  Tensor centers(Shape{c.k, c.d});
  for (double& v : centers.storage()) v = rng.uniform(1.0, static_cast<double>(c.n));
  const double sd = std::sqrt(10.0);
  SetInstance s;
  s.elements = Tensor(Shape{c.n, c.d});
  for (std::size_t j = 0; j < c.n; ++j) {
    const std::size_t q = rng.index(c.k);
    for (std::size_t t = 0; t < c.d; ++t) s.elements[j * c.d + t] = centers[q * c.d + t] + sd * rng.normal();
  }
  s.label = Tensor::vector({oracle_kary(s.elements, c.k)});
  return s;
}

SetInstance make_percentile(const TaskConfig& c, std::size_t i) {
  Rng rng = instance_rng(c, kPercentileStream, i);
  const auto hi = static_cast<std::int64_t>(c.value_range ? c.value_range : c.n);
  SetInstance s;
  s.elements = Tensor(Shape{c.n, 1});
  std::vector<double> xs(c.n);
  for (std::size_t j = 0; j < c.n; ++j) xs[j] = s.elements[j] = static_cast<double>(rng.uniform_int(1, hi));
  s.label = Tensor::vector({oracle_percentile(xs, c.r)});
  return s;
}

std::vector<std::size_t> decode_vertices(const Tensor& elements, std::size_t vertices) {
  const std::size_t d = elements.dim(1);
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < elements.dim(0); ++j) {
    std::size_t hot = vertices;
    for (std::size_t v = 0; v < vertices; ++v)
      if (elements[j * d + v] == 1.0) hot = v;
    if (hot == vertices) bad("maxflow element has no one-hot vertex");
    out.push_back(hot);
  }
  return out;
}

SetInstance make_flow(const TaskConfig& c, const FlowGraph& g, const std::vector<double>& embed,
                      std::size_t i) {
  Rng rng = instance_rng(c, kFlowStream, i);
  // Distinct non-sink vertices.
  std::vector<std::size_t> pool = rng.permutation(c.vertices - 1);
  SetInstance s;
  const std::size_t d = c.element_dim();
  s.elements = Tensor(Shape{c.n, d});
  std::vector<std::size_t> h;
  for (std::size_t j = 0; j < c.n; ++j) {
    const std::size_t v = pool[j] + 1;
    h.push_back(v);
    s.elements[j * d + v] = 1.0;
    std::copy(embed.begin(), embed.end(), s.elements.storage().begin() + j * d + c.vertices);
  }
  s.label = Tensor::vector({static_cast<double>(oracle_maxflow(g, h, g.sink))});
  return s;
}

SetInstance make_spiked(const TaskConfig& c, std::size_t i) {
  Rng rng = instance_rng(c, kSpikedStream, i);
  Tensor v(Shape{c.d});
  double norm = 0.0;
  while (norm == 0.0) {
    for (double& t : v.storage()) t = rng.normal();
    norm = 0.0;
    for (double t : v.data()) norm += t * t;
    norm = std::sqrt(norm);
  }
  for (double& t : v.storage()) t /= norm;
  SetInstance s;
  s.elements = Tensor(Shape{c.n, c.d});
  bool all_zero = true;
  while (all_zero) {
    for (std::size_t j = 0; j < c.n; ++j) {
      const double z = rng.normal();
      for (std::size_t t = 0; t < c.d; ++t) {
        const double x = z * v[t] + c.sigma * rng.normal();
        s.elements[j * c.d + t] = x;
        all_zero = all_zero && x == 0.0;
      }
    }
  }
  s.label = canonical_sign(v);
  return s;
}

SetInstance make_sum(const TaskConfig& c, std::size_t i) {
  Rng rng = instance_rng(c, kSumStream, i);
  SetInstance s;
  s.elements = Tensor(Shape{c.n, c.d});
  for (double& v : s.elements.storage()) v = rng.uniform();
  double total = 0.0;
  for (double v : s.elements.data()) total += v;
  s.label = Tensor::vector({total});
  return s;
}

DigitImages digit_source(const TaskConfig& c) {
  if (!c.mnist_images.empty()) return load_mnist_idx(c.mnist_images, c.mnist_labels);
  // Fixed seed: train and test splits generated with different seeds must
  // share the same digit prototypes.
  return synthetic_digits(c.digit_dim, 200, c.digit_noise, 0x6469676974ULL);
}

}  // namespace

Dataset generate(const TaskConfig& cfg) {
  cfg.validate();
  if (cfg.kind == TaskKind::maxdigit) return gen_biased_maxdigit(digit_source(cfg), cfg);
  Dataset ds{cfg, {}};
  ds.items.reserve(cfg.count);
  FlowGraph g;
  std::vector<double> embed;
  if (cfg.kind == TaskKind::maxflow) {
    g = gen_flowgraph(cfg.vertices, cfg.edges, cfg.cap_lo, cfg.cap_hi, graph_seed(cfg));
    embed = graph_embedding(g, cfg.embed_dim, graph_seed(cfg));
  }
  for (std::size_t i = 0; i < cfg.count; ++i) {
    switch (cfg.kind) {
      case TaskKind::kary: ds.items.push_back(make_kary(cfg, i)); break;
      case TaskKind::percentile: ds.items.push_back(make_percentile(cfg, i)); break;
      case TaskKind::maxflow: ds.items.push_back(make_flow(cfg, g, embed, i)); break;
      case TaskKind::spiked: ds.items.push_back(make_spiked(cfg, i)); break;
      case TaskKind::sum: ds.items.push_back(make_sum(cfg, i)); break;
      case TaskKind::maxdigit: break;
    }
  }
  return ds;
}

// --- files -----------------------------------------------------------------

void write_dataset(std::ostream& os, const Dataset& ds) {
  nlohmann::json header{{"format", "spanlab-dataset"}, {"version", 1}, {"task", to_string(ds.config.kind)},
                        {"config", to_json(ds.config)}, {"n", ds.n()},   {"d", ds.d()},
                        {"L", ds.L()},                   {"count", ds.items.size()}};
  os << header.dump() << '\n';
  const std::size_t d = ds.d();
  for (const SetInstance& s : ds.items) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t j = 0; j < ds.n(); ++j) {
      const auto row = s.elements.data().subspan(j * d, d);
      rows.push_back(std::vector<double>(row.begin(), row.end()));
    }
    nlohmann::json rec{{"set", std::move(rows)}, {"label", s.label.storage()}};
    if (!s.digits.empty()) rec["digits"] = s.digits;
    os << rec.dump() << '\n';
  }
}

Dataset read_dataset(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw FormatError("dataset: empty file");
  Dataset ds;
  std::size_t count = 0;
  try {
    const auto h = nlohmann::json::parse(line);
    if (h.value("format", "") != "spanlab-dataset" || h.value("version", 0) != 1) {
      throw FormatError("dataset: unrecognized header");
    }
    ds.config = task_from_json(h.at("config"));
    count = h.at("count").get<std::size_t>();
    if (h.at("n").get<std::size_t>() != ds.n() || h.at("d").get<std::size_t>() != ds.d() ||
        h.at("L").get<std::size_t>() != ds.L()) {
      throw FormatError("dataset: header dimensions disagree with config");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset: bad header: ") + e.what());
  }
  const std::size_t n = ds.n(), d = ds.d(), L = ds.L();
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto rec = nlohmann::json::parse(line);
      SetInstance s;
      const auto& rows = rec.at("set");
      if (rows.size() != n) throw FormatError("dataset: wrong set size");
      std::vector<double> flat;
      flat.reserve(n * d);
      for (const auto& row : rows) {
        const auto v = row.get<std::vector<double>>();
        if (v.size() != d) throw FormatError("dataset: wrong element dimension");
        flat.insert(flat.end(), v.begin(), v.end());
      }
      s.elements = Tensor(Shape{n, d}, std::move(flat));
      const auto label = rec.at("label").get<std::vector<double>>();
      if (label.size() != L) throw FormatError("dataset: wrong label length");
      s.label = Tensor(Shape{L}, label);
      if (rec.contains("digits")) s.digits = rec.at("digits").get<std::vector<int>>();
      ds.items.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("dataset: line " + std::to_string(lineno) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError("dataset: line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (ds.items.size() != count) throw FormatError("dataset: record count disagrees with header");
  return ds;
}

void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("dataset: cannot write " + path.string());
  write_dataset(os, ds);
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("dataset: cannot open " + path.string());
  return read_dataset(is);
}

VerifyResult verify_dataset(const Dataset& ds) {
  const TaskConfig& c = ds.config;
  c.validate();
  VerifyResult res;
  auto fail = [&](std::size_t i, const std::string& why) {
    res.ok = false;
    res.message = "instance " + std::to_string(i) + ": " + why;
    return res;
  };
  FlowGraph g;
  if (c.kind == TaskKind::maxflow) g = gen_flowgraph(c.vertices, c.edges, c.cap_lo, c.cap_hi, graph_seed(c));
  for (std::size_t i = 0; i < ds.items.size(); ++i) {
    const SetInstance& s = ds.items[i];
    if (s.elements.shape() != Shape{ds.n(), ds.d()} || s.label.shape() != Shape{ds.L()}) {
      return fail(i, "shape mismatch");
    }
    switch (c.kind) {
      case TaskKind::kary:
        if (s.label[0] != oracle_kary(s.elements, c.k)) return fail(i, "kary label differs from oracle");
        break;
      case TaskKind::percentile: {
        const auto xs = s.elements.data();
        if (s.label[0] != oracle_percentile({xs.begin(), xs.end()}, c.r)) {
          return fail(i, "percentile label differs from oracle");
        }
        break;
      }
      case TaskKind::maxflow: {
        const auto h = decode_vertices(s.elements, c.vertices);
        if (s.label[0] != static_cast<double>(oracle_maxflow(g, h, g.sink))) {
          return fail(i, "max-flow label differs from oracle");
        }
        break;
      }
      case TaskKind::spiked:
        // The label is the planted spike; regenerate it.
        if (!(make_spiked(c, i) == s)) return fail(i, "spiked instance does not regenerate");
        break;
      case TaskKind::sum: {
        double total = 0.0;
        for (double v : s.elements.data()) total += v;
        if (s.label[0] != total) return fail(i, "sum label differs");
        break;
      }
      case TaskKind::maxdigit: {
        if (s.digits.size() != ds.n()) return fail(i, "missing digits");
        std::set<int> distinct(s.digits.begin(), s.digits.end());
        if (distinct.size() != s.digits.size()) return fail(i, "repeated digit");
        const int top = *distinct.rbegin();
        Tensor want(Shape{10});
        want[top] = 1.0;
        if (!(want == s.label)) return fail(i, "label is not one-hot of the max digit");
        if (c.biased && s.digits.back() != top) return fail(i, "biased set does not end with its max");
        break;
      }
    }
    ++res.checked;
  }
  return res;
}

}  // namespace spanlab::tasks
