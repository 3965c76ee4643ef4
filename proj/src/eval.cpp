// SPDX-License-Identifier: Apache-2.0
#include "spanlab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

namespace spanlab::eval {

namespace {

constexpr std::uint64_t kInvarianceStream = 0x494e5641;
constexpr double kLabelGuard = 1e-9;
constexpr double kMeanGuard = 1e-12;
constexpr double kInvarianceBound = 1e-2;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::size_t> iota(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> v(end - begin);
  std::iota(v.begin(), v.end(), begin);
  return v;
}

double norm(const Tensor& v) {
  double s = 0.0;
  for (double x : v.data()) s += x * x;
  return std::sqrt(s);
}

/// strtod accepts subnormals, which std::stod rejects as out of range.
double parse_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw std::invalid_argument("bad number");
  return v;
}

}  // namespace

std::size_t thread_count() {
  if (const char* env = std::getenv("SPANLAB_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn, std::size_t threads) {
  threads = std::min(threads, count);
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr error;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (next >= count || error) return;
        i = next++;
      }
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

double relative_error(double y, double yhat) {
  if (!(std::abs(y) > kLabelGuard)) throw DomainError("relative_error: |y| <= 1e-9");
  return std::abs(y - yhat) / std::abs(y);
}

double cosine_metric(const Tensor& v, const Tensor& vhat) {
  if (v.size() != vhat.size()) throw ShapeError("cosine_metric", v.shape(), vhat.shape());
  const double nv = norm(v), nh = norm(vhat);
  if (nv == 0.0 || nh == 0.0) throw DomainError("cosine_metric: zero vector");
  double dot = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) dot += v.data()[i] * vhat.data()[i];
  return std::min(1.0, std::abs(dot) / (nv * nh));
}

Tensor predict_all(const models::Model& model, const tasks::Dataset& data, std::size_t batch) {
  const std::size_t count = data.items.size(), L = model.spec().L;
  Tensor out(Shape{count, L});
  const std::size_t chunks = (count + batch - 1) / batch;
  parallel_for(chunks, [&](std::size_t c) {
    const auto idx = iota(c * batch, std::min(count, (c + 1) * batch));
    const Tensor p = model.predict(data.batch_elements(idx));
    std::copy(p.data().begin(), p.data().end(), out.storage().begin() + static_cast<std::ptrdiff_t>(idx.front() * L));
  });
  return out;
}

Summary summarize(const std::vector<double>& values) {
  Summary s;
  if (values.empty()) return s;
  // Centered on the first value so identical inputs give exactly zero std.
  const double count = static_cast<double>(values.size()), ref = values.front();
  double shift = 0.0;
  for (double v : values) shift += (v - ref) / count;
  double var = 0.0;
  for (double v : values) var += (v - ref - shift) * (v - ref - shift) / count;
  s.mean = ref + shift;
  s.std = std::sqrt(var);
  return s;
}

std::vector<double> relative_errors(const models::Model& model, const tasks::Dataset& data) {
  if (model.spec().L != 1) throw std::invalid_argument("relative_errors: scalar-output model required");
  const Tensor p = predict_all(model, data);
  std::vector<double> out;
  for (std::size_t i = 0; i < data.items.size(); ++i) out.push_back(relative_error(data.items[i].label.item(), p[i]));
  return out;
}

std::vector<double> cosines(const models::Model& model, const tasks::Dataset& data) {
  const Tensor p = predict_all(model, data);
  const std::size_t L = model.spec().L;
  std::vector<double> out;
  for (std::size_t i = 0; i < data.items.size(); ++i) {
    Tensor row(Shape{L});
    std::copy_n(p.data().begin() + static_cast<std::ptrdiff_t>(i * L), L, row.storage().begin());
    out.push_back(cosine_metric(data.items[i].label, row));
  }
  return out;
}

Invariance invariance_delta(const models::Model& model, const Tensor& set, std::size_t perms, Rng& rng) {
  if (set.rank() != 2) throw ShapeError("invariance_delta expects an (n x d) set");
  if (perms < 2) throw std::invalid_argument("invariance_delta: need at least 2 permutations");
  const std::size_t n = set.dim(0), L = model.spec().L;
  std::vector<std::vector<std::size_t>> index;
  for (std::size_t r = 0; r < perms; ++r) index.push_back(rng.permutation(n));
  const Tensor batch = ops::gather_rows(ops::expand(set, 0, perms), index);
  const Tensor p = model.predict(batch);

  Invariance out;
  for (std::size_t j = 0; j < L; ++j) {
    std::vector<double> col;
    for (std::size_t r = 0; r < perms; ++r) col.push_back(p[r * L + j]);
    const Summary s = summarize(col);
    out.component_std = std::max(out.component_std, s.std);
    if (std::abs(s.mean) <= kMeanGuard) {
      out.flagged = true;
      out.delta = std::max(out.delta, s.std);
    } else {
      out.delta = std::max(out.delta, s.std / std::abs(s.mean));
    }
  }
  return out;
}

std::vector<Invariance> invariance_deltas(const models::Model& model, const tasks::Dataset& data,
                                          std::size_t perms, std::uint64_t seed) {
  std::vector<Invariance> out(data.items.size());
  parallel_for(data.items.size(), [&](std::size_t i) {
    Rng rng(derive_seed(seed, kInvarianceStream, i));
    out[i] = invariance_delta(model, data.items[i].elements, perms, rng);
  });
  return out;
}

Ablation ablation_fractions(const Tensor& logits, const tasks::Dataset& data) {
  const std::size_t count = data.items.size();
  if (logits.rank() != 2 || logits.dim(0) != count) {
    throw ShapeError("ablation_fractions: logits do not match the dataset");
  }
  const std::size_t L = logits.dim(1);
  std::size_t max = 0, last = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const auto& digits = data.items[i].digits;
    if (digits.empty()) throw std::invalid_argument("ablation_fractions: sets carry no digits");
    const auto row = logits.data().subspan(i * L, L);
    const auto cls = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    if (cls == *std::max_element(digits.begin(), digits.end())) ++max;
    else if (cls == digits.back()) ++last;
  }
  Ablation a;
  if (count == 0) return a;
  a.max = static_cast<double>(max) / static_cast<double>(count);
  a.last = static_cast<double>(last) / static_cast<double>(count);
  a.other = static_cast<double>(count - max - last) / static_cast<double>(count);
  return a;
}

Ablation ablation_fractions(const models::Model& model, const tasks::Dataset& data) {
  return ablation_fractions(predict_all(model, data), data);
}

std::vector<MetricRow> task_metrics(const models::Model& model, const tasks::Dataset& data,
                                    const std::string& model_id, std::uint64_t seed,
                                    std::uint64_t eval_seed, std::size_t perms) {
  const std::string task = tasks::to_string(data.config.kind);
  std::vector<MetricRow> rows;
  auto add = [&](const std::string& metric, double value) {
    rows.push_back({task, model_id, seed, data.n(), data.d(), metric, value, 0.0});
  };
  switch (data.config.kind) {
    case tasks::TaskKind::spiked:
      add("abs_cosine", summarize(cosines(model, data)).mean);
      break;
    case tasks::TaskKind::maxdigit: {
      const Ablation a = ablation_fractions(model, data);
      add("frac_max", a.max);
      add("frac_last", a.last);
      add("frac_other", a.other);
      break;
    }
    default:
      add("rel_error", summarize(relative_errors(model, data)).mean);
      break;
  }
  const auto inv = invariance_deltas(model, data, perms, eval_seed);
  double worst = 0.0, worst_std = 0.0;
  std::size_t ok = 0;
  for (const auto& r : inv) {
    worst = std::max(worst, r.delta);
    worst_std = std::max(worst_std, r.component_std);
    if (r.delta <= kInvarianceBound) ++ok;
  }
  add("invariance_delta_max", worst);
  add("invariance_component_std_max", worst_std);
  add("invariance_frac_within_1e-2", inv.empty() ? 0.0 : static_cast<double>(ok) / static_cast<double>(inv.size()));
  return rows;
}

std::vector<MetricRow> aggregate(const std::vector<MetricRow>& rows) {
  using Key = std::tuple<std::string, std::string, std::size_t, std::size_t, std::string>;
  std::vector<Key> order;
  std::map<Key, std::vector<double>> groups;
  for (const auto& r : rows) {
    const Key k{r.task, r.model, r.n, r.d, r.metric};
    if (!groups.count(k)) order.push_back(k);
    groups[k].push_back(r.value);
  }
  std::vector<MetricRow> out;
  for (const auto& k : order) {
    const Summary s = summarize(groups[k]);
    out.push_back({std::get<0>(k), std::get<1>(k), std::nullopt, std::get<2>(k), std::get<3>(k),
                   std::get<4>(k), s.mean, s.std});
  }
  return out;
}

void write_results_csv(std::ostream& os, const std::vector<MetricRow>& rows) {
  os << "task,model,seed,n,d,metric,value,std\n";
  for (const auto& r : rows) {
    for (const std::string* s : {&r.task, &r.model, &r.metric}) {
      if (s->find_first_of(",\n\"") != std::string::npos) throw FormatError("results.csv: field '" + *s + "' needs quoting");
    }
    if (!std::isfinite(r.value) || !(r.std >= 0.0)) throw DomainError("results.csv: non-finite value for " + r.metric);
    os << r.task << ',' << r.model << ',' << (r.seed ? std::to_string(*r.seed) : "") << ',' << r.n << ','
       << r.d << ',' << r.metric << ',' << fmt(r.value) << ',' << fmt(r.std) << '\n';
  }
}

std::vector<MetricRow> read_results_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "task,model,seed,n,d,metric,value,std") {
    throw FormatError("results.csv: bad header");
  }
  std::vector<MetricRow> rows;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) f.push_back(field);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != 8) throw FormatError("results.csv line " + std::to_string(lineno) + ": expected 8 fields");
    try {
      MetricRow r;
      r.task = f[0];
      r.model = f[1];
      if (!f[2].empty()) r.seed = std::stoull(f[2]);
      r.n = std::stoull(f[3]);
      r.d = std::stoull(f[4]);
      r.metric = f[5];
      r.value = parse_double(f[6]);
      r.std = parse_double(f[7]);
      rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw FormatError("results.csv line " + std::to_string(lineno) + ": bad number");
    }
  }
  return rows;
}

void write_plot_data(const std::filesystem::path& dir, const std::vector<MetricRow>& aggregated) {
  std::filesystem::create_directories(dir);
  using Key = std::pair<std::string, std::string>;  // task, metric
  std::map<Key, std::vector<const MetricRow*>> tables;
  for (const auto& r : aggregated) tables[{r.task, r.metric}].push_back(&r);
  for (const auto& [key, rows] : tables) {
    std::vector<std::string> models;
    std::set<std::size_t> ns;
    for (const auto* r : rows) {
      if (std::find(models.begin(), models.end(), r->model) == models.end()) models.push_back(r->model);
      ns.insert(r->n);
    }
    std::ofstream out(dir / ("plot_" + key.first + "_" + key.second + ".dat"));
    out << "# n";
    for (const auto& m : models) out << ' ' << m;
    out << '\n';
    for (std::size_t n : ns) {
      out << n;
      for (const auto& m : models) {
        const auto it = std::find_if(rows.begin(), rows.end(), [&](const MetricRow* r) { return r->n == n && r->model == m; });
        out << ' ' << (it == rows.end() ? std::string("nan") : fmt((*it)->value));
      }
      out << '\n';
    }
    if (!out) throw std::runtime_error("cannot write plot data in " + dir.string());
  }
}

void aggregate_report(const std::filesystem::path& dir, const std::vector<MetricRow>& rows) {
  std::filesystem::create_directories(dir);
  const auto agg = aggregate(rows);
  std::vector<MetricRow> all = rows;
  all.insert(all.end(), agg.begin(), agg.end());
  std::ofstream out(dir / "results.csv", std::ios::binary);
  write_results_csv(out, all);
  if (!out) throw std::runtime_error("cannot write " + (dir / "results.csv").string());
  write_plot_data(dir, agg);
}

}  // namespace spanlab::eval
