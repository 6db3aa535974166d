#include "nanopro/split.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nanopro/curation.hpp"
#include "nanopro/error.hpp"
#include "nanopro/rng.hpp"
#include "nanopro/tsv.hpp"

namespace nanopro {

std::string_view split_name(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

std::optional<Split> parse_split(std::string_view text) {
  if (text == "train") return Split::Train;
  if (text == "val") return Split::Val;
  if (text == "test") return Split::Test;
  return std::nullopt;
}

std::string_view task_name(Task task) {
  return task == Task::Classification ? "classification" : "regression";
}

std::optional<Task> parse_task(std::string_view text) {
  if (text == "classification") return Task::Classification;
  if (text == "regression") return Task::Regression;
  return std::nullopt;
}

Split SplitAssignment::at(const std::string& origin_id) const {
  auto it = by_origin.find(origin_id);
  if (it == by_origin.end()) throw Error(Errc::Corrupt, "origin " + origin_id + " has no split");
  return it->second;
}

int rpa_bin(double rpa, std::span<const double> edges) {
  if (!binarize(rpa)) return 0;
  const auto above = std::upper_bound(edges.begin(), edges.end(), rpa) - edges.begin();
  return 1 + static_cast<int>(above);
}

std::vector<double> quantile_bin_edges(std::vector<double> affinity_rpa, int bins) {
  std::vector<double> edges;
  if (affinity_rpa.empty() || bins < 2) return edges;
  std::sort(affinity_rpa.begin(), affinity_rpa.end());
  const auto n = affinity_rpa.size();
  for (int b = 1; b < bins; ++b) {
    const auto pos = static_cast<std::size_t>(static_cast<double>(b) * n / bins);
    edges.push_back(affinity_rpa[std::min(pos, n - 1)]);
  }
  return edges;
}

TrainValSplit stratify_train_val(std::span<const PoolEntry> pool, std::span<const double> bin_edges,
                                 std::uint64_t seed) {
  std::map<int, std::vector<PoolEntry>> bins;
  for (const auto& e : pool) bins[rpa_bin(e.rpa, bin_edges)].push_back(e);

  // Systematic sampling inside each bin: members are shuffled (to break ties
  // randomly), ordered by rpa, and val takes evenly spaced positions from a
  // seeded offset.
  TrainValSplit out;
  for (auto& [bin, members] : bins) {
    std::sort(members.begin(), members.end(),
              [](const PoolEntry& a, const PoolEntry& b) { return a.origin_id < b.origin_id; });
    Rng rng(mix_seed(seed, 0x5354524154ULL + static_cast<std::uint64_t>(bin)));
    rng.shuffle(std::span(members));
    std::stable_sort(members.begin(), members.end(),
                     [](const PoolEntry& a, const PoolEntry& b) { return a.rpa < b.rpa; });
    const auto n = members.size();
    const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * 8.0 / 9.0));
    const auto n_val = n - n_train;
    std::vector<char> is_val(n, 0);
    const double offset = rng.uniform();
    for (std::size_t j = 0; j < n_val; ++j) {
      const auto pos = static_cast<std::size_t>((static_cast<double>(j) + offset) * n / n_val);
      is_val[std::min(pos, n - 1)] = 1;
    }
    for (std::size_t i = 0; i < n; ++i) {
      (is_val[i] ? out.val : out.train).push_back(members[i].origin_id);
    }
  }
  return out;
}

SplitAssignment assign_splits(std::span<const SampleRecord> corpus, std::uint64_t seed, int bins) {
  if (corpus.empty()) throw Error(Errc::EmptyCorpus, "cannot split an empty corpus");

  // Representative RPA per origin: the raw member when there is one.
  std::map<std::string, std::pair<double, bool>> origin_rpa;
  for (const auto& r : corpus) {
    if (r.origin_id.empty()) {
      throw Error(Errc::EmptyCorpus, "record " + r.sample_id + " has no origin_id");
    }
    const double rpa = r.rpa.value_or(0.0);
    auto [it, inserted] = origin_rpa.try_emplace(r.origin_id, rpa, r.is_filled_variant);
    if (!inserted && it->second.second && !r.is_filled_variant) it->second = {rpa, false};
  }

  std::vector<std::string> origins;
  origins.reserve(origin_rpa.size());
  for (const auto& [o, v] : origin_rpa) origins.push_back(o);
  Rng rng(mix_seed(seed, 0x54455354ULL));
  rng.shuffle(std::span(origins));
  const auto n_test =
      static_cast<std::size_t>(std::llround(static_cast<double>(origins.size()) * 0.1));

  SplitAssignment out;
  out.seed = seed;
  std::vector<PoolEntry> pool;
  std::vector<double> affinity;
  for (std::size_t i = 0; i < origins.size(); ++i) {
    if (i < n_test) {
      out.by_origin[origins[i]] = Split::Test;
      continue;
    }
    const double rpa = origin_rpa[origins[i]].first;
    pool.push_back({origins[i], rpa});
    if (binarize(rpa)) affinity.push_back(rpa);
  }
  out.bin_edges = quantile_bin_edges(affinity, bins);
  for (const auto& e : pool) out.bin_of_origin[e.origin_id] = rpa_bin(e.rpa, out.bin_edges);
  for (std::size_t i = 0; i < n_test; ++i) {
    out.bin_of_origin[origins[i]] = rpa_bin(origin_rpa[origins[i]].first, out.bin_edges);
  }

  const auto tv = stratify_train_val(pool, out.bin_edges, seed);
  for (const auto& o : tv.train) out.by_origin[o] = Split::Train;
  for (const auto& o : tv.val) out.by_origin[o] = Split::Val;
  return out;
}

std::string serialize_split_manifest(const SplitAssignment& assignment) {
  std::string out = "origin_id\tsplit\tbin\n";
  for (const auto& [origin, split] : assignment.by_origin) {
    auto b = assignment.bin_of_origin.find(origin);
    out += origin + "\t" + std::string(split_name(split)) + "\t" +
           std::to_string(b == assignment.bin_of_origin.end() ? 0 : b->second) + "\n";
  }
  return out;
}

SplitAssignment parse_split_manifest(std::string_view text) {
  const auto table = tsv::parse(text);
  const auto o = table.column("origin_id");
  const auto s = table.column("split");
  const auto b = table.column("bin");
  if (!o || !s || !b) throw Error(Errc::Corrupt, "split manifest needs origin_id, split, bin");
  SplitAssignment out;
  for (const auto& row : table.rows) {
    if (row.cells.size() != table.header.size()) {
      throw Error(Errc::Corrupt, "split manifest line " + std::to_string(row.line));
    }
    auto split = parse_split(row.cells[*s]);
    auto bin = tsv::parse_double(row.cells[*b]);
    if (!split || !bin) throw Error(Errc::Corrupt, "split manifest line " + std::to_string(row.line));
    out.by_origin[row.cells[*o]] = *split;
    out.bin_of_origin[row.cells[*o]] = static_cast<int>(*bin);
  }
  return out;
}

std::vector<std::size_t> split_members(std::span<const SampleRecord> corpus,
                                       const SplitAssignment& assignment, Split split) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (assignment.at(corpus[i].origin_id) == split) out.push_back(i);
  }
  return out;
}

TaskView classification_view(std::span<const SampleRecord> corpus,
                             std::span<const std::size_t> members) {
  TaskView view;
  view.task = Task::Classification;
  for (const auto i : members) {
    const double rpa = corpus[i].rpa.value_or(0.0);
    view.indices.push_back(i);
    view.sample_ids.push_back(corpus[i].sample_id);
    view.labels.push_back(binarize(rpa));
    view.rpa.push_back(rpa);
  }
  return view;
}

TaskView regression_view(std::span<const SampleRecord> corpus, std::span<const std::size_t> members,
                         const BoxCoxTransform& transform) {
  TaskView view;
  view.task = Task::Regression;
  for (const auto i : members) {
    const double rpa = corpus[i].rpa.value_or(0.0);
    if (!binarize(rpa)) continue;
    view.indices.push_back(i);
    view.sample_ids.push_back(corpus[i].sample_id);
    view.labels.push_back(boxcox_apply(rpa, transform));
    view.rpa.push_back(rpa);
  }
  if (view.empty()) {
    view.warning = std::string(errc_name(Errc::EmptyView)) + ": no affinity samples";
  }
  return view;
}

BoxCoxTransform fit_target_transform(std::span<const SampleRecord> corpus,
                                     std::span<const std::size_t> train_members) {
  std::vector<double> values;
  for (const auto i : train_members) {
    const double rpa = corpus[i].rpa.value_or(0.0);
    if (binarize(rpa)) values.push_back(rpa);
  }
  if (values.size() < 2) throw Error(Errc::EmptyView, "too few training affinity samples");
  return fit_boxcox(values, "train");
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t view_size, std::size_t batch_size,
                                                   std::uint64_t epoch_seed) {
  if (batch_size == 0) throw Error(Errc::Config, "batch_size must be >= 1");
  std::vector<std::size_t> order(view_size);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(epoch_seed, 0x4241544348ULL));
  rng.shuffle(std::span(order));
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < view_size; start += batch_size) {
    const auto end = std::min(view_size, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

}  // namespace nanopro
