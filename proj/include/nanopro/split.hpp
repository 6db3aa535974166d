#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nanopro/boxcox.hpp"
#include "nanopro/records.hpp"

namespace nanopro {

enum class Split { Train, Val, Test };

std::string_view split_name(Split split);
std::optional<Split> parse_split(std::string_view text);

inline constexpr int kDefaultRpaBins = 10;

// Splits are assigned per origin_id so a raw record and its filled
// counterpart always land together.
struct SplitAssignment {
  std::map<std::string, Split> by_origin;
  std::map<std::string, int> bin_of_origin;
  std::uint64_t seed = 0;
  std::vector<double> bin_edges;  // interior RPA quantile edges of the affinity bins

  Split at(const std::string& origin_id) const;
};

// Bin 0 holds non-affinity RPA; affinity values fall in 1..edges.size()+1.
int rpa_bin(double rpa, std::span<const double> edges);

// Interior edges of `bins` equal-frequency bins. Box-Cox is monotone, so
// quantiles taken on raw RPA give the same partition as on transformed RPA.
std::vector<double> quantile_bin_edges(std::vector<double> affinity_rpa, int bins = kDefaultRpaBins);

struct PoolEntry {
  std::string origin_id;
  double rpa = 0.0;
};

struct TrainValSplit {
  std::vector<std::string> train;
  std::vector<std::string> val;
};

// Within every bin, round(8/9 of members) go to train; val is a seeded
// systematic sample along the rpa order of the bin.
TrainValSplit stratify_train_val(std::span<const PoolEntry> pool, std::span<const double> bin_edges,
                                 std::uint64_t seed);

// A seeded uniform 10% of origins form the test set; the rest are stratified
// into train/val by the RPA bin of each origin's raw member.
SplitAssignment assign_splits(std::span<const SampleRecord> corpus, std::uint64_t seed,
                              int bins = kDefaultRpaBins);

// TSV columns origin_id, split, bin.
std::string serialize_split_manifest(const SplitAssignment& assignment);
SplitAssignment parse_split_manifest(std::string_view text);

// Corpus indices belonging to one split, in corpus order.
std::vector<std::size_t> split_members(std::span<const SampleRecord> corpus,
                                       const SplitAssignment& assignment, Split split);

enum class Task { Classification, Regression };

std::string_view task_name(Task task);
std::optional<Task> parse_task(std::string_view text);

struct TaskView {
  Task task = Task::Classification;
  std::vector<std::size_t> indices;  // positions in the corpus
  std::vector<std::string> sample_ids;
  std::vector<double> labels;  // 0/1 or Box-Cox transformed RPA
  std::vector<double> rpa;
  std::optional<std::string> warning;

  std::size_t size() const { return indices.size(); }
  bool empty() const { return indices.empty(); }
};

TaskView classification_view(std::span<const SampleRecord> corpus,
                             std::span<const std::size_t> members);

// Affinity samples only, target boxcox_apply(rpa). An empty result carries an
// E_EMPTY_VIEW warning instead of throwing.
TaskView regression_view(std::span<const SampleRecord> corpus, std::span<const std::size_t> members,
                         const BoxCoxTransform& transform);

// Fits the target transform on the affinity RPA of the training members.
BoxCoxTransform fit_target_transform(std::span<const SampleRecord> corpus,
                                     std::span<const std::size_t> train_members);

// Seeded permutation of [0, view_size) cut into batches; the last may be short.
std::vector<std::vector<std::size_t>> make_batches(std::size_t view_size, std::size_t batch_size,
                                                   std::uint64_t epoch_seed);

}  // namespace nanopro
