#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "nanopro/curation.hpp"
#include "nanopro/importance.hpp"
#include "nanopro/model.hpp"

namespace nanopro {

// One JSON file drives every stage. Relative paths resolve against the
// directory of the config file.
struct PipelineConfig {
  struct Paths {
    std::filesystem::path corpus, catalog, alignment, quantities;
    // Stores served by the precomputed provider.
    std::filesystem::path precomputed_protein, precomputed_text;
    std::filesystem::path finetune_corpus;  // records to adapt on
    std::filesystem::path predict_input;    // records to score
    std::filesystem::path checkpoint;       // model for predict/finetune; default: train output
  } paths;
  std::filesystem::path out = "run";

  CurationOptions curation;
  std::uint64_t split_seed = 17;
  int bins = kDefaultRpaBins;

  std::string provider = "synthetic";  // synthetic | precomputed | remote
  std::uint64_t provider_seed = 0;
  std::string endpoint;

  ModelConfig model;

  std::vector<std::string> ablation_features;  // empty: every schema feature
  std::vector<std::pair<std::string, std::string>> ablation_pairs;
  double epsilon = kDefaultInteractionEpsilon;

  Task finetune_task = Task::Classification;
  Task predict_task = Task::Classification;

  // The full JSON form, defaults included.
  nlohmann::json to_json() const;
  // Unknown keys and ill-typed values are E_CONFIG.
  static PipelineConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
};

// Applies "a.b.c=value" to a config document. The value is read as JSON when
// it parses, as a string otherwise. E_CONFIG for a malformed assignment or a
// key that is not part of the schema.
void apply_override(nlohmann::json& doc, std::string_view assignment);

// Reads the file, applies overrides in order, then `seed` (split and model
// seeds) when given.
PipelineConfig load_pipeline_config(const std::filesystem::path& path,
                                    const std::vector<std::string>& overrides = {},
                                    std::optional<std::uint64_t> seed = std::nullopt);

// Digest of the canonical (sorted-key) JSON form.
std::string config_digest(const PipelineConfig& config);

struct ArtifactRef {
  std::string path;  // relative to the run directory for outputs
  std::string sha256;
  std::string from;  // producing stage, or "external"
};

struct RunManifest {
  std::string run_id;
  std::string stage;
  std::string config_digest;
  std::vector<ArtifactRef> inputs;
  std::vector<ArtifactRef> outputs;
  double seconds = 0;  // wall time; the only non-reproducible field

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
};

inline constexpr std::string_view kRunManifestSchema = "nanopro-run/1";

// Stage names in run-all order; finetune and predict stand alone.
inline const std::vector<std::string> kPipelineStages = {"curate", "split", "embed", "train", "eval", "ablate"};

// Runs one stage, reading upstream artifacts through their manifests and
// writing <out>/<stage>/manifest.json. Any failure is E_STAGE naming the stage.
RunManifest run_stage(const PipelineConfig& config, std::string_view stage);

// curate -> split -> embed -> train -> eval -> ablate.
std::vector<RunManifest> run_end_to_end(const PipelineConfig& config);

// Output digests of every manifest under the run directory, keyed by path.
std::vector<ArtifactRef> run_artifacts(const std::filesystem::path& out_dir);

// Writes corpus.tsv, catalog.tsv and config.json for the synthetic corpus,
// with a small training budget. Returns the config path.
std::filesystem::path write_pipeline_fixture(const std::filesystem::path& dir, std::uint64_t seed,
                                             std::size_t samples = 500);

// ---- figure data ----

struct SplitMetrics {
  std::string split;
  MetricsReport metrics;
};

struct PredictionRow {
  std::string sample_id;
  double rpa = 0;
  double label = 0;
  double probability = 0;
};

struct FigureReports {
  std::vector<SplitMetrics> metrics;
  std::vector<PredictionRow> predictions;  // classification outputs, for rpa_bins
  std::vector<double> rpa_edges;           // interior affinity edges, as in the split
  std::optional<ImportanceReport> importance;
};

struct FigureFile {
  std::string name;
  std::string csv;
};

// kind "metrics": split,task,metric,value.
// kind "rpa_bins": bin,rpa_low,rpa_high,n,accuracy,mean_probability,
//   probability_std per occupied RPA interval (bin 0 = non-affinity).
// kind "importance": ranked feature deltas and pair interactions.
// Missing inputs give header-only files. E_UNKNOWN_KIND otherwise.
std::vector<FigureFile> emit_figure_data(const FigureReports& reports, std::string_view kind);

}  // namespace nanopro
