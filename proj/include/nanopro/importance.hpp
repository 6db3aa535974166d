#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "nanopro/encode.hpp"
#include "nanopro/model.hpp"

namespace nanopro {

inline constexpr double kDefaultInteractionEpsilon = 0.01;

// Trains a protein_only or text_only model: one projection, self-attention
// over that stream. E_CONFIG for any other modality.
TrainResult train_single_modality(const EmbeddedView& train_view, const EmbeddedView& val_view,
                                  ModalitySpec modality, const ModelConfig& config);

struct AblationRecord {
  std::vector<std::string> features;  // one feature, or a pair in schema order
  std::string metric_kind;            // "F1" or "R2"
  double metric_full = 0;
  double metric_ablated = 0;
  double delta = 0;  // metric_full - metric_ablated
};

enum class InteractionClass { Synergy, Redundancy, Neutral };
std::string_view interaction_class_name(InteractionClass c);

struct InteractionRecord {
  std::string f, g;  // schema order
  double delta_pair = 0, delta_f = 0, delta_g = 0;
  double interaction = 0;  // delta_pair - delta_f - delta_g
  InteractionClass kind = InteractionClass::Neutral;
};

// synergy above eps, redundancy below -eps.
InteractionClass classify_interaction(double interaction, double eps);

// Re-evaluates a frozen model on one evaluation set with features masked to
// "Unknown". The unmasked metric and the mask-independent protein embeddings
// are computed once. Calls are read-only with respect to the model.
class Ablator {
 public:
  Ablator(const ModelParams& model, LabeledSet eval, const ProteinCatalog& catalog, Encoders encoders);

  double full_metric() const { return full_; }
  const std::string& metric_kind() const { return kind_; }

  // E_UNKNOWN_COLUMN for ids outside the schema.
  AblationRecord ablate(const std::set<std::string>& features);
  AblationRecord ablate_feature(const std::string& feature);
  // E_SAME_FEATURE when f == g; E_CONFIG when `single_f`/`single_g` are not
  // the single-feature records of f and g.
  InteractionRecord ablate_pair(const std::string& f, const std::string& g,
                                const AblationRecord& single_f, const AblationRecord& single_g,
                                double eps = kDefaultInteractionEpsilon);

  std::size_t text_inputs_last() const { return last_text_inputs_; }

 private:
  double metric_for(const std::set<std::string>& mask);

  const ModelParams& model_;
  LabeledSet eval_;
  const ProteinCatalog& catalog_;
  Encoders encoders_;
  Mat protein_;
  std::string kind_;
  double full_ = 0;
  std::size_t last_text_inputs_ = 0;
};

// One model's metrics on the shared test view.
struct ModalityEvaluation {
  ModalitySpec modality = ModalitySpec::Fused;
  std::vector<std::string> sample_ids;
  MetricsReport metrics;
};

struct ModalityRow {
  std::string metric;
  ModalitySpec modality;
  double value = 0;
  double gap_to_fused = 0;  // fused value minus this value
};

struct ModalityReport {
  Task task = Task::Classification;
  std::size_t n = 0;
  std::vector<ModalityRow> rows;  // per metric: fused, protein_only, text_only

  std::string to_csv() const;
  std::string to_json() const;
};

// E_VIEW_MISMATCH unless all three were evaluated on the same sample ids for
// the same task, with the expected modalities.
ModalityReport modality_report(const ModalityEvaluation& fused, const ModalityEvaluation& protein_only,
                               const ModalityEvaluation& text_only);

struct ImportanceReport {
  std::vector<AblationRecord> features;         // descending delta
  std::vector<InteractionRecord> interactions;  // descending |interaction|

  std::string features_csv() const;
  // Edge list; magnitude = |interaction| for line width.
  std::string interactions_csv() const;
  std::string to_json() const;
};

ImportanceReport importance_report(std::vector<AblationRecord> records,
                                   std::vector<InteractionRecord> interactions);

}  // namespace nanopro
