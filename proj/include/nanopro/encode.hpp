#pragma once

#include <set>
#include <span>
#include <string>
#include <vector>

#include "nanopro/embedding.hpp"
#include "nanopro/model.hpp"
#include "nanopro/records.hpp"
#include "nanopro/split.hpp"

namespace nanopro {

// Providers and their (optional) caches. Only the modalities a model uses
// need to be set.
struct Encoders {
  EmbeddingProvider* protein = nullptr;
  EmbeddingProvider* text = nullptr;
  EmbeddingCache* protein_cache = nullptr;
  EmbeddingCache* text_cache = nullptr;
};

// Records paired with task labels (0/1, or the transformed target).
struct LabeledSet {
  Task task = Task::Classification;
  std::vector<SampleRecord> records;
  std::vector<double> labels;

  std::size_t size() const { return records.size(); }
};

LabeledSet labeled_set(std::span<const SampleRecord> corpus, const TaskView& view);

struct EncodeStats {
  std::size_t protein_inputs = 0;  // distinct sequences embedded
  std::size_t text_inputs = 0;     // distinct prompts embedded
};

// Embeds every record for the modalities `modality` needs. Prompts are
// rendered with `mask` applied. Identical inputs are embedded once per call.
// E_NO_DATA when an accession is missing from the catalog.
EmbeddedView encode(const LabeledSet& set, const ProteinCatalog& catalog, const Encoders& encoders,
                    ModalitySpec modality, const std::set<std::string>& mask = {},
                    EncodeStats* stats = nullptr);

// Zero-shot path: render prompts, embed (cache-aware), forward. Outputs are
// probabilities or Box-Cox values, in record order.
std::vector<double> predict_records(const ModelParams& params, std::span<const SampleRecord> records,
                                    const ProteinCatalog& catalog, const Encoders& encoders);

}  // namespace nanopro
