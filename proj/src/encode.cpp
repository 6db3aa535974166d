#include "nanopro/encode.hpp"

#include <map>

#include "nanopro/error.hpp"

namespace nanopro {

LabeledSet labeled_set(std::span<const SampleRecord> corpus, const TaskView& view) {
  LabeledSet out;
  out.task = view.task;
  out.labels = view.labels;
  out.records.reserve(view.size());
  for (const auto i : view.indices) out.records.push_back(corpus[i]);
  return out;
}

namespace {

void put_row(Mat& m, std::size_t row, const EmbeddingVector& v) {
  for (std::size_t j = 0; j < v.values.size(); ++j) {
    m(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(j)) = v.values[j];
  }
}

EmbeddingProvider& need(EmbeddingProvider* p, std::string_view what) {
  if (!p) throw Error(Errc::Config, std::string("no ") + std::string(what) + " provider configured");
  return *p;
}

}  // namespace

EmbeddedView encode(const LabeledSet& set, const ProteinCatalog& catalog, const Encoders& encoders,
                    ModalitySpec modality, const std::set<std::string>& mask, EncodeStats* stats) {
  if (set.labels.size() != set.records.size()) {
    throw Error(Errc::ViewMismatch, "labels and records differ in length");
  }
  const auto n = set.size();
  EmbeddedView view;
  view.task = set.task;
  view.labels = set.labels;
  for (const auto& r : set.records) view.sample_ids.push_back(r.sample_id);
  EncodeStats local;

  if (modality != ModalitySpec::TextOnly) {
    auto& provider = need(encoders.protein, "protein");
    view.protein.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(provider.dim()));
    std::map<std::string, EmbeddingVector, std::less<>> seen;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& acc = set.records[i].protein_accession;
      auto it = seen.find(acc);
      if (it == seen.end()) {
        const auto* protein = catalog.lookup(acc);
        if (!protein) throw Error(Errc::NoData, "accession " + acc + " is not in the catalog");
        it = seen.emplace(acc, cached_embed_protein(protein->sequence, provider, encoders.protein_cache)).first;
      }
      put_row(view.protein, i, it->second);
    }
    local.protein_inputs = seen.size();
  }

  if (modality != ModalitySpec::ProteinOnly) {
    auto& provider = need(encoders.text, "text");
    view.text.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(provider.dim()));
    std::map<std::string, EmbeddingVector> seen;
    for (std::size_t i = 0; i < n; ++i) {
      const auto prompt = render_prompt(set.records[i], mask);
      auto it = seen.find(prompt.canonical_hash);
      if (it == seen.end()) {
        it = seen.emplace(prompt.canonical_hash, cached_embed_text(prompt, provider, encoders.text_cache)).first;
      }
      put_row(view.text, i, it->second);
    }
    local.text_inputs = seen.size();
  }

  if (stats) *stats = local;
  return view;
}

std::vector<double> predict_records(const ModelParams& params, std::span<const SampleRecord> records,
                                    const ProteinCatalog& catalog, const Encoders& encoders) {
  LabeledSet set;
  set.task = params.config.task;
  set.records.assign(records.begin(), records.end());
  set.labels.assign(records.size(), 0.0);
  return predict_view(params, encode(set, catalog, encoders, params.config.modality));
}

}  // namespace nanopro
