#include "nanopro/importance.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

#include "nanopro/error.hpp"
#include "nanopro/tsv.hpp"

namespace nanopro {

TrainResult train_single_modality(const EmbeddedView& train_view, const EmbeddedView& val_view,
                                  ModalitySpec modality, const ModelConfig& config) {
  if (modality == ModalitySpec::Fused) {
    throw Error(Errc::Config, "single-modality training needs protein_only or text_only");
  }
  auto cfg = config;
  cfg.modality = modality;
  return train(train_view, val_view, cfg);
}

std::string_view interaction_class_name(InteractionClass c) {
  switch (c) {
    case InteractionClass::Synergy: return "synergy";
    case InteractionClass::Redundancy: return "redundancy";
    case InteractionClass::Neutral: return "neutral";
  }
  return "neutral";
}

InteractionClass classify_interaction(double interaction, double eps) {
  if (interaction > eps) return InteractionClass::Synergy;
  if (interaction < -eps) return InteractionClass::Redundancy;
  return InteractionClass::Neutral;
}

// ---- ablation ----

Ablator::Ablator(const ModelParams& model, LabeledSet eval, const ProteinCatalog& catalog,
                 Encoders encoders)
    : model_(model), eval_(std::move(eval)), catalog_(catalog), encoders_(encoders) {
  if (eval_.task != model_.config.task) throw Error(Errc::Config, "evaluation set task differs from the model's");
  kind_ = eval_.task == Task::Classification ? "F1" : "R2";
  if (model_.config.uses_protein()) {
    protein_ = encode(eval_, catalog_, encoders_, ModalitySpec::ProteinOnly).protein;
  }
  full_ = metric_for({});
}

double Ablator::metric_for(const std::set<std::string>& mask) {
  EmbeddedView view;
  if (model_.config.uses_text()) {
    EncodeStats stats;
    view = encode(eval_, catalog_, encoders_, ModalitySpec::TextOnly, mask, &stats);
    last_text_inputs_ = stats.text_inputs;
  } else {
    view.task = eval_.task;
    view.labels = eval_.labels;
    for (const auto& r : eval_.records) view.sample_ids.push_back(r.sample_id);
  }
  view.protein = protein_;
  return evaluate(model_, view).primary();
}

AblationRecord Ablator::ablate(const std::set<std::string>& features) {
  const auto& schema = FeatureSchema::standard();
  std::vector<std::pair<std::size_t, std::string>> ordered;
  for (const auto& f : features) ordered.emplace_back(schema.require(f), f);
  std::sort(ordered.begin(), ordered.end());

  AblationRecord rec;
  for (auto& [i, f] : ordered) rec.features.push_back(f);
  rec.metric_kind = kind_;
  rec.metric_full = full_;
  rec.metric_ablated = metric_for(features);
  rec.delta = rec.metric_full - rec.metric_ablated;
  if (!std::isfinite(rec.delta)) throw Error(Errc::NonFinite, "ablation delta is not finite");
  return rec;
}

AblationRecord Ablator::ablate_feature(const std::string& feature) { return ablate({feature}); }

InteractionRecord Ablator::ablate_pair(const std::string& f, const std::string& g,
                                       const AblationRecord& single_f, const AblationRecord& single_g,
                                       double eps) {
  if (f == g) throw Error(Errc::SameFeature, "pair ablation of " + f + " with itself");
  const auto& schema = FeatureSchema::standard();
  const bool swap = schema.require(f) > schema.require(g);
  const auto& first = swap ? g : f;
  const auto& second = swap ? f : g;
  const auto& rec_first = swap ? single_g : single_f;
  const auto& rec_second = swap ? single_f : single_g;
  auto check = [&](const AblationRecord& r, const std::string& name) {
    if (r.features != std::vector<std::string>{name} || r.metric_kind != kind_) {
      throw Error(Errc::Config, "single-feature record for " + name + " does not match");
    }
  };
  check(rec_first, first);
  check(rec_second, second);

  const auto pair = ablate({first, second});
  InteractionRecord out;
  out.f = first;
  out.g = second;
  out.delta_pair = pair.delta;
  out.delta_f = rec_first.delta;
  out.delta_g = rec_second.delta;
  out.interaction = out.delta_pair - out.delta_f - out.delta_g;
  out.kind = classify_interaction(out.interaction, eps);
  return out;
}

// ---- reports ----

namespace {

using nlohmann::json;

std::vector<std::pair<std::string, double>> metric_values(const MetricsReport& m) {
  std::vector<std::pair<std::string, double>> out;
  if (m.classification) {
    const auto& c = *m.classification;
    out = {{"accuracy", c.accuracy}, {"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1}};
    if (c.auc) out.emplace_back("auc", *c.auc);
  }
  if (m.regression) {
    const auto& r = *m.regression;
    out = {{"r2", r.r2}, {"mse", r.mse}, {"mae", r.mae}};
    if (r.raw_r2) out.emplace_back("raw_r2", *r.raw_r2);
    if (r.raw_mse) out.emplace_back("raw_mse", *r.raw_mse);
    if (r.raw_mae) out.emplace_back("raw_mae", *r.raw_mae);
  }
  return out;
}

std::string num(double v) { return tsv::format_double(v); }

}  // namespace

ModalityReport modality_report(const ModalityEvaluation& fused, const ModalityEvaluation& protein_only,
                               const ModalityEvaluation& text_only) {
  if (fused.modality != ModalitySpec::Fused || protein_only.modality != ModalitySpec::ProteinOnly ||
      text_only.modality != ModalitySpec::TextOnly) {
    throw Error(Errc::ViewMismatch, "expected fused, protein_only and text_only evaluations");
  }
  auto ids = [](const ModalityEvaluation& e) {
    auto v = e.sample_ids;
    std::sort(v.begin(), v.end());
    return v;
  };
  const auto want = ids(fused);
  for (const auto* e : {&protein_only, &text_only}) {
    if (ids(*e) != want || e->metrics.task != fused.metrics.task || e->metrics.n != fused.metrics.n) {
      throw Error(Errc::ViewMismatch, std::string(modality_spec_name(e->modality)) +
                                          " was evaluated on a different view than fused");
    }
  }

  ModalityReport report;
  report.task = fused.metrics.task;
  report.n = fused.metrics.n;
  const auto base = metric_values(fused.metrics);
  const auto p = metric_values(protein_only.metrics);
  const auto t = metric_values(text_only.metrics);
  for (const auto& [name, value] : base) {
    auto lookup = [&](const auto& list) -> std::optional<double> {
      for (const auto& [n, v] : list)
        if (n == name) return v;
      return std::nullopt;
    };
    const auto pv = lookup(p), tv = lookup(t);
    if (!pv || !tv) continue;  // e.g. AUC undefined for one model
    report.rows.push_back({name, ModalitySpec::Fused, value, 0.0});
    report.rows.push_back({name, ModalitySpec::ProteinOnly, *pv, value - *pv});
    report.rows.push_back({name, ModalitySpec::TextOnly, *tv, value - *tv});
  }
  return report;
}

std::string ModalityReport::to_csv() const {
  std::string out = "metric,modality,value,gap_to_fused\n";
  for (const auto& r : rows) {
    out += r.metric + "," + std::string(modality_spec_name(r.modality)) + "," + num(r.value) + "," +
           num(r.gap_to_fused) + "\n";
  }
  return out;
}

std::string ModalityReport::to_json() const {
  json rs = json::array();
  for (const auto& r : rows) {
    rs.push_back({{"metric", r.metric},
                  {"modality", modality_spec_name(r.modality)},
                  {"value", r.value},
                  {"gap_to_fused", r.gap_to_fused}});
  }
  return json{{"task", task_name(task)}, {"n", n}, {"rows", rs}}.dump(2) + "\n";
}

ImportanceReport importance_report(std::vector<AblationRecord> records,
                                   std::vector<InteractionRecord> interactions) {
  std::stable_sort(records.begin(), records.end(),
                   [](const auto& a, const auto& b) { return a.delta > b.delta; });
  std::stable_sort(interactions.begin(), interactions.end(), [](const auto& a, const auto& b) {
    return std::abs(a.interaction) > std::abs(b.interaction);
  });
  return {std::move(records), std::move(interactions)};
}

namespace {

std::string joined(const std::vector<std::string>& v) {
  std::string s;
  for (const auto& x : v) s += (s.empty() ? "" : "+") + x;
  return s;
}

}  // namespace

std::string ImportanceReport::features_csv() const {
  std::string out = "rank,feature,metric_kind,metric_full,metric_ablated,delta\n";
  for (std::size_t i = 0; i < features.size(); ++i) {
    const auto& r = features[i];
    out += std::to_string(i + 1) + "," + joined(r.features) + "," + r.metric_kind + "," + num(r.metric_full) +
           "," + num(r.metric_ablated) + "," + num(r.delta) + "\n";
  }
  return out;
}

std::string ImportanceReport::interactions_csv() const {
  std::string out = "feature_f,feature_g,delta_pair,delta_f,delta_g,interaction,class,magnitude\n";
  for (const auto& r : interactions) {
    out += r.f + "," + r.g + "," + num(r.delta_pair) + "," + num(r.delta_f) + "," + num(r.delta_g) + "," +
           num(r.interaction) + "," + std::string(interaction_class_name(r.kind)) + "," +
           num(std::abs(r.interaction)) + "\n";
  }
  return out;
}

std::string ImportanceReport::to_json() const {
  json fs = json::array(), is = json::array();
  for (std::size_t i = 0; i < features.size(); ++i) {
    const auto& r = features[i];
    fs.push_back({{"rank", i + 1},
                  {"features", r.features},
                  {"metric_kind", r.metric_kind},
                  {"metric_full", r.metric_full},
                  {"metric_ablated", r.metric_ablated},
                  {"delta", r.delta}});
  }
  for (const auto& r : interactions) {
    is.push_back({{"f", r.f},
                  {"g", r.g},
                  {"delta_pair", r.delta_pair},
                  {"delta_f", r.delta_f},
                  {"delta_g", r.delta_g},
                  {"interaction", r.interaction},
                  {"class", interaction_class_name(r.kind)},
                  {"magnitude", std::abs(r.interaction)}});
  }
  return json{{"features", fs}, {"interactions", is}}.dump(2) + "\n";
}

}  // namespace nanopro
