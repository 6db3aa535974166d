#include <algorithm>
#include <cmath>
#include <cstring>

#include "doctest.h"
#include "json.hpp"
#include "nanopro/error.hpp"
#include "nanopro/importance.hpp"
#include "nanopro/synthetic.hpp"
#include "support/fixtures.hpp"

using namespace nanopro;
using namespace nanopro::synthetic;
using nanopro::testing::CountingWrapper;
using nanopro::testing::TempDir;

namespace {

template <typename Fn>
Errc code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return Errc::Io;
}

struct Providers {
  SyntheticProteinProvider protein{11};
  SyntheticTextProvider text{12};
  Encoders encoders() { return {&protein, &text, nullptr, nullptr}; }
};

Providers& providers() {
  static Providers p;
  return p;
}

struct Trained {
  Fixture fx;
  TrainResult model;
};

Trained train_fixture(FixtureKind kind, ModalitySpec modality = ModalitySpec::Fused, FixtureSizes sizes = {}) {
  Trained t{make_fixture(kind, 3, sizes), {}};
  const auto enc = providers().encoders();
  const auto tr = encode(t.fx.train, t.fx.catalog, enc, modality);
  const auto va = encode(t.fx.val, t.fx.catalog, enc, modality);
  t.model = train(tr, va, fixture_config(t.fx.train.task, modality));
  return t;
}

// Shared by several cases; training is the expensive part.
const Trained& causal_model() {
  static const Trained t = train_fixture(FixtureKind::CausalNull);
  return t;
}

double val_auc(const Trained& t, ModalitySpec modality) {
  const auto va = encode(t.fx.val, t.fx.catalog, providers().encoders(), modality);
  return evaluate(t.model.params, va).classification->auc.value();
}

}  // namespace

TEST_CASE("encode memoizes identical inputs; predict equals evaluate") {
  const auto& t = causal_model();
  CountingWrapper p(providers().protein), x(providers().text);
  const Encoders enc{&p, &x, nullptr, nullptr};

  LabeledSet same;
  same.task = Task::Classification;
  for (int i = 0; i < 1000; ++i) {
    same.records.push_back(t.fx.test.records[0]);
    same.labels.push_back(t.fx.test.labels[0]);
  }
  const auto out = predict_records(t.model.params, same.records, t.fx.catalog, enc);
  CHECK(p.calls == 1);
  CHECK(x.calls == 1);
  REQUIRE(out.size() == 1000);
  CHECK(std::all_of(out.begin(), out.end(), [&](double v) { return v == out[0]; }));

  const auto view = encode(t.fx.test, t.fx.catalog, enc, ModalitySpec::Fused);
  const auto a = predict_records(t.model.params, t.fx.test.records, t.fx.catalog, enc);
  CHECK(a == predict_view(t.model.params, view));

  auto blank = background_record("blank", t.fx.test.records[0].protein_accession);
  for (auto& f : blank.features) f = Unknown{};
  const auto b = predict_records(t.model.params, std::vector{blank}, t.fx.catalog, enc);
  CHECK(std::isfinite(b[0]));
  CHECK(b[0] > 0.0);
  CHECK(b[0] < 1.0);

  auto missing = t.fx.test;
  missing.records[0].protein_accession = "NOPE";
  CHECK(code_of([&] { encode(missing, t.fx.catalog, enc, ModalitySpec::Fused); }) == Errc::NoData);
}

TEST_CASE("feature ablation: causal, null, already-Unknown, frozen model") {
  const auto& t = causal_model();
  const auto before = t.model.params.values;
  Ablator ab(t.model.params, t.fx.test, t.fx.catalog, providers().encoders());
  CHECK(ab.metric_kind() == "F1");
  CHECK(ab.full_metric() >= 0.95);

  const auto causal = ab.ablate_feature("surface_modification");
  const auto null = ab.ablate_feature("incubation_temperature");
  const auto already = ab.ablate_feature("flow_speed");
  const auto none = ab.ablate({});
  MESSAGE("causal delta " << causal.delta << ", null delta " << null.delta);
  CHECK(causal.delta > 0.2);
  CHECK(std::abs(null.delta) < 0.03);
  CHECK(already.delta == 0.0);
  CHECK(none.delta == 0.0);
  CHECK(causal.delta == causal.metric_full - causal.metric_ablated);
  CHECK(t.model.params.values == before);

  CHECK(code_of([&] { ab.ablate_feature("not_a_feature"); }) == Errc::UnknownColumn);
}

TEST_CASE("pair ablation: symmetric, exact bookkeeping, argument checks") {
  const auto& t = causal_model();
  Ablator ab(t.model.params, t.fx.test, t.fx.catalog, providers().encoders());
  const auto f = ab.ablate_feature("surface_modification");
  const auto g = ab.ablate_feature("core");
  const auto fg = ab.ablate_pair("surface_modification", "core", f, g);
  const auto gf = ab.ablate_pair("core", "surface_modification", g, f);
  CHECK(fg.f == gf.f);
  CHECK(fg.g == gf.g);
  CHECK(fg.delta_pair == gf.delta_pair);
  CHECK(fg.interaction == gf.interaction);
  CHECK(fg.interaction == fg.delta_pair - fg.delta_f - fg.delta_g);
  CHECK(fg.kind == classify_interaction(fg.interaction, kDefaultInteractionEpsilon));

  CHECK(code_of([&] { ab.ablate_pair("core", "core", g, g); }) == Errc::SameFeature);
  CHECK(code_of([&] { ab.ablate_pair("surface_modification", "core", g, f); }) == Errc::Config);
}

TEST_CASE("ablation reuses cached masked prompts") {
  const auto& t = causal_model();
  TempDir dir("abl-cache");
  EmbeddingCache cache(dir / "text.cache");
  CountingWrapper x(providers().text);
  const Encoders enc{&providers().protein, &x, nullptr, &cache};
  Ablator ab(t.model.params, t.fx.test, t.fx.catalog, enc);
  const int after_full = x.calls;
  const auto first = ab.ablate_feature("surface_modification");
  const int after_first = x.calls;
  CHECK(after_first > after_full);
  const auto second = ab.ablate_feature("surface_modification");
  CHECK(x.calls == after_first);
  CHECK(first.delta == second.delta);
}

TEST_CASE("interaction classes on constructed fixtures") {
  SUBCASE("additive features: no interaction") {
    const auto t = train_fixture(FixtureKind::Additive);
    Ablator ab(t.model.params, t.fx.test, t.fx.catalog, providers().encoders());
    CHECK(ab.metric_kind() == "R2");
    const auto a = ab.ablate_feature("shape");
    const auto b = ab.ablate_feature("protein_source");
    const auto i = ab.ablate_pair("shape", "protein_source", a, b);
    MESSAGE("additive: " << a.delta << " " << b.delta << " " << i.delta_pair << " -> " << i.interaction);
    CHECK(a.delta > 0.2);
    CHECK(b.delta > 0.2);
    CHECK(std::abs(i.interaction) < kDefaultInteractionEpsilon);
    CHECK(i.kind == InteractionClass::Neutral);
  }
  SUBCASE("duplicated feature: either copy suffices, so the pair is synergistic") {
    const auto t = train_fixture(FixtureKind::Duplicate);
    Ablator ab(t.model.params, t.fx.test, t.fx.catalog, providers().encoders());
    const auto a = ab.ablate_feature("dispersing_medium");
    const auto b = ab.ablate_feature("culture_medium");
    const auto i = ab.ablate_pair("dispersing_medium", "culture_medium", a, b);
    MESSAGE("duplicate: " << a.delta << " " << b.delta << " " << i.delta_pair << " -> " << i.interaction);
    CHECK(std::abs(a.delta) < 0.1);
    CHECK(std::abs(b.delta) < 0.1);
    CHECK(i.kind == InteractionClass::Synergy);
  }
  SUBCASE("conjunction: each single mask already costs most, so the pair is redundant") {
    const auto t = train_fixture(FixtureKind::Conjunction);
    Ablator ab(t.model.params, t.fx.test, t.fx.catalog, providers().encoders());
    const auto a = ab.ablate_feature("shape");
    const auto b = ab.ablate_feature("protein_source");
    const auto i = ab.ablate_pair("shape", "protein_source", a, b);
    MESSAGE("conjunction: " << a.delta << " " << b.delta << " " << i.delta_pair << " -> " << i.interaction);
    CHECK(i.kind == InteractionClass::Redundancy);
  }
}

TEST_CASE("single-modality models") {
  CHECK(code_of([] {
          EmbeddedView v;
          train_single_modality(v, v, ModalitySpec::Fused, ModelConfig{});
        }) == Errc::Config);

  const auto layout = make_layout(fixture_config(Task::Classification, ModalitySpec::ProteinOnly));
  for (const auto& b : layout.blocks) CHECK(b.name.find("text") == std::string::npos);
  CHECK(layout.block("head.l1.weight").cols == 1024);
  const auto text_layout = make_layout(fixture_config(Task::Classification, ModalitySpec::TextOnly));
  for (const auto& b : text_layout.blocks) CHECK(b.name.find("protein") == std::string::npos);

  SUBCASE("sequence-driven label: protein_only learns it") {
    const auto t = train_fixture(FixtureKind::SequenceOnly, ModalitySpec::ProteinOnly);
    const double auc = val_auc(t, ModalitySpec::ProteinOnly);
    MESSAGE("protein_only val AUC " << auc);
    CHECK(auc >= 0.9);
  }
  SUBCASE("tabular-driven label: text_only learns it, protein_only cannot") {
    const FixtureSizes sizes{192, 240, 64};
    const auto text = train_fixture(FixtureKind::TabularOnly, ModalitySpec::TextOnly, sizes);
    const auto protein = train_fixture(FixtureKind::TabularOnly, ModalitySpec::ProteinOnly, sizes);
    const double ta = val_auc(text, ModalitySpec::TextOnly);
    const double pa = val_auc(protein, ModalitySpec::ProteinOnly);
    MESSAGE("text_only " << ta << ", protein_only " << pa);
    CHECK(ta >= 0.9);
    CHECK(pa <= 0.6);
  }
}

TEST_CASE("modality report") {
  auto eval = [](ModalitySpec m, double f1, std::vector<std::string> ids) {
    ModalityEvaluation e;
    e.modality = m;
    e.sample_ids = std::move(ids);
    e.metrics.task = Task::Classification;
    e.metrics.n = e.sample_ids.size();
    e.metrics.classification = ClassificationMetrics{0.8, 0.7, 0.6, f1, 0.9};
    return e;
  };
  const std::vector<std::string> ids = {"a", "b", "c"};
  const auto r = modality_report(eval(ModalitySpec::Fused, 0.9, ids), eval(ModalitySpec::ProteinOnly, 0.5, {"c", "b", "a"}),
                                 eval(ModalitySpec::TextOnly, 0.7, ids));
  CHECK(r.rows.size() == 15);
  for (const char* metric : {"accuracy", "precision", "recall", "f1", "auc"}) {
    CHECK(std::count_if(r.rows.begin(), r.rows.end(), [&](const auto& row) { return row.metric == metric; }) == 3);
  }
  const auto it = std::find_if(r.rows.begin(), r.rows.end(), [](const auto& row) {
    return row.metric == "f1" && row.modality == ModalitySpec::ProteinOnly;
  });
  CHECK(it->gap_to_fused == doctest::Approx(0.4));
  CHECK(r.to_csv().starts_with("metric,modality,value,gap_to_fused\n"));
  CHECK(nlohmann::json::parse(r.to_json())["rows"].size() == 15);

  CHECK(code_of([&] {
          modality_report(eval(ModalitySpec::Fused, 0.9, ids), eval(ModalitySpec::ProteinOnly, 0.5, {"a", "b", "x"}),
                          eval(ModalitySpec::TextOnly, 0.7, ids));
        }) == Errc::ViewMismatch);
  CHECK(code_of([&] {
          modality_report(eval(ModalitySpec::Fused, 0.9, ids), eval(ModalitySpec::TextOnly, 0.5, ids),
                          eval(ModalitySpec::ProteinOnly, 0.7, ids));
        }) == Errc::ViewMismatch);
}

TEST_CASE("importance report ranking and figure data") {
  auto rec = [](std::string f, double delta) {
    return AblationRecord{{std::move(f)}, "F1", 0.9, 0.9 - delta, delta};
  };
  auto report = importance_report({rec("feature1", 0.1), rec("feature2", 0.3), rec("feature3", 0.2)}, {});
  REQUIRE(report.features.size() == 3);
  CHECK(report.features[0].features[0] == "feature2");
  CHECK(report.features[1].features[0] == "feature3");
  CHECK(report.features[2].features[0] == "feature1");
  CHECK(report.interactions.empty());
  CHECK(report.interactions_csv() == "feature_f,feature_g,delta_pair,delta_f,delta_g,interaction,class,magnitude\n");
  CHECK(nlohmann::json::parse(report.to_json())["interactions"].empty());

  InteractionRecord a{"core", "shape", 0.5, 0.1, 0.2, 0.2, InteractionClass::Synergy};
  InteractionRecord b{"pdi", "shape", 0.1, 0.3, 0.3, -0.5, InteractionClass::Redundancy};
  report = importance_report({}, {a, b});
  const auto j = nlohmann::json::parse(report.to_json());
  REQUIRE(j["interactions"].size() == 2);
  for (const auto& e : j["interactions"]) CHECK(e["magnitude"].get<double>() == std::abs(e["interaction"].get<double>()));
  CHECK(j["interactions"][0]["f"] == "pdi");
  CHECK(report.features_csv() == "rank,feature,metric_kind,metric_full,metric_ablated,delta\n");
}
