#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "nanopro/cli.hpp"
#include "nanopro/digest.hpp"
#include "nanopro/error.hpp"
#include "nanopro/pipeline.hpp"
#include "nanopro/tsv.hpp"
#include "support/fixtures.hpp"

using namespace nanopro;
using nanopro::testing::TempDir;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

template <typename Fn>
Error error_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e;
  }
  FAIL("expected an error");
  return Error(Errc::Io, "unreachable");
}

struct CliResult {
  int code;
  std::string out, err;
};

CliResult run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "nanopro");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = nanopro::cli::dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) rows.push_back(tsv::split(line, ','));
  return rows;
}

// Small fixture: fewer raw samples and one epoch keep the stages quick.
fs::path small_fixture(const TempDir& dir) {
  const auto config = write_pipeline_fixture(dir.path(), 5, 200);
  json doc = json::parse(tsv::read_text(config));
  doc["model"]["max_epochs"] = 1;
  tsv::write_text(config, doc.dump(2));
  return config;
}

}  // namespace

TEST_CASE("config: defaults roundtrip, strict keys and overrides") {
  const PipelineConfig defaults;
  const auto again = PipelineConfig::from_json(defaults.to_json());
  CHECK(config_digest(again) == config_digest(defaults));

  CHECK(error_of([] { PipelineConfig::from_json(json{{"modle", json::object()}}); }).code() == Errc::Config);
  CHECK(error_of([] { PipelineConfig::from_json(json{{"model", {{"max_epochs", "ten"}}}}); }).code() == Errc::Config);
  CHECK(error_of([] { PipelineConfig::from_json(json{{"split", {{"seed", -1}}}}); }).code() == Errc::Config);
  CHECK(error_of([] { PipelineConfig::from_json(json{{"provider", {{"kind", "magic"}}}}); }).code() == Errc::Config);
  CHECK(error_of([] {
          PipelineConfig::from_json(json{{"ablation", {{"features", {"not_a_feature"}}}}});
        }).code() == Errc::UnknownColumn);

  json doc = json::object();
  apply_override(doc, "model.max_epochs=7");
  apply_override(doc, "provider.kind=remote");
  apply_override(doc, "provider.endpoint=http://127.0.0.1:1");
  apply_override(doc, "model.w_pos_policy=2.5");
  apply_override(doc, "ablation.pairs=[[\"core\",\"shape\"]]");
  const auto c = PipelineConfig::from_json(doc, "/base");
  CHECK(c.model.max_epochs == 7);
  CHECK(c.provider == "remote");
  CHECK(c.model.w_pos_policy == "2.5");
  REQUIRE(c.ablation_pairs.size() == 1);
  CHECK(c.ablation_pairs[0].second == "shape");
  CHECK(c.out == fs::path("/base/run"));

  CHECK(error_of([&] { apply_override(doc, "model.max_epochs"); }).code() == Errc::Config);
  CHECK(error_of([&] { apply_override(doc, "model.nope=1"); }).code() == Errc::Config);
  CHECK(error_of([&] { apply_override(doc, "=1"); }).code() == Errc::Config);

  TempDir dir("cfg");
  tsv::write_text(dir / "c.json", R"({"paths": {"corpus": "data/x.tsv"}})");
  const auto loaded = load_pipeline_config(dir / "c.json", {"split.bins=5"}, 99);
  CHECK(loaded.paths.corpus == dir.path() / "data/x.tsv");
  CHECK(loaded.bins == 5);
  CHECK(loaded.split_seed == 99);
  CHECK(loaded.model.seed == 99);
}

TEST_CASE("cli: usage errors exit 2 and name the problem") {
  TempDir dir("cli");
  tsv::write_text(dir / "c.json", "{}");
  const auto config = (dir / "c.json").string();

  auto r = run_cli({"frobnicate", "--config", config});
  CHECK(r.code == 2);
  CHECK(r.err.find("Usage") != std::string::npos);

  r = run_cli({});
  CHECK(r.code == 2);

  r = run_cli({"curate"});
  CHECK(r.code == 2);
  CHECK(r.err.find("--config") != std::string::npos);

  r = run_cli({"curate", "--config", (dir / "missing.json").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("--config") != std::string::npos);

  r = run_cli({"curate", "--config", config, "--set", "model.bogus=1"});
  CHECK(r.code == 2);
  CHECK(r.err.find("--set") != std::string::npos);

  r = run_cli({"curate", "--config", config, "--provider", "magic"});
  CHECK(r.code == 2);
  CHECK(r.err.find("--provider") != std::string::npos);

  r = run_cli({"curate", "--config", config, "--provider", "remote"});
  CHECK(r.code == 2);
  CHECK(r.err.find("--endpoint") != std::string::npos);

  // A valid invocation whose inputs are missing is a runtime failure.
  r = run_cli({"curate", "--config", config});
  CHECK(r.code == 1);
  CHECK(r.err.find("E_STAGE") != std::string::npos);
  CHECK(r.err.find("curate") != std::string::npos);

  CHECK(run_cli({"--help"}).code == 0);
}

TEST_CASE("cli: curate on the fixture writes the curated table and a manifest") {
  TempDir dir("curate");
  const auto config = write_pipeline_fixture(dir.path(), 3, 200);
  const auto r = run_cli({"curate", "--config", config.string(), "--out", (dir / "out").string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("curate:") != std::string::npos);
  CHECK(fs::exists(dir / "out/curate/curated.tsv"));
  const auto manifest = RunManifest::from_json(json::parse(tsv::read_text(dir / "out/curate/manifest.json")));
  CHECK(manifest.stage == "curate");
  CHECK(manifest.inputs.size() == 2);
  for (const auto& in : manifest.inputs) CHECK(in.from == "external");
  for (const auto& o : manifest.outputs) CHECK(sha256_file(dir / "out" / o.path) == o.sha256);
  CHECK(parse_sample_table(dir / "out/curate/curated.tsv").size() > 200);
}

TEST_CASE("stages: a corrupted or missing intermediate fails the consuming stage") {
  TempDir dir("corrupt");
  const auto config = load_pipeline_config(small_fixture(dir));

  const auto missing = error_of([&] { run_stage(config, "split"); });
  CHECK(missing.code() == Errc::Stage);
  CHECK(std::string(missing.what()).find("'split'") != std::string::npos);

  run_stage(config, "curate");
  run_stage(config, "split");
  {
    std::ofstream out(config.out / "curate/curated.tsv", std::ios::app);
    out << "\n";
  }
  const auto e = error_of([&] { run_stage(config, "embed"); });
  CHECK(e.code() == Errc::Stage);
  const std::string what = e.what();
  CHECK(what.find("stage 'embed'") != std::string::npos);
  CHECK(what.find("curate/curated.tsv") != std::string::npos);

  CHECK(error_of([&] { run_stage(config, "bake"); }).code() == Errc::Config);
}

TEST_CASE("figure data: rpa bins, metrics, importance, empty inputs, unknown kind") {
  FigureReports reports;
  reports.rpa_edges = {0.1, 0.5};
  reports.predictions = {
      {"a", 0.0, 0, 0.2}, {"b", 0.0, 0, 0.6},   // bin 0: one right, one wrong
      {"c", 0.05, 1, 0.9},                      // bin 1
      {"d", 0.2, 1, 0.4}, {"e", 0.3, 1, 0.8},   // bin 2
  };
  const auto files = emit_figure_data(reports, "rpa_bins");
  REQUIRE(files.size() == 1);
  CHECK(files[0].name == "rpa_bins.csv");
  const auto rows = csv_rows(files[0].csv);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0] == std::vector<std::string>{"bin", "rpa_low", "rpa_high", "n", "accuracy", "mean_probability",
                                            "probability_std"});
  // bin, low, high, n, accuracy, mean, std (population)
  const std::vector<std::array<double, 7>> expected = {
      {0, 0, 1e-5, 2, 0.5, 0.4, 0.2}, {1, 1e-5, 0.1, 1, 1, 0.9, 0}, {2, 0.1, 0.5, 2, 0.5, 0.6, 0.2}};
  for (std::size_t i = 0; i < expected.size(); ++i) {
    for (std::size_t k = 0; k < 7; ++k) {
      CHECK(std::stod(rows[i + 1][k]) == doctest::Approx(expected[i][k]).epsilon(1e-12));
    }
  }

  MetricsReport m;
  m.task = Task::Classification;
  m.n = 10;
  m.classification = ClassificationMetrics{0.9, 0.8, 0.7, 0.75, std::nullopt};
  reports.metrics = {{"test", m}};
  const auto metrics = csv_rows(emit_figure_data(reports, "metrics")[0].csv);
  CHECK(metrics[0] == std::vector<std::string>{"split", "task", "metric", "value"});
  CHECK(metrics.size() == 6);  // n + four metrics; no AUC for a single class
  CHECK(metrics[5] == std::vector<std::string>{"test", "classification", "f1", "0.75"});

  const FigureReports empty;
  CHECK(emit_figure_data(empty, "metrics")[0].csv == "split,task,metric,value\n");
  CHECK(emit_figure_data(empty, "rpa_bins")[0].csv ==
        "bin,rpa_low,rpa_high,n,accuracy,mean_probability,probability_std\n");
  const auto imp = emit_figure_data(empty, "importance");
  REQUIRE(imp.size() == 2);
  CHECK(imp[0].csv == "rank,feature,metric_kind,metric_full,metric_ablated,delta\n");
  CHECK(imp[1].csv == "feature_f,feature_g,delta_pair,delta_f,delta_g,interaction,class,magnitude\n");

  CHECK(error_of([&] { emit_figure_data(empty, "heatmap"); }).code() == Errc::UnknownKind);
}

TEST_CASE("run-all chains manifests by digest; finetune and predict reuse the trained models") {
  TempDir dir("e2e");
  const auto config_path = small_fixture(dir);
  const auto r = run_cli({"run-all", "--config", config_path.string()});
  INFO(r.err);
  REQUIRE(r.code == 0);
  const auto config = load_pipeline_config(config_path);

  // Every produced file is declared once, with its true digest.
  const auto artifacts = run_artifacts(config.out);
  std::set<std::string> declared;
  for (const auto& a : artifacts) {
    CHECK(declared.insert(a.path).second);
    CHECK(sha256_file(config.out / a.path) == a.sha256);
  }
  for (const auto& e : fs::recursive_directory_iterator(config.out)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), config.out).generic_string();
    if (e.path().filename() == "manifest.json" && e.path().parent_path().parent_path() == config.out) continue;
    CHECK_MESSAGE(declared.count(rel) == 1, rel);
  }

  // Each upstream input names its producer and matches that producer's record.
  std::map<std::string, std::string> produced;
  for (const auto& a : artifacts) produced[a.path] = a.sha256;
  for (const auto& stage : kPipelineStages) {
    const auto m = RunManifest::from_json(json::parse(tsv::read_text(config.out / stage / "manifest.json")));
    CHECK(m.config_digest == config_digest(config));
    for (const auto& in : m.inputs) {
      if (in.from == "external") continue;
      CHECK(produced.at(in.path) == in.sha256);
    }
  }
  const auto train_m = RunManifest::from_json(json::parse(tsv::read_text(config.out / "train/manifest.json")));
  std::set<std::string> train_inputs;
  for (const auto& in : train_m.inputs) train_inputs.insert(in.path);
  CHECK(train_inputs.count("curate/curated.tsv") == 1);
  CHECK(train_inputs.count("split/splits.tsv") == 1);
  CHECK(train_inputs.count("embed/text.cache") == 1);

  CHECK(fs::exists(config.out / "eval/rpa_bins.csv"));
  CHECK(fs::exists(config.out / "ablate/importance_features.csv"));
  const auto importance = json::parse(tsv::read_text(config.out / "ablate/importance.json"));
  CHECK(importance["features"].size() == 5);
  CHECK(importance["interactions"].size() == 1);

  const auto p = run_cli({"predict", "--config", config_path.string()});
  INFO(p.err);
  REQUIRE(p.code == 0);
  const auto predictions = tsv::parse(tsv::read_text(config.out / "predict/predictions.tsv"));
  CHECK(predictions.rows.size() == 20);
  for (const auto& row : predictions.rows) {
    const double prob = std::stod(row.cells[2]);
    CHECK(prob >= 0.0);
    CHECK(prob <= 1.0);
  }

  const auto f = run_cli({"finetune", "--config", config_path.string()});
  INFO(f.err);
  REQUIRE(f.code == 0);
  const auto base = load_checkpoint(config.out / "train/classification");
  const auto tuned = load_checkpoint(config.out / "finetune/model");
  for (const auto& b : base.blocks) {
    if (b.group == "head") continue;
    const auto x = base.data(b.name);
    const auto y = tuned.data(b.name);
    CHECK_MESSAGE(std::equal(x.begin(), x.end(), y.begin()), b.name);
  }
  const auto summary = json::parse(tsv::read_text(config.out / "finetune/metrics.json"));
  const auto n = summary["train"].get<std::size_t>() + summary["val"].get<std::size_t>() +
                 summary["test"].get<std::size_t>();
  CHECK(summary["train"].get<double>() == doctest::Approx(0.7 * n).epsilon(0.02));
}
