#include "nanopro/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <set>

#include "nanopro/digest.hpp"
#include "nanopro/encode.hpp"
#include "nanopro/error.hpp"
#include "nanopro/synthetic.hpp"
#include "nanopro/tsv.hpp"

namespace nanopro {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void bad_config(const std::string& msg) { throw Error(Errc::Config, msg); }

std::string path_text(const fs::path& p) { return p.generic_string(); }

fs::path resolve(const fs::path& base, const std::string& text) {
  if (text.empty()) return {};
  fs::path p(text);
  return p.is_relative() && !base.empty() ? base / p : p;
}

// Every key of `doc` must exist in `schema` with a compatible type.
void check_against(const json& doc, const json& schema, const std::string& where) {
  if (!doc.is_object()) bad_config((where.empty() ? "config" : "'" + where + "'") + " must be an object");
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const auto key = where.empty() ? it.key() : where + "." + it.key();
    if (!schema.contains(it.key())) bad_config("unknown config key '" + key + "'");
    const auto& want = schema[it.key()];
    const auto& got = it.value();
    bool ok = true;
    if (want.is_object()) {
      check_against(got, want, key);
    } else if (want.is_number_unsigned()) {
      ok = got.is_number_unsigned();
    } else if (want.is_number_integer()) {
      ok = got.is_number_integer();
    } else if (want.is_number()) {
      ok = got.is_number();
    } else if (want.is_boolean()) {
      ok = got.is_boolean();
    } else if (want.is_string()) {
      ok = got.is_string();
    } else if (want.is_array()) {
      ok = got.is_array();
    }
    if (!ok) bad_config("'" + key + "' has the wrong type (expected like " + want.dump() + ")");
  }
}

Task parse_task_or_throw(const std::string& text, const char* key) {
  auto t = parse_task(text);
  if (!t) bad_config(std::string(key) + ": unknown task '" + text + "'");
  return *t;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

json PipelineConfig::to_json() const {
  json j;
  j["paths"] = {{"corpus", path_text(paths.corpus)},
                {"catalog", path_text(paths.catalog)},
                {"alignment", path_text(paths.alignment)},
                {"quantities", path_text(paths.quantities)},
                {"precomputed_protein", path_text(paths.precomputed_protein)},
                {"precomputed_text", path_text(paths.precomputed_text)},
                {"finetune_corpus", path_text(paths.finetune_corpus)},
                {"predict_input", path_text(paths.predict_input)},
                {"checkpoint", path_text(paths.checkpoint)}};
  j["out"] = path_text(out);
  j["curation"] = {{"local_fill", curation.local_fill},
                   {"top_n_scaling", curation.top_n_scaling},
                   {"global_fill", curation.global_fill},
                   {"impute", curation.impute},
                   {"truncated_studies", curation.truncated_studies}};
  j["split"] = {{"seed", split_seed}, {"bins", bins}};
  j["provider"] = {{"kind", provider}, {"seed", provider_seed}, {"endpoint", endpoint}};
  const auto& m = model;
  j["model"] = {{"modality", modality_spec_name(m.modality)},
                {"protein_dim", m.protein_dim},
                {"text_dim", m.text_dim},
                {"d_shared", m.d_shared},
                {"tokens", m.tokens},
                {"heads", m.heads},
                {"mlp_hidden", m.mlp_hidden},
                {"learning_rate", m.learning_rate},
                {"beta1", m.beta1},
                {"beta2", m.beta2},
                {"adam_eps", m.adam_eps},
                {"ln_eps", m.ln_eps},
                {"batch_size", m.batch_size},
                {"max_epochs", m.max_epochs},
                {"patience", m.patience},
                {"seed", m.seed},
                {"w_pos_policy", m.w_pos_policy}};
  json pairs = json::array();
  for (const auto& [f, g] : ablation_pairs) pairs.push_back({f, g});
  j["ablation"] = {{"features", ablation_features}, {"pairs", pairs}, {"epsilon", epsilon}};
  j["finetune"] = {{"task", task_name(finetune_task)}};
  j["predict"] = {{"task", task_name(predict_task)}};
  return j;
}

PipelineConfig PipelineConfig::from_json(const json& j, const fs::path& base_dir) {
  const json schema = PipelineConfig{}.to_json();
  check_against(j, schema, "");
  json full = schema;
  full.merge_patch(j);

  PipelineConfig c;
  try {
    const auto& p = full["paths"];
    auto path = [&](const char* key) { return resolve(base_dir, p[key].get<std::string>()); };
    c.paths.corpus = path("corpus");
    c.paths.catalog = path("catalog");
    c.paths.alignment = path("alignment");
    c.paths.quantities = path("quantities");
    c.paths.precomputed_protein = path("precomputed_protein");
    c.paths.precomputed_text = path("precomputed_text");
    c.paths.finetune_corpus = path("finetune_corpus");
    c.paths.predict_input = path("predict_input");
    c.paths.checkpoint = path("checkpoint");
    c.out = resolve(base_dir, full["out"].get<std::string>());
    if (c.out.empty()) bad_config("'out' must not be empty");

    const auto& cur = full["curation"];
    c.curation.local_fill = cur["local_fill"].get<bool>();
    c.curation.top_n_scaling = cur["top_n_scaling"].get<bool>();
    c.curation.global_fill = cur["global_fill"].get<bool>();
    c.curation.impute = cur["impute"].get<bool>();
    c.curation.truncated_studies = cur["truncated_studies"].get<std::vector<std::string>>();

    c.split_seed = full["split"]["seed"].get<std::uint64_t>();
    c.bins = full["split"]["bins"].get<int>();
    if (c.bins < 2) bad_config("split.bins must be at least 2");

    const auto& prov = full["provider"];
    c.provider = prov["kind"].get<std::string>();
    if (c.provider != "synthetic" && c.provider != "precomputed" && c.provider != "remote") {
      bad_config("provider.kind must be synthetic, precomputed or remote, got '" + c.provider + "'");
    }
    c.provider_seed = prov["seed"].get<std::uint64_t>();
    c.endpoint = prov["endpoint"].get<std::string>();
    if (c.provider == "remote" && c.endpoint.empty()) bad_config("provider.endpoint is required for remote");

    const auto& m = full["model"];
    const auto modality = parse_modality_spec(m["modality"].get<std::string>());
    if (!modality) bad_config("model.modality: unknown value " + m["modality"].dump());
    c.model.modality = *modality;
    c.model.protein_dim = m["protein_dim"].get<std::size_t>();
    c.model.text_dim = m["text_dim"].get<std::size_t>();
    c.model.d_shared = m["d_shared"].get<std::size_t>();
    c.model.tokens = m["tokens"].get<std::size_t>();
    c.model.heads = m["heads"].get<std::size_t>();
    c.model.mlp_hidden = m["mlp_hidden"].get<std::vector<std::size_t>>();
    c.model.learning_rate = m["learning_rate"].get<double>();
    c.model.beta1 = m["beta1"].get<double>();
    c.model.beta2 = m["beta2"].get<double>();
    c.model.adam_eps = m["adam_eps"].get<double>();
    c.model.ln_eps = m["ln_eps"].get<double>();
    c.model.batch_size = m["batch_size"].get<std::size_t>();
    c.model.max_epochs = m["max_epochs"].get<std::size_t>();
    c.model.patience = m["patience"].get<std::size_t>();
    c.model.seed = m["seed"].get<std::uint64_t>();
    c.model.w_pos_policy = m["w_pos_policy"].get<std::string>();
    if (c.model.w_pos_policy != "auto") {
      const auto w = tsv::parse_double(c.model.w_pos_policy);
      if (!w || !(*w > 0)) bad_config("model.w_pos_policy must be \"auto\" or a positive number");
    }
    if (c.model.batch_size == 0) bad_config("model.batch_size must be positive");
    if (!(c.model.learning_rate > 0)) bad_config("model.learning_rate must be positive");
    c.model.validate();

    const auto& ab = full["ablation"];
    c.ablation_features = ab["features"].get<std::vector<std::string>>();
    for (const auto& pair : ab["pairs"]) {
      if (!pair.is_array() || pair.size() != 2) bad_config("ablation.pairs entries must be [feature, feature]");
      c.ablation_pairs.emplace_back(pair[0].get<std::string>(), pair[1].get<std::string>());
    }
    const auto& schema_features = FeatureSchema::standard();
    for (const auto& f : c.ablation_features) schema_features.require(f);
    for (const auto& [f, g] : c.ablation_pairs) {
      schema_features.require(f);
      schema_features.require(g);
      if (f == g) bad_config("ablation pair repeats '" + f + "'");
    }
    c.epsilon = ab["epsilon"].get<double>();
    if (!(c.epsilon >= 0)) bad_config("ablation.epsilon must be non-negative");

    c.finetune_task = parse_task_or_throw(full["finetune"]["task"].get<std::string>(), "finetune.task");
    c.predict_task = parse_task_or_throw(full["predict"]["task"].get<std::string>(), "predict.task");
  } catch (const json::exception& e) {
    bad_config(std::string("config: ") + e.what());
  }
  return c;
}

void apply_override(json& doc, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    bad_config("expected KEY=VALUE, got '" + std::string(assignment) + "'");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  const json schema = PipelineConfig{}.to_json();

  const json* s = &schema;
  json* d = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const auto part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty() || !s->is_object() || !s->contains(part)) bad_config("unknown config key '" + key + "'");
    s = &(*s)[part];
    if (!d->is_object()) *d = json::object();
    if (dot == std::string::npos) {
      json value = json::parse(raw, nullptr, false);
      if (value.is_discarded() || (s->is_string() && !value.is_string())) value = raw;
      (*d)[part] = std::move(value);
      return;
    }
    d = &(*d)[part];
    start = dot + 1;
  }
}

PipelineConfig load_pipeline_config(const fs::path& path, const std::vector<std::string>& overrides,
                                    std::optional<std::uint64_t> seed) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::Io, "cannot read config " + path.string());
  json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) bad_config(path.string() + " is not a JSON object");
  for (const auto& o : overrides) apply_override(doc, o);
  if (seed) {
    doc["split"]["seed"] = *seed;
    doc["model"]["seed"] = *seed;
  }
  return PipelineConfig::from_json(doc, path.parent_path());
}

std::string config_digest(const PipelineConfig& config) { return sha256_hex(config.to_json().dump()); }

// ---------------------------------------------------------------------------
// Manifests

json RunManifest::to_json() const {
  auto refs = [](const std::vector<ArtifactRef>& v) {
    json a = json::array();
    for (const auto& r : v) a.push_back({{"path", r.path}, {"sha256", r.sha256}, {"from", r.from}});
    return a;
  };
  return {{"schema", kRunManifestSchema}, {"run_id", run_id},     {"stage", stage},
          {"config_digest", config_digest}, {"inputs", refs(inputs)}, {"outputs", refs(outputs)},
          {"seconds", seconds}};
}

RunManifest RunManifest::from_json(const json& j) {
  try {
    if (j.at("schema").get<std::string>() != kRunManifestSchema) {
      throw Error(Errc::Version, "run manifest schema " + j.at("schema").dump());
    }
    RunManifest m;
    m.run_id = j.at("run_id").get<std::string>();
    m.stage = j.at("stage").get<std::string>();
    m.config_digest = j.at("config_digest").get<std::string>();
    m.seconds = j.at("seconds").get<double>();
    auto refs = [](const json& a) {
      std::vector<ArtifactRef> v;
      for (const auto& r : a) v.push_back({r.at("path"), r.at("sha256"), r.at("from")});
      return v;
    };
    m.inputs = refs(j.at("inputs"));
    m.outputs = refs(j.at("outputs"));
    return m;
  } catch (const json::exception& e) {
    throw Error(Errc::Corrupt, std::string("run manifest: ") + e.what());
  }
}

namespace {

RunManifest read_manifest(const fs::path& path) {
  const json j = json::parse(tsv::read_text(path), nullptr, false);
  if (j.is_discarded()) throw Error(Errc::Corrupt, path.string() + " is not valid JSON");
  return RunManifest::from_json(j);
}

std::string run_id_for(const PipelineConfig& config) {
  std::string material = config_digest(config);
  for (const auto& p : {config.paths.corpus, config.paths.catalog}) {
    if (!p.empty() && fs::exists(p)) material += sha256_file(p);
  }
  return sha256_hex(material).substr(0, 16);
}

// Bookkeeping for one stage: a fresh directory, declared inputs and outputs.
struct StageRun {
  const PipelineConfig& config;
  std::string name;
  fs::path dir;
  RunManifest manifest;

  StageRun(const PipelineConfig& c, std::string stage) : config(c), name(std::move(stage)), dir(c.out / name) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    manifest.stage = name;
    manifest.config_digest = config_digest(c);
    manifest.run_id = run_id_for(c);
  }

  fs::path external(const fs::path& p, const std::string& key) {
    if (p.empty()) throw Error(Errc::Config, "paths." + key + " is not set");
    if (!fs::is_regular_file(p)) throw Error(Errc::Io, key + " " + p.string() + " does not exist");
    manifest.inputs.push_back({path_text(p), sha256_file(p), "external"});
    return p;
  }

  // A file produced by an earlier stage, checked against that stage's manifest.
  fs::path upstream(const std::string& stage, const std::string& rel) {
    const auto mpath = config.out / stage / "manifest.json";
    if (!fs::exists(mpath)) throw Error(Errc::NoData, "stage '" + stage + "' has not run (no manifest)");
    const auto m = read_manifest(mpath);
    const auto it = std::find_if(m.outputs.begin(), m.outputs.end(), [&](const auto& r) { return r.path == rel; });
    if (it == m.outputs.end()) throw Error(Errc::NoData, "stage '" + stage + "' did not produce " + rel);
    const auto file = config.out / rel;
    if (!fs::is_regular_file(file)) throw Error(Errc::Corrupt, rel + " is missing");
    const auto digest = sha256_file(file);
    if (digest != it->sha256) throw Error(Errc::Corrupt, rel + " does not match the digest recorded by '" + stage + "'");
    manifest.inputs.push_back({rel, digest, stage});
    return file;
  }

  // Every file of a directory output of an earlier stage.
  fs::path upstream_dir(const std::string& stage, const std::string& rel, std::initializer_list<const char*> files) {
    for (const auto* f : files) upstream(stage, rel + "/" + f);
    return config.out / rel;
  }

  void declare(const fs::path& file) {
    manifest.outputs.push_back({path_text(fs::relative(file, config.out)), sha256_file(file), name});
  }

  void declare_tree(const fs::path& root) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
      if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) declare(f);
  }

  void write(const std::string& file, std::string_view text) {
    tsv::write_text(dir / file, text);
    declare(dir / file);
  }
};

struct LiveProviders {
  std::unique_ptr<EmbeddingProvider> protein, text;
};

LiveProviders live_providers(const PipelineConfig& c, StageRun& run) {
  LiveProviders p;
  const auto& m = c.model;
  if (c.provider == "synthetic") {
    p.protein = std::make_unique<SyntheticProteinProvider>(c.provider_seed, m.protein_dim);
    p.text = std::make_unique<SyntheticTextProvider>(mix_seed(c.provider_seed, 1), m.text_dim);
  } else if (c.provider == "precomputed") {
    if (m.uses_protein()) {
      p.protein = std::make_unique<PrecomputedProvider>(
          run.external(c.paths.precomputed_protein, "precomputed_protein"), Modality::Protein);
    }
    if (m.uses_text()) {
      p.text = std::make_unique<PrecomputedProvider>(run.external(c.paths.precomputed_text, "precomputed_text"),
                                                     Modality::Text);
    }
  } else {
    p.protein = std::make_unique<RemoteProvider>(c.endpoint, Modality::Protein);
    p.text = std::make_unique<RemoteProvider>(c.endpoint, Modality::Text);
  }
  return p;
}

// Serves vectors from the embed stage's store; anything else goes to the
// fallback, or fails when there is none.
class StoreFirst : public EmbeddingProvider {
 public:
  StoreFirst(const fs::path& store, Modality modality, std::size_t dim, EmbeddingProvider* fallback)
      : store_(store), modality_(modality), dim_(dim), fallback_(fallback),
        id_(fallback ? fallback->provider_id() : "embed-store") {}
  const std::string& provider_id() const override { return id_; }
  Modality modality() const override { return modality_; }
  std::size_t dim() const override { return dim_; }
  bool deterministic() const override { return true; }
  std::vector<float> compute(std::string_view input) override {
    if (auto hit = store_.get(sha256(input))) return std::move(hit->values);
    if (!fallback_) {
      throw Error(Errc::Provider, std::string(modality_name(modality_)) + " input " + sha256_hex(input).substr(0, 12) +
                                      " was not embedded by the embed stage");
    }
    return fallback_->compute(input);
  }

 private:
  EmbeddingCache store_;
  Modality modality_;
  std::size_t dim_;
  EmbeddingProvider* fallback_;
  std::string id_;
};

// Corpus, split and stored embeddings as seen by train, eval and ablate.
struct StageData {
  std::vector<SampleRecord> corpus;
  SplitAssignment assignment;
  ProteinCatalog catalog;
  std::unique_ptr<StoreFirst> protein, text;

  Encoders encoders() const { return {protein.get(), text.get(), nullptr, nullptr}; }

  TaskView view(Task task, Split split, const BoxCoxTransform* transform) const {
    const auto members = split_members(corpus, assignment, split);
    if (task == Task::Classification) return classification_view(corpus, members);
    if (!transform) throw Error(Errc::Config, "regression view needs a target transform");
    return regression_view(corpus, members, *transform);
  }
};

StageData load_stage_data(StageRun& run, EmbeddingProvider* text_fallback = nullptr) {
  StageData d;
  d.corpus = parse_sample_table(run.upstream("curate", "curate/curated.tsv"));
  d.assignment = parse_split_manifest(tsv::read_text(run.upstream("split", "split/splits.tsv")));
  const json edges = json::parse(tsv::read_text(run.upstream("split", "split/bin_edges.json")), nullptr, false);
  if (edges.is_discarded() || !edges.is_array()) throw Error(Errc::Corrupt, "split/bin_edges.json is not an array");
  d.assignment.bin_edges = edges.get<std::vector<double>>();
  d.catalog = load_protein_catalog(run.external(run.config.paths.catalog, "catalog"));
  for (const auto* f : {"protein.cache", "protein.cache.idx", "text.cache", "text.cache.idx"}) {
    run.upstream("embed", std::string("embed/") + f);
  }
  const auto& m = run.config.model;
  d.protein = std::make_unique<StoreFirst>(run.config.out / "embed/protein.cache", Modality::Protein, m.protein_dim,
                                           nullptr);
  d.text = std::make_unique<StoreFirst>(run.config.out / "embed/text.cache", Modality::Text, m.text_dim,
                                        text_fallback);
  return d;
}

ModelParams load_model(StageRun& run, Task task) {
  const auto& explicit_dir = run.config.paths.checkpoint;
  if (!explicit_dir.empty()) {
    run.external(explicit_dir / "manifest.json", "checkpoint");
    run.external(explicit_dir / "params.bin", "checkpoint");
    return load_checkpoint(explicit_dir);
  }
  const auto rel = "train/" + std::string(task_name(task));
  return load_checkpoint(run.upstream_dir("train", rel, {"manifest.json", "params.bin"}));
}

json metrics_json(const MetricsReport& m) {
  json j{{"task", task_name(m.task)}, {"n", m.n}};
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  if (m.classification) {
    const auto& c = *m.classification;
    j["accuracy"] = c.accuracy;
    j["precision"] = c.precision;
    j["recall"] = c.recall;
    j["f1"] = c.f1;
    j["auc"] = opt(c.auc);
  }
  if (m.regression) {
    const auto& r = *m.regression;
    j["r2"] = r.r2;
    j["mse"] = r.mse;
    j["mae"] = r.mae;
    j["raw_r2"] = opt(r.raw_r2);
    j["raw_mse"] = opt(r.raw_mse);
    j["raw_mae"] = opt(r.raw_mae);
  }
  return j;
}

json history_json(const TrainHistory& h) {
  return {{"train_loss", h.train_loss},
          {"val_metric", h.val_metric},
          {"best_epoch", h.best_epoch},
          {"early_stopped", h.early_stopped},
          {"w_pos", h.w_pos}};
}

void write_figures(StageRun& run, const FigureReports& reports, std::string_view kind) {
  for (const auto& f : emit_figure_data(reports, kind)) run.write(f.name, f.csv);
}

// ---- stages ----

void stage_curate(StageRun& run) {
  const auto& c = run.config;
  auto records = parse_sample_table(run.external(c.paths.corpus, "corpus"));
  const auto catalog = load_protein_catalog(run.external(c.paths.catalog, "catalog"));
  auto alignment = AlignmentTable::builtin();
  if (!c.paths.alignment.empty()) alignment.merge(AlignmentTable::load(run.external(c.paths.alignment, "alignment")));
  std::vector<QuantityRow> quantities;
  if (!c.paths.quantities.empty()) quantities = load_quantity_table(run.external(c.paths.quantities, "quantities"));

  const auto result = curate_corpus(std::move(records), catalog, alignment, c.curation, quantities);
  if (result.merged.empty()) throw Error(Errc::EmptyCorpus, "curation left no records");
  run.write("curated.tsv", serialize_sample_table(result.merged));
  run.write("filled_only.tsv", serialize_sample_table(result.filled_only));
  const auto& r = result.report;
  const json report = {{"input_records", r.input_records},
                       {"dropped_without_rpa", r.dropped_without_rpa},
                       {"local_fill_added", r.local_fill_added},
                       {"global_fill_added", r.global_fill_added},
                       {"units_scaled", r.units_scaled},
                       {"units_not_scaled", r.units_not_scaled},
                       {"reference_profiles", r.reference_profiles},
                       {"unaligned_values", r.unaligned_values},
                       {"merged_records", r.merged_records},
                       {"filled_only_records", r.filled_only_records}};
  run.write("report.json", report.dump(2));
}

void stage_split(StageRun& run) {
  const auto corpus = parse_sample_table(run.upstream("curate", "curate/curated.tsv"));
  const auto assignment = assign_splits(corpus, run.config.split_seed, run.config.bins);
  run.write("splits.tsv", serialize_split_manifest(assignment));
  run.write("bin_edges.json", json(assignment.bin_edges).dump());
  json sizes;
  for (const auto s : {Split::Train, Split::Val, Split::Test}) {
    sizes[std::string(split_name(s))] = split_members(corpus, assignment, s).size();
  }
  run.write("summary.json", sizes.dump(2));
}

void stage_embed(StageRun& run) {
  const auto corpus = parse_sample_table(run.upstream("curate", "curate/curated.tsv"));
  const auto catalog = load_protein_catalog(run.external(run.config.paths.catalog, "catalog"));
  auto live = live_providers(run.config, run);
  const auto& m = run.config.model;
  std::size_t proteins = 0, prompts = 0;
  {
    EmbeddingCache pstore(run.dir / "protein.cache");
    EmbeddingCache tstore(run.dir / "text.cache");
    for (const auto& r : corpus) {
      if (m.uses_protein()) {
        const auto* p = catalog.lookup(r.protein_accession);
        if (!p) throw Error(Errc::NoData, "accession " + r.protein_accession + " is not in the catalog");
        cached_embed_protein(p->sequence, *live.protein, &pstore);
      }
      if (m.uses_text()) cached_embed_text(render_prompt(r), *live.text, &tstore);
    }
    proteins = pstore.size();
    prompts = tstore.size();
  }
  for (const auto* f : {"protein.cache", "protein.cache.idx", "text.cache", "text.cache.idx"}) run.declare(run.dir / f);
  run.write("summary.json", json{{"proteins", proteins}, {"prompts", prompts}, {"records", corpus.size()}}.dump(2));
}

void stage_train(StageRun& run) {
  const auto data = load_stage_data(run);
  json history;
  for (const auto task : {Task::Classification, Task::Regression}) {
    std::optional<BoxCoxTransform> transform;
    if (task == Task::Regression) {
      transform = fit_target_transform(data.corpus, split_members(data.corpus, data.assignment, Split::Train));
    }
    const auto* t = transform ? &*transform : nullptr;
    const auto tv = data.view(task, Split::Train, t);
    const auto vv = data.view(task, Split::Val, t);
    if (tv.empty() || vv.empty()) {
      throw Error(Errc::EmptyView, std::string(task_name(task)) + " train or val view is empty");
    }
    const auto enc = data.encoders();
    const auto modality = run.config.model.modality;
    const auto train_view = encode(labeled_set(data.corpus, tv), data.catalog, enc, modality);
    const auto val_view = encode(labeled_set(data.corpus, vv), data.catalog, enc, modality);
    ModelConfig mc = run.config.model;
    mc.task = task;
    auto result = train(train_view, val_view, mc);
    result.params.target_transform = transform;
    const auto dir = run.dir / task_name(task);
    save_checkpoint(result.params, dir);
    run.declare_tree(dir);
    history[std::string(task_name(task))] = history_json(result.history);
  }
  run.write("history.json", history.dump(2));
}

void stage_eval(StageRun& run) {
  const auto data = load_stage_data(run);
  FigureReports fig;
  fig.rpa_edges = data.assignment.bin_edges;
  json metrics = json::array();
  std::string predictions = "task\tsplit\tsample_id\trpa\tlabel\toutput\n";
  for (const auto task : {Task::Classification, Task::Regression}) {
    const auto params = load_model(run, task);
    for (const auto split : {Split::Val, Split::Test}) {
      const auto tv = data.view(task, split, params.target_transform ? &*params.target_transform : nullptr);
      if (tv.empty()) continue;
      const auto ev = encode(labeled_set(data.corpus, tv), data.catalog, data.encoders(), params.config.modality);
      const auto out = predict_view(params, ev);
      const auto report = evaluate(params, ev);
      fig.metrics.push_back({std::string(split_name(split)), report});
      auto j = metrics_json(report);
      j["split"] = split_name(split);
      metrics.push_back(std::move(j));
      for (std::size_t i = 0; i < tv.size(); ++i) {
        predictions += std::string(task_name(task)) + "\t" + std::string(split_name(split)) + "\t" + tv.sample_ids[i] +
                       "\t" + tsv::format_double(tv.rpa[i]) + "\t" + tsv::format_double(tv.labels[i]) + "\t" +
                       tsv::format_double(out[i]) + "\n";
        if (task == Task::Classification && split == Split::Test) {
          fig.predictions.push_back({tv.sample_ids[i], tv.rpa[i], tv.labels[i], out[i]});
        }
      }
    }
  }
  run.write("metrics.json", metrics.dump(2));
  run.write("predictions.tsv", predictions);
  write_figures(run, fig, "metrics");
  write_figures(run, fig, "rpa_bins");
}

void stage_ablate(StageRun& run) {
  auto live = live_providers(run.config, run);
  const auto data = load_stage_data(run, live.text.get());
  const auto params = load_model(run, Task::Classification);
  const auto tv = data.view(Task::Classification, Split::Test, nullptr);
  if (tv.empty()) throw Error(Errc::EmptyView, "test view is empty");

  EmbeddingCache masked(run.dir / "masked_text.cache");
  auto enc = data.encoders();
  enc.text_cache = params.config.uses_text() ? &masked : nullptr;
  Ablator ablator(params, labeled_set(data.corpus, tv), data.catalog, enc);

  auto features = run.config.ablation_features;
  if (features.empty()) {
    for (const auto& f : FeatureSchema::standard().features()) features.emplace_back(f.id);
  }
  std::map<std::string, AblationRecord> singles;
  auto single = [&](const std::string& f) -> const AblationRecord& {
    auto it = singles.find(f);
    if (it == singles.end()) it = singles.emplace(f, ablator.ablate_feature(f)).first;
    return it->second;
  };
  std::vector<AblationRecord> records;
  for (const auto& f : features) records.push_back(single(f));
  std::vector<InteractionRecord> interactions;
  for (const auto& [f, g] : run.config.ablation_pairs) {
    const auto sf = single(f);
    const auto sg = single(g);
    interactions.push_back(ablator.ablate_pair(f, g, sf, sg, run.config.epsilon));
  }

  FigureReports fig;
  fig.importance = importance_report(records, interactions);
  run.write("importance.json", fig.importance->to_json());
  write_figures(run, fig, "importance");
  run.declare(run.dir / "masked_text.cache");
  run.declare(run.dir / "masked_text.cache.idx");
}

void stage_finetune(StageRun& run) {
  const auto& c = run.config;
  const auto base = load_model(run, c.finetune_task);
  const auto records = parse_sample_table(run.external(c.paths.finetune_corpus, "finetune_corpus"));
  const auto catalog = load_protein_catalog(run.external(c.paths.catalog, "catalog"));
  std::vector<std::size_t> all(records.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  TaskView view;
  if (c.finetune_task == Task::Classification) {
    view = classification_view(records, all);
  } else {
    if (!base.target_transform) throw Error(Errc::Config, "base regression model has no target transform");
    view = regression_view(records, all, *base.target_transform);
  }
  if (view.empty()) throw Error(Errc::EmptyView, "finetune corpus gives an empty view");

  auto live = live_providers(c, run);
  EmbeddingCache pcache(run.dir / "protein.cache"), tcache(run.dir / "text.cache");
  const Encoders enc{live.protein.get(), live.text.get(), &pcache, &tcache};
  const auto data = encode(labeled_set(records, view), catalog, enc, base.config.modality);

  ModelConfig mc = base.config;
  mc.learning_rate = c.model.learning_rate;
  mc.batch_size = c.model.batch_size;
  mc.max_epochs = c.model.max_epochs;
  mc.patience = c.model.patience;
  mc.seed = c.model.seed;
  mc.w_pos_policy = c.model.w_pos_policy;
  const auto result = finetune(base, data, mc);
  save_checkpoint(result.params, run.dir / "model");
  run.declare_tree(run.dir / "model");
  run.declare(run.dir / "protein.cache");
  run.declare(run.dir / "protein.cache.idx");
  run.declare(run.dir / "text.cache");
  run.declare(run.dir / "text.cache.idx");
  const json summary = {{"task", task_name(c.finetune_task)},
                        {"train", result.train_rows.size()},
                        {"val", result.val_rows.size()},
                        {"test", result.test_rows.size()},
                        {"test_metrics", metrics_json(result.test_metrics)},
                        {"history", history_json(result.history)}};
  run.write("metrics.json", summary.dump(2));
}

void stage_predict(StageRun& run) {
  const auto& c = run.config;
  const auto params = load_model(run, c.predict_task);
  const auto records = parse_sample_table(run.external(c.paths.predict_input, "predict_input"));
  const auto catalog = load_protein_catalog(run.external(c.paths.catalog, "catalog"));
  auto live = live_providers(c, run);
  const auto out = predict_records(params, records, catalog, {live.protein.get(), live.text.get(), nullptr, nullptr});
  const bool regression = params.config.task == Task::Regression;
  std::string tsv_text = regression ? "sample_id\tprotein_accession\tboxcox_rpa\trpa\n"
                                    : "sample_id\tprotein_accession\tprobability\n";
  for (std::size_t i = 0; i < records.size(); ++i) {
    tsv_text += records[i].sample_id + "\t" + records[i].protein_accession + "\t" + tsv::format_double(out[i]);
    if (regression) {
      if (!params.target_transform) throw Error(Errc::Config, "regression model has no target transform");
      tsv_text += "\t" + tsv::format_double(boxcox_invert_clipped(out[i], *params.target_transform));
    }
    tsv_text += "\n";
  }
  run.write("predictions.tsv", tsv_text);
}

const std::map<std::string, std::function<void(StageRun&)>, std::less<>>& stage_table() {
  static const std::map<std::string, std::function<void(StageRun&)>, std::less<>> table = {
      {"curate", stage_curate}, {"split", stage_split},       {"embed", stage_embed},
      {"train", stage_train},   {"eval", stage_eval},         {"ablate", stage_ablate},
      {"finetune", stage_finetune}, {"predict", stage_predict}};
  return table;
}

}  // namespace

RunManifest run_stage(const PipelineConfig& config, std::string_view stage) {
  const auto& table = stage_table();
  const auto fn = table.find(stage);
  if (fn == table.end()) throw Error(Errc::Config, "unknown stage '" + std::string(stage) + "'");
  const auto t0 = std::chrono::steady_clock::now();
  try {
    StageRun run(config, std::string(stage));
    fn->second(run);
    run.manifest.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    tsv::write_text(run.dir / "manifest.json", run.manifest.to_json().dump(2));
    return run.manifest;
  } catch (const std::exception& e) {
    throw Error(Errc::Stage, "stage '" + std::string(stage) + "' failed: " + e.what());
  }
}

std::vector<RunManifest> run_end_to_end(const PipelineConfig& config) {
  std::vector<RunManifest> out;
  for (const auto& s : kPipelineStages) out.push_back(run_stage(config, s));
  return out;
}

std::vector<ArtifactRef> run_artifacts(const fs::path& out_dir) {
  std::vector<ArtifactRef> all;
  for (const auto& [name, fn] : stage_table()) {
    const auto m = out_dir / name / "manifest.json";
    if (!fs::exists(m)) continue;
    const auto manifest = read_manifest(m);
    all.insert(all.end(), manifest.outputs.begin(), manifest.outputs.end());
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.path < b.path; });
  return all;
}

fs::path write_pipeline_fixture(const fs::path& dir, std::uint64_t seed, std::size_t samples) {
  const auto corpus = synthetic::make_corpus(seed, samples);
  fs::create_directories(dir);
  write_sample_table(dir / "corpus.tsv", corpus.records);
  tsv::write_text(dir / "catalog.tsv", serialize_protein_catalog(corpus.catalog));

  // Two studies with local zeros give a small two-class adaptation set.
  std::vector<SampleRecord> adapt;
  for (const auto& r : corpus.records) {
    if (r.study_id == "S1" || r.study_id == "S2") adapt.push_back(r);
  }
  write_sample_table(dir / "finetune.tsv", local_fill(adapt));
  const std::vector<SampleRecord> query(corpus.records.begin(),
                                        corpus.records.begin() + std::min<std::size_t>(20, corpus.records.size()));
  write_sample_table(dir / "predict.tsv", query);

  PipelineConfig c;
  c.paths.corpus = "corpus.tsv";
  c.paths.catalog = "catalog.tsv";
  c.paths.finetune_corpus = "finetune.tsv";
  c.paths.predict_input = "predict.tsv";
  c.out = "run";
  c.provider_seed = seed;
  c.split_seed = seed;
  c.model.seed = seed;
  c.model.learning_rate = 3e-5;
  c.model.batch_size = 32;
  c.model.max_epochs = 3;
  c.model.patience = 2;
  c.ablation_features = {"surface_modification", "core", "shape", "incubation_temperature", "flow_speed"};
  c.ablation_pairs = {{"surface_modification", "core"}};
  const auto path = dir / "config.json";
  tsv::write_text(path, c.to_json().dump(2));
  return path;
}

// ---------------------------------------------------------------------------
// Figure data

std::vector<FigureFile> emit_figure_data(const FigureReports& reports, std::string_view kind) {
  const auto num = [](double v) { return tsv::format_double(v); };
  if (kind == "metrics") {
    std::string csv = "split,task,metric,value\n";
    for (const auto& [split, m] : reports.metrics) {
      const auto prefix = split + "," + std::string(task_name(m.task)) + ",";
      auto row = [&](const char* name, const std::optional<double>& v) {
        if (v) csv += prefix + name + "," + num(*v) + "\n";
      };
      row("n", static_cast<double>(m.n));
      if (m.classification) {
        const auto& c = *m.classification;
        row("accuracy", c.accuracy);
        row("precision", c.precision);
        row("recall", c.recall);
        row("f1", c.f1);
        row("auc", c.auc);
      }
      if (m.regression) {
        const auto& r = *m.regression;
        row("r2", r.r2);
        row("mse", r.mse);
        row("mae", r.mae);
        row("raw_r2", r.raw_r2);
        row("raw_mse", r.raw_mse);
        row("raw_mae", r.raw_mae);
      }
    }
    return {{"metrics.csv", csv}};
  }
  if (kind == "rpa_bins") {
    std::string csv = "bin,rpa_low,rpa_high,n,accuracy,mean_probability,probability_std\n";
    std::map<int, std::vector<const PredictionRow*>> bins;
    for (const auto& p : reports.predictions) bins[rpa_bin(p.rpa, reports.rpa_edges)].push_back(&p);
    const auto& edges = reports.rpa_edges;
    for (const auto& [bin, rows] : bins) {
      const double lo = bin == 0 ? 0.0 : bin == 1 ? kAffinityThreshold : edges[bin - 2];
      const double hi = bin == 0 ? kAffinityThreshold : static_cast<std::size_t>(bin - 1) < edges.size() ? edges[bin - 1] : 1.0;
      double correct = 0, sum = 0, sq = 0;
      for (const auto* r : rows) {
        correct += (r->probability >= 0.5) == (r->label > 0.5);
        sum += r->probability;
      }
      const double n = static_cast<double>(rows.size());
      const double mean = sum / n;
      for (const auto* r : rows) sq += (r->probability - mean) * (r->probability - mean);
      csv += std::to_string(bin) + "," + num(lo) + "," + num(hi) + "," + std::to_string(rows.size()) + "," +
             num(correct / n) + "," + num(mean) + "," + num(std::sqrt(sq / n)) + "\n";
    }
    return {{"rpa_bins.csv", csv}};
  }
  if (kind == "importance") {
    const ImportanceReport empty;
    const auto& r = reports.importance ? *reports.importance : empty;
    return {{"importance_features.csv", r.features_csv()}, {"importance_interactions.csv", r.interactions_csv()}};
  }
  throw Error(Errc::UnknownKind, "figure kind '" + std::string(kind) + "' (expected metrics, rpa_bins or importance)");
}

}  // namespace nanopro
