#include <cstring>
#include <fstream>

#include "json.hpp"

#include "nanopro/digest.hpp"
#include "nanopro/error.hpp"
#include "nanopro/model.hpp"
#include "nanopro/records.hpp"
#include "nanopro/tsv.hpp"

namespace nanopro {

namespace {

using nlohmann::json;

json config_json(const ModelConfig& c) {
  return {{"protein_dim", c.protein_dim},   {"text_dim", c.text_dim},
          {"d_shared", c.d_shared},         {"tokens", c.tokens},
          {"heads", c.heads},               {"mlp_hidden", c.mlp_hidden},
          {"task", task_name(c.task)},      {"modality", modality_spec_name(c.modality)},
          {"learning_rate", c.learning_rate}, {"beta1", c.beta1},
          {"beta2", c.beta2},               {"adam_eps", c.adam_eps},
          {"ln_eps", c.ln_eps},             {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},     {"patience", c.patience},
          {"seed", c.seed},                 {"w_pos_policy", c.w_pos_policy}};
}

ModelConfig config_from(const json& j) {
  ModelConfig c;
  c.protein_dim = j.at("protein_dim");
  c.text_dim = j.at("text_dim");
  c.d_shared = j.at("d_shared");
  c.tokens = j.at("tokens");
  c.heads = j.at("heads");
  c.mlp_hidden = j.at("mlp_hidden").get<std::vector<std::size_t>>();
  auto task = parse_task(j.at("task").get<std::string>());
  auto modality = parse_modality_spec(j.at("modality").get<std::string>());
  if (!task || !modality) throw Error(Errc::Corrupt, "checkpoint config has unknown task or modality");
  c.task = *task;
  c.modality = *modality;
  c.learning_rate = j.at("learning_rate");
  c.beta1 = j.at("beta1");
  c.beta2 = j.at("beta2");
  c.adam_eps = j.at("adam_eps");
  c.ln_eps = j.at("ln_eps");
  c.batch_size = j.at("batch_size");
  c.max_epochs = j.at("max_epochs");
  c.patience = j.at("patience");
  c.seed = j.at("seed");
  c.w_pos_policy = j.at("w_pos_policy");
  return c;
}

constexpr std::string_view kFeatureSchemaVersion = "features-29/1";

}  // namespace

void save_checkpoint(const ModelParams& params, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::string payload(params.values.size() * 4, '\0');
  for (std::size_t i = 0; i < params.values.size(); ++i) {
    const float f = static_cast<float>(params.values[i]);
    std::memcpy(payload.data() + 4 * i, &f, 4);
  }
  json blocks = json::array();
  for (const auto& b : params.blocks) {
    blocks.push_back({{"name", b.name},
                      {"group", b.group},
                      {"shape", {b.rows, b.cols}},
                      {"offset", b.offset},
                      {"length", b.size()}});
  }
  json m{{"schema_version", kCheckpointSchema},
         {"feature_schema", kFeatureSchemaVersion},
         {"config", config_json(params.config)},
         {"seed", params.config.seed},
         {"frozen_groups", params.frozen_groups},
         {"blocks", blocks},
         {"payload", {{"file", "params.bin"}, {"bytes", payload.size()}, {"sha256", sha256_hex(payload)}}}};
  if (params.target_transform) {
    m["target_transform"] = {{"lambda", params.target_transform->lambda},
                             {"fitted_on", params.target_transform->fitted_on}};
  } else {
    m["target_transform"] = nullptr;
  }
  tsv::write_text(dir / "params.bin", payload);
  tsv::write_text(dir / "manifest.json", m.dump(2) + "\n");
}

ModelParams load_checkpoint(const std::filesystem::path& dir) {
  json m;
  try {
    m = json::parse(tsv::read_text(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw Error(Errc::Corrupt, std::string("checkpoint manifest: ") + e.what());
  }
  if (!m.contains("schema_version") || m["schema_version"] != kCheckpointSchema) {
    throw Error(Errc::Version, "checkpoint schema " +
                                   (m.contains("schema_version") ? m["schema_version"].dump() : "missing") +
                                   ", expected " + std::string(kCheckpointSchema));
  }
  if (m.value("feature_schema", "") != kFeatureSchemaVersion) {
    throw Error(Errc::Version, "checkpoint feature schema " + m.value("feature_schema", "missing"));
  }
  ModelParams p;
  try {
    p = make_layout(config_from(m.at("config")));
    const auto& blocks = m.at("blocks");
    if (blocks.size() != p.blocks.size()) throw Error(Errc::Corrupt, "checkpoint block count mismatch");
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const auto& want = p.blocks[i];
      const auto& got = blocks[i];
      const auto shape = got.at("shape").get<std::vector<std::size_t>>();
      if (got.at("name") != want.name || shape.size() != 2 || shape[0] != want.rows ||
          shape[1] != want.cols || got.at("offset") != want.offset || got.at("length") != want.size()) {
        throw Error(Errc::Corrupt, "checkpoint block " + got.value("name", want.name) +
                                       " does not match the configured shape");
      }
    }
    for (const auto& g : m.at("frozen_groups")) p.frozen_groups.insert(g.get<std::string>());
    if (!m.at("target_transform").is_null()) {
      p.target_transform = BoxCoxTransform{m["target_transform"].at("lambda"),
                                           m["target_transform"].at("fitted_on")};
    }
  } catch (const json::exception& e) {
    throw Error(Errc::Corrupt, std::string("checkpoint manifest: ") + e.what());
  }

  const auto payload = tsv::read_text(dir / "params.bin");
  if (payload.size() != p.values.size() * 4 || payload.size() != m["payload"].value("bytes", 0ull)) {
    throw Error(Errc::Corrupt, "checkpoint payload has " + std::to_string(payload.size()) +
                                   " bytes, expected " + std::to_string(p.values.size() * 4));
  }
  if (sha256_hex(payload) != m["payload"].value("sha256", "")) {
    throw Error(Errc::Corrupt, "checkpoint payload digest mismatch");
  }
  for (std::size_t i = 0; i < p.values.size(); ++i) {
    float f;
    std::memcpy(&f, payload.data() + 4 * i, 4);
    if (!std::isfinite(f)) throw Error(Errc::Corrupt, "non-finite checkpoint parameter");
    p.values[i] = f;
  }
  return p;
}

}  // namespace nanopro
