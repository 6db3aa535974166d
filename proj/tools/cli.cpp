#include "nanopro/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "nanopro/error.hpp"
#include "nanopro/pipeline.hpp"

namespace nanopro::cli {

namespace {

struct Options {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string provider;
  std::string endpoint;
};

void add_common(CLI::App& sub, Options& o) {
  sub.add_option("--config", o.config, "Pipeline configuration (JSON)")->required()->check(CLI::ExistingFile);
  sub.add_option("--set", o.sets, "Override a config key, e.g. model.max_epochs=5 (repeatable)");
  sub.add_option("--out", o.out, "Run directory (overrides 'out')");
  sub.add_option("--seed", o.seed, "Split and model seed");
  sub.add_option("--provider", o.provider, "Embedding provider")
      ->check(CLI::IsMember({"synthetic", "precomputed", "remote"}));
  sub.add_option("--endpoint", o.endpoint, "Remote embedding endpoint URL");
}

}  // namespace

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Nanoparticle protein corona prediction pipeline", "nanopro"};
  app.require_subcommand(1, 1);
  Options o;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"curate", "Align, impute and fill the raw corpus"},
      {"split", "Assign train/val/test by origin"},
      {"embed", "Embed proteins and prompts into the run store"},
      {"train", "Train classification and regression models"},
      {"eval", "Metrics and figure data on val and test"},
      {"ablate", "Feature and pair ablation on the test view"},
      {"finetune", "Adapt a trained head to new records"},
      {"predict", "Score records with a trained model"},
      {"run-all", "curate, split, embed, train, eval, ablate"}};
  for (const auto& [name, help] : commands) add_common(*app.add_subcommand(name, help), o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code == 0) return 0;
    if (e.get_name() == "ExtrasError" || e.get_name() == "RequiredError") err << app.help();
    return 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  PipelineConfig config;
  try {
    config = load_pipeline_config(o.config, o.sets, o.seed);
  } catch (const Error& e) {
    // Only a bad --set is a usage error; a broken file is a runtime failure.
    if (e.code() == Errc::Config && !o.sets.empty()) {
      for (const auto& s : o.sets) {
        try {
          nlohmann::json probe = nlohmann::json::object();
          apply_override(probe, s);
        } catch (const Error& bad) {
          err << "--set " << s << ": " << bad.what() << "\n";
          return 2;
        }
      }
    }
    err << e.what() << "\n";
    return 1;
  }
  if (!o.out.empty()) config.out = std::filesystem::absolute(o.out);
  if (!o.provider.empty()) config.provider = o.provider;
  if (!o.endpoint.empty()) config.endpoint = o.endpoint;
  if (config.provider == "remote" && config.endpoint.empty()) {
    err << "--endpoint is required with --provider remote\n";
    return 2;
  }

  try {
    std::vector<RunManifest> manifests;
    if (command == "run-all") {
      manifests = run_end_to_end(config);
    } else {
      manifests.push_back(run_stage(config, command));
    }
    for (const auto& m : manifests) {
      out << m.stage << ": " << m.outputs.size() << " outputs, " << m.seconds << " s -> "
          << (config.out / m.stage / "manifest.json").string() << "\n";
    }
  } catch (const std::exception& e) {
    err << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace nanopro::cli
