// Writes the synthetic study corpus and a matching pipeline config.
#include <CLI11.hpp>

#include <iostream>

#include "nanopro/error.hpp"
#include "nanopro/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Write the synthetic pipeline fixture", "nanopro-fixture"};
  std::string dir;
  std::uint64_t seed = 7;
  std::size_t samples = 500;
  app.add_option("--out", dir, "Directory to write into")->required();
  app.add_option("--seed", seed, "Generator seed");
  app.add_option("--samples", samples, "Raw sample count");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  try {
    std::cout << nanopro::write_pipeline_fixture(dir, seed, samples).string() << "\n";
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }
  return 0;
}
