#pragma once

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>
#include <vector>

#include "nanopro/embedding.hpp"
#include "nanopro/records.hpp"
#include "nanopro/rng.hpp"

namespace nanopro::testing {

// A record with every one of the 29 features populated.
inline SampleRecord full_record(const std::string& sample_id, const std::string& study,
                                const std::string& group, const std::string& protein,
                                double rpa) {
  SampleRecord r;
  r.sample_id = sample_id;
  r.study_id = study;
  r.group_id = group;
  r.protein_accession = protein;
  r.rpa = rpa;
  r.feature("core") = Categorical{"Au"};
  r.feature("core_type") = Categorical{"metal-based"};
  r.feature("surface_modification") = Categorical{"PEG"};
  r.feature("modification_type") = Categorical{"Neutral"};
  r.feature("shape") = Categorical{"spherical"};
  r.feature("primary_size") = Numeric{20, "nm"};
  r.feature("dls_size") = Numeric{35.5, "nm"};
  r.feature("pdi") = Numeric{0.12, ""};
  r.feature("zeta_potential") = Numeric{-25, "mV"};
  r.feature("concentration") = Numeric{100, "mg/L"};
  r.feature("dispersing_medium") = Categorical{"water"};
  r.feature("surface_area") = Numeric{45, "m2/g"};
  r.feature("synthesis_method") = Categorical{"citrate reduction"};
  r.feature("crystal_phase") = Categorical{"fcc"};
  r.feature("protein_source") = Categorical{"human plasma"};
  r.feature("culture_medium") = Categorical{"PBS"};
  r.feature("incubation_temperature") = Numeric{37, "°C"};
  r.feature("incubation_time") = Numeric{1, "h"};
  r.feature("flow_speed") = Numeric{0, "mL/min"};
  r.feature("protein_concentration") = Numeric{55, "%"};
  r.feature("incubation_ph") = Numeric{7.4, ""};
  r.feature("incubation_mode") = Categorical{"static"};
  r.feature("np_protein_ratio") = Numeric{0.5, ""};
  r.feature("separation_method") = Categorical{"centrifugation"};
  r.feature("centrifugation_speed") = Numeric{14000, "g"};
  r.feature("centrifugation_time") = Numeric{20, "min"};
  r.feature("wash_count") = Numeric{3, ""};
  r.feature("wash_buffer") = Categorical{"PBS"};
  r.feature("proteomic_depth") = Numeric{350, "proteins"};
  return r;
}

// Random amino-acid sequence over the 20 canonical residues.
inline std::string random_sequence(Rng& rng, std::size_t length) {
  static constexpr std::string_view kResidues = "ACDEFGHIKLMNPQRSTVWY";
  std::string s;
  for (std::size_t i = 0; i < length; ++i) s.push_back(kResidues[rng.below(kResidues.size())]);
  return s;
}

// Forwards to another provider and counts the calls.
class CountingWrapper : public EmbeddingProvider {
 public:
  explicit CountingWrapper(EmbeddingProvider& inner) : inner_(inner) {}
  const std::string& provider_id() const override { return inner_.provider_id(); }
  Modality modality() const override { return inner_.modality(); }
  std::size_t dim() const override { return inner_.dim(); }
  bool deterministic() const override { return inner_.deterministic(); }
  std::vector<float> compute(std::string_view input) override {
    calls++;
    return inner_.compute(input);
  }
  std::atomic<int> calls{0};

 private:
  EmbeddingProvider& inner_;
};

// Scratch directory removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("nanopro-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace nanopro::testing
