#include "nanopro/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>

#include "nanopro/error.hpp"

namespace nanopro::synthetic {

namespace {

constexpr std::string_view kCanonical = "ACDEFGHIKLMNPQRSTVWY";

constexpr std::array<std::pair<std::string_view, std::string_view>, 24> kBackground = {{
    {"core", "gold"},
    {"core_type", "metal-based"},
    {"surface_modification", "citrate"},
    {"shape", "spherical"},
    {"primary_size", "diameter 20"},
    {"dls_size", "35 nm"},
    {"pdi", "0.2"},
    {"zeta_potential", "-25 mV"},
    {"concentration", "100 mg/L"},
    {"dispersing_medium", "water"},
    {"protein_source", "human plasma"},
    {"culture_medium", "RPMI"},
    {"incubation_temperature", "37 °C"},
    {"incubation_time", "1 h"},
    {"protein_concentration", "10 %"},
    {"incubation_ph", "7.4"},
    {"incubation_mode", "static"},
    {"separation_method", "centrifugation"},
    {"centrifugation_speed", "15000 g"},
    {"centrifugation_time", "30 min"},
    {"wash_count", "3"},
    {"wash_buffer", "PBS"},
    {"proteomic_depth", "250 proteins"},
    {"synthesis_method", "citrate reduction"},
}};

void set(SampleRecord& r, std::string_view id, std::string_view cell) {
  const auto& schema = FeatureSchema::standard();
  r.feature(id) = parse_feature_cell(schema[schema.require(id)], cell);
}

void unknown(SampleRecord& r, std::string_view id) { r.feature(id) = Unknown{}; }

// +1 / -1 / 0 (Unknown) coded categorical.
void set_coded(SampleRecord& r, std::string_view id, int code, std::string_view plus, std::string_view minus) {
  if (code == 0) {
    unknown(r, id);
  } else {
    set(r, id, code > 0 ? plus : minus);
  }
}

int sign(Rng& rng) { return rng.below(2) ? 1 : -1; }
int sign_or_unknown(Rng& rng) { return static_cast<int>(rng.below(3)) - 1; }

struct Pool {
  std::vector<std::string> accessions;
  std::vector<bool> has_motif;
};

Pool make_pool(Rng& rng, ProteinCatalog& catalog, std::string_view prefix, std::size_t n) {
  Pool pool;
  for (std::size_t i = 0; i < n; ++i) {
    const bool motif = i % 2 == 0;
    std::string acc = std::string(prefix) + std::to_string(i);
    catalog.add({acc, motif ? motif_sequence(rng, 60, 3) : random_sequence(rng, 60), std::nullopt});
    pool.accessions.push_back(acc);
    pool.has_motif.push_back(motif);
  }
  return pool;
}

constexpr std::array<std::string_view, 3> kCores = {"gold", "silver", "silica"};

}  // namespace

std::string random_sequence(Rng& rng, std::size_t length) {
  std::string s(length, 'A');
  for (auto& c : s) c = kCanonical[rng.below(kCanonical.size())];
  return s;
}

std::string motif_sequence(Rng& rng, std::size_t length, int copies) {
  auto s = random_sequence(rng, length);
  const auto slot = length / static_cast<std::size_t>(copies);
  for (int k = 0; k < copies; ++k) {
    const auto at = k * slot + rng.below(slot - kMotif.size() + 1);
    s.replace(at, kMotif.size(), kMotif);
  }
  return s;
}

SampleRecord background_record(std::string sample_id, std::string accession) {
  SampleRecord r;
  r.sample_id = sample_id;
  r.origin_id = std::move(sample_id);
  r.study_id = "fixture";
  r.group_id = "g";
  r.protein_accession = std::move(accession);
  for (const auto& [id, cell] : kBackground) set(r, id, cell);
  return r;
}

ModelConfig fixture_config(Task task, ModalitySpec modality) {
  ModelConfig c;
  c.task = task;
  c.modality = modality;
  c.learning_rate = 3e-5;
  c.batch_size = 16;
  c.max_epochs = 15;
  c.patience = 5;
  return c;
}

Fixture make_fixture(FixtureKind kind, std::uint64_t seed, FixtureSizes sizes) {
  Fixture fx;
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(kind)));
  const bool regression =
      kind == FixtureKind::Additive || kind == FixtureKind::Duplicate || kind == FixtureKind::Conjunction;
  const Task task = regression ? Task::Regression : Task::Classification;

  const Pool shared = make_pool(rng, fx.catalog, "S", 24);
  std::array<Pool, 3> own;
  if (kind == FixtureKind::SequenceOnly) {
    own[0] = make_pool(rng, fx.catalog, "TR", 32);
    own[1] = make_pool(rng, fx.catalog, "VA", 16);
    own[2] = make_pool(rng, fx.catalog, "TE", 16);
  }

  auto build = [&](int split, std::size_t n) {
    LabeledSet out;
    out.task = task;
    const bool is_test = split == 2;
    const Pool& pool = kind == FixtureKind::SequenceOnly ? own[split] : shared;
    for (std::size_t i = 0; i < n; ++i) {
      // Regression fixtures are purely tabular: one protein, fixed core.
      const auto p = regression ? 0 : rng.below(pool.accessions.size());
      auto r = background_record("fx" + std::to_string(split) + "-" + std::to_string(i), pool.accessions[p]);
      if (!regression) set(r, "core", kCores[rng.below(kCores.size())]);
      double y = 0;
      switch (kind) {
        case FixtureKind::CausalNull:
        case FixtureKind::TabularOnly: {
          const int s = sign(rng);
          set_coded(r, "surface_modification", s, "PEG", "citrate");
          y = s > 0;
          break;
        }
        case FixtureKind::SequenceOnly:
          set_coded(r, "surface_modification", sign(rng), "PEG", "citrate");
          y = pool.has_motif[p];
          break;
        case FixtureKind::Xor: {
          const int s = sign(rng);
          set_coded(r, "surface_modification", s, "PEG", "citrate");
          y = (s > 0) != pool.has_motif[p];
          break;
        }
        case FixtureKind::Additive:
        case FixtureKind::Conjunction: {
          // Balanced factorial cells on the test split, Unknowns elsewhere.
          const int a = is_test ? ((i % 4) < 2 ? 1 : -1) : sign_or_unknown(rng);
          const int b = is_test ? ((i % 2) ? 1 : -1) : sign_or_unknown(rng);
          set_coded(r, "shape", a, "spherical", "rod-like");
          set_coded(r, "protein_source", b, "human plasma", "fetal bovine serum");
          if (kind == FixtureKind::Additive) {
            y = a + b;
          } else {
            // Unknown rows carry the expected value, like Additive.
            auto p = [](int code) { return code == 0 ? 0.5 : code > 0 ? 1.0 : 0.0; };
            y = p(a) * p(b);
          }
          y += 0.05 * rng.normal();
          break;
        }
        case FixtureKind::Duplicate: {
          int s = sign(rng);
          int mask = is_test ? 0 : static_cast<int>(rng.below(10));  // 0-4 none, 5-7 one, 8-9 both
          set_coded(r, "dispersing_medium", s, "water", "PBS");
          set_coded(r, "culture_medium", s, "RPMI", "DMEM");
          if (mask >= 8) {
            unknown(r, "dispersing_medium");
            unknown(r, "culture_medium");
            s = 0;
          } else if (mask >= 5) {
            unknown(r, mask % 2 ? "dispersing_medium" : "culture_medium");
          }
          y = s + 0.05 * rng.normal();
          break;
        }
      }
      r.rpa = task == Task::Classification ? (y > 0.5 ? 0.01 : 0.0) : 0.001;
      out.records.push_back(std::move(r));
      out.labels.push_back(y);
    }
    return out;
  };
  fx.train = build(0, sizes.train);
  fx.val = build(1, sizes.val);
  fx.test = build(2, sizes.test);
  return fx;
}

Corpus make_corpus(std::uint64_t seed, std::size_t samples) {
  constexpr std::size_t kStudies = 10, kGroups = 5, kPool = 40;
  const std::size_t per_group = std::max<std::size_t>(samples / (kStudies * kGroups), 1);
  const std::size_t study_pool = per_group + per_group / 2;
  if (study_pool > kPool) throw Error(Errc::Config, "corpus too large for the protein pool");

  Corpus c;
  Rng rng(mix_seed(seed, 0xC0));
  std::vector<std::string> accessions;
  std::vector<bool> motif;
  for (std::size_t i = 0; i < kPool; ++i) {
    const bool m = i % 2 == 0;
    char acc[16];
    std::snprintf(acc, sizeof acc, "P%05zu", i + 1);
    const auto len = 80 + rng.below(120);
    c.catalog.add({acc, m ? motif_sequence(rng, len, 3) : random_sequence(rng, len), 10.0 + rng.below(90)});
    accessions.emplace_back(acc);
    motif.push_back(m);
  }

  constexpr std::array<std::string_view, 4> cores = {"gold", "silver", "silica", "iron oxide"};
  constexpr std::array<std::string_view, 3> surfaces = {"PEG", "citrate", "none"};
  constexpr std::array<std::string_view, 2> shapes = {"spherical", "rod-like"};
  constexpr std::array<std::string_view, 2> sources = {"human plasma", "fetal bovine serum"};

  for (std::size_t s = 0; s < kStudies; ++s) {
    std::vector<std::size_t> pool(kPool);
    for (std::size_t i = 0; i < kPool; ++i) pool[i] = i;
    rng.shuffle(std::span(pool));
    pool.resize(study_pool);
    const auto study = "S" + std::to_string(s + 1);
    const auto source = sources[rng.below(sources.size())];
    for (std::size_t g = 0; g < kGroups; ++g) {
      const auto surface = surfaces[rng.below(surfaces.size())];
      const bool peg = surface == "PEG";
      SampleRecord base = background_record("", "");
      base.study_id = study;
      base.group_id = "G" + std::to_string(g + 1);
      set(base, "core", cores[rng.below(cores.size())]);
      set(base, "surface_modification", surface);
      set(base, "shape", shapes[rng.below(shapes.size())]);
      set(base, "protein_source", source);
      set(base, "primary_size", "diameter " + std::to_string(10 + 10 * rng.below(8)));
      set(base, "zeta_potential", std::to_string(-40 + 5 * static_cast<int>(rng.below(12))) + " mV");
      if (rng.below(10) < 3) unknown(base, "dls_size");
      if (rng.below(10) < 2) unknown(base, "incubation_temperature");

      // Detection and abundance follow motif x surface: PEG reverses which
      // proteins the particle prefers.
      auto affinity = [&](std::size_t p) { return motif[p] ? (peg ? 0.2 : 2.0) : (peg ? 0.8 : 0.0); };
      std::vector<std::pair<double, std::size_t>> ranked;
      for (const auto p : pool) ranked.emplace_back(affinity(p) + 0.5 * rng.normal(), p);
      std::sort(ranked.begin(), ranked.end(), std::greater<>());
      std::vector<std::size_t> members;
      for (std::size_t k = 0; k < per_group; ++k) members.push_back(ranked[k].second);
      std::vector<double> w;
      for (const auto p : members) w.push_back(std::exp(affinity(p) + 0.5 * rng.normal()));
      double total = 0;
      for (const double x : w) total += x;
      for (std::size_t k = 0; k < members.size(); ++k) {
        SampleRecord r = base;
        r.protein_accession = accessions[members[k]];
        r.sample_id = study + "-" + r.group_id + "-" + r.protein_accession;
        r.origin_id = r.sample_id;
        r.rpa = w[k] / total;
        c.records.push_back(std::move(r));
      }
    }
  }
  return c;
}

}  // namespace nanopro::synthetic
