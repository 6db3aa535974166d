#pragma once

#include <cstdint>
#include <string>

#include "nanopro/encode.hpp"
#include "nanopro/rng.hpp"

namespace nanopro::synthetic {

// Uniform over the 20 canonical residues.
std::string random_sequence(Rng& rng, std::size_t length);

// Motif planted in "positive" sequences of the sequence-driven fixtures.
inline constexpr std::string_view kMotif = "WCW";
std::string motif_sequence(Rng& rng, std::size_t length, int copies);

// A record with fixed background values for all 29 features and protein
// `accession`.
SampleRecord background_record(std::string sample_id, std::string accession);

// Constructed tasks with a known answer.
//   CausalNull   classification; label = surface_modification (PEG vs citrate),
//                incubation_temperature constant, core random noise
//   Additive     regression; y = s(shape) + s(protein_source), Unknown = 0,
//                test set is a balanced factorial design
//   Duplicate    regression; y = s carried by dispersing_medium and
//                culture_medium alike; at most one copy is masked in training
//                except for label-0 rows with both Unknown
//   Conjunction  regression; y = [shape spherical] AND [protein_source plasma],
//                Unknown rows labeled with the expected value
//   SequenceOnly classification; label = motif present, disjoint proteins
//                per split
//   TabularOnly  classification; label = surface_modification, proteins random
//   Xor          classification; label = motif XOR surface_modification
enum class FixtureKind { CausalNull, Additive, Duplicate, Conjunction, SequenceOnly, TabularOnly, Xor };

struct FixtureSizes {
  std::size_t train = 192;
  std::size_t val = 96;
  std::size_t test = 128;
};

struct Fixture {
  ProteinCatalog catalog;
  LabeledSet train, val, test;
};

// Training settings the fixtures are calibrated for: lr 3e-5, batch 16,
// at most 15 epochs, patience 5.
ModelConfig fixture_config(Task task, ModalitySpec modality = ModalitySpec::Fused);

Fixture make_fixture(FixtureKind kind, std::uint64_t seed, FixtureSizes sizes = {});

// Raw study corpus for the end-to-end pipeline: 10 studies of 5 groups, each
// group reporting `samples / 50` proteins from its study's pool with RPA
// summing to one. Which proteins are detected, and how much, depends on the
// surface chemistry crossed with a sequence motif.
struct Corpus {
  std::vector<SampleRecord> records;
  ProteinCatalog catalog;
};

Corpus make_corpus(std::uint64_t seed, std::size_t samples = 500);

}  // namespace nanopro::synthetic
