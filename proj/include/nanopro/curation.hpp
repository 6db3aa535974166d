#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nanopro/records.hpp"

namespace nanopro {

// ---------------------------------------------------------------------------
// Semantic alignment

inline constexpr std::array<std::string_view, 7> kCoreTypes = {
    "metal-based", "metal oxide-based", "carbon-based", "polymer-based",
    "lipid-based", "core-shell",        "other"};
inline constexpr std::array<std::string_view, 3> kChargeClasses = {"Anionic", "Neutral",
                                                                   "Cationic"};
inline constexpr std::array<std::string_view, 6> kShapes = {
    "spherical", "rod-like", "sheet-like", "plate-like", "polyhedral", "complex"};

struct CanonicalValue {
  std::string value;
  std::string category;  // core type, charge class or shape; "other" when unaligned
  bool aligned = true;
};

// Per-feature map from raw spelling to canonical value plus derived category.
// Lookups ignore case and collapse runs of whitespace.
class AlignmentTable {
 public:
  // Small curated default covering common spellings.
  static AlignmentTable builtin();
  // TSV with columns feature_id, raw, canonical, derived_category.
  static AlignmentTable load(const std::filesystem::path& path);
  static AlignmentTable parse(std::string_view text);

  // Throws Error(Config) when the category is not valid for the feature.
  void add(std::string_view feature_id, std::string_view raw, std::string_view canonical,
           std::string_view category);
  void merge(const AlignmentTable& other);

  const CanonicalValue* find(std::string_view feature_id, std::string_view raw) const;
  std::size_t size() const { return entries_.size(); }

 private:
  std::map<std::pair<std::string, std::string>, CanonicalValue> entries_;
};

std::string alignment_key(std::string_view raw);

CanonicalValue align_categorical(std::string_view feature_id, std::string_view raw_text,
                                 const AlignmentTable& table);

// Aligns core, surface modification and shape in place, filling the derived
// core_type and modification_type columns. Unaligned values gain an
// "unaligned:<feature>" flag.
void align_record(SampleRecord& record, const AlignmentTable& table);

// ---------------------------------------------------------------------------
// Units

struct NormalizedConcentration {
  double value = 0.0;
  std::string unit;        // "mg/L" when converted, otherwise the standardized tag
  bool converted = false;  // false means the original magnitude was retained
};

// Mass/volume units convert exactly; molar units need the molecular weight
// (kDa). wt% and area-per-volume units are retained under a standard tag.
NormalizedConcentration normalize_concentration(double value, std::string_view unit,
                                                std::optional<double> mw_kda = std::nullopt);

// ---------------------------------------------------------------------------
// Imputation

// Extension point for model-based imputation of a numeric feature (for example
// hydrodynamic size or zeta potential from chemical context). Returning
// nullopt defers to the weighted-mean backoff.
class ImputationProvider {
 public:
  virtual ~ImputationProvider() = default;
  virtual std::optional<double> impute(const SampleRecord& record, const FeatureDef& feature) = 0;
};

inline const std::vector<std::string> kDefaultGroupingKeys = {
    "core", "core_type", "surface_modification", "modification_type", "shape"};

// Fills Unknown values of a numeric feature with the mean of observed values
// in the finest grouping level that has data, dropping trailing keys until a
// level matches and finally using the global mean. Each experimental unit
// (study, group) contributes its value once. Imputed records gain the flag
// imputed:<feature_id>.
std::vector<SampleRecord> impute_numeric_weighted(std::vector<SampleRecord> records,
                                                  std::string_view feature_id,
                                                  std::span<const std::string> grouping_keys =
                                                      kDefaultGroupingKeys,
                                                  ImputationProvider* provider = nullptr);

// Incubation temperature defaults to 37 °C, dispersing medium to water and
// remaining incubation/separation features to the corpus mode.
std::vector<SampleRecord> impute_protocol_defaults(std::vector<SampleRecord> records);

// ---------------------------------------------------------------------------
// Relative protein abundance

enum class QuantityKind { Rpa, SpectralCount, Intensity, PeptideNumber, MolarMassFraction, Empai, Ibaq };
enum class RpaMethod { Normalization, MwNormalization, Ibaq, Empai };

std::optional<QuantityKind> parse_quantity_kind(std::string_view text);
std::optional<RpaMethod> parse_rpa_method(std::string_view text);

struct QuantityObservation {
  std::string protein_accession;
  double quantity = 0.0;
  QuantityKind kind = QuantityKind::SpectralCount;
  std::optional<double> molecular_weight_kda;
};

// Relative abundances summing to one. Repeated accessions are summed first.
std::map<std::string, double> estimate_rpa(std::span<const QuantityObservation> observations,
                                           RpaMethod method);

// RPA equal to zero for every protein seen elsewhere in the same study but not
// in a group. Operates per (study, variant); existing records are untouched
// and additions are appended in (study, group, protein) order.
std::vector<SampleRecord> local_fill(std::vector<SampleRecord> records);

class ReferenceCurve {
 public:
  static constexpr int kMaxN = 150;

  ReferenceCurve() { cumulative_.fill(1.0); }
  explicit ReferenceCurve(std::array<double, kMaxN> cumulative) : cumulative_(cumulative) {}

  // Typical cumulative fraction carried by the top n proteins, n in [1, 150].
  double at(int n) const;
  const std::array<double, kMaxN>& values() const { return cumulative_; }

 private:
  std::array<double, kMaxN> cumulative_;
};

// Median over studies of the top-n cumulative RPA, for n = 1..150. Studies
// shorter than n contribute 1.0. Each profile must sum to 1 within 1e-6.
ReferenceCurve build_reference_curve(std::span<const std::vector<double>> complete_profiles);

// Scales one truncated profile (records of a single reported list) by C(n).
// Lists longer than 150 proteins are returned unchanged with not_scaled.
std::vector<SampleRecord> top_n_scale(std::vector<SampleRecord> profile,
                                      const ReferenceCurve& curve);

struct GlobalFillStats {
  std::size_t units = 0;
  std::vector<std::string> eligible_proteins;
  std::size_t added = 0;
};

// Adds zero-RPA records for proteins detected in more than 10% of
// (study, group) units and in at least three studies.
std::vector<SampleRecord> global_fill(std::vector<SampleRecord> corpus,
                                      GlobalFillStats* stats = nullptr);

inline constexpr double kAffinityThreshold = 1e-5;  // 0.001% as a fraction

inline int binarize(double rpa) { return rpa > kAffinityThreshold ? 1 : 0; }

// ---------------------------------------------------------------------------
// Whole-corpus curation

struct QuantityRow {
  std::string study_id;
  std::string group_id;
  QuantityObservation observation;
  RpaMethod method = RpaMethod::Normalization;
};

// TSV columns: study_id, group_id, protein_accession, quantity, quantity_kind,
// method, and optionally molecular_weight_kda.
std::vector<QuantityRow> load_quantity_table(const std::filesystem::path& path);

struct CurationOptions {
  bool local_fill = true;
  bool top_n_scaling = true;
  bool global_fill = true;
  bool impute = true;
  // Studies whose lists are truncated top-n reports. When empty, any unit that
  // sums to one with at most 150 proteins is treated as truncated.
  std::vector<std::string> truncated_studies;
};

struct CurationReport {
  std::size_t input_records = 0;
  std::size_t dropped_without_rpa = 0;
  std::size_t local_fill_added = 0;
  std::size_t global_fill_added = 0;
  std::size_t units_scaled = 0;
  std::size_t units_not_scaled = 0;
  std::size_t reference_profiles = 0;
  std::size_t unaligned_values = 0;
  std::size_t merged_records = 0;
  std::size_t filled_only_records = 0;
};

struct CurationResult {
  std::vector<SampleRecord> merged;       // raw and filled variants
  std::vector<SampleRecord> filled_only;  // filled variants only
  CurationReport report;
};

// Alignment, unit normalization, imputation, RPA estimation, local fill,
// top-n scaling and global fill, in that order. Each surviving record appears
// as a raw variant and an imputed variant sharing origin_id
// "<study>|<group>|<accession>".
CurationResult curate_corpus(std::vector<SampleRecord> records, const ProteinCatalog& catalog,
                             const AlignmentTable& alignment, const CurationOptions& options,
                             std::span<const QuantityRow> quantities = {},
                             ImputationProvider* provider = nullptr);

}  // namespace nanopro
