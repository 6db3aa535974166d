#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace nanopro {

enum class FeatureGroup { Nanomaterial, Incubation, Separation, Proteomic };
enum class FeatureKind { Categorical, Numeric, FreeText };

struct FeatureDef {
  std::string_view id;
  std::string_view display_name;
  FeatureGroup group;
  FeatureKind kind;
  std::string_view unit;  // empty when the feature has no canonical unit
};

// The fixed, ordered 29-feature experimental schema: 14 nanomaterial,
// 9 incubation, 5 separation and 1 proteomic feature.
class FeatureSchema {
 public:
  static constexpr std::size_t kFeatureCount = 29;

  static const FeatureSchema& standard();

  std::span<const FeatureDef> features() const { return defs_; }
  std::size_t size() const { return defs_.size(); }
  const FeatureDef& operator[](std::size_t i) const { return defs_[i]; }

  std::optional<std::size_t> index_of(std::string_view id) const;
  // Throws Error(UnknownColumn) for ids outside the schema.
  std::size_t require(std::string_view id) const;

 private:
  FeatureSchema();
  std::vector<FeatureDef> defs_;
};

struct Unknown {
  bool operator==(const Unknown&) const = default;
};
struct Categorical {
  std::string text;
  bool operator==(const Categorical&) const = default;
};
struct Numeric {
  double value = 0.0;
  std::string unit;
  bool operator==(const Numeric&) const = default;
};
// Heterogeneous structured text kept verbatim, e.g. "diameter 80, length 1500".
struct FreeText {
  std::string text;
  bool operator==(const FreeText&) const = default;
};

using FeatureValue = std::variant<Unknown, Categorical, Numeric, FreeText>;

inline bool is_unknown(const FeatureValue& v) { return std::holds_alternative<Unknown>(v); }

// Parses one cell under the rules for `def`. Empty or "Unknown" cells yield
// Unknown. Throws Error(BadNumber) for an unparseable numeric cell.
FeatureValue parse_feature_cell(const FeatureDef& def, std::string_view cell);
std::string format_feature_cell(const FeatureValue& value);

namespace fill_flag {
inline constexpr std::string_view kLocalFill = "local_fill";
inline constexpr std::string_view kGlobalFill = "global_fill";
inline constexpr std::string_view kTopNScaled = "topn_scaled";
inline constexpr std::string_view kNotScaled = "not_scaled";
inline constexpr std::string_view kUnaligned = "unaligned";
std::string imputed(std::string_view feature_id);
}  // namespace fill_flag

struct SampleRecord {
  std::string sample_id;
  std::string study_id;
  std::string group_id;
  std::string origin_id;
  std::vector<FeatureValue> features;  // indexed by FeatureSchema position
  std::string protein_accession;
  std::optional<double> rpa;
  std::set<std::string> fill_flags;
  bool is_filled_variant = false;

  SampleRecord() : features(FeatureSchema::kFeatureCount, Unknown{}) {}

  const FeatureValue& feature(std::string_view id) const;
  FeatureValue& feature(std::string_view id);

  bool operator==(const SampleRecord&) const = default;
};

inline constexpr std::array<std::string_view, 8> kBookkeepingColumns = {
    "sample_id", "study_id",  "group_id",   "origin_id",
    "protein_accession", "rpa", "fill_flags", "is_filled_variant"};

std::vector<SampleRecord> parse_sample_table(const std::filesystem::path& path,
                                             const FeatureSchema& schema = FeatureSchema::standard());
std::vector<SampleRecord> parse_sample_text(std::string_view text,
                                            const FeatureSchema& schema = FeatureSchema::standard());
// Full header: every bookkeeping column then all 29 features in schema order.
std::string serialize_sample_table(std::span<const SampleRecord> records,
                                   const FeatureSchema& schema = FeatureSchema::standard());
void write_sample_table(const std::filesystem::path& path, std::span<const SampleRecord> records,
                        const FeatureSchema& schema = FeatureSchema::standard());

struct ProteinRecord {
  std::string accession;
  std::string sequence;
  std::optional<double> molecular_weight_kda;
};

// Residues accepted in sequences: 20 canonical plus B, J, O, U, X, Z.
bool is_accepted_residue(char c);

class ProteinCatalog {
 public:
  // Throws Error(DupAccession) for a conflicting duplicate and Error(BadSeq)
  // for an invalid sequence.
  void add(ProteinRecord record);
  const ProteinRecord* lookup(std::string_view accession) const;
  std::size_t size() const { return by_accession_.size(); }
  const std::map<std::string, ProteinRecord, std::less<>>& entries() const {
    return by_accession_;
  }

 private:
  std::map<std::string, ProteinRecord, std::less<>> by_accession_;
};

ProteinCatalog load_protein_catalog(const std::filesystem::path& path);
ProteinCatalog parse_protein_catalog(std::string_view text);
std::string serialize_protein_catalog(const ProteinCatalog& catalog);

struct ValidationIssue {
  std::string sample_id;
  std::string code;  // MISSING_PROTEIN, NEGATIVE_RPA, RPA_ABOVE_ONE, DUPLICATE_KEY
  std::string message;
};

struct ValidationReport {
  std::size_t total = 0;
  std::size_t valid = 0;
  std::size_t invalid = 0;
  std::vector<ValidationIssue> issues;
};

ValidationReport validate_corpus(std::span<const SampleRecord> records,
                                 const ProteinCatalog& catalog);

}  // namespace nanopro
