#include "nanopro/records.hpp"

#include <charconv>
#include <sstream>
#include <tuple>

#include "nanopro/error.hpp"
#include "nanopro/tsv.hpp"

namespace nanopro {

namespace {

using G = FeatureGroup;
using K = FeatureKind;

bool is_length_unit(std::string_view unit) {
  return unit.empty() || unit == "nm" || unit == "um" || unit == "µm";
}

}  // namespace

FeatureSchema::FeatureSchema()
    : defs_{
          // nanomaterial properties
          {"core", "core", G::Nanomaterial, K::Categorical, ""},
          {"core_type", "core type", G::Nanomaterial, K::Categorical, ""},
          {"surface_modification", "surface modification", G::Nanomaterial, K::Categorical, ""},
          {"modification_type", "modification type", G::Nanomaterial, K::Categorical, ""},
          {"shape", "shape", G::Nanomaterial, K::Categorical, ""},
          {"primary_size", "primary size", G::Nanomaterial, K::FreeText, "nm"},
          {"dls_size", "hydrodynamic diameter", G::Nanomaterial, K::Numeric, "nm"},
          {"pdi", "polydispersity index", G::Nanomaterial, K::Numeric, ""},
          {"zeta_potential", "zeta potential", G::Nanomaterial, K::Numeric, "mV"},
          {"concentration", "concentration", G::Nanomaterial, K::Numeric, "mg/L"},
          {"dispersing_medium", "dispersing medium", G::Nanomaterial, K::Categorical, ""},
          {"surface_area", "specific surface area", G::Nanomaterial, K::Numeric, "m2/g"},
          {"synthesis_method", "synthesis method", G::Nanomaterial, K::Categorical, ""},
          {"crystal_phase", "crystal phase", G::Nanomaterial, K::Categorical, ""},
          // incubation conditions
          {"protein_source", "protein source", G::Incubation, K::Categorical, ""},
          {"culture_medium", "culture medium", G::Incubation, K::Categorical, ""},
          {"incubation_temperature", "incubation temperature", G::Incubation, K::Numeric, "°C"},
          {"incubation_time", "incubation time", G::Incubation, K::Numeric, "h"},
          {"flow_speed", "flow speed", G::Incubation, K::Numeric, "mL/min"},
          {"protein_concentration", "protein concentration", G::Incubation, K::Numeric, "%"},
          {"incubation_ph", "incubation pH", G::Incubation, K::Numeric, ""},
          {"incubation_mode", "incubation mode", G::Incubation, K::Categorical, ""},
          {"np_protein_ratio", "nanomaterial to protein ratio", G::Incubation, K::Numeric, ""},
          // separation protocol
          {"separation_method", "separation method", G::Separation, K::Categorical, ""},
          {"centrifugation_speed", "centrifugation speed", G::Separation, K::Numeric, "g"},
          {"centrifugation_time", "centrifugation time", G::Separation, K::Numeric, "min"},
          {"wash_count", "number of washes", G::Separation, K::Numeric, ""},
          {"wash_buffer", "wash buffer", G::Separation, K::Categorical, ""},
          // proteomic analysis setting
          {"proteomic_depth", "proteomic depth", G::Proteomic, K::Numeric, "proteins"},
      } {}

const FeatureSchema& FeatureSchema::standard() {
  static const FeatureSchema schema;
  return schema;
}

std::optional<std::size_t> FeatureSchema::index_of(std::string_view id) const {
  for (std::size_t i = 0; i < defs_.size(); ++i) {
    if (defs_[i].id == id) return i;
  }
  return std::nullopt;
}

std::size_t FeatureSchema::require(std::string_view id) const {
  if (auto i = index_of(id)) return *i;
  throw Error(Errc::UnknownColumn, "feature '" + std::string(id) + "' is not in the schema");
}

namespace fill_flag {
std::string imputed(std::string_view feature_id) {
  return "imputed:" + std::string(feature_id);
}
}  // namespace fill_flag

FeatureValue parse_feature_cell(const FeatureDef& def, std::string_view cell) {
  cell = tsv::trim(cell);
  if (cell.empty() || cell == "Unknown") return Unknown{};
  if (def.kind == FeatureKind::Categorical) return Categorical{std::string(cell)};

  // Leading number, optional unit suffix.
  std::string_view body = cell;
  if (body.front() == '+') body.remove_prefix(1);
  double value = 0.0;
  const auto res = std::from_chars(body.data(), body.data() + body.size(), value);
  const bool has_number = res.ec == std::errc();
  std::string_view unit = has_number ? tsv::trim(std::string_view(res.ptr, body.data() + body.size()))
                                     : std::string_view{};

  if (def.kind == FeatureKind::FreeText) {
    if (has_number && is_length_unit(unit)) {
      return Numeric{value, std::string(unit.empty() ? def.unit : unit)};
    }
    return FreeText{std::string(cell)};
  }
  if (!has_number) {
    throw Error(Errc::BadNumber,
                "feature '" + std::string(def.id) + "': cannot parse '" + std::string(cell) + "'");
  }
  return Numeric{value, std::string(unit.empty() ? def.unit : unit)};
}

std::string format_feature_cell(const FeatureValue& value) {
  struct Visitor {
    std::string operator()(const Unknown&) const { return {}; }
    std::string operator()(const Categorical& c) const { return c.text; }
    std::string operator()(const FreeText& t) const { return t.text; }
    std::string operator()(const Numeric& n) const {
      std::string out = tsv::format_double(n.value);
      if (!n.unit.empty()) out += " " + n.unit;
      return out;
    }
  };
  return std::visit(Visitor{}, value);
}

const FeatureValue& SampleRecord::feature(std::string_view id) const {
  return features.at(FeatureSchema::standard().require(id));
}

FeatureValue& SampleRecord::feature(std::string_view id) {
  return features.at(FeatureSchema::standard().require(id));
}

namespace {

std::set<std::string> parse_flags(std::string_view cell) {
  std::set<std::string> flags;
  for (auto& part : tsv::split(cell, ';')) {
    auto t = tsv::trim(part);
    if (!t.empty()) flags.emplace(t);
  }
  return flags;
}

bool parse_bool(std::string_view cell, std::size_t line) {
  cell = tsv::trim(cell);
  if (cell.empty() || cell == "false" || cell == "0") return false;
  if (cell == "true" || cell == "1") return true;
  throw Error(Errc::BadNumber,
              "line " + std::to_string(line) + ": is_filled_variant '" + std::string(cell) + "'");
}

}  // namespace

std::vector<SampleRecord> parse_sample_text(std::string_view text, const FeatureSchema& schema) {
  const tsv::Table table = tsv::parse(text);

  enum class Slot { SampleId, StudyId, GroupId, OriginId, Accession, Rpa, Flags, Filled, Feature };
  struct Column {
    Slot slot;
    std::size_t feature = 0;
  };
  std::vector<Column> columns;
  columns.reserve(table.header.size());
  for (const auto& name : table.header) {
    if (name == "sample_id") columns.push_back({Slot::SampleId});
    else if (name == "study_id") columns.push_back({Slot::StudyId});
    else if (name == "group_id") columns.push_back({Slot::GroupId});
    else if (name == "origin_id") columns.push_back({Slot::OriginId});
    else if (name == "protein_accession") columns.push_back({Slot::Accession});
    else if (name == "rpa") columns.push_back({Slot::Rpa});
    else if (name == "fill_flags") columns.push_back({Slot::Flags});
    else if (name == "is_filled_variant") columns.push_back({Slot::Filled});
    else if (auto idx = schema.index_of(name)) columns.push_back({Slot::Feature, *idx});
    else throw Error(Errc::UnknownColumn, "unknown column '" + name + "'");
  }

  std::vector<SampleRecord> records;
  records.reserve(table.rows.size());
  for (const auto& row : table.rows) {
    if (row.cells.size() != columns.size()) {
      throw Error(Errc::RowShape, "line " + std::to_string(row.line) + ": expected " +
                                      std::to_string(columns.size()) + " cells, found " +
                                      std::to_string(row.cells.size()));
    }
    SampleRecord rec;
    for (std::size_t c = 0; c < columns.size(); ++c) {
      const std::string& cell = row.cells[c];
      switch (columns[c].slot) {
        case Slot::SampleId: rec.sample_id = cell; break;
        case Slot::StudyId: rec.study_id = cell; break;
        case Slot::GroupId: rec.group_id = cell; break;
        case Slot::OriginId: rec.origin_id = cell; break;
        case Slot::Accession: rec.protein_accession = cell; break;
        case Slot::Rpa:
          if (!tsv::trim(cell).empty()) {
            auto v = tsv::parse_double(cell);
            if (!v) {
              throw Error(Errc::BadNumber,
                          "line " + std::to_string(row.line) + ": rpa '" + cell + "'");
            }
            rec.rpa = *v;
          }
          break;
        case Slot::Flags: rec.fill_flags = parse_flags(cell); break;
        case Slot::Filled: rec.is_filled_variant = parse_bool(cell, row.line); break;
        case Slot::Feature:
          try {
            rec.features[columns[c].feature] = parse_feature_cell(schema[columns[c].feature], cell);
          } catch (const Error& e) {
            throw Error(e.code(), "line " + std::to_string(row.line) + ": " + e.what());
          }
          break;
      }
    }
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<SampleRecord> parse_sample_table(const std::filesystem::path& path,
                                             const FeatureSchema& schema) {
  return parse_sample_text(tsv::read_text(path), schema);
}

std::string serialize_sample_table(std::span<const SampleRecord> records,
                                   const FeatureSchema& schema) {
  std::vector<std::string> header(kBookkeepingColumns.begin(), kBookkeepingColumns.end());
  for (const auto& def : schema.features()) header.emplace_back(def.id);

  std::string out = tsv::join(header) + "\n";
  std::vector<std::string> cells;
  for (const auto& rec : records) {
    cells.clear();
    cells.push_back(rec.sample_id);
    cells.push_back(rec.study_id);
    cells.push_back(rec.group_id);
    cells.push_back(rec.origin_id);
    cells.push_back(rec.protein_accession);
    cells.push_back(rec.rpa ? tsv::format_double(*rec.rpa) : std::string());
    std::string flags;
    for (const auto& f : rec.fill_flags) {
      if (!flags.empty()) flags.push_back(';');
      flags += f;
    }
    cells.push_back(flags);
    cells.push_back(rec.is_filled_variant ? "true" : "false");
    for (std::size_t i = 0; i < schema.size(); ++i) {
      cells.push_back(format_feature_cell(rec.features[i]));
    }
    out += tsv::join(cells);
    out.push_back('\n');
  }
  return out;
}

void write_sample_table(const std::filesystem::path& path, std::span<const SampleRecord> records,
                        const FeatureSchema& schema) {
  tsv::write_text(path, serialize_sample_table(records, schema));
}

bool is_accepted_residue(char c) {
  static constexpr std::string_view kAlphabet = "ACDEFGHIKLMNPQRSTVWYBJOUXZ";
  return kAlphabet.find(c) != std::string_view::npos;
}

void ProteinCatalog::add(ProteinRecord record) {
  if (record.sequence.empty()) {
    throw Error(Errc::BadSeq, "accession " + record.accession + ": empty sequence");
  }
  for (const char c : record.sequence) {
    if (!is_accepted_residue(c)) {
      throw Error(Errc::BadSeq, "accession " + record.accession + ": invalid residue '" +
                                    std::string(1, c) + "'");
    }
  }
  auto it = by_accession_.find(record.accession);
  if (it != by_accession_.end()) {
    if (it->second.sequence != record.sequence) {
      throw Error(Errc::DupAccession,
                  "accession " + record.accession + " listed with different sequences");
    }
    return;
  }
  auto key = record.accession;
  by_accession_.emplace(std::move(key), std::move(record));
}

const ProteinRecord* ProteinCatalog::lookup(std::string_view accession) const {
  auto it = by_accession_.find(accession);
  return it == by_accession_.end() ? nullptr : &it->second;
}

ProteinCatalog parse_protein_catalog(std::string_view text) {
  const auto table = tsv::parse(text);
  const auto acc = table.column("accession");
  const auto seq = table.column("sequence");
  const auto mw = table.column("molecular_weight_kda");
  if (!acc || !seq) {
    throw Error(Errc::UnknownColumn, "catalog needs accession and sequence columns");
  }
  ProteinCatalog catalog;
  for (const auto& row : table.rows) {
    if (row.cells.size() != table.header.size()) {
      throw Error(Errc::RowShape, "line " + std::to_string(row.line) + ": expected " +
                                      std::to_string(table.header.size()) + " cells");
    }
    ProteinRecord rec;
    rec.accession = std::string(tsv::trim(row.cells[*acc]));
    rec.sequence = std::string(tsv::trim(row.cells[*seq]));
    if (mw && !tsv::trim(row.cells[*mw]).empty()) {
      auto v = tsv::parse_double(row.cells[*mw]);
      if (!v) {
        throw Error(Errc::BadNumber, "line " + std::to_string(row.line) + ": molecular weight");
      }
      rec.molecular_weight_kda = *v;
    }
    catalog.add(std::move(rec));
  }
  return catalog;
}

ProteinCatalog load_protein_catalog(const std::filesystem::path& path) {
  return parse_protein_catalog(tsv::read_text(path));
}

std::string serialize_protein_catalog(const ProteinCatalog& catalog) {
  std::string out = "accession\tsequence\tmolecular_weight_kda\n";
  for (const auto& [acc, rec] : catalog.entries()) {
    out += acc + "\t" + rec.sequence + "\t" +
           (rec.molecular_weight_kda ? tsv::format_double(*rec.molecular_weight_kda) : "") + "\n";
  }
  return out;
}

ValidationReport validate_corpus(std::span<const SampleRecord> records,
                                 const ProteinCatalog& catalog) {
  ValidationReport report;
  report.total = records.size();
  std::vector<bool> bad(records.size(), false);
  std::map<std::tuple<std::string, std::string, std::string, bool>, std::size_t> seen;

  auto flag = [&](std::size_t i, std::string code, std::string message) {
    bad[i] = true;
    report.issues.push_back({records[i].sample_id, std::move(code), std::move(message)});
  };

  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (!catalog.lookup(r.protein_accession)) {
      flag(i, "MISSING_PROTEIN", "accession '" + r.protein_accession + "' not in catalog");
    }
    if (r.rpa && *r.rpa < 0.0) flag(i, "NEGATIVE_RPA", "rpa " + tsv::format_double(*r.rpa));
    if (r.rpa && *r.rpa > 1.0) flag(i, "RPA_ABOVE_ONE", "rpa " + tsv::format_double(*r.rpa));
    auto key = std::make_tuple(r.study_id, r.group_id, r.protein_accession, r.is_filled_variant);
    auto [it, inserted] = seen.emplace(std::move(key), i);
    if (!inserted) {
      flag(i, "DUPLICATE_KEY", "duplicates sample '" + records[it->second].sample_id + "'");
    }
  }
  for (bool b : bad) report.invalid += b ? 1 : 0;
  report.valid = report.total - report.invalid;
  return report;
}

}  // namespace nanopro
