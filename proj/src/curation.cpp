#include "nanopro/curation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <tuple>
#include <unordered_map>

#include "nanopro/error.hpp"
#include "nanopro/tsv.hpp"

namespace nanopro {

// ---------------------------------------------------------------------------
// Alignment

std::string alignment_key(std::string_view raw) {
  std::string key;
  bool pending_space = false;
  for (const char c : tsv::trim(raw)) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = true;
      continue;
    }
    if (pending_space && !key.empty()) key.push_back(' ');
    pending_space = false;
    key.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return key;
}

namespace {

template <std::size_t N>
bool contains(const std::array<std::string_view, N>& set, std::string_view value) {
  return std::find(set.begin(), set.end(), value) != set.end();
}

void check_category(std::string_view feature_id, std::string_view category) {
  bool ok = true;
  if (feature_id == "core") ok = contains(kCoreTypes, category);
  else if (feature_id == "surface_modification") ok = contains(kChargeClasses, category);
  else if (feature_id == "shape") ok = contains(kShapes, category);
  if (!ok) {
    throw Error(Errc::Config, "invalid derived category '" + std::string(category) +
                                  "' for feature " + std::string(feature_id));
  }
}

}  // namespace

void AlignmentTable::add(std::string_view feature_id, std::string_view raw,
                         std::string_view canonical, std::string_view category) {
  check_category(feature_id, category);
  entries_[{std::string(feature_id), alignment_key(raw)}] =
      CanonicalValue{std::string(canonical), std::string(category), true};
}

void AlignmentTable::merge(const AlignmentTable& other) {
  for (const auto& [key, value] : other.entries_) entries_[key] = value;
}

const CanonicalValue* AlignmentTable::find(std::string_view feature_id,
                                           std::string_view raw) const {
  auto it = entries_.find({std::string(feature_id), alignment_key(raw)});
  return it == entries_.end() ? nullptr : &it->second;
}

AlignmentTable AlignmentTable::builtin() {
  AlignmentTable t;
  const std::vector<std::array<std::string_view, 3>> cores = {
      {"GO", "carbon", "carbon-based"},
      {"graphene oxide", "carbon", "carbon-based"},
      {"graphene", "carbon", "carbon-based"},
      {"carbon nanotubes", "carbon", "carbon-based"},
      {"CNT", "carbon", "carbon-based"},
      {"MWCNT", "carbon", "carbon-based"},
      {"SWCNT", "carbon", "carbon-based"},
      {"carbon", "carbon", "carbon-based"},
      {"Au", "Au", "metal-based"},
      {"gold", "Au", "metal-based"},
      {"Ag", "Ag", "metal-based"},
      {"silver", "Ag", "metal-based"},
      {"Pt", "Pt", "metal-based"},
      {"Fe3O4", "Fe3O4", "metal oxide-based"},
      {"iron oxide", "Fe3O4", "metal oxide-based"},
      {"SPION", "Fe3O4", "metal oxide-based"},
      {"SiO2", "SiO2", "metal oxide-based"},
      {"silica", "SiO2", "metal oxide-based"},
      {"TiO2", "TiO2", "metal oxide-based"},
      {"ZnO", "ZnO", "metal oxide-based"},
      {"CeO2", "CeO2", "metal oxide-based"},
      {"PS", "polystyrene", "polymer-based"},
      {"polystyrene", "polystyrene", "polymer-based"},
      {"PLGA", "PLGA", "polymer-based"},
      {"chitosan", "chitosan", "polymer-based"},
      {"liposome", "liposome", "lipid-based"},
      {"lipid nanoparticle", "LNP", "lipid-based"},
      {"LNP", "LNP", "lipid-based"},
      {"Au and Fe3O4", "Au@Fe3O4", "core-shell"},
      {"Au@Fe3O4", "Au@Fe3O4", "core-shell"},
      {"Au@SiO2", "Au@SiO2", "core-shell"},
  };
  for (const auto& [raw, canonical, cat] : cores) t.add("core", raw, canonical, cat);

  const std::vector<std::array<std::string_view, 3>> surfaces = {
      {"PEG", "PEG", "Neutral"},
      {"polyethylene glycol", "PEG", "Neutral"},
      {"none", "none", "Neutral"},
      {"bare", "none", "Neutral"},
      {"unmodified", "none", "Neutral"},
      {"citrate", "citrate", "Anionic"},
      {"COOH", "COOH", "Anionic"},
      {"carboxyl", "COOH", "Anionic"},
      {"carboxylated", "COOH", "Anionic"},
      {"NH2", "NH2", "Cationic"},
      {"amine", "NH2", "Cationic"},
      {"aminated", "NH2", "Cationic"},
      {"PEI", "PEI", "Cationic"},
      {"CTAB", "CTAB", "Cationic"},
  };
  for (const auto& [raw, canonical, cat] : surfaces) {
    t.add("surface_modification", raw, canonical, cat);
  }

  const std::vector<std::array<std::string_view, 2>> shapes = {
      {"sphere", "spherical"},    {"spherical", "spherical"},   {"nanosphere", "spherical"},
      {"rod", "rod-like"},        {"nanorod", "rod-like"},      {"rod-like", "rod-like"},
      {"nanotube", "rod-like"},   {"tube", "rod-like"},         {"sheet", "sheet-like"},
      {"nanosheet", "sheet-like"}, {"sheet-like", "sheet-like"}, {"plate", "plate-like"},
      {"nanoplate", "plate-like"}, {"plate-like", "plate-like"}, {"cube", "polyhedral"},
      {"octahedron", "polyhedral"}, {"polyhedral", "polyhedral"}, {"star", "complex"},
      {"flower", "complex"},      {"complex", "complex"},
  };
  for (const auto& [raw, canonical] : shapes) t.add("shape", raw, canonical, canonical);
  return t;
}

AlignmentTable AlignmentTable::parse(std::string_view text) {
  const auto table = tsv::parse(text);
  const auto f = table.column("feature_id");
  const auto r = table.column("raw");
  const auto c = table.column("canonical");
  const auto d = table.column("derived_category");
  if (!f || !r || !c || !d) {
    throw Error(Errc::UnknownColumn,
                "alignment table needs feature_id, raw, canonical, derived_category");
  }
  AlignmentTable out;
  for (const auto& row : table.rows) {
    if (row.cells.size() != table.header.size()) {
      throw Error(Errc::RowShape, "alignment table line " + std::to_string(row.line));
    }
    FeatureSchema::standard().require(row.cells[*f]);
    out.add(row.cells[*f], row.cells[*r], row.cells[*c], row.cells[*d]);
  }
  return out;
}

AlignmentTable AlignmentTable::load(const std::filesystem::path& path) {
  return parse(tsv::read_text(path));
}

CanonicalValue align_categorical(std::string_view feature_id, std::string_view raw_text,
                                 const AlignmentTable& table) {
  if (const auto* hit = table.find(feature_id, raw_text)) return *hit;
  return CanonicalValue{std::string(tsv::trim(raw_text)), "other", false};
}

void align_record(SampleRecord& record, const AlignmentTable& table) {
  const auto& schema = FeatureSchema::standard();
  auto align_into = [&](std::string_view feature, std::string_view derived_feature) {
    auto& value = record.feature(feature);
    const auto* cat = std::get_if<Categorical>(&value);
    if (!cat) return;
    const CanonicalValue aligned = align_categorical(feature, cat->text, table);
    value = Categorical{aligned.value};
    if (!aligned.aligned) record.fill_flags.insert("unaligned:" + std::string(feature));
    if (derived_feature.empty()) return;
    auto& derived = record.feature(derived_feature);
    if (aligned.aligned || is_unknown(derived)) derived = Categorical{aligned.category};
  };
  align_into("core", "core_type");
  align_into("surface_modification", "modification_type");
  align_into("shape", "");

  // Any other categorical feature with table entries is canonicalized too.
  for (std::size_t i = 0; i < schema.size(); ++i) {
    const auto id = schema[i].id;
    if (id == "core" || id == "surface_modification" || id == "shape") continue;
    if (auto* cat = std::get_if<Categorical>(&record.features[i])) {
      if (const auto* hit = table.find(id, cat->text)) cat->text = hit->value;
    }
  }
}

// ---------------------------------------------------------------------------
// Units

NormalizedConcentration normalize_concentration(double value, std::string_view unit,
                                                std::optional<double> mw_kda) {
  if (value < 0.0) throw Error(Errc::Negative, "concentration must be nonnegative");
  std::string u(tsv::trim(unit));
  // Normalize micro signs ("µ" U+00B5, "μ" U+03BC) to 'u'.
  for (const std::string_view micro : {std::string_view("\xC2\xB5"), std::string_view("\xCE\xBC")}) {
    for (auto pos = u.find(micro); pos != std::string::npos; pos = u.find(micro)) {
      u.replace(pos, micro.size(), "u");
    }
  }
  for (const std::string_view sq : {std::string_view("\xC2\xB2")}) {
    for (auto pos = u.find(sq); pos != std::string::npos; pos = u.find(sq)) {
      u.replace(pos, sq.size(), "2");
    }
  }

  struct Factor {
    std::string_view unit;
    double factor;
  };
  static constexpr Factor kMass[] = {
      {"mg/L", 1.0},   {"mg/l", 1.0},    {"g/L", 1e3},    {"g/l", 1e3},     {"mg/mL", 1e3},
      {"mg/ml", 1e3},  {"ug/mL", 1.0},   {"ug/ml", 1.0},  {"ng/mL", 1e-3},  {"ng/ml", 1e-3},
      {"ug/L", 1e-3},  {"ug/l", 1e-3},   {"ng/L", 1e-6},  {"g/mL", 1e6},    {"mg/dL", 10.0},
      {"w/v%", 1e4},   {"%w/v", 1e4},    {"% w/v", 1e4},
  };
  static constexpr Factor kMolar[] = {
      {"M", 1.0},       {"mol/L", 1.0},    {"mM", 1e-3},      {"mmol/L", 1e-3},
      {"uM", 1e-6},     {"umol/L", 1e-6},  {"nM", 1e-9},      {"nmol/L", 1e-9},
      {"pM", 1e-12},    {"pmol/L", 1e-12},
  };
  static constexpr std::pair<std::string_view, std::string_view> kRetained[] = {
      {"wt%", "wt%"},         {"wt %", "wt%"},         {"w/w%", "wt%"},
      {"%", "wt%"},           {"m2/mL", "m2/mL"},      {"m2/ml", "m2/mL"},
      {"cm2/mL", "cm2/mL"},   {"cm2/ml", "cm2/mL"},    {"mm2/mL", "mm2/mL"},
      {"particles/mL", "particles/mL"},
  };

  for (const auto& f : kMass) {
    if (u == f.unit) return {value * f.factor, "mg/L", true};
  }
  for (const auto& f : kMolar) {
    if (u == f.unit) {
      if (mw_kda && *mw_kda > 0.0) {
        // mol/L * g/mol = g/L; * 1000 = mg/L. kDa * 1000 = g/mol.
        return {value * f.factor * (*mw_kda * 1000.0) * 1000.0, "mg/L", true};
      }
      return {value, std::string(f.unit), false};
    }
  }
  for (const auto& [raw, tag] : kRetained) {
    if (u == raw) return {value, std::string(tag), false};
  }
  throw Error(Errc::UnknownUnit, "unknown concentration unit '" + std::string(unit) + "'");
}

// ---------------------------------------------------------------------------
// Imputation

namespace {

using UnitKey = std::pair<std::string, std::string>;

std::string group_value(const SampleRecord& r, std::size_t feature_index) {
  const auto& v = r.features[feature_index];
  if (is_unknown(v)) return "\x1fUnknown";
  return format_feature_cell(v);
}

}  // namespace

std::vector<SampleRecord> impute_numeric_weighted(std::vector<SampleRecord> records,
                                                  std::string_view feature_id,
                                                  std::span<const std::string> grouping_keys,
                                                  ImputationProvider* provider) {
  const auto& schema = FeatureSchema::standard();
  const std::size_t fi = schema.require(feature_id);
  const FeatureDef& def = schema[fi];
  if (def.kind == FeatureKind::Categorical) {
    throw Error(Errc::Config, "feature " + std::string(feature_id) + " is not numeric");
  }
  std::vector<std::size_t> key_idx;
  for (const auto& k : grouping_keys) key_idx.push_back(schema.require(k));

  auto usable = [&](const FeatureValue& v) -> std::optional<double> {
    const auto* n = std::get_if<Numeric>(&v);
    if (!n || !std::isfinite(n->value)) return std::nullopt;
    if (!def.unit.empty() && n->unit != def.unit) return std::nullopt;
    return n->value;
  };

  bool any_missing = false;
  for (const auto& r : records) any_missing = any_missing || is_unknown(r.features[fi]);
  if (!any_missing) return records;

  // Observed values, one per experimental unit.
  std::map<UnitKey, std::size_t> unit_representative;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (usable(records[i].features[fi])) {
      unit_representative.emplace(UnitKey{records[i].study_id, records[i].group_id}, i);
    }
  }
  if (unit_representative.empty() && !provider) {
    throw Error(Errc::NoData, "feature " + std::string(feature_id) + " is observed nowhere");
  }

  // Sums per grouping level: level L uses the first L keys.
  const std::size_t levels = key_idx.size();
  std::vector<std::map<std::vector<std::string>, std::pair<double, double>>> sums(levels + 1);
  for (const auto& [unit, i] : unit_representative) {
    const double v = *usable(records[i].features[fi]);
    std::vector<std::string> key;
    for (std::size_t level = 0; level <= levels; ++level) {
      auto& cell = sums[level][key];
      cell.first += v;
      cell.second += 1.0;
      if (level < levels) key.push_back(group_value(records[i], key_idx[level]));
    }
  }

  for (auto& r : records) {
    if (!is_unknown(r.features[fi])) continue;
    std::optional<double> value;
    if (provider) value = provider->impute(r, def);
    if (!value) {
      std::vector<std::string> key;
      for (const auto k : key_idx) key.push_back(group_value(r, k));
      for (std::size_t level = levels + 1; level-- > 0;) {
        key.resize(level);
        auto it = sums[level].find(key);
        if (it != sums[level].end() && it->second.second > 0.0) {
          value = it->second.first / it->second.second;
          break;
        }
      }
    }
    if (!value) {
      throw Error(Errc::NoData, "feature " + std::string(feature_id) + " is observed nowhere");
    }
    r.features[fi] = Numeric{*value, std::string(def.unit)};
    r.fill_flags.insert(fill_flag::imputed(feature_id));
  }
  return records;
}

std::vector<SampleRecord> impute_protocol_defaults(std::vector<SampleRecord> records) {
  const auto& schema = FeatureSchema::standard();
  const std::size_t temp = schema.require("incubation_temperature");
  const std::size_t medium = schema.require("dispersing_medium");

  for (std::size_t fi = 0; fi < schema.size(); ++fi) {
    const auto& def = schema[fi];
    const bool protocol = def.group == FeatureGroup::Incubation ||
                          def.group == FeatureGroup::Separation;
    if (!(protocol || fi == medium)) continue;

    bool any_missing = false;
    for (const auto& r : records) any_missing = any_missing || is_unknown(r.features[fi]);
    if (!any_missing) continue;

    std::optional<FeatureValue> fill;
    if (fi == temp) {
      fill = Numeric{37.0, std::string(def.unit)};
    } else if (fi == medium) {
      fill = Categorical{"water"};
    } else {
      // Mode over experimental units; ties go to the smallest rendered value.
      std::map<UnitKey, std::size_t> reps;
      for (std::size_t i = 0; i < records.size(); ++i) {
        if (!is_unknown(records[i].features[fi])) {
          reps.emplace(UnitKey{records[i].study_id, records[i].group_id}, i);
        }
      }
      std::map<std::string, std::pair<std::size_t, std::size_t>> counts;  // text -> (count, rep)
      for (const auto& [unit, i] : reps) {
        auto& c = counts[format_feature_cell(records[i].features[fi])];
        if (c.first == 0) c.second = i;
        ++c.first;
      }
      std::size_t best = 0;
      for (const auto& [text, c] : counts) {
        if (c.first > best) {
          best = c.first;
          fill = records[c.second].features[fi];
        }
      }
    }
    if (!fill) continue;
    for (auto& r : records) {
      if (is_unknown(r.features[fi])) {
        r.features[fi] = *fill;
        r.fill_flags.insert(fill_flag::imputed(def.id));
      }
    }
  }
  return records;
}

// ---------------------------------------------------------------------------
// RPA estimation

std::optional<QuantityKind> parse_quantity_kind(std::string_view text) {
  static const std::map<std::string, QuantityKind, std::less<>> kinds = {
      {"rpa", QuantityKind::Rpa},
      {"spectral_count", QuantityKind::SpectralCount},
      {"intensity", QuantityKind::Intensity},
      {"peptide_number", QuantityKind::PeptideNumber},
      {"molar_mass_fraction", QuantityKind::MolarMassFraction},
      {"empai", QuantityKind::Empai},
      {"ibaq", QuantityKind::Ibaq},
  };
  auto it = kinds.find(tsv::trim(text));
  if (it == kinds.end()) return std::nullopt;
  return it->second;
}

std::optional<RpaMethod> parse_rpa_method(std::string_view text) {
  text = tsv::trim(text);
  if (text == "normalization") return RpaMethod::Normalization;
  if (text == "mw_normalization") return RpaMethod::MwNormalization;
  if (text == "ibaq") return RpaMethod::Ibaq;
  if (text == "empai") return RpaMethod::Empai;
  return std::nullopt;
}

std::map<std::string, double> estimate_rpa(std::span<const QuantityObservation> observations,
                                           RpaMethod method) {
  if (observations.empty()) throw Error(Errc::ZeroTotal, "no quantity observations");
  const QuantityKind kind = observations.front().kind;

  struct Acc {
    double quantity = 0.0;
    std::optional<double> mw;
  };
  std::map<std::string, Acc> by_protein;
  for (const auto& obs : observations) {
    if (obs.kind != kind) throw Error(Errc::MixedKinds, "observations mix quantity kinds");
    if (!(obs.quantity >= 0.0) || !std::isfinite(obs.quantity)) {
      throw Error(Errc::Negative, "quantity for " + obs.protein_accession + " is negative");
    }
    auto& acc = by_protein[obs.protein_accession];
    acc.quantity += obs.quantity;
    if (!acc.mw && obs.molecular_weight_kda) acc.mw = obs.molecular_weight_kda;
  }

  std::map<std::string, double> weights;
  double total = 0.0;
  for (const auto& [acc, a] : by_protein) {
    double w = a.quantity;
    if (method == RpaMethod::MwNormalization) {
      if (!a.mw || !(*a.mw > 0.0)) {
        throw Error(Errc::MissingMw, "no molecular weight for " + acc);
      }
      w /= *a.mw;
    }
    weights[acc] = w;
    total += w;
  }
  if (!(total > 0.0)) throw Error(Errc::ZeroTotal, "total quantity is zero");
  for (auto& [acc, w] : weights) w /= total;
  return weights;
}

// ---------------------------------------------------------------------------
// Fills

namespace {

std::string origin_for(std::string_view study, std::string_view group, std::string_view protein) {
  return std::string(study) + "|" + std::string(group) + "|" + std::string(protein);
}

SampleRecord zero_record_from(const SampleRecord& tmpl, const std::string& protein,
                              std::string_view flag) {
  SampleRecord rec = tmpl;
  rec.protein_accession = protein;
  rec.rpa = 0.0;
  rec.origin_id = origin_for(tmpl.study_id, tmpl.group_id, protein);
  rec.sample_id = rec.origin_id + (tmpl.is_filled_variant ? ":filled" : ":raw");
  std::set<std::string> flags;
  for (const auto& f : tmpl.fill_flags) {
    if (f.starts_with("imputed:") || f.starts_with("unaligned:")) flags.insert(f);
  }
  flags.emplace(flag);
  rec.fill_flags = std::move(flags);
  return rec;
}

bool is_detection(const SampleRecord& r) { return r.rpa && *r.rpa > 0.0; }

}  // namespace

std::vector<SampleRecord> local_fill(std::vector<SampleRecord> records) {
  using StudyKey = std::pair<std::string, bool>;
  struct GroupInfo {
    std::size_t template_index;
    std::set<std::string> proteins;
  };
  std::map<StudyKey, std::map<std::string, GroupInfo>> studies;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    auto& groups = studies[{r.study_id, r.is_filled_variant}];
    auto [it, inserted] = groups.try_emplace(r.group_id, GroupInfo{i, {}});
    it->second.proteins.insert(r.protein_accession);
  }

  std::vector<SampleRecord> added;
  for (const auto& [study, groups] : studies) {
    std::set<std::string> all;
    for (const auto& [gid, info] : groups) all.insert(info.proteins.begin(), info.proteins.end());
    for (const auto& [gid, info] : groups) {
      for (const auto& p : all) {
        if (!info.proteins.contains(p)) {
          added.push_back(zero_record_from(records[info.template_index], p, fill_flag::kLocalFill));
        }
      }
    }
  }
  records.insert(records.end(), std::make_move_iterator(added.begin()),
                 std::make_move_iterator(added.end()));
  return records;
}

double ReferenceCurve::at(int n) const {
  if (n < 1 || n > kMaxN) throw Error(Errc::OutOfRange, "reference curve index out of range");
  return cumulative_[static_cast<std::size_t>(n - 1)];
}

ReferenceCurve build_reference_curve(std::span<const std::vector<double>> complete_profiles) {
  if (complete_profiles.empty()) throw Error(Errc::Empty, "no complete profiles for reference");
  std::vector<std::array<double, ReferenceCurve::kMaxN>> per_study;
  for (const auto& profile : complete_profiles) {
    double sum = 0.0;
    for (const double v : profile) {
      if (v < 0.0) throw Error(Errc::Negative, "negative RPA in reference profile");
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-6) {
      throw Error(Errc::OutOfRange, "reference profile does not sum to one");
    }
    std::vector<double> sorted = profile;
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    std::array<double, ReferenceCurve::kMaxN> cum{};
    double running = 0.0;
    for (int n = 1; n <= ReferenceCurve::kMaxN; ++n) {
      if (static_cast<std::size_t>(n) <= sorted.size()) {
        running += sorted[static_cast<std::size_t>(n - 1)];
        cum[static_cast<std::size_t>(n - 1)] = std::min(running, 1.0);
      } else {
        cum[static_cast<std::size_t>(n - 1)] = 1.0;
      }
    }
    per_study.push_back(cum);
  }

  std::array<double, ReferenceCurve::kMaxN> curve{};
  std::vector<double> column(per_study.size());
  for (std::size_t n = 0; n < curve.size(); ++n) {
    for (std::size_t s = 0; s < per_study.size(); ++s) column[s] = per_study[s][n];
    std::sort(column.begin(), column.end());
    const std::size_t m = column.size();
    curve[n] = (m % 2 == 1) ? column[m / 2] : 0.5 * (column[m / 2 - 1] + column[m / 2]);
  }
  return ReferenceCurve(curve);
}

std::vector<SampleRecord> top_n_scale(std::vector<SampleRecord> profile,
                                      const ReferenceCurve& curve) {
  double sum = 0.0;
  int listed = 0;
  for (const auto& r : profile) {
    if (r.rpa) sum += *r.rpa;
    if (is_detection(r)) ++listed;
  }
  if (listed == 0) return profile;
  if (std::abs(sum - 1.0) > 1e-6) {
    throw Error(Errc::OutOfRange, "top-n scaling expects a profile summing to one");
  }
  if (listed > ReferenceCurve::kMaxN) {
    for (auto& r : profile) r.fill_flags.emplace(fill_flag::kNotScaled);
    return profile;
  }
  const double factor = curve.at(listed);
  for (auto& r : profile) {
    if (!r.rpa) continue;
    *r.rpa *= factor;
    r.fill_flags.emplace(fill_flag::kTopNScaled);
  }
  return profile;
}

std::vector<SampleRecord> global_fill(std::vector<SampleRecord> corpus, GlobalFillStats* stats) {
  std::set<UnitKey> units;
  std::map<std::string, std::set<UnitKey>> detected_units;
  std::map<std::string, std::set<std::string>> detected_studies;
  // (study, group, variant) -> template index and reported proteins
  std::map<std::tuple<std::string, std::string, bool>, std::pair<std::size_t, std::set<std::string>>>
      universes;

  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& r = corpus[i];
    units.emplace(r.study_id, r.group_id);
    auto [it, inserted] = universes.try_emplace({r.study_id, r.group_id, r.is_filled_variant},
                                                std::pair{i, std::set<std::string>{}});
    it->second.second.insert(r.protein_accession);
    if (is_detection(r)) {
      detected_units[r.protein_accession].emplace(r.study_id, r.group_id);
      detected_studies[r.protein_accession].insert(r.study_id);
    }
  }

  std::vector<std::string> eligible;
  for (const auto& [protein, us] : detected_units) {
    const bool coverage = us.size() * 10 > units.size();
    const bool spread = detected_studies[protein].size() >= 3;
    if (coverage && spread) eligible.push_back(protein);
  }

  std::vector<SampleRecord> added;
  for (const auto& p : eligible) {
    for (const auto& [key, info] : universes) {
      if (!info.second.contains(p)) {
        added.push_back(zero_record_from(corpus[info.first], p, fill_flag::kGlobalFill));
      }
    }
  }
  if (stats) {
    stats->units = units.size();
    stats->eligible_proteins = eligible;
    stats->added = added.size();
  }
  corpus.insert(corpus.end(), std::make_move_iterator(added.begin()),
                std::make_move_iterator(added.end()));
  return corpus;
}

// ---------------------------------------------------------------------------
// Corpus curation

std::vector<QuantityRow> load_quantity_table(const std::filesystem::path& path) {
  const auto table = tsv::read(path);
  const auto study = table.column("study_id");
  const auto group = table.column("group_id");
  const auto acc = table.column("protein_accession");
  const auto qty = table.column("quantity");
  const auto kind = table.column("quantity_kind");
  const auto method = table.column("method");
  const auto mw = table.column("molecular_weight_kda");
  if (!study || !group || !acc || !qty || !kind || !method) {
    throw Error(Errc::UnknownColumn, "quantity table is missing required columns");
  }
  std::vector<QuantityRow> rows;
  for (const auto& row : table.rows) {
    if (row.cells.size() != table.header.size()) {
      throw Error(Errc::RowShape, "quantity table line " + std::to_string(row.line));
    }
    QuantityRow q;
    q.study_id = row.cells[*study];
    q.group_id = row.cells[*group];
    q.observation.protein_accession = row.cells[*acc];
    auto v = tsv::parse_double(row.cells[*qty]);
    if (!v) throw Error(Errc::BadNumber, "quantity table line " + std::to_string(row.line));
    q.observation.quantity = *v;
    auto k = parse_quantity_kind(row.cells[*kind]);
    if (!k) throw Error(Errc::UnknownKind, "quantity kind '" + row.cells[*kind] + "'");
    q.observation.kind = *k;
    auto m = parse_rpa_method(row.cells[*method]);
    if (!m) throw Error(Errc::UnknownKind, "rpa method '" + row.cells[*method] + "'");
    q.method = *m;
    if (mw && !tsv::trim(row.cells[*mw]).empty()) {
      q.observation.molecular_weight_kda = tsv::parse_double(row.cells[*mw]);
    }
    rows.push_back(std::move(q));
  }
  return rows;
}

namespace {

void normalize_units(SampleRecord& r) {
  if (auto* n = std::get_if<Numeric>(&r.feature("concentration"))) {
    const auto norm = normalize_concentration(n->value, n->unit);
    *n = Numeric{norm.value, norm.unit};
  }
  for (const std::string_view f : {"primary_size", "dls_size"}) {
    if (auto* n = std::get_if<Numeric>(&r.feature(f))) {
      if (n->unit == "um" || n->unit == "\xC2\xB5m") *n = Numeric{n->value * 1000.0, "nm"};
    }
  }
}

}  // namespace

CurationResult curate_corpus(std::vector<SampleRecord> records, const ProteinCatalog& catalog,
                             const AlignmentTable& alignment, const CurationOptions& options,
                             std::span<const QuantityRow> quantities,
                             ImputationProvider* provider) {
  CurationResult result;
  result.report.input_records = records.size();

  for (auto& r : records) {
    align_record(r, alignment);
    try {
      normalize_units(r);
    } catch (const Error& e) {
      throw Error(e.code(), "sample " + r.sample_id + ": " + e.what());
    }
    for (const auto& f : r.fill_flags) {
      if (f.starts_with("unaligned:")) ++result.report.unaligned_values;
    }
  }

  // RPA from raw quantities, per (study, group).
  if (!quantities.empty()) {
    std::map<UnitKey, std::vector<const QuantityRow*>> by_unit;
    for (const auto& q : quantities) by_unit[{q.study_id, q.group_id}].push_back(&q);
    std::map<UnitKey, std::size_t> templates;
    std::map<std::tuple<std::string, std::string, std::string>, std::size_t> index;
    for (std::size_t i = 0; i < records.size(); ++i) {
      templates.emplace(UnitKey{records[i].study_id, records[i].group_id}, i);
      index.emplace(std::make_tuple(records[i].study_id, records[i].group_id,
                                    records[i].protein_accession), i);
    }
    for (const auto& [unit, rows] : by_unit) {
      std::vector<QuantityObservation> obs;
      for (const auto* q : rows) {
        QuantityObservation o = q->observation;
        if (!o.molecular_weight_kda) {
          if (const auto* p = catalog.lookup(o.protein_accession)) {
            o.molecular_weight_kda = p->molecular_weight_kda;
          }
        }
        obs.push_back(std::move(o));
      }
      const auto rpa = estimate_rpa(obs, rows.front()->method);
      for (const auto& [acc, value] : rpa) {
        auto it = index.find({unit.first, unit.second, acc});
        if (it != index.end()) {
          records[it->second].rpa = value;
          continue;
        }
        auto t = templates.find(unit);
        if (t == templates.end()) continue;
        SampleRecord rec = records[t->second];
        rec.protein_accession = acc;
        rec.sample_id = origin_for(unit.first, unit.second, acc);
        rec.rpa = value;
        index.emplace(std::make_tuple(unit.first, unit.second, acc), records.size());
        records.push_back(std::move(rec));
      }
    }
  }

  std::erase_if(records, [&](const SampleRecord& r) {
    const bool drop = !r.rpa.has_value();
    if (drop) ++result.report.dropped_without_rpa;
    return drop;
  });

  for (auto& r : records) {
    r.origin_id = origin_for(r.study_id, r.group_id, r.protein_accession);
    r.is_filled_variant = false;
  }

  std::vector<SampleRecord> filled = records;
  if (options.impute && !filled.empty()) {
    for (const std::string_view f : {"primary_size", "dls_size", "pdi", "zeta_potential",
                                     "concentration"}) {
      const bool hooked = f == "dls_size" || f == "zeta_potential";
      try {
        filled = impute_numeric_weighted(filled, f, kDefaultGroupingKeys,
                                         hooked ? provider : nullptr);
      } catch (const Error& e) {
        // Observed nowhere: left Unknown rather than invented.
        if (e.code() != Errc::NoData) throw;
      }
    }
    filled = impute_protocol_defaults(std::move(filled));
  }
  for (auto& r : filled) {
    r.is_filled_variant = true;
    r.sample_id += ":filled";
  }

  std::vector<SampleRecord> corpus = std::move(records);
  corpus.insert(corpus.end(), std::make_move_iterator(filled.begin()),
                std::make_move_iterator(filled.end()));

  if (options.local_fill) {
    const std::size_t before = corpus.size();
    corpus = local_fill(std::move(corpus));
    result.report.local_fill_added = corpus.size() - before;
  }

  if (options.top_n_scaling) {
    std::map<std::tuple<std::string, std::string, bool>, std::vector<std::size_t>> units;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      units[{corpus[i].study_id, corpus[i].group_id, corpus[i].is_filled_variant}].push_back(i);
    }
    const std::set<std::string> explicit_truncated(options.truncated_studies.begin(),
                                                   options.truncated_studies.end());
    auto profile_of = [&](const std::vector<std::size_t>& idx, double* sum) {
      int listed = 0;
      *sum = 0.0;
      for (const auto i : idx) {
        if (corpus[i].rpa) *sum += *corpus[i].rpa;
        if (is_detection(corpus[i])) ++listed;
      }
      return listed;
    };
    auto truncated = [&](const std::string& study, const std::vector<std::size_t>& idx) {
      double sum = 0.0;
      const int listed = profile_of(idx, &sum);
      if (std::abs(sum - 1.0) > 1e-6 || listed == 0) return false;
      if (!explicit_truncated.empty()) return explicit_truncated.contains(study);
      return listed <= ReferenceCurve::kMaxN;
    };

    std::vector<std::vector<double>> complete;
    for (const auto& [key, idx] : units) {
      if (std::get<2>(key)) continue;  // raw variants only, each profile once
      if (truncated(std::get<0>(key), idx)) continue;
      double sum = 0.0;
      profile_of(idx, &sum);
      if (std::abs(sum - 1.0) > 1e-6) continue;
      std::vector<double> profile;
      for (const auto i : idx) {
        if (is_detection(corpus[i])) profile.push_back(*corpus[i].rpa);
      }
      complete.push_back(std::move(profile));
    }
    result.report.reference_profiles = complete.size();
    if (!complete.empty()) {
      const ReferenceCurve curve = build_reference_curve(complete);
      for (const auto& [key, idx] : units) {
        if (!truncated(std::get<0>(key), idx)) continue;
        std::vector<SampleRecord> profile;
        for (const auto i : idx) profile.push_back(corpus[i]);
        profile = top_n_scale(std::move(profile), curve);
        bool scaled = false;
        for (std::size_t k = 0; k < idx.size(); ++k) {
          scaled = scaled || profile[k].fill_flags.contains(std::string(fill_flag::kTopNScaled));
          corpus[idx[k]] = std::move(profile[k]);
        }
        if (!std::get<2>(key)) ++(scaled ? result.report.units_scaled : result.report.units_not_scaled);
      }
    }
  }

  if (options.global_fill) {
    GlobalFillStats stats;
    corpus = global_fill(std::move(corpus), &stats);
    result.report.global_fill_added = stats.added;
  }

  std::stable_sort(corpus.begin(), corpus.end(), [](const SampleRecord& a, const SampleRecord& b) {
    return std::tie(a.study_id, a.group_id, a.protein_accession, a.is_filled_variant) <
           std::tie(b.study_id, b.group_id, b.protein_accession, b.is_filled_variant);
  });
  for (const auto& r : corpus) {
    if (r.is_filled_variant) result.filled_only.push_back(r);
  }
  result.merged = std::move(corpus);
  result.report.merged_records = result.merged.size();
  result.report.filled_only_records = result.filled_only.size();
  return result;
}

}  // namespace nanopro
