#include "nanopro/error.hpp"

namespace nanopro {

std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::RowShape: return "E_ROW_SHAPE";
    case Errc::BadNumber: return "E_BAD_NUMBER";
    case Errc::UnknownColumn: return "E_UNKNOWN_COLUMN";
    case Errc::DupAccession: return "E_DUP_ACCESSION";
    case Errc::BadSeq: return "E_BAD_SEQ";
    case Errc::UnknownUnit: return "E_UNKNOWN_UNIT";
    case Errc::NoData: return "E_NO_DATA";
    case Errc::MissingMw: return "E_MISSING_MW";
    case Errc::ZeroTotal: return "E_ZERO_TOTAL";
    case Errc::MixedKinds: return "E_MIXED_KINDS";
    case Errc::Negative: return "E_NEGATIVE";
    case Errc::Empty: return "E_EMPTY";
    case Errc::NonPositive: return "E_NONPOSITIVE";
    case Errc::OutOfRange: return "E_OUT_OF_RANGE";
    case Errc::EmptyCorpus: return "E_EMPTY_CORPUS";
    case Errc::EmptyView: return "E_EMPTY_VIEW";
    case Errc::Provider: return "E_PROVIDER";
    case Errc::Dim: return "E_DIM";
    case Errc::Cache: return "E_CACHE";
    case Errc::Http: return "E_HTTP";
    case Errc::Timeout: return "E_TIMEOUT";
    case Errc::NonFinite: return "E_NONFINITE";
    case Errc::NoPositives: return "E_NO_POSITIVES";
    case Errc::Diverged: return "E_DIVERGED";
    case Errc::ZeroVariance: return "E_ZERO_VARIANCE";
    case Errc::Version: return "E_VERSION";
    case Errc::Corrupt: return "E_CORRUPT";
    case Errc::SameFeature: return "E_SAME_FEATURE";
    case Errc::ViewMismatch: return "E_VIEW_MISMATCH";
    case Errc::UnknownKind: return "E_UNKNOWN_KIND";
    case Errc::Stage: return "E_STAGE";
    case Errc::Io: return "E_IO";
    case Errc::Config: return "E_CONFIG";
  }
  return "E_UNKNOWN";
}

}  // namespace nanopro
