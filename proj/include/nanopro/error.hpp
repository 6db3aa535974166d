#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace nanopro {

enum class Errc {
  RowShape,
  BadNumber,
  UnknownColumn,
  DupAccession,
  BadSeq,
  UnknownUnit,
  NoData,
  MissingMw,
  ZeroTotal,
  MixedKinds,
  Negative,
  Empty,
  NonPositive,
  OutOfRange,
  EmptyCorpus,
  EmptyView,
  Provider,
  Dim,
  Cache,
  Http,
  Timeout,
  NonFinite,
  NoPositives,
  Diverged,
  ZeroVariance,
  Version,
  Corrupt,
  SameFeature,
  ViewMismatch,
  UnknownKind,
  Stage,
  Io,
  Config,
};

// Stable wire name, e.g. "E_ROW_SHAPE".
std::string_view errc_name(Errc code);

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(std::string(errc_name(code)) + ": " + message),
        code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace nanopro
