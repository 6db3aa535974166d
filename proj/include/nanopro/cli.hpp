#pragma once

#include <ostream>

namespace nanopro::cli {

// nanopro <curate|split|embed|train|eval|ablate|finetune|predict|run-all>
//   --config PATH [--set KEY=VALUE]... [--out DIR] [--seed N]
//   [--provider synthetic|precomputed|remote] [--endpoint URL]
// Returns 0 on success, 1 on a runtime failure, 2 on a usage error.
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace nanopro::cli
