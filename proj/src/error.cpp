#include "driftlab/error.hpp"

namespace driftlab {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Config: return "configuration error";
    case ErrorKind::Shape: return "shape error";
    case ErrorKind::Domain: return "domain error";
    case ErrorKind::Numeric: return "numeric error";
    case ErrorKind::EmptyInput: return "empty-input error";
    case ErrorKind::DegenerateVector: return "degenerate-vector error";
    case ErrorKind::Refinement: return "refinement error";
    case ErrorKind::InvalidDistribution: return "invalid-distribution error";
    case ErrorKind::Ingestion: return "ingestion error";
    case ErrorKind::Ledger: return "ledger error";
    case ErrorKind::UndefinedMetric: return "undefined-metric error";
    case ErrorKind::Io: return "I/O error";
  }
  return "error";
}

void raise(ErrorKind kind, const std::string& what) {
  throw Error(kind, std::string(to_string(kind)) + ": " + what);
}

}  // namespace driftlab
