#pragma once

#include <stdexcept>
#include <string>

namespace driftlab {

enum class ErrorKind {
  Config,
  Shape,
  Domain,
  Numeric,
  EmptyInput,
  DegenerateVector,
  Refinement,
  InvalidDistribution,
  Ingestion,
  Ledger,
  UndefinedMetric,
  Io,
};

const char* to_string(ErrorKind kind) noexcept;

// Every failure raised by the library carries a kind so the CLI can map it
// onto its exit-code table without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void raise(ErrorKind kind, const std::string& what);

}  // namespace driftlab
