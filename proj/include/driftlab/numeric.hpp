#pragma once

#include <span>
#include <vector>

namespace driftlab {

/// Correctly rounded sum (Shewchuk's partials). The result does not depend
/// on the order of the inputs.
class ExactSum {
 public:
  void add(double x);
  double value() const;

 private:
  std::vector<double> partials_;
};

double exact_sum(std::span<const double> values);

}  // namespace driftlab
