#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "driftlab/tensor.hpp"

namespace driftlab {

/// Per-class feature prototypes. Rows of inactive classes are zero and must
/// not be read.
struct CentroidSet {
  Matrix centroids;           // [K x d_feat]
  std::vector<char> active;   // weight mass >= kMinClassMass

  std::size_t num_classes() const { return centroids.rows(); }
  std::size_t active_count() const;
};

struct PseudoLabelSet {
  std::vector<std::size_t> labels;
  int source_epoch = -1;
  std::string generator;  // digest of the parameters that produced the labels
};

inline constexpr double kMinClassMass = 1e-12;
inline constexpr double kMinNorm = 1e-12;

/// Soft-weighted class centroids: c_k = sum_i p_ik f_i / sum_i p_ik.
/// Sums are correctly rounded, so the result is invariant to row order.
CentroidSet compute_centroids(const Matrix& features, const Matrix& probs);

/// 1 - cos(u, v). Rejects vectors with norm below kMinNorm.
double cosine_distance(std::span<const double> u, std::span<const double> v);

/// Nearest active centroid under cosine distance, lowest index on ties.
/// With rounds > 1 the centroids are re-estimated from the hard assignment
/// and the assignment repeated.
PseudoLabelSet refine_labels(const Matrix& features, const CentroidSet& centroids,
                             int rounds = 1);

double confidence(std::span<const double> prob_row);
Vector confidences(const Matrix& probs);

}  // namespace driftlab
