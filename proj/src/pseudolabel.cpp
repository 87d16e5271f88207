#include "driftlab/pseudolabel.hpp"

#include <algorithm>
#include <cmath>

#include "driftlab/error.hpp"
#include "driftlab/numeric.hpp"

namespace driftlab {

namespace {

double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

std::vector<std::size_t> assign(const Matrix& features, const CentroidSet& set) {
  std::vector<std::size_t> labels(features.rows(), 0);
  for (std::size_t i = 0; i < features.rows(); ++i) {
    bool found = false;
    double best = 0.0;
    for (std::size_t k = 0; k < set.num_classes(); ++k) {
      if (!set.active[k]) continue;
      const double d = cosine_distance(features.row(i), set.centroids.row(k));
      if (!found || d < best) {
        best = d;
        labels[i] = k;
        found = true;
      }
    }
  }
  return labels;
}

}  // namespace

std::size_t CentroidSet::active_count() const {
  std::size_t n = 0;
  for (char a : active) n += a ? 1 : 0;
  return n;
}

CentroidSet compute_centroids(const Matrix& features, const Matrix& probs) {
  if (features.rows() == 0) raise(ErrorKind::EmptyInput, "cannot compute centroids of zero samples");
  if (probs.rows() != features.rows()) raise(ErrorKind::Shape, "features and probs differ in sample count");
  const std::size_t n = features.rows(), d = features.cols(), k_count = probs.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (double p : probs.row(i)) s += p;
    if (std::abs(s - 1.0) > 1e-9) {
      raise(ErrorKind::InvalidDistribution, "probability row " + std::to_string(i) + " does not sum to 1");
    }
  }

  CentroidSet set{Matrix(k_count, d), std::vector<char>(k_count, 0)};
  for (std::size_t k = 0; k < k_count; ++k) {
    ExactSum mass;
    std::vector<ExactSum> weighted(d);
    for (std::size_t i = 0; i < n; ++i) {
      const double p = probs(i, k);
      mass.add(p);
      for (std::size_t j = 0; j < d; ++j) weighted[j].add(p * features(i, j));
    }
    const double m = mass.value();
    if (m < kMinClassMass) continue;
    set.active[k] = 1;
    for (std::size_t j = 0; j < d; ++j) set.centroids(k, j) = weighted[j].value() / m;
  }
  return set;
}

double cosine_distance(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) raise(ErrorKind::Shape, "cosine distance of vectors with different lengths");
  const double nu = norm2(u), nv = norm2(v);
  if (nu < kMinNorm || nv < kMinNorm) raise(ErrorKind::DegenerateVector, "vector norm below 1e-12");
  double dot = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) dot += u[j] * v[j];
  const double d = 1.0 - dot / (nu * nv);
  return std::clamp(d, 0.0, 2.0);
}

PseudoLabelSet refine_labels(const Matrix& features, const CentroidSet& centroids, int rounds) {
  if (rounds < 1) raise(ErrorKind::Config, "refinement rounds must be positive");
  if (centroids.active.size() != centroids.num_classes()) raise(ErrorKind::Shape, "centroid flags mismatch");
  if (centroids.active_count() == 0) raise(ErrorKind::Refinement, "no active centroids");
  if (centroids.centroids.cols() != features.cols()) raise(ErrorKind::Shape, "centroid width mismatch");

  PseudoLabelSet out;
  out.labels = assign(features, centroids);
  for (int r = 1; r < rounds; ++r) {
    Matrix onehot(features.rows(), centroids.num_classes());
    for (std::size_t i = 0; i < features.rows(); ++i) onehot(i, out.labels[i]) = 1.0;
    out.labels = assign(features, compute_centroids(features, onehot));
  }
  return out;
}

double confidence(std::span<const double> prob_row) {
  if (prob_row.empty()) raise(ErrorKind::InvalidDistribution, "empty probability row");
  double s = 0.0, top = prob_row[0];
  for (double p : prob_row) {
    if (!(p >= 0.0)) raise(ErrorKind::InvalidDistribution, "negative or NaN probability");
    s += p;
    top = std::max(top, p);
  }
  if (std::abs(s - 1.0) > 1e-6) raise(ErrorKind::InvalidDistribution, "probability row does not sum to 1");
  return top;
}

Vector confidences(const Matrix& probs) {
  Vector out(probs.rows());
  for (std::size_t i = 0; i < probs.rows(); ++i) out[i] = confidence(probs.row(i));
  return out;
}

}  // namespace driftlab
