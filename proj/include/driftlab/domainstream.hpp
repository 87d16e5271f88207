#pragma once

// Synthetic continual-adaptation benchmark: a Gaussian-mixture base task, a
// set of shifted target domains and the half-split sequence over them.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "driftlab/tensor.hpp"

namespace driftlab {

enum class Split { Train, Test };

struct Dataset {
  Matrix X;
  std::vector<std::size_t> y;  // hidden from the adapter
  Split split = Split::Train;
  std::string domain_id;
  std::size_t num_classes = 0;

  std::size_t size() const { return y.size(); }
  bool operator==(const Dataset&) const = default;
};

struct PlaneRotation {
  std::size_t axis_a = 0;
  std::size_t axis_b = 1;
  double angle = 0.0;  // radians
  bool operator==(const PlaneRotation&) const = default;
};

/// X' = R (X .* scale) + bias + N(0, noise_sigma^2). R is the product of
/// the plane rotations applied in list order.
struct DomainSpec {
  std::string id;
  std::vector<PlaneRotation> rotations;
  Vector scale;  // empty means all ones
  Vector bias;   // empty means zero
  double noise_sigma = 0.0;
  std::string difficulty = "moderate";

  void validate(std::size_t dim) const;
  bool operator==(const DomainSpec&) const = default;
};

struct TaskConfig {
  std::size_t num_classes = 5;
  std::size_t input_dim = 16;
  std::size_t n_per_class = 125;
  double class_sep = 4.0;
  double noise_sigma = 1.0;
  double test_fraction = 0.2;

  bool operator==(const TaskConfig&) const = default;
};

/// Class means on a sphere of radius class_sep, pairwise at least class_sep apart.
struct TaskGeometry {
  Matrix means;  // [K x d]
  double radius = 0.0;
  double noise_sigma = 1.0;
};

struct BaseTask {
  TaskGeometry geometry;
  Dataset train;
  Dataset test;
  std::size_t size() const { return train.size() + test.size(); }
};

TaskGeometry make_geometry(std::uint64_t seed, const TaskConfig& cfg);

/// Draws n_per_class samples per class around the geometry's means and
/// splits them by seeded shuffle.
BaseTask sample_task(const TaskGeometry& geometry, const TaskConfig& cfg, std::uint64_t seed,
                     const std::string& domain_id);

BaseTask make_base_task(std::uint64_t seed, const TaskConfig& cfg);

Dataset apply_domain_shift(const Dataset& ds, const DomainSpec& spec, std::uint64_t seed);

/// Exact algebraic inverse of the noiseless part of apply_domain_shift.
Dataset invert_domain_shift(const Dataset& ds, const DomainSpec& spec);

struct DomainData {
  DomainSpec spec;
  Dataset train_pool;
  Dataset test;
};

struct SequenceStep {
  std::size_t domain_index = 0;
  std::string domain_id;
  int half = 1;
  std::vector<std::size_t> pool_indices;  // rows of the domain's train pool
  Dataset train;
};

struct SequenceSpec {
  TaskGeometry geometry;
  Dataset source_train;
  Dataset source_test;
  std::vector<DomainData> domains;
  std::vector<SequenceStep> steps;
};

struct SequenceConfig {
  TaskConfig task;
  DomainSpec source;
  std::vector<DomainSpec> domains;
  std::vector<std::string> order;  // empty means configuration order
  int halves = 2;
};

/// Materialises source and target domains and the step list: every domain in
/// order with half 1, then every domain again with half 2.
SequenceSpec build_sequence(const SequenceConfig& cfg, std::uint64_t seed);

/// Splits `pool_size` indices into `halves` disjoint parts with sizes
/// differing by at most one.
std::vector<std::vector<std::size_t>> split_halves(std::size_t pool_size, int halves,
                                                   std::uint64_t seed);

// External data. CSV header: label,f0,...,f{d-1}.
void write_domain_csv(const Dataset& ds, const std::filesystem::path& path);
Dataset read_domain_csv(const std::filesystem::path& path, std::size_t num_classes,
                        std::size_t input_dim, const std::string& domain_id, Split split);

struct ExternalData {
  std::size_t num_classes = 0;
  std::size_t input_dim = 0;
  std::vector<DomainData> domains;
};

/// Manifest: {"num_classes": K, "input_dim": d, "domains": [{"domain_id",
/// "train_csv", "test_csv"}]}. Relative paths resolve against the manifest.
ExternalData load_external(const std::filesystem::path& manifest_path);

nlohmann::json to_json(const DomainSpec& spec);
DomainSpec domain_spec_from_json(const nlohmann::json& j);

}  // namespace driftlab
