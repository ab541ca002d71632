#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bil/tensor.hpp"

namespace bil {

/// Labeled dataset with a fixed per-example feature shape.
struct Dataset {
  std::vector<int> feature_shape;             // e.g. {2} or {1,28,28}
  std::vector<std::vector<double>> features;  // flat, row-major per feature_shape
  std::vector<int> labels;
  int num_classes = 0;

  std::size_t size() const { return features.size(); }

  /// Batch tensor [M x feature_shape...] for the given example indices.
  TensorPtr batch(const std::vector<std::size_t>& indices) const;
  std::vector<int> batch_labels(const std::vector<std::size_t>& indices) const;
};

enum class SyntheticKind { Blobs, Moons };

/// Ordered shards D_1..D_T; pairwise disjoint, union = source dataset.
/// shard(t) is the only sanctioned access path during training and appends to
/// an access log so tests can prove stage t touched only D_t.
class ShardedDataset {
 public:
  ShardedDataset(std::vector<Dataset> shards, std::uint64_t split_seed, std::string split_spec);

  int count() const { return static_cast<int>(shards_.size()); }
  const Dataset& shard(int t) const;  // zero-based
  std::uint64_t split_seed() const { return split_seed_; }
  const std::string& split_spec() const { return split_spec_; }

  const std::vector<int>& access_log() const { return access_log_; }
  void clear_access_log() { access_log_.clear(); }

 private:
  std::vector<Dataset> shards_;
  std::uint64_t split_seed_;
  std::string split_spec_;
  mutable std::vector<int> access_log_;
};

/// IDX-format pair (big-endian dims; magic 0x803 images / 0x801 labels).
/// Pixels scale to [0, 1].
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

/// Deterministic synthetic classification data in 2-d:
///  - blobs: class centers on the unit circle, isotropic Gaussian noise;
///  - moons: two interleaving half circles (classes must be 2).
/// Class counts are balanced within one.
Dataset gen_synthetic(SyntheticKind kind, int n, int classes, double noise, std::uint64_t seed);

/// Seeded shuffle, then T near-equal contiguous chunks (sizes differ by <= 1).
ShardedDataset split_shards(const Dataset& dataset, int T, std::uint64_t seed);

/// Result of splitting a dataset in two by class label; labels in each part
/// are re-indexed to 0..K/2-1 and the mapping back to original labels kept.
struct LabelSplit {
  Dataset part_a, part_b;
  std::vector<int> classes_a, classes_b;  // new label -> original label
};

LabelSplit label_split(const Dataset& dataset, std::uint64_t seed);

/// Seeded train/validation split (for grid search and protocol runs).
std::pair<Dataset, Dataset> holdout_split(const Dataset& dataset, double val_fraction,
                                          std::uint64_t seed);

}  // namespace bil
