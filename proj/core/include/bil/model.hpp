#pragma once

#include <string>
#include <utility>
#include <vector>

#include "bil/layers.hpp"

namespace bil {

/// One element of an architecture: a parameterized layer or a fixed transform.
struct ArchBlock {
  enum class Type { Dense, Conv, Relu, MaxPool, Flatten };
  Type type = Type::Dense;
  int dense_in = 0, dense_out = 0;
  ConvDims conv;
  int pool_window = 0, pool_stride = 1, pool_padding = 0;
};

/// Parsed network description. Named configurations "lenet5" and "conv3fc3"
/// are built in; "mlp:D0-D1-...-DK" describes a ReLU MLP with K dense layers.
struct Architecture {
  std::string name;
  std::vector<int> input_shape;  // per-example shape, e.g. {1,28,28} or {784}
  int num_classes = 0;
  std::vector<ArchBlock> blocks;

  bool has_conv() const;
  static Architecture parse(const std::string& spec);
};

/// A network whose parameterized layers all share one posterior family.
/// Under CFG, conv layers are channel-factorized and dense layers fall back
/// to FFG (the block structure is only defined over conv kernels).
class BayesModel {
 public:
  Architecture arch;
  Family family = Family::FFG;
  int flow_depth = 2;
  std::vector<ArchBlock> blocks;
  std::vector<BayesLayer> layers;        // parameterized layers, in block order
  std::vector<int> block_layer_index;    // per block: index into layers, or -1

  static BayesModel build(const Architecture& arch, Family family, Rng& rng, int flow_depth = 2);

  TensorPtr forward(Tape& tape, const TensorPtr& input, const NoiseBundle& noise) const;
  TensorPtr kl(Tape& tape, const PriorSnapshot& prior, const NoiseBundle& noise) const;

  std::vector<TensorPtr> parameters() const;

  /// Fresh standard-normal noise for every layer (weights, biases, z0).
  NoiseBundle draw_noise(Rng& rng) const;
  /// All-zero noise (z0 included); useful for collapse tests.
  NoiseBundle zero_noise() const;

  PriorSnapshot snapshot() const;
  PriorSnapshot standard_normal_prior() const;

  void check_prior(const PriorSnapshot& prior) const;

  /// Input shape of every block for batch size M (table-shape assertions).
  std::vector<std::pair<std::string, std::vector<int>>> shape_trace(int M) const;
};

}  // namespace bil
