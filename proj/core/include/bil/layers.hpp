#pragma once

#include <optional>
#include <string>
#include <vector>

#include "bil/distributions.hpp"
#include "bil/flow.hpp"
#include "bil/ops.hpp"
#include "bil/rng.hpp"

namespace bil {

/// Posterior family of a model. FT is the deterministic fine-tuning baseline.
enum class Family { FT, FFG, CFG, MNF };

std::string family_name(Family f);
Family family_from_string(const std::string& s);

struct ConvDims {
  int filters = 0;   // N
  int channels = 0;  // C
  int kh = 0, kw = 0;
  int stride = 1, padding = 0;
};

/// One parameterized layer (dense or conv) with family-specific posterior
/// parameters over its weights. Biases are always fully factorized Gaussian
/// (or point values under FT).
class BayesLayer {
 public:
  bool is_dense = true;
  int in_dim = 0, out_dim = 0;  // dense
  ConvDims conv;                // conv
  Family family = Family::FFG;

  // Weight posterior (fields used depend on family):
  TensorPtr w_mu;    // FFG/CFG/MNF mean, full weight shape
  TensorPtr w_rho;   // FFG/MNF: sigma = softplus(w_rho)
  TensorPtr l_raw;   // CFG: [blocks x packed] per-(filter,channel) triangles
  FlowStack flow;    // MNF auxiliary z
  TensorPtr b_mu, b_rho;
  TensorPtr point_w, point_b;  // FT

  static BayesLayer dense(int in, int out, Family f, Rng& rng, int flow_depth = 2);
  static BayesLayer conv2d(ConvDims dims, Family f, Rng& rng, int flow_depth = 2);

  std::vector<int> weight_shape() const;
  std::int64_t weight_count() const;
  int bias_count() const { return is_dense ? out_dim : conv.filters; }
  int block_dim() const { return conv.kh * conv.kw; }        // CFG block size
  int block_count() const { return conv.filters * conv.channels; }
  int z_dim() const;  // MNF: dense -> in_dim, conv -> filters*channels

  std::vector<TensorPtr> parameters() const;
};

/// Frozen noise for one layer's forward/KL evaluation. Ops never draw
/// randomness internally; callers fill this (or leave parts unused).
struct NoiseSlot {
  TensorPtr weight_eps;  // FFG/MNF: weight shape; CFG: [blocks x block_dim]
  TensorPtr bias_eps;    // [bias_count]
  TensorPtr z0;          // MNF: [z_dim]
  TensorPtr preact_eps;  // dense FFG local reparameterization: [M x out]
};

struct NoiseBundle {
  std::vector<NoiseSlot> slots;  // parallel to the model's layer list
};

/// Frozen per-layer prior: either a previous-stage posterior snapshot or a
/// fixed analytic prior. Values are plain (non-trainable) copies.
struct LayerPrior {
  Family family = Family::FFG;
  bool is_dense = true;
  std::vector<int> weight_shape;
  std::vector<double> w_mu, w_sigma;  // FFG/MNF
  std::vector<double> chol_l;         // CFG: blocks x (d*d) dense factors, row-major
  std::vector<double> b_mu, b_sigma;
  FlowStack flow;  // MNF (frozen); empty stack = standard-normal z
  std::vector<double> point_w, point_b;  // FT
};

struct PriorSnapshot {
  bool fixed_analytic = false;
  std::vector<LayerPrior> layers;
};

/// Reparameterized forward pass. One weight sample per call (per minibatch).
/// A dense FFG layer with slot.preact_eps set uses the variance-propagating
/// local reparameterization instead of sampling weights.
TensorPtr layer_forward(Tape& tape, const BayesLayer& layer, const TensorPtr& input,
                        const NoiseSlot& noise);

/// KL(q || prior) for this layer. Analytic for FFG/CFG, zero for FT, and the
/// single-sample joint estimate for MNF (using noise.z0).
TensorPtr layer_kl(Tape& tape, const BayesLayer& layer, const LayerPrior& prior,
                   const NoiseSlot& noise);

/// Unbiased single-sample estimate of KL(q(w,z) || q_old(w,z)) for an MNF
/// layer's weights: draws z_hat = NF(z0) and combines the analytic
/// cross-entropy/entropy terms with log q(z_hat) - log q_old(z_hat). Exactly
/// zero (per sample) when the prior equals the current parameters. Bias KL is
/// not included here.
TensorPtr mnf_joint_kl_estimate(Tape& tape, const BayesLayer& layer, const LayerPrior& prior,
                                const TensorPtr& z0);

/// Snapshot of a single layer's posterior (deep value copy).
LayerPrior snapshot_layer(const BayesLayer& layer);

/// N(0,1) prior congruent with the layer (identity flow for MNF).
LayerPrior standard_normal_prior(const BayesLayer& layer);

/// Structural congruence check; throws StructureError on mismatch.
void check_congruent(const BayesLayer& layer, const LayerPrior& prior);

}  // namespace bil
