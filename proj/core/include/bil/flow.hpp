#pragma once

#include <vector>

#include "bil/ops.hpp"
#include "bil/rng.hpp"
#include "bil/tape.hpp"
#include "bil/tensor.hpp"

namespace bil {

/// One planar layer z' = z + u_hat * tanh(w . z + b), with u reparameterized
/// so that u_hat . w > -1 (invertibility).
struct PlanarLayer {
  TensorPtr u;  // [d]
  TensorPtr w;  // [d]
  TensorPtr b;  // [1]
};

/// Composition of planar layers over a d-dimensional auxiliary variable.
/// An empty stack is the identity map (standard-normal pushforward).
struct FlowStack {
  int dim = 0;
  std::vector<PlanarLayer> layers;

  bool empty() const { return layers.empty(); }

  /// Trainable stack; parameters drawn N(0, scale^2), biases zero.
  static FlowStack init(int dim, int depth, Rng& rng, double scale = 0.1);

  /// Deep copy with requires_grad cleared (frozen snapshot values).
  FlowStack frozen_copy() const;
};

struct FlowForward {
  TensorPtr z;            // [d]
  TensorPtr log_det_sum;  // [1]
};

struct FlowDensity {
  TensorPtr z;      // [d]
  TensorPtr log_q;  // [1]
};

/// u_hat = u + (m(u.w) - u.w) w / ||w||^2, m(a) = -1 + softplus(a).
/// Guarantees u_hat . w > -1. Zero w returns u unchanged.
TensorPtr nf_enforce_invertible(Tape& tape, const TensorPtr& u, const TensorPtr& w);

/// Applies the stack to z0 and accumulates log|det J| layer by layer.
FlowForward nf_forward(Tape& tape, const FlowStack& flow, const TensorPtr& z0);

/// z = NF(z0) with log q(z) = log q0(z0) - sum log|det J|, q0 standard normal.
FlowDensity nf_log_density(Tape& tape, const FlowStack& flow, const TensorPtr& z0);

/// Numerically inverts the stack at z. Each planar layer reduces to one
/// strictly monotone scalar root (bisection-seeded Newton), so the cost is
/// O(layers * dim) for any dimension. The inverse exists and is unique by
/// the invertibility constraint; DomainError if a solve fails to converge.
std::vector<double> flow_invert(const FlowStack& flow, const std::vector<double>& z,
                                double tol = 1e-10, int max_iter = 200);

/// log q(z) for an arbitrary point z (not a pushed sample): inverts the flow,
/// then applies the change of variables along the forward trajectory.
double flow_log_density_at(const FlowStack& flow, const std::vector<double>& z);

/// Tape op: log q_old(z_hat) under a frozen stack, differentiable w.r.t.
/// z_hat via the inverse-function Jacobian. Used for the previous stage's
/// flow density inside the joint KL estimator.
TensorPtr frozen_flow_log_density(Tape& tape, const FlowStack& frozen, const TensorPtr& z_hat);

/// Bitwise parameter equality (layer count, u, w, b).
bool flows_equal(const FlowStack& a, const FlowStack& b);

}  // namespace bil
