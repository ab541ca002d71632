#pragma once

#include "bil/ops.hpp"
#include "bil/rng.hpp"
#include "bil/tape.hpp"
#include "bil/tensor.hpp"

namespace bil {

/// Fully factorized Gaussian parameter block: per-coordinate mean mu and
/// unconstrained rho with sigma = softplus(rho) > 0.
struct DiagGaussian {
  TensorPtr mu;
  TensorPtr rho;

  std::int64_t size() const { return mu ? mu->size() : 0; }

  /// Trainable block: mu ~ U(-a, a) with a = 1/sqrt(fan_in), sigma ~= init_sigma.
  static DiagGaussian init(std::vector<int> shape, double fan_in, Rng& rng,
                           double init_sigma = 0.05);
};

/// Gaussian with covariance L L^T, L lower triangular with positive diagonal.
/// l_raw packs the lower triangle row-major; diagonal slots pass through
/// softplus when the factor is materialized.
struct CholGaussian {
  int dim = 0;
  TensorPtr mu;     // [dim]
  TensorPtr l_raw;  // [dim (dim+1) / 2]

  static CholGaussian init(int dim, double fan_in, Rng& rng, double init_sigma = 0.05);
};

/// rho such that softplus(rho) == sigma.
double rho_for_sigma(double sigma);

namespace dist {

/// w = mu + sigma (.) eps; differentiable through mu and sigma.
TensorPtr sample_reparam_diag(Tape& tape, const TensorPtr& mu, const TensorPtr& sigma,
                              const TensorPtr& eps);

/// w = mu + L eps for a [d] block; L [d x d] lower triangular.
TensorPtr sample_reparam_chol(Tape& tape, const TensorPtr& mu, const TensorPtr& L,
                              const TensorPtr& eps);

/// KL( N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2) ) summed over coordinates.
/// Exactly zero when both parameter sets are bitwise equal.
TensorPtr kl_diag_diag(Tape& tape, const TensorPtr& mu_q, const TensorPtr& sigma_q,
                       const TensorPtr& mu_p, const TensorPtr& sigma_p);

/// KL between two full Gaussians given Cholesky factors, via triangular
/// solves against L_p:
///   1/2 [ ||L_p^-1 L_q||_F^2 + ||L_p^-1 (mu_p - mu_q)||^2 - d
///         + log det Sigma_p - log det Sigma_q ].
TensorPtr kl_chol_chol(Tape& tape, const TensorPtr& mu_q, const TensorPtr& L_q,
                       const TensorPtr& mu_p, const TensorPtr& L_p);

/// Sum_i 1/2 log(2 pi e sigma_i^2). Independent of the mean and of any
/// multiplicative scale on the mean.
TensorPtr entropy_diag(Tape& tape, const TensorPtr& sigma);

/// Cross-entropy -E_{N(z mu, sigma^2)} log N(. | z mu_t, sigma_t^2)
///   = 1/2 log(2 pi sigma_t^2) + (sigma^2 + z^2 (mu - mu_t)^2) / (2 sigma_t^2),
/// summed over coordinates; z broadcasts per row of `group` consecutive
/// coordinates (z length = size / group).
TensorPtr cross_entropy_scaled(Tape& tape, const TensorPtr& mu, const TensorPtr& sigma,
                               const TensorPtr& mu_t, const TensorPtr& sigma_t,
                               const TensorPtr& z, std::int64_t group);

// Scalar closed forms (plain doubles) for callers that need values only.
double entropy_diag_value(double sigma);
double cross_entropy_scaled_value(double mu, double sigma, double mu_t, double sigma_t, double z);

}  // namespace dist

}  // namespace bil
