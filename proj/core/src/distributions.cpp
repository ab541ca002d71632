#include "bil/distributions.hpp"

#include <cmath>

#include "bil/errors.hpp"

namespace bil {

namespace {
constexpr double kLog2Pi = 1.8378770664093454835606594728112;
}  // namespace

double rho_for_sigma(double sigma) {
  if (sigma <= 0.0) throw DomainError("rho_for_sigma: sigma must be positive");
  return std::log(std::expm1(sigma));
}

DiagGaussian DiagGaussian::init(std::vector<int> shape, double fan_in, Rng& rng,
                                double init_sigma) {
  const double a = 1.0 / std::sqrt(std::max(1.0, fan_in));
  auto n = shape_numel(shape);
  std::vector<double> mu(static_cast<std::size_t>(n));
  for (auto& v : mu) v = (2.0 * rng.uniform() - 1.0) * a;
  auto mu_t = Tensor::from(shape, std::move(mu), true);
  auto rho_t = Tensor::full(shape, rho_for_sigma(init_sigma), true);
  return DiagGaussian{mu_t, rho_t};
}

CholGaussian CholGaussian::init(int dim, double fan_in, Rng& rng, double init_sigma) {
  const double a = 1.0 / std::sqrt(std::max(1.0, fan_in));
  std::vector<double> mu(static_cast<std::size_t>(dim));
  for (auto& v : mu) v = (2.0 * rng.uniform() - 1.0) * a;
  const int packed = dim * (dim + 1) / 2;
  // Diagonal slots start at softplus^-1(init_sigma); off-diagonals at zero,
  // so the initial covariance is init_sigma^2 I.
  std::vector<double> raw(static_cast<std::size_t>(packed), 0.0);
  std::size_t at = 0;
  for (int i = 0; i < dim; ++i) {
    for (int j = 0; j <= i; ++j, ++at) {
      if (i == j) raw[at] = rho_for_sigma(init_sigma);
    }
  }
  return CholGaussian{dim, Tensor::from({dim}, std::move(mu), true),
                      Tensor::from({packed}, std::move(raw), true)};
}

namespace dist {

TensorPtr sample_reparam_diag(Tape& tape, const TensorPtr& mu, const TensorPtr& sigma,
                              const TensorPtr& eps) {
  if (eps->size() != mu->size()) {
    throw DimensionError("sample_reparam_diag: eps length " + std::to_string(eps->size()) +
                         " != mu length " + std::to_string(mu->size()));
  }
  return ops::add(tape, mu, ops::mul(tape, sigma, eps));
}

TensorPtr sample_reparam_chol(Tape& tape, const TensorPtr& mu, const TensorPtr& L,
                              const TensorPtr& eps) {
  const int d = L->shape[0];
  if (eps->size() != d || mu->size() != d) {
    throw DimensionError("sample_reparam_chol: block dim " + std::to_string(d) +
                         " vs mu " + std::to_string(mu->size()) + ", eps " +
                         std::to_string(eps->size()));
  }
  auto eps_col = ops::reshape(tape, eps, {d, 1});
  auto le = ops::reshape(tape, ops::matmul(tape, L, eps_col), {d});
  return ops::add(tape, mu, le);
}

TensorPtr kl_diag_diag(Tape& tape, const TensorPtr& mu_q, const TensorPtr& sigma_q,
                       const TensorPtr& mu_p, const TensorPtr& sigma_p) {
  if (mu_q->size() != mu_p->size() || sigma_q->size() != sigma_p->size() ||
      mu_q->size() != sigma_q->size()) {
    throw DimensionError("kl_diag_diag: length mismatch (q " + std::to_string(mu_q->size()) +
                         ", p " + std::to_string(mu_p->size()) + ")");
  }
  auto log_ratio = ops::sub(tape, ops::activation(tape, Act::Log, sigma_p),
                            ops::activation(tape, Act::Log, sigma_q));
  auto diff = ops::sub(tape, mu_q, mu_p);
  auto num = ops::add(tape, ops::mul(tape, sigma_q, sigma_q), ops::mul(tape, diff, diff));
  auto den = ops::mul_scalar(tape, ops::mul(tape, sigma_p, sigma_p), 2.0);
  auto terms = ops::add_scalar(tape, ops::add(tape, log_ratio, ops::div(tape, num, den)), -0.5);
  return ops::sum(tape, terms);
}

TensorPtr kl_chol_chol(Tape& tape, const TensorPtr& mu_q, const TensorPtr& L_q,
                       const TensorPtr& mu_p, const TensorPtr& L_p) {
  if (L_q->shape != L_p->shape || L_q->shape.size() != 2 || L_q->shape[0] != L_q->shape[1]) {
    throw DimensionError("kl_chol_chol: factor shapes " + L_q->shape_str() + " vs " +
                         L_p->shape_str());
  }
  const int d = L_q->shape[0];
  if (mu_q->size() != d || mu_p->size() != d) {
    throw DimensionError("kl_chol_chol: mean length vs block dim " + std::to_string(d));
  }
  auto A = ops::trisolve_lower(tape, L_p, L_q);        // L_p^-1 L_q
  auto tr_term = ops::sum(tape, ops::mul(tape, A, A));  // ||A||_F^2 = tr(Sigma_p^-1 Sigma_q)
  auto diff = ops::reshape(tape, ops::sub(tape, mu_p, mu_q), {d, 1});
  auto v = ops::trisolve_lower(tape, L_p, diff);
  auto mean_term = ops::sum(tape, ops::mul(tape, v, v));
  auto logdet_p = ops::mul_scalar(
      tape, ops::sum(tape, ops::activation(tape, Act::Log, ops::diag_part(tape, L_p))), 2.0);
  auto logdet_q = ops::mul_scalar(
      tape, ops::sum(tape, ops::activation(tape, Act::Log, ops::diag_part(tape, L_q))), 2.0);
  auto acc = ops::add(tape, tr_term, mean_term);
  acc = ops::add_scalar(tape, acc, -static_cast<double>(d));
  acc = ops::add(tape, acc, ops::sub(tape, logdet_p, logdet_q));
  return ops::mul_scalar(tape, acc, 0.5);
}

TensorPtr entropy_diag(Tape& tape, const TensorPtr& sigma) {
  for (double s : sigma->data) {
    if (s <= 0.0) throw DomainError("entropy_diag: non-positive sigma " + std::to_string(s));
  }
  // Per-element association mirrors cross_entropy_scaled exactly, so the
  // self cross-entropy minus entropy cancels bitwise.
  auto per = ops::add_scalar(
      tape, ops::add_scalar(tape, ops::activation(tape, Act::Log, sigma), 0.5), 0.5 * kLog2Pi);
  return ops::sum(tape, per);
}

TensorPtr cross_entropy_scaled(Tape& tape, const TensorPtr& mu, const TensorPtr& sigma,
                               const TensorPtr& mu_t, const TensorPtr& sigma_t,
                               const TensorPtr& z, std::int64_t group) {
  if (mu->size() != mu_t->size() || sigma->size() != sigma_t->size() ||
      mu->size() != sigma->size()) {
    throw DimensionError("cross_entropy_scaled: parameter length mismatch");
  }
  for (double s : sigma_t->data) {
    if (s <= 0.0) {
      throw DomainError("cross_entropy_scaled: non-positive sigma_t " + std::to_string(s));
    }
  }
  auto diff = ops::sub(tape, mu, mu_t);
  auto scaled = ops::scale_rows(tape, diff, z, group);
  auto num = ops::add(tape, ops::mul(tape, sigma, sigma), ops::mul(tape, scaled, scaled));
  auto den = ops::mul_scalar(tape, ops::mul(tape, sigma_t, sigma_t), 2.0);
  auto quot = ops::div(tape, num, den);
  auto log_t = ops::activation(tape, Act::Log, sigma_t);
  auto per = ops::add_scalar(tape, ops::add(tape, log_t, quot), 0.5 * kLog2Pi);
  return ops::sum(tape, per);
}

double entropy_diag_value(double sigma) {
  if (sigma <= 0.0) throw DomainError("entropy_diag_value: non-positive sigma");
  return (std::log(sigma) + 0.5) + 0.5 * kLog2Pi;
}

double cross_entropy_scaled_value(double mu, double sigma, double mu_t, double sigma_t,
                                  double z) {
  if (sigma_t <= 0.0) throw DomainError("cross_entropy_scaled_value: non-positive sigma_t");
  const double d = z * (mu - mu_t);
  const double quot = (sigma * sigma + d * d) / (2.0 * sigma_t * sigma_t);
  return (std::log(sigma_t) + quot) + 0.5 * kLog2Pi;
}

}  // namespace dist

}  // namespace bil
