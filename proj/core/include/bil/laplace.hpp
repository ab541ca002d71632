#pragma once

#include <functional>
#include <vector>

#include "bil/trainer.hpp"

namespace bil {

/// Laplace fit settings. damping < 0 selects the default 1e-4 * n_data.
/// Resulting per-weight sigma is clamped to [sigma_floor, sigma_ceil].
struct LaplaceConfig {
  double damping = -1.0;
  std::int64_t n_data = 0;
  double sigma_floor = 1e-3;
  double sigma_ceil = 1.0;

  double effective_damping() const {
    return damping >= 0.0 ? damping : 1e-4 * static_cast<double>(n_data);
  }
  void validate() const;
};

struct MapOptions {
  int epochs = 50;
  int batch_size = 128;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  AdamConfig adam{};
};

/// MAP pretraining of an FT model: mean NLL + weight_decay/2 * ||w||^2 via
/// Adam. Deterministic for a fixed seed.
void train_map(BayesModel& model, const Dataset& data, const MapOptions& options);

/// Mean over examples of the squared per-example log-likelihood gradient,
/// one vector per parameter tensor. `loglik_grad(i)` returns d log p(y_i|x_i,w)/dw.
std::vector<std::vector<double>> empirical_fisher_diag(
    std::size_t n_examples,
    const std::function<std::vector<std::vector<double>>(std::size_t)>& loglik_grad);

/// sigma_i^2 = 1 / (N * F_ii + damping), clamped to [floor^2, ceil^2].
std::vector<std::vector<double>> laplace_sigma2_from_fisher(
    const std::vector<std::vector<double>>& fisher, const LaplaceConfig& cfg);

/// Diagonal empirical-Fisher Laplace fit at the model's current weights
/// (model must be FT family; classification likelihood). Returns per-weight
/// variance arrays ordered like model.parameters().
std::vector<std::vector<double>> laplace_fit_sigma(const BayesModel& model, const Dataset& data,
                                                   const LaplaceConfig& cfg);

/// Analytic prior N(w*, sigma^2) over the masked layers of `target`
/// (target-head layers outside the mask get the fresh N(0,1) prior).
/// transfer_mask has one entry per parameterized layer.
PriorSnapshot build_pretrained_prior(const BayesModel& w_star, double sigma2,
                                     const std::vector<bool>& transfer_mask,
                                     const BayesModel& target);
PriorSnapshot build_pretrained_prior(const BayesModel& w_star,
                                     const std::vector<std::vector<double>>& sigma2_per_param,
                                     const std::vector<bool>& transfer_mask,
                                     const BayesModel& target);

/// Short incremental run per candidate sigma^2; returns the candidate with
/// the highest validation accuracy, ties broken toward the smaller value.
struct GridTask {
  Family family = Family::FFG;
  const Dataset* train_data = nullptr;  // incremental task data (part B train)
  const Dataset* val_data = nullptr;
  int T = 2;
  ElboConfig elbo{};
  FitOptions fit{};  // fit.epochs_per_stage is the per-candidate budget
  std::vector<bool> transfer_mask;
  int flow_depth = 2;
};

struct GridResult {
  double sigma2 = 0.0;
  double val_accuracy = 0.0;
  std::vector<std::pair<double, double>> trace;  // (candidate, accuracy)
};

GridResult grid_search_sigma(const BayesModel& w_star, const std::vector<double>& candidates,
                             const GridTask& task);

}  // namespace bil
