#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "bil/data.hpp"
#include "bil/model.hpp"

namespace bil {

/// Settings for one ELBO evaluation. kl_scale is the beta multiplier on the
/// KL term (1 keeps the proper bound; 0.05 is the large-architecture trick).
struct ElboConfig {
  double kl_scale = 1.0;
  int mc_samples = 1;
  std::int64_t dataset_size = 0;  // N_t of the current shard
  int batch_size = 128;

  void validate() const;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moments live here, parallel to the bound
/// parameter list; reset() zeroes them (stage boundaries).
class AdamState {
 public:
  explicit AdamState(AdamConfig cfg = {}) : cfg_(cfg) {}

  void bind(const std::vector<TensorPtr>& params);
  void reset();
  void step(const std::vector<TensorPtr>& params);

  std::int64_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct EpochRecord {
  double elbo = 0.0;
  double data_term = 0.0;
  double kl_term = 0.0;
};

struct StageMetrics {
  int stage = 0;
  std::vector<EpochRecord> epochs;
  double test_accuracy = 0.0;
  double test_nll = 0.0;
};

struct Batch {
  TensorPtr x;
  std::vector<int> y;
};

struct ElboResult {
  TensorPtr loss;       // minimize: -(data_term - kl_scale * kl_term)
  double data_term = 0.0;
  double kl_term = 0.0;
};

/// Unbiased minibatch ELBO estimate, averaged over cfg.mc_samples weight
/// draws: loss = (N_t) * mean_nll + kl_scale * KL.
ElboResult elbo_minibatch(Tape& tape, const BayesModel& model, const Batch& batch,
                          const PriorSnapshot& prior, const ElboConfig& cfg, Rng& rng);

/// Deep immutable copy of all variational (and flow) parameters.
PriorSnapshot snapshot_posterior(const BayesModel& model);

/// Test instrumentation: fired before and after each optimizer step.
struct StepEvent {
  int stage = 0;
  int epoch = 0;
  int step_in_stage = 0;
  bool after_update = false;
  const std::vector<TensorPtr>* params = nullptr;
};

struct FitOptions {
  int epochs_per_stage = 50;
  bool early_stop = false;  // stop on ELBO plateau (<1e-4 rel change, 5 epochs)
  int eval_samples = 100;
  std::uint64_t seed = 0;
  AdamConfig adam{};
  std::function<void(const StepEvent&)> observer;
};

struct EvalResult {
  double accuracy = 0.0;
  double nll = 0.0;
};

/// Mean softmax probabilities over `samples` weight draws ([M*K] row-major).
/// FT models use one deterministic pass regardless of `samples`.
std::vector<double> predict_avg(const BayesModel& model, const TensorPtr& inputs, int samples,
                                Rng& rng);

EvalResult evaluate(const BayesModel& model, const Dataset& data, int samples, Rng& rng);

/// Algorithm: for t = start_stage..T set prior to the previous stage's
/// snapshot (the configured initial prior at t=1; the model's own snapshot
/// when resuming at t>1), reset Adam moments, train on shard t only,
/// evaluate, snapshot. Stage t never touches any other shard, and a resumed
/// run is bitwise identical to an uninterrupted one.
std::vector<StageMetrics> incremental_fit(BayesModel& model, const ShardedDataset& shards,
                                          ElboConfig cfg, const FitOptions& options,
                                          const Dataset& eval_data,
                                          const PriorSnapshot* initial_prior = nullptr,
                                          int start_stage = 1);

/// Plain non-incremental training on one dataset; the baseline the T=1
/// incremental run must match metric for metric.
StageMetrics fit_direct(BayesModel& model, const Dataset& data, ElboConfig cfg,
                        const FitOptions& options, const Dataset& eval_data,
                        const PriorSnapshot* prior = nullptr);

namespace seeds {
constexpr std::uint64_t kTrainRole = 1;
constexpr std::uint64_t kEvalRole = 2;
constexpr std::uint64_t kInitRole = 3;
constexpr std::uint64_t kMapRole = 4;
}  // namespace seeds

}  // namespace bil
