#include "bil/trainer.hpp"

#include <algorithm>
#include <cmath>

#include "bil/errors.hpp"

namespace bil {

void ElboConfig::validate() const {
  if (kl_scale <= 0.0) throw ConfigError("kl_scale must be positive");
  if (mc_samples < 1) throw ConfigError("mc_samples must be >= 1");
  if (dataset_size < 1) throw ConfigError("dataset_size must be >= 1");
  if (batch_size < 1 || batch_size > dataset_size) {
    throw ConfigError("batch_size " + std::to_string(batch_size) + " outside [1, " +
                      std::to_string(dataset_size) + "]");
  }
}

void AdamState::bind(const std::vector<TensorPtr>& params) {
  m_.clear();
  v_.clear();
  for (const auto& p : params) {
    m_.emplace_back(p->data.size(), 0.0);
    v_.emplace_back(p->data.size(), 0.0);
  }
  t_ = 0;
}

void AdamState::reset() {
  for (auto& m : m_) std::fill(m.begin(), m.end(), 0.0);
  for (auto& v : v_) std::fill(v.begin(), v.end(), 0.0);
  t_ = 0;
}

void AdamState::step(const std::vector<TensorPtr>& params) {
  if (params.size() != m_.size()) {
    throw ContractError("AdamState::step: parameter list does not match bound moments");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& param = *params[p];
    param.ensure_grad();
    for (std::size_t i = 0; i < param.data.size(); ++i) {
      const double g = param.grad[i];
      m_[p][i] = cfg_.beta1 * m_[p][i] + (1.0 - cfg_.beta1) * g;
      v_[p][i] = cfg_.beta2 * v_[p][i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m_[p][i] / bc1;
      const double vhat = v_[p][i] / bc2;
      param.data[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

ElboResult elbo_minibatch(Tape& tape, const BayesModel& model, const Batch& batch,
                          const PriorSnapshot& prior, const ElboConfig& cfg, Rng& rng) {
  cfg.validate();
  const double n_scale = static_cast<double>(cfg.dataset_size);
  TensorPtr loss_acc;
  double data_acc = 0.0, kl_acc = 0.0;
  for (int s = 0; s < cfg.mc_samples; ++s) {
    auto noise = model.draw_noise(rng);
    auto logits = model.forward(tape, batch.x, noise);
    auto nll = ops::log_softmax_nll(tape, logits, batch.y);
    auto kl = model.kl(tape, prior, noise);
    auto loss_s =
        ops::add(tape, ops::mul_scalar(tape, nll, n_scale), ops::mul_scalar(tape, kl, cfg.kl_scale));
    data_acc += -n_scale * nll->value();
    kl_acc += kl->value();
    loss_acc = loss_acc ? ops::add(tape, loss_acc, loss_s) : loss_s;
  }
  const double inv = 1.0 / cfg.mc_samples;
  ElboResult res;
  res.loss = cfg.mc_samples == 1 ? loss_acc : ops::mul_scalar(tape, loss_acc, inv);
  res.data_term = data_acc * inv;
  res.kl_term = kl_acc * inv;
  return res;
}

PriorSnapshot snapshot_posterior(const BayesModel& model) { return model.snapshot(); }

namespace {

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch_size, Rng& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t at = 0; at < n; at += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(n, at + static_cast<std::size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

/// One stage of ELBO training over `data`; fills sm.epochs.
void train_stage(BayesModel& model, const Dataset& data, const PriorSnapshot& prior,
                 ElboConfig cfg, const FitOptions& options, int stage, AdamState& adam,
                 StageMetrics& sm) {
  cfg.dataset_size = static_cast<std::int64_t>(data.size());
  cfg.batch_size = static_cast<int>(std::min<std::int64_t>(cfg.batch_size, cfg.dataset_size));
  cfg.validate();

  auto params = model.parameters();
  adam.bind(params);
  adam.reset();

  Rng rng(derive_seed(options.seed, static_cast<std::uint64_t>(stage), seeds::kTrainRole));
  int step_in_stage = 0;
  int plateau = 0;
  double prev_elbo = 0.0;
  for (int epoch = 0; epoch < options.epochs_per_stage; ++epoch) {
    double e_elbo = 0.0, e_data = 0.0, e_kl = 0.0;
    const auto batches = epoch_batches(data.size(), cfg.batch_size, rng);
    for (const auto& idx : batches) {
      Batch batch{data.batch(idx), data.batch_labels(idx)};
      Tape tape;
      auto res = elbo_minibatch(tape, model, batch, prior, cfg, rng);
      tape.backward(res.loss);
      if (options.observer) {
        options.observer(StepEvent{stage, epoch, step_in_stage, false, &params});
      }
      adam.step(params);
      if (options.observer) {
        options.observer(StepEvent{stage, epoch, step_in_stage, true, &params});
      }
      ++step_in_stage;
      e_data += res.data_term;
      e_kl += res.kl_term;
      e_elbo += res.data_term - cfg.kl_scale * res.kl_term;
    }
    const double inv = 1.0 / static_cast<double>(batches.size());
    sm.epochs.push_back(EpochRecord{e_elbo * inv, e_data * inv, e_kl * inv});

    if (options.early_stop) {
      const double cur = sm.epochs.back().elbo;
      if (epoch > 0 &&
          std::abs(cur - prev_elbo) / std::max(1.0, std::abs(prev_elbo)) < 1e-4) {
        if (++plateau >= 5) break;
      } else {
        plateau = 0;
      }
      prev_elbo = cur;
    }
  }
}

}  // namespace

std::vector<double> predict_avg(const BayesModel& model, const TensorPtr& inputs, int samples,
                                Rng& rng) {
  if (samples < 1) throw ConfigError("predict_avg: samples must be >= 1");
  const int draws = (model.family == Family::FT) ? 1 : samples;
  std::vector<double> acc;
  for (int s = 0; s < draws; ++s) {
    Tape tape(false);
    auto noise = (model.family == Family::FT) ? model.zero_noise() : model.draw_noise(rng);
    auto logits = model.forward(tape, inputs, noise);
    auto probs = ops::softmax_rows(logits);
    if (acc.empty()) {
      acc = std::move(probs);
    } else {
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += probs[i];
    }
  }
  if (draws > 1) {
    for (auto& v : acc) v /= static_cast<double>(draws);
  }
  return acc;
}

EvalResult evaluate(const BayesModel& model, const Dataset& data, int samples, Rng& rng) {
  if (data.size() == 0) throw ConfigError("evaluate: empty dataset");
  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  auto inputs = data.batch(all);
  auto probs = predict_avg(model, inputs, samples, rng);
  const int K = model.arch.num_classes;
  EvalResult res;
  double correct = 0.0, nll = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    int arg = 0;
    for (int k = 1; k < K; ++k) {
      if (probs[i * K + static_cast<std::size_t>(k)] > probs[i * K + static_cast<std::size_t>(arg)]) {
        arg = k;
      }
    }
    if (arg == data.labels[i]) correct += 1.0;
    nll -= std::log(std::max(1e-300, probs[i * K + static_cast<std::size_t>(data.labels[i])]));
  }
  res.accuracy = correct / static_cast<double>(data.size());
  res.nll = nll / static_cast<double>(data.size());
  return res;
}

std::vector<StageMetrics> incremental_fit(BayesModel& model, const ShardedDataset& shards,
                                          ElboConfig cfg, const FitOptions& options,
                                          const Dataset& eval_data,
                                          const PriorSnapshot* initial_prior, int start_stage) {
  if (start_stage < 1 || start_stage > shards.count()) {
    throw ConfigError("incremental_fit: start_stage " + std::to_string(start_stage) +
                      " outside [1, " + std::to_string(shards.count()) + "]");
  }
  PriorSnapshot prior;
  if (initial_prior) {
    prior = *initial_prior;
  } else if (start_stage > 1) {
    prior = model.snapshot();  // resuming at a stage boundary
  } else {
    prior = model.standard_normal_prior();
  }
  model.check_prior(prior);

  std::vector<StageMetrics> metrics;
  AdamState adam(options.adam);
  for (int t = start_stage; t <= shards.count(); ++t) {
    const Dataset& data = shards.shard(t - 1);  // the stage loop sees only D_t
    StageMetrics sm;
    sm.stage = t;
    train_stage(model, data, prior, cfg, options, t, adam, sm);
    Rng eval_rng(derive_seed(options.seed, static_cast<std::uint64_t>(t), seeds::kEvalRole));
    auto er = evaluate(model, eval_data, options.eval_samples, eval_rng);
    sm.test_accuracy = er.accuracy;
    sm.test_nll = er.nll;
    metrics.push_back(std::move(sm));
    prior = snapshot_posterior(model);
  }
  return metrics;
}

StageMetrics fit_direct(BayesModel& model, const Dataset& data, ElboConfig cfg,
                        const FitOptions& options, const Dataset& eval_data,
                        const PriorSnapshot* prior_in) {
  PriorSnapshot prior = prior_in ? *prior_in : model.standard_normal_prior();
  model.check_prior(prior);
  StageMetrics sm;
  sm.stage = 1;
  AdamState adam(options.adam);
  train_stage(model, data, prior, cfg, options, 1, adam, sm);
  Rng eval_rng(derive_seed(options.seed, 1, seeds::kEvalRole));
  auto er = evaluate(model, eval_data, options.eval_samples, eval_rng);
  sm.test_accuracy = er.accuracy;
  sm.test_nll = er.nll;
  return sm;
}

}  // namespace bil
