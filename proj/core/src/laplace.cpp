#include "bil/laplace.hpp"

#include <algorithm>
#include <cmath>

#include "bil/errors.hpp"

namespace bil {

void LaplaceConfig::validate() const {
  if (sigma_floor <= 0.0 || sigma_ceil <= 0.0 || sigma_floor >= sigma_ceil) {
    throw ConfigError("LaplaceConfig: need 0 < sigma_floor < sigma_ceil");
  }
  if (n_data < 1) throw ConfigError("LaplaceConfig: n_data must be >= 1");
}

void train_map(BayesModel& model, const Dataset& data, const MapOptions& options) {
  if (model.family != Family::FT) {
    throw ContractError("train_map expects an FT-family model, got " +
                        family_name(model.family));
  }
  if (data.size() == 0) throw ConfigError("train_map: empty dataset");
  auto params = model.parameters();
  AdamState adam(options.adam);
  adam.bind(params);
  Rng rng(derive_seed(options.seed, 0, seeds::kMapRole));
  const int batch_size = static_cast<int>(
      std::min<std::size_t>(static_cast<std::size_t>(options.batch_size), data.size()));

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(batch_size)) {
      const auto end = std::min(order.size(), at + static_cast<std::size_t>(batch_size));
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(at),
                                   order.begin() + static_cast<std::ptrdiff_t>(end));
      Tape tape;
      auto noise = model.zero_noise();  // unused by FT layers
      auto logits = model.forward(tape, data.batch(idx), noise);
      auto loss = ops::log_softmax_nll(tape, logits, data.batch_labels(idx));
      if (options.weight_decay > 0.0) {
        TensorPtr reg;
        for (const auto& p : params) {
          auto sq = ops::sum(tape, ops::mul(tape, p, p));
          reg = reg ? ops::add(tape, reg, sq) : sq;
        }
        loss = ops::add(tape, loss, ops::mul_scalar(tape, reg, 0.5 * options.weight_decay));
      }
      tape.backward(loss);
      adam.step(params);
    }
  }
}

std::vector<std::vector<double>> empirical_fisher_diag(
    std::size_t n_examples,
    const std::function<std::vector<std::vector<double>>(std::size_t)>& loglik_grad) {
  if (n_examples == 0) throw ConfigError("empirical_fisher_diag: no examples");
  std::vector<std::vector<double>> fisher;
  for (std::size_t i = 0; i < n_examples; ++i) {
    auto g = loglik_grad(i);
    if (fisher.empty()) {
      fisher.resize(g.size());
      for (std::size_t p = 0; p < g.size(); ++p) fisher[p].assign(g[p].size(), 0.0);
    }
    for (std::size_t p = 0; p < g.size(); ++p) {
      for (std::size_t j = 0; j < g[p].size(); ++j) fisher[p][j] += g[p][j] * g[p][j];
    }
  }
  const double inv = 1.0 / static_cast<double>(n_examples);
  for (auto& f : fisher) {
    for (auto& v : f) v *= inv;
  }
  return fisher;
}

std::vector<std::vector<double>> laplace_sigma2_from_fisher(
    const std::vector<std::vector<double>>& fisher, const LaplaceConfig& cfg) {
  cfg.validate();
  const double lambda = cfg.effective_damping();
  const double lo = cfg.sigma_floor * cfg.sigma_floor;
  const double hi = cfg.sigma_ceil * cfg.sigma_ceil;
  std::vector<std::vector<double>> sigma2(fisher.size());
  for (std::size_t p = 0; p < fisher.size(); ++p) {
    sigma2[p].resize(fisher[p].size());
    for (std::size_t j = 0; j < fisher[p].size(); ++j) {
      const double precision = static_cast<double>(cfg.n_data) * fisher[p][j] + lambda;
      const double v = (precision > 0.0) ? 1.0 / precision : hi;
      sigma2[p][j] = std::clamp(v, lo, hi);
    }
  }
  return sigma2;
}

std::vector<std::vector<double>> laplace_fit_sigma(const BayesModel& model, const Dataset& data,
                                                   const LaplaceConfig& cfg_in) {
  if (model.family != Family::FT) {
    throw ContractError("laplace_fit_sigma expects an FT-family model");
  }
  if (data.size() == 0) throw ConfigError("laplace_fit_sigma: empty dataset");
  LaplaceConfig cfg = cfg_in;
  if (cfg.n_data == 0) cfg.n_data = static_cast<std::int64_t>(data.size());
  cfg.validate();

  auto params = model.parameters();
  auto fisher = empirical_fisher_diag(
      data.size(), [&](std::size_t i) {
        Tape tape;
        auto noise = model.zero_noise();
        auto logits = model.forward(tape, data.batch({i}), noise);
        auto nll = ops::log_softmax_nll(tape, logits, {data.labels[i]});
        tape.backward(nll);
        // d log p / dw = -d nll / dw; the sign is irrelevant after squaring.
        std::vector<std::vector<double>> g;
        g.reserve(params.size());
        for (const auto& p : params) {
          p->ensure_grad();
          g.push_back(p->grad);
        }
        return g;
      });
  return laplace_sigma2_from_fisher(fisher, cfg);
}

namespace {

LayerPrior pretrained_layer_prior(const BayesLayer& source, const BayesLayer& target,
                                  const std::vector<double>& w_sigma2,
                                  const std::vector<double>& b_sigma2) {
  if (source.weight_shape() != target.weight_shape()) {
    throw StructureError("pretrained prior: weight shape " +
                         shape_to_string(source.weight_shape()) + " != target " +
                         shape_to_string(target.weight_shape()));
  }
  LayerPrior p;
  p.family = target.family;
  p.is_dense = target.is_dense;
  p.weight_shape = target.weight_shape();
  const auto& w_star = source.point_w->data;
  const auto& b_star = source.point_b->data;
  if (w_sigma2.size() != w_star.size() || b_sigma2.size() != b_star.size()) {
    throw StructureError("pretrained prior: sigma2 array sizes do not match weights");
  }
  switch (target.family) {
    case Family::FT:
      p.point_w = w_star;
      p.point_b = b_star;
      return p;
    case Family::FFG:
    case Family::MNF:
      p.w_mu = w_star;
      p.w_sigma.resize(w_sigma2.size());
      for (std::size_t i = 0; i < w_sigma2.size(); ++i) p.w_sigma[i] = std::sqrt(w_sigma2[i]);
      break;
    case Family::CFG: {
      p.w_mu = w_star;
      const int d = target.block_dim();
      const int blocks = target.block_count();
      p.chol_l.assign(static_cast<std::size_t>(blocks) * d * d, 0.0);
      for (int bidx = 0; bidx < blocks; ++bidx) {
        for (int i = 0; i < d; ++i) {
          p.chol_l[static_cast<std::size_t>(bidx) * d * d + static_cast<std::size_t>(i) * d + i] =
              std::sqrt(w_sigma2[static_cast<std::size_t>(bidx) * d + static_cast<std::size_t>(i)]);
        }
      }
      break;
    }
  }
  p.b_mu = b_star;
  p.b_sigma.resize(b_sigma2.size());
  for (std::size_t i = 0; i < b_sigma2.size(); ++i) p.b_sigma[i] = std::sqrt(b_sigma2[i]);
  if (target.family == Family::MNF) p.flow.dim = target.z_dim();  // identity flow
  return p;
}

}  // namespace

PriorSnapshot build_pretrained_prior(const BayesModel& w_star,
                                     const std::vector<std::vector<double>>& sigma2_per_param,
                                     const std::vector<bool>& transfer_mask,
                                     const BayesModel& target) {
  if (w_star.family != Family::FT) {
    throw ContractError("build_pretrained_prior: w_star must be an FT model");
  }
  if (w_star.layers.size() != target.layers.size()) {
    throw StructureError("build_pretrained_prior: layer counts differ (" +
                         std::to_string(w_star.layers.size()) + " vs " +
                         std::to_string(target.layers.size()) + ")");
  }
  if (transfer_mask.size() != target.layers.size()) {
    throw StructureError("build_pretrained_prior: transfer_mask has " +
                         std::to_string(transfer_mask.size()) + " entries for " +
                         std::to_string(target.layers.size()) + " layers");
  }
  if (sigma2_per_param.size() != 2 * w_star.layers.size()) {
    throw StructureError("build_pretrained_prior: expected one sigma2 array per weight and bias");
  }
  PriorSnapshot snap;
  snap.fixed_analytic = true;
  for (std::size_t i = 0; i < target.layers.size(); ++i) {
    if (transfer_mask[i]) {
      snap.layers.push_back(pretrained_layer_prior(w_star.layers[i], target.layers[i],
                                                   sigma2_per_param[2 * i],
                                                   sigma2_per_param[2 * i + 1]));
    } else {
      snap.layers.push_back(standard_normal_prior(target.layers[i]));
    }
  }
  return snap;
}

PriorSnapshot build_pretrained_prior(const BayesModel& w_star, double sigma2,
                                     const std::vector<bool>& transfer_mask,
                                     const BayesModel& target) {
  if (sigma2 <= 0.0) throw ConfigError("build_pretrained_prior: sigma2 must be positive");
  std::vector<std::vector<double>> per;
  for (const auto& l : w_star.layers) {
    per.emplace_back(static_cast<std::size_t>(l.weight_count()), sigma2);
    per.emplace_back(static_cast<std::size_t>(l.bias_count()), sigma2);
  }
  return build_pretrained_prior(w_star, per, transfer_mask, target);
}

GridResult grid_search_sigma(const BayesModel& w_star, const std::vector<double>& candidates,
                             const GridTask& task) {
  if (candidates.empty()) throw ConfigError("grid_search_sigma: empty candidate list");
  for (double c : candidates) {
    if (c <= 0.0) throw ConfigError("grid_search_sigma: candidates must be positive");
  }
  if (!task.train_data || !task.val_data) {
    throw ConfigError("grid_search_sigma: task data not set");
  }
  GridResult best;
  best.val_accuracy = -1.0;
  for (double sigma2 : candidates) {
    Rng init_rng(derive_seed(task.fit.seed, 0, seeds::kInitRole));
    auto model = BayesModel::build(w_star.arch, task.family, init_rng, task.flow_depth);
    auto prior = build_pretrained_prior(w_star, sigma2, task.transfer_mask, model);
    auto shards = split_shards(*task.train_data, task.T, task.fit.seed);
    incremental_fit(model, shards, task.elbo, task.fit, *task.val_data, &prior);
    Rng eval_rng(derive_seed(task.fit.seed, 0, seeds::kEvalRole));
    const auto res = evaluate(model, *task.val_data, task.fit.eval_samples, eval_rng);
    best.trace.emplace_back(sigma2, res.accuracy);
    const bool better = res.accuracy > best.val_accuracy ||
                        (res.accuracy == best.val_accuracy && sigma2 < best.sigma2);
    if (better || best.val_accuracy < 0.0) {
      best.sigma2 = sigma2;
      best.val_accuracy = res.accuracy;
    }
  }
  return best;
}

}  // namespace bil
