// bil: Bayesian incremental learning workbench.
//   bil train    -- incremental (or T=1 plain) variational training
//   bil pretrain -- MAP pretraining + Laplace/grid prior fitting
//   bil eval     -- checkpoint evaluation with predictive averaging
//   bil selftest -- built-in gradient / KL / flow verification suites

#include <chrono>
#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "bil/checkpoint.hpp"
#include "bil/data.hpp"
#include "bil/errors.hpp"
#include "bil/laplace.hpp"
#include "bil/metrics_io.hpp"
#include "bil/model.hpp"
#include "bil/run_config.hpp"
#include "bil/selfcheck.hpp"
#include "bil/trainer.hpp"

namespace {

using bil::RunConfig;
using nlohmann::json;

constexpr std::uint64_t kDataRole = 101;
constexpr std::uint64_t kEvalDataRole = 102;

json config_json(const RunConfig& c, const std::string& command) {
  json j;
  j["command"] = command;
  j["arch"] = c.arch;
  j["family"] = c.family;
  j["dataset"] = c.dataset;
  j["eval_dataset"] = c.eval_dataset;
  j["T"] = c.T;
  j["epochs"] = c.epochs;
  j["beta"] = c.beta;
  j["lr"] = c.lr;
  j["seed"] = c.seed;
  j["samples"] = c.samples;
  j["batch_size"] = c.batch_size;
  j["mc_samples"] = c.mc_samples;
  j["flow_depth"] = c.flow_depth;
  j["early_stop"] = c.early_stop;
  j["synth_n"] = c.synth_n;
  j["synth_classes"] = c.synth_classes;
  j["synth_noise"] = c.synth_noise;
  j["synth_eval_n"] = c.synth_eval_n;
  j["metrics_out"] = c.metrics_out;
  j["metrics_format"] = c.metrics_format;
  j["checkpoint_out"] = c.checkpoint_out;
  j["prior_path"] = c.prior_path;
  j["sigma_mode"] = c.sigma_mode;
  j["grid"] = c.grid;
  j["pretrain_epochs"] = c.pretrain_epochs;
  j["weight_decay"] = c.weight_decay;
  j["grid_epochs"] = c.grid_epochs;
  j["grid_T"] = c.grid_T;
  return j;
}

struct DataPair {
  bil::Dataset train;
  bil::Dataset eval;
};

bil::SyntheticKind synth_kind(const std::string& name) {
  if (name == "blobs") return bil::SyntheticKind::Blobs;
  if (name == "moons") return bil::SyntheticKind::Moons;
  throw bil::ConfigError("unknown synthetic kind '" + name + "' (expected blobs|moons)");
}

bil::Dataset load_idx_spec(const std::string& spec) {
  const auto comma = spec.find(',');
  if (comma == std::string::npos) {
    throw bil::ConfigError("idx dataset spec must be idx:<images>,<labels>");
  }
  return bil::load_idx(spec.substr(0, comma), spec.substr(comma + 1));
}

DataPair load_data(const RunConfig& c) {
  if (c.dataset.rfind("synthetic:", 0) == 0) {
    const auto kind = synth_kind(c.dataset.substr(10));
    DataPair d;
    d.train = bil::gen_synthetic(kind, c.synth_n, c.synth_classes, c.synth_noise,
                                 bil::derive_seed(c.seed, 0, kDataRole));
    d.eval = bil::gen_synthetic(kind, c.synth_eval_n, c.synth_classes, c.synth_noise,
                                bil::derive_seed(c.seed, 0, kEvalDataRole));
    return d;
  }
  if (c.dataset.rfind("idx:", 0) == 0) {
    DataPair d;
    d.train = load_idx_spec(c.dataset.substr(4));
    if (c.eval_dataset.rfind("idx:", 0) == 0) {
      d.eval = load_idx_spec(c.eval_dataset.substr(4));
    } else if (c.eval_dataset.empty()) {
      auto split = bil::holdout_split(d.train, 0.2, bil::derive_seed(c.seed, 0, kEvalDataRole));
      d.train = std::move(split.first);
      d.eval = std::move(split.second);
    } else {
      throw bil::ConfigError("eval dataset must be idx:<images>,<labels>");
    }
    return d;
  }
  throw bil::ConfigError("dataset must be synthetic:<kind> or idx:<images>,<labels>");
}

/// Transfer rule for pretrained priors: conv layers transfer; pure-dense
/// architectures transfer everything except the prediction head.
std::vector<bool> default_transfer_mask(const bil::BayesModel& model) {
  std::vector<bool> mask(model.layers.size(), false);
  if (model.arch.has_conv()) {
    for (std::size_t i = 0; i < model.layers.size(); ++i) mask[i] = !model.layers[i].is_dense;
  } else {
    for (std::size_t i = 0; i + 1 < model.layers.size(); ++i) mask[i] = true;
  }
  return mask;
}

void echo_config(const RunConfig& c, const std::string& command) {
  std::cout << "resolved config: " << config_json(c, command).dump() << "\n";
}

int cmd_train(const RunConfig& c) {
  echo_config(c, "train");
  auto arch = bil::Architecture::parse(c.arch);
  const auto family = bil::family_from_string(c.family);
  bil::Rng init_rng(bil::derive_seed(c.seed, 0, bil::seeds::kInitRole));
  auto model = bil::BayesModel::build(arch, family, init_rng, c.flow_depth);

  auto data = load_data(c);
  if (data.train.num_classes > arch.num_classes) {
    throw bil::ConfigError("dataset has " + std::to_string(data.train.num_classes) +
                           " classes but architecture outputs " +
                           std::to_string(arch.num_classes));
  }
  auto shards = bil::split_shards(data.train, c.T, c.seed);

  bil::PriorSnapshot prior;
  const bil::PriorSnapshot* prior_ptr = nullptr;
  if (!c.prior_path.empty()) {
    auto loaded = bil::ckpt::load_prior(c.prior_path);
    prior = bil::build_pretrained_prior(loaded.w_star, loaded.sigma2_per_param,
                                        loaded.transfer_mask, model);
    prior_ptr = &prior;
    std::cout << "using pretrained prior from " << c.prior_path << " (mode "
              << loaded.info.sigma_mode << ")\n";
  }

  bil::ElboConfig elbo;
  elbo.kl_scale = c.beta;
  elbo.mc_samples = c.mc_samples;
  elbo.batch_size = c.batch_size;
  bil::FitOptions fit;
  fit.epochs_per_stage = c.epochs;
  fit.eval_samples = c.samples;
  fit.seed = c.seed;
  fit.early_stop = c.early_stop;
  fit.adam.lr = c.lr;

  const auto metrics = bil::incremental_fit(model, shards, elbo, fit, data.eval, prior_ptr);
  for (const auto& sm : metrics) {
    std::cout << "stage " << sm.stage << ": elbo " << sm.epochs.back().elbo << ", test acc "
              << sm.test_accuracy << ", test nll " << sm.test_nll << "\n";
  }

  const auto format = c.metrics_format == "json" ? bil::MetricsFormat::Json
                                                 : bil::MetricsFormat::Csv;
  bil::write_metrics(metrics, c.metrics_out, format);
  bil::write_text_atomic(c.metrics_out + ".config.json", config_json(c, "train").dump(2) + "\n");
  std::cout << "metrics written to " << c.metrics_out << "\n";

  if (!c.checkpoint_out.empty()) {
    bil::ckpt::ModelInfo info;
    info.stage_index = shards.count();
    info.seed = c.seed;
    info.kl_scale = c.beta;
    info.metrics_summary["test_accuracy"] = metrics.back().test_accuracy;
    info.metrics_summary["test_nll"] = metrics.back().test_nll;
    bil::ckpt::save_model(c.checkpoint_out, model, info);
    std::cout << "checkpoint written to " << c.checkpoint_out << "\n";
  }
  return 0;
}

int cmd_pretrain(const RunConfig& c) {
  echo_config(c, "pretrain");
  auto data = load_data(c);
  auto split = bil::label_split(data.train, c.seed);
  std::cout << "label split: part A holds " << split.part_a.num_classes << " classes ("
            << split.part_a.size() << " examples), part B " << split.part_b.num_classes << " ("
            << split.part_b.size() << ")\n";

  auto arch = bil::Architecture::parse(c.arch);
  if (arch.num_classes != split.part_a.num_classes) {
    throw bil::ConfigError("architecture outputs " + std::to_string(arch.num_classes) +
                           " classes; label split produces " +
                           std::to_string(split.part_a.num_classes));
  }
  bil::Rng init_rng(bil::derive_seed(c.seed, 0, bil::seeds::kInitRole));
  auto model = bil::BayesModel::build(arch, bil::Family::FT, init_rng, c.flow_depth);

  bil::MapOptions map_opt;
  map_opt.epochs = c.pretrain_epochs;
  map_opt.batch_size = c.batch_size;
  map_opt.weight_decay = c.weight_decay;
  map_opt.seed = c.seed;
  map_opt.adam.lr = c.lr;
  bil::train_map(model, split.part_a, map_opt);
  {
    bil::Rng eval_rng(bil::derive_seed(c.seed, 0, bil::seeds::kEvalRole));
    const auto r = bil::evaluate(model, split.part_a, 1, eval_rng);
    std::cout << "MAP training done: part A accuracy " << r.accuracy << "\n";
  }

  auto mask = default_transfer_mask(model);
  std::vector<std::vector<double>> sigma2;
  bil::ckpt::PriorInfo info;
  info.seed = c.seed;

  if (c.sigma_mode == "grid" || !c.grid.empty()) {
    std::vector<double> candidates;
    std::stringstream ss(c.grid);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) candidates.push_back(std::stod(item));
    }
    if (candidates.empty()) {
      throw bil::ConfigError("grid mode needs --grid with comma-separated sigma^2 candidates");
    }
    auto holdout = bil::holdout_split(split.part_b, 0.2, c.seed);
    bil::GridTask task;
    task.family = bil::family_from_string(c.family);
    task.train_data = &holdout.first;
    task.val_data = &holdout.second;
    task.T = c.grid_T;
    task.elbo.kl_scale = c.beta;
    task.elbo.batch_size = c.batch_size;
    task.fit.epochs_per_stage = c.grid_epochs;
    task.fit.eval_samples = std::min(c.samples, 20);
    task.fit.seed = c.seed;
    task.fit.adam.lr = c.lr;
    task.transfer_mask = mask;
    task.flow_depth = c.flow_depth;
    const auto result = bil::grid_search_sigma(model, candidates, task);
    std::cout << "grid search over " << candidates.size() << " candidates:";
    for (const auto& [cand, acc] : result.trace) {
      std::cout << " sigma2=" << cand << " acc=" << acc << ";";
    }
    std::cout << " chose sigma2=" << result.sigma2 << "\n";
    info.sigma_mode = "grid";
    info.chosen_sigma2 = result.sigma2;
    for (const auto& l : model.layers) {
      sigma2.emplace_back(static_cast<std::size_t>(l.weight_count()), result.sigma2);
      sigma2.emplace_back(static_cast<std::size_t>(l.bias_count()), result.sigma2);
    }
  } else if (c.sigma_mode == "laplace") {
    bil::LaplaceConfig lap;
    lap.n_data = static_cast<std::int64_t>(split.part_a.size());
    sigma2 = bil::laplace_fit_sigma(model, split.part_a, lap);
    info.sigma_mode = "laplace";
    std::cout << "Laplace fit: per-weight sigma^2 over " << sigma2.size() << " tensors\n";
  } else {
    throw bil::ConfigError("unknown sigma mode '" + c.sigma_mode + "' (expected laplace|grid)");
  }

  const std::string out = c.checkpoint_out.empty() ? "prior.ckpt" : c.checkpoint_out;
  bil::ckpt::save_prior(out, model, sigma2, mask, info);
  std::cout << "pretrained prior written to " << out << "\n";
  return 0;
}

int cmd_eval(const RunConfig& c) {
  echo_config(c, "eval");
  if (c.prior_path.empty()) {
    throw bil::ConfigError("eval needs --checkpoint <model checkpoint>");
  }
  auto loaded = bil::ckpt::load_model(c.prior_path);
  auto data = load_data(c);
  bil::Rng rng(bil::derive_seed(c.seed, 0, bil::seeds::kEvalRole));
  const int samples = c.samples;
  if (loaded.model.family == bil::Family::FT) {
    std::cout << "FT checkpoint: --samples ignored, single deterministic pass\n";
  }
  const auto r = bil::evaluate(loaded.model, data.eval, samples, rng);
  std::cout << std::setprecision(9) << "test_accuracy " << r.accuracy << "\n"
            << "test_nll " << r.nll << "\n";
  return 0;
}

int cmd_selftest(const std::string& inject_fault) {
  const auto t0 = std::chrono::steady_clock::now();
  if (!inject_fault.empty()) {
    bil::testing::set_backward_fault(inject_fault);
    std::cout << "fault injected into backward rule: " << inject_fault << "\n";
  }
  auto results = bil::run_selftest();
  bil::testing::set_backward_fault("");

  std::size_t failed = 0;
  std::string prev_suite;
  for (const auto& r : results) {
    if (r.suite != prev_suite) {
      std::cout << "== " << r.suite << " ==\n";
      prev_suite = r.suite;
    }
    std::cout << (r.pass ? "  PASS  " : "  FAIL  ") << std::left << std::setw(44) << r.name
              << " " << r.detail << "\n";
    if (!r.pass) ++failed;
  }
  const auto secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << results.size() - failed << "/" << results.size() << " checks passed in "
            << std::fixed << std::setprecision(1) << secs << "s\n";
  return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian incremental learning workbench"};
  app.require_subcommand(1);

  RunConfig cfg;
  if (const char* env_seed = std::getenv("BIL_SEED")) {
    cfg.seed = std::strtoull(env_seed, nullptr, 10);
  }
  std::string inject_fault;

  // Config-file keys live under a section named after the subcommand,
  // e.g. [train]; command-line flags override file values.
  app.set_config("--config", "", "Optional config file (flags override)");

  auto add_common = [&](CLI::App* sub) {
    sub->fallthrough();
    sub->add_option("--arch", cfg.arch, "Architecture: lenet5 | conv3fc3 | mlp:D0-D1-...");
    sub->add_option("--family", cfg.family, "Posterior family: ft | ffg | cfg | mnf");
    sub->add_option("--dataset", cfg.dataset, "synthetic:blobs|synthetic:moons|idx:<img>,<lbl>");
    sub->add_option("--eval-dataset", cfg.eval_dataset, "idx:<img>,<lbl> test set");
    sub->add_option("--seed", cfg.seed, "RNG seed (falls back to BIL_SEED)");
    sub->add_option("--samples", cfg.samples, "Predictive samples for evaluation");
    sub->add_option("--batch", cfg.batch_size, "Minibatch size");
    sub->add_option("--lr", cfg.lr, "Adam learning rate");
    sub->add_option("--beta", cfg.beta, "KL scale (0.05 = paper's large-net downscale)");
    sub->add_option("--flow-depth", cfg.flow_depth, "Planar flow depth for MNF");
    sub->add_option("--synth-n", cfg.synth_n, "Synthetic train size");
    sub->add_option("--synth-classes", cfg.synth_classes, "Synthetic class count");
    sub->add_option("--synth-noise", cfg.synth_noise, "Synthetic noise level");
    sub->add_option("--synth-eval-n", cfg.synth_eval_n, "Synthetic eval size");
  };

  auto* train = app.add_subcommand("train", "Incremental variational training");
  add_common(train);
  train->add_option("--T", cfg.T, "Number of sequential shards");
  train->add_option("--epochs", cfg.epochs, "Epochs per stage");
  train->add_option("--mc-samples", cfg.mc_samples, "Weight draws per ELBO step");
  train->add_flag("--early-stop", cfg.early_stop, "Stop a stage on ELBO plateau");
  train->add_option("--metrics-out", cfg.metrics_out, "Metrics file path");
  train->add_option("--format", cfg.metrics_format, "Metrics format: csv | json");
  train->add_option("--checkpoint", cfg.checkpoint_out, "Final model checkpoint path");
  train->add_option("--prior", cfg.prior_path, "Pretrained-prior checkpoint");

  auto* pretrain = app.add_subcommand("pretrain", "MAP pretraining + prior fitting");
  add_common(pretrain);
  pretrain->add_option("--epochs", cfg.pretrain_epochs, "MAP training epochs");
  pretrain->add_option("--weight-decay", cfg.weight_decay, "L2 coefficient for MAP training");
  pretrain->add_option("--sigma-mode", cfg.sigma_mode, "laplace | grid");
  pretrain->add_option("--grid", cfg.grid, "Comma-separated sigma^2 candidates");
  pretrain->add_option("--grid-epochs", cfg.grid_epochs, "Epochs/stage per grid candidate");
  pretrain->add_option("--grid-T", cfg.grid_T, "Shards for grid-search runs");
  pretrain->add_option("--checkpoint", cfg.checkpoint_out, "Prior checkpoint output path");

  auto* eval = app.add_subcommand("eval", "Evaluate a model checkpoint");
  add_common(eval);
  eval->add_option("--checkpoint", cfg.prior_path, "Model checkpoint to evaluate");

  auto* selftest = app.add_subcommand("selftest", "Run built-in verification suites");
  selftest->add_option("--inject-fault", inject_fault,
                       "Flip the named backward rule's sign (verifies the suite catches it)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_name() == "CallForHelp" || e.get_name() == "CallForAllHelp" ||
        e.get_name() == "CallForVersion") {
      return app.exit(e);
    }
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (train->parsed()) return cmd_train(cfg);
    if (pretrain->parsed()) return cmd_pretrain(cfg);
    if (eval->parsed()) return cmd_eval(cfg);
    if (selftest->parsed()) return cmd_selftest(inject_fault);
    std::cerr << "usage error: no subcommand\n";
    return 2;
  } catch (const bil::ConfigError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const bil::IoError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const bil::FormatError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
