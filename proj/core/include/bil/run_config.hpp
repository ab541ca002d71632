#pragma once

#include <cstdint>
#include <string>

namespace bil {

/// Fully resolved settings of one CLI run. Defaults here are the tool's
/// contract: kl_scale (beta) 0.05 and 100 predictive samples.
struct RunConfig {
  std::string arch = "mlp:784-100-10";
  std::string family = "ffg";
  std::string dataset;       // "synthetic:blobs" | "synthetic:moons" | "idx:<images>,<labels>"
  std::string eval_dataset;  // optional "idx:<images>,<labels>"; synthetic eval is generated
  int T = 1;
  int epochs = 50;
  double beta = 0.05;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  int samples = 100;
  int batch_size = 128;
  int mc_samples = 1;
  int flow_depth = 2;
  bool early_stop = false;

  int synth_n = 3000;
  int synth_classes = 3;
  double synth_noise = 0.35;
  int synth_eval_n = 1000;

  std::string metrics_out = "metrics.csv";
  std::string metrics_format = "csv";  // csv | json
  std::string checkpoint_out;
  std::string prior_path;  // pretrained-prior checkpoint consumed by train

  // pretrain command
  std::string sigma_mode = "laplace";  // laplace | grid
  std::string grid;                    // comma-separated sigma^2 candidates
  int pretrain_epochs = 50;
  double weight_decay = 0.0;
  int grid_epochs = 10;
  int grid_T = 2;
};

}  // namespace bil
