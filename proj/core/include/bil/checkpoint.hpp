#pragma once

#include <map>
#include <string>
#include <vector>

#include "bil/model.hpp"

namespace bil {
namespace ckpt {

/// Manifest-side metadata of a model checkpoint.
struct ModelInfo {
  int stage_index = 0;
  std::uint64_t seed = 0;
  double kl_scale = 1.0;
  std::map<std::string, double> metrics_summary;  // e.g. final accuracy / nll
};

/// Checkpoint file: magic, manifest length, JSON manifest, then a blob of raw
/// little-endian 64-bit floats in manifest-declared order. save -> load ->
/// save is byte-identical.
void save_model(const std::string& path, const BayesModel& model, const ModelInfo& info);

struct LoadedModel {
  BayesModel model;
  ModelInfo info;
};
LoadedModel load_model(const std::string& path);

/// Pretrained-prior payload: the FT point weights w*, per-parameter sigma^2
/// arrays, and which layers transfer.
struct PriorInfo {
  std::string sigma_mode = "laplace";  // laplace | grid | fixed
  double chosen_sigma2 = 0.0;          // scalar modes; 0 when per-weight
  std::uint64_t seed = 0;
};

void save_prior(const std::string& path, const BayesModel& w_star,
                const std::vector<std::vector<double>>& sigma2_per_param,
                const std::vector<bool>& transfer_mask, const PriorInfo& info);

struct LoadedPrior {
  BayesModel w_star;
  std::vector<std::vector<double>> sigma2_per_param;
  std::vector<bool> transfer_mask;
  PriorInfo info;
};
LoadedPrior load_prior(const std::string& path);

/// Kind of payload stored at `path` ("model" or "prior").
std::string peek_kind(const std::string& path);

}  // namespace ckpt
}  // namespace bil
