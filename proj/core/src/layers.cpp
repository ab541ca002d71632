#include "bil/layers.hpp"

#include <cmath>

#include "bil/errors.hpp"

namespace bil {

std::string family_name(Family f) {
  switch (f) {
    case Family::FT: return "ft";
    case Family::FFG: return "ffg";
    case Family::CFG: return "cfg";
    case Family::MNF: return "mnf";
  }
  return "?";
}

Family family_from_string(const std::string& s) {
  if (s == "ft") return Family::FT;
  if (s == "ffg") return Family::FFG;
  if (s == "cfg") return Family::CFG;
  if (s == "mnf") return Family::MNF;
  throw ConfigError("unknown family '" + s + "' (expected ft|ffg|cfg|mnf)");
}

std::vector<int> BayesLayer::weight_shape() const {
  if (is_dense) return {in_dim, out_dim};
  return {conv.filters, conv.channels, conv.kh, conv.kw};
}

std::int64_t BayesLayer::weight_count() const { return shape_numel(weight_shape()); }

int BayesLayer::z_dim() const { return is_dense ? in_dim : conv.filters * conv.channels; }

namespace {

DiagGaussian init_bias(int n, Rng& rng) {
  // Biases start at zero mean with the same small initial sigma as weights.
  auto g = DiagGaussian::init({n}, 1.0, rng);
  std::fill(g.mu->data.begin(), g.mu->data.end(), 0.0);
  return g;
}

}  // namespace

BayesLayer BayesLayer::dense(int in, int out, Family f, Rng& rng, int flow_depth) {
  if (in <= 0 || out <= 0) throw ConfigError("dense layer dims must be positive");
  if (f == Family::CFG) {
    throw ConfigError("CFG requires convolutional layers (channel blocks are undefined for dense)");
  }
  BayesLayer l;
  l.is_dense = true;
  l.in_dim = in;
  l.out_dim = out;
  l.family = f;
  const double fan_in = in;
  if (f == Family::FT) {
    auto g = DiagGaussian::init({in, out}, fan_in, rng);
    l.point_w = Tensor::from({in, out}, g.mu->data, true);
    l.point_b = Tensor::zeros({out}, true);
    return l;
  }
  auto g = DiagGaussian::init({in, out}, fan_in, rng);
  l.w_mu = g.mu;
  l.w_rho = g.rho;
  auto b = init_bias(out, rng);
  l.b_mu = b.mu;
  l.b_rho = b.rho;
  if (f == Family::MNF) l.flow = FlowStack::init(in, flow_depth, rng);
  return l;
}

BayesLayer BayesLayer::conv2d(ConvDims dims, Family f, Rng& rng, int flow_depth) {
  if (dims.filters <= 0 || dims.channels <= 0 || dims.kh <= 0 || dims.kw <= 0) {
    throw ConfigError("conv layer dims must be positive");
  }
  BayesLayer l;
  l.is_dense = false;
  l.conv = dims;
  l.family = f;
  const double fan_in = static_cast<double>(dims.channels) * dims.kh * dims.kw;
  const std::vector<int> wshape{dims.filters, dims.channels, dims.kh, dims.kw};
  if (f == Family::FT) {
    auto g = DiagGaussian::init(wshape, fan_in, rng);
    l.point_w = Tensor::from(wshape, g.mu->data, true);
    l.point_b = Tensor::zeros({dims.filters}, true);
    return l;
  }
  auto g = DiagGaussian::init(wshape, fan_in, rng);
  l.w_mu = g.mu;
  if (f == Family::CFG) {
    const int d = dims.kh * dims.kw;
    const int packed = d * (d + 1) / 2;
    const int blocks = dims.filters * dims.channels;
    // Every block starts at covariance (init sigma)^2 I.
    std::vector<double> raw(static_cast<std::size_t>(blocks) * packed, 0.0);
    const double diag_raw = rho_for_sigma(0.05);
    for (int bidx = 0; bidx < blocks; ++bidx) {
      std::size_t at = static_cast<std::size_t>(bidx) * packed;
      for (int i = 0; i < d; ++i) {
        for (int j = 0; j <= i; ++j, ++at) {
          if (i == j) raw[at] = diag_raw;
        }
      }
    }
    l.l_raw = Tensor::from({blocks, packed}, std::move(raw), true);
  } else {
    l.w_rho = g.rho;
  }
  auto b = init_bias(dims.filters, rng);
  l.b_mu = b.mu;
  l.b_rho = b.rho;
  if (f == Family::MNF) l.flow = FlowStack::init(dims.filters * dims.channels, flow_depth, rng);
  return l;
}

std::vector<TensorPtr> BayesLayer::parameters() const {
  std::vector<TensorPtr> p;
  if (family == Family::FT) {
    p.push_back(point_w);
    p.push_back(point_b);
    return p;
  }
  p.push_back(w_mu);
  if (family == Family::CFG) {
    p.push_back(l_raw);
  } else {
    p.push_back(w_rho);
  }
  p.push_back(b_mu);
  p.push_back(b_rho);
  for (const auto& fl : flow.layers) {
    p.push_back(fl.u);
    p.push_back(fl.w);
    p.push_back(fl.b);
  }
  return p;
}

namespace {

TensorPtr require_noise(const TensorPtr& t, std::int64_t n, const char* what) {
  if (!t) throw ContractError(std::string("missing noise tensor: ") + what);
  if (t->size() != n) {
    throw DimensionError(std::string("noise tensor ") + what + " has length " +
                         std::to_string(t->size()) + ", expected " + std::to_string(n));
  }
  return t;
}

TensorPtr apply_dense(Tape& tape, const TensorPtr& input, const TensorPtr& W,
                      const TensorPtr& bias) {
  return ops::add_rowvec(tape, ops::matmul(tape, input, W), bias);
}

TensorPtr apply_conv(Tape& tape, const TensorPtr& input, const TensorPtr& K, const ConvDims& c,
                     const TensorPtr& bias) {
  return ops::add_channel_bias(tape, ops::conv2d(tape, input, K, c.stride, c.padding), bias);
}

TensorPtr sigma_of(Tape& tape, const TensorPtr& rho) {
  return ops::activation(tape, Act::Softplus, rho);
}

TensorPtr sample_bias(Tape& tape, const BayesLayer& layer, const NoiseSlot& noise) {
  auto eps = require_noise(noise.bias_eps, layer.bias_count(), "bias_eps");
  return dist::sample_reparam_diag(tape, layer.b_mu, sigma_of(tape, layer.b_rho), eps);
}

// Samples the full CFG kernel: one mu + L eps draw per (filter, channel) block.
TensorPtr sample_cfg_kernel(Tape& tape, const BayesLayer& layer, const TensorPtr& eps) {
  const int d = layer.block_dim();
  const int blocks = layer.block_count();
  const int packed = d * (d + 1) / 2;
  std::vector<TensorPtr> pieces;
  pieces.reserve(static_cast<std::size_t>(blocks));
  for (int bidx = 0; bidx < blocks; ++bidx) {
    auto raw = ops::slice_flat(tape, layer.l_raw, static_cast<std::int64_t>(bidx) * packed, packed);
    auto L = ops::chol_unpack(tape, raw, d);
    auto mu = ops::slice_flat(tape, layer.w_mu, static_cast<std::int64_t>(bidx) * d, d);
    auto e = ops::slice_flat(tape, eps, static_cast<std::int64_t>(bidx) * d, d);
    pieces.push_back(dist::sample_reparam_chol(tape, mu, L, e));
  }
  return ops::concat_flat(tape, pieces, layer.weight_shape());
}

TensorPtr local_reparam_dense(Tape& tape, const BayesLayer& layer, const TensorPtr& input,
                              const NoiseSlot& noise) {
  const int M = input->shape[0];
  auto eps = require_noise(noise.preact_eps, static_cast<std::int64_t>(M) * layer.out_dim,
                           "preact_eps");
  auto sw = sigma_of(tape, layer.w_rho);
  auto sb = sigma_of(tape, layer.b_rho);
  auto mean = ops::add_rowvec(tape, ops::matmul(tape, input, layer.w_mu), layer.b_mu);
  auto var = ops::add_rowvec(tape, ops::matmul(tape, ops::mul(tape, input, input),
                                               ops::mul(tape, sw, sw)),
                             ops::mul(tape, sb, sb));
  // std = exp(0.5 log var); var > 0 since bias sigma is strictly positive.
  auto std_dev = ops::activation(
      tape, Act::Exp, ops::mul_scalar(tape, ops::activation(tape, Act::Log, var), 0.5));
  return ops::add(tape, mean, ops::mul(tape, std_dev, eps));
}

}  // namespace

TensorPtr layer_forward(Tape& tape, const BayesLayer& layer, const TensorPtr& input,
                        const NoiseSlot& noise) {
  if (layer.is_dense) {
    if (input->shape.size() != 2 || input->shape[1] != layer.in_dim) {
      throw DimensionError("dense forward: input " + input->shape_str() + " vs in_dim " +
                           std::to_string(layer.in_dim));
    }
  } else if (input->shape.size() != 4 || input->shape[1] != layer.conv.channels) {
    throw DimensionError("conv forward: input " + input->shape_str() + " vs channels " +
                         std::to_string(layer.conv.channels));
  }

  switch (layer.family) {
    case Family::FT: {
      if (layer.is_dense) return apply_dense(tape, input, layer.point_w, layer.point_b);
      return apply_conv(tape, input, layer.point_w, layer.conv, layer.point_b);
    }
    case Family::FFG: {
      if (layer.is_dense && noise.preact_eps) {
        return local_reparam_dense(tape, layer, input, noise);
      }
      auto eps = require_noise(noise.weight_eps, layer.weight_count(), "weight_eps");
      auto W = dist::sample_reparam_diag(tape, layer.w_mu, sigma_of(tape, layer.w_rho), eps);
      auto bias = sample_bias(tape, layer, noise);
      if (layer.is_dense) return apply_dense(tape, input, W, bias);
      return apply_conv(tape, input, W, layer.conv, bias);
    }
    case Family::CFG: {
      auto eps = require_noise(noise.weight_eps,
                               static_cast<std::int64_t>(layer.block_count()) * layer.block_dim(),
                               "weight_eps");
      auto K = sample_cfg_kernel(tape, layer, eps);
      auto bias = sample_bias(tape, layer, noise);
      return apply_conv(tape, input, K, layer.conv, bias);
    }
    case Family::MNF: {
      auto z0 = require_noise(noise.z0, layer.z_dim(), "z0");
      auto fw = nf_forward(tape, layer.flow, z0);
      const std::int64_t group = layer.weight_count() / layer.z_dim();
      auto scaled_mu = ops::scale_rows(tape, layer.w_mu, fw.z, group);
      auto eps = require_noise(noise.weight_eps, layer.weight_count(), "weight_eps");
      auto W = dist::sample_reparam_diag(tape, scaled_mu, sigma_of(tape, layer.w_rho), eps);
      auto bias = sample_bias(tape, layer, noise);
      if (layer.is_dense) return apply_dense(tape, input, W, bias);
      return apply_conv(tape, input, W, layer.conv, bias);
    }
  }
  throw ContractError("layer_forward: unreachable family");
}

void check_congruent(const BayesLayer& layer, const LayerPrior& prior) {
  if (prior.family != layer.family) {
    throw StructureError("prior family " + family_name(prior.family) + " != layer family " +
                         family_name(layer.family));
  }
  if (prior.is_dense != layer.is_dense || prior.weight_shape != layer.weight_shape()) {
    throw StructureError("prior weight shape " + shape_to_string(prior.weight_shape) +
                         " != layer " + shape_to_string(layer.weight_shape()));
  }
  const auto wc = static_cast<std::size_t>(layer.weight_count());
  const auto bc = static_cast<std::size_t>(layer.bias_count());
  switch (layer.family) {
    case Family::FT:
      if (prior.point_w.size() != wc || prior.point_b.size() != bc) {
        throw StructureError("FT prior parameter counts do not match layer");
      }
      break;
    case Family::FFG:
    case Family::MNF:
      if (prior.w_mu.size() != wc || prior.w_sigma.size() != wc) {
        throw StructureError("prior Gaussian parameter counts do not match layer weights");
      }
      if (prior.b_mu.size() != bc || prior.b_sigma.size() != bc) {
        throw StructureError("prior bias parameter counts do not match layer");
      }
      if (layer.family == Family::MNF && prior.flow.dim != layer.z_dim()) {
        throw StructureError("prior flow dimension " + std::to_string(prior.flow.dim) +
                             " != layer z dim " + std::to_string(layer.z_dim()));
      }
      break;
    case Family::CFG: {
      const std::size_t d = static_cast<std::size_t>(layer.block_dim());
      const std::size_t expect = static_cast<std::size_t>(layer.block_count()) * d * d;
      if (prior.w_mu.size() != wc || prior.chol_l.size() != expect) {
        throw StructureError("CFG prior factor size " + std::to_string(prior.chol_l.size()) +
                             " != blocks*d*d = " + std::to_string(expect));
      }
      if (prior.b_mu.size() != bc || prior.b_sigma.size() != bc) {
        throw StructureError("prior bias parameter counts do not match layer");
      }
      break;
    }
  }
}

namespace {

TensorPtr const_tensor(const std::vector<int>& shape, const std::vector<double>& data) {
  return Tensor::from(shape, data, false);
}

TensorPtr bias_kl(Tape& tape, const BayesLayer& layer, const LayerPrior& prior) {
  auto sb = sigma_of(tape, layer.b_rho);
  auto pb_mu = const_tensor({layer.bias_count()}, prior.b_mu);
  auto pb_sigma = const_tensor({layer.bias_count()}, prior.b_sigma);
  return dist::kl_diag_diag(tape, layer.b_mu, sb, pb_mu, pb_sigma);
}

}  // namespace

TensorPtr mnf_joint_kl_estimate(Tape& tape, const BayesLayer& layer, const LayerPrior& prior,
                                const TensorPtr& z0) {
  if (layer.family != Family::MNF) {
    throw ContractError("mnf_joint_kl_estimate: layer family is " + family_name(layer.family));
  }
  check_congruent(layer, prior);
  if (prior.flow.dim != layer.z_dim()) {
    throw StructureError("prior snapshot lacks a flow of dimension " +
                         std::to_string(layer.z_dim()));
  }
  auto fw = nf_forward(tape, layer.flow, z0);

  // log q_t(z_hat) = log q0(z0) - sum log det (new flow).
  auto sq = ops::sum(tape, ops::mul(tape, z0, z0));
  const double log2pi = 1.8378770664093454835606594728112;
  auto base = ops::add_scalar(tape, ops::mul_scalar(tape, sq, -0.5),
                              -0.5 * log2pi * static_cast<double>(z0->size()));
  auto log_q_new = ops::sub(tape, base, fw.log_det_sum);

  // log q_{t-1}(z_hat): same-parameters stage start takes the exact shared-z0
  // route (bitwise cancellation); otherwise evaluate the frozen flow's density
  // at z_hat by numeric inversion.
  TensorPtr log_q_old;
  if (flows_equal(layer.flow, prior.flow)) {
    Tape frozen_tape(false);
    auto old_fw = nf_forward(frozen_tape, prior.flow, z0);
    auto old_base_sq = ops::sum(frozen_tape, ops::mul(frozen_tape, z0, z0));
    auto old_base = ops::add_scalar(frozen_tape, ops::mul_scalar(frozen_tape, old_base_sq, -0.5),
                                    -0.5 * log2pi * static_cast<double>(z0->size()));
    log_q_old = ops::sub(frozen_tape, old_base, old_fw.log_det_sum);
  } else {
    log_q_old = frozen_flow_log_density(tape, prior.flow, fw.z);
  }

  // Sum_ij [ cross_entropy(q_ij, prior_ij | z_i) - entropy(q_ij) ], composed
  // termwise so the self-prior case cancels exactly:
  //   (log sigma_t - log sigma) + (sigma^2 + z_i^2 (mu - mu_t)^2) / (2 sigma_t^2) - 1/2.
  auto sigma = sigma_of(tape, layer.w_rho);
  auto p_mu = const_tensor(layer.weight_shape(), prior.w_mu);
  auto p_sigma = const_tensor(layer.weight_shape(), prior.w_sigma);
  const std::int64_t group = layer.weight_count() / layer.z_dim();
  auto diff = ops::sub(tape, layer.w_mu, p_mu);
  auto scaled = ops::scale_rows(tape, diff, fw.z, group);
  auto num = ops::add(tape, ops::mul(tape, sigma, sigma), ops::mul(tape, scaled, scaled));
  auto den = ops::mul_scalar(tape, ops::mul(tape, p_sigma, p_sigma), 2.0);
  auto log_ratio = ops::sub(tape, ops::activation(tape, Act::Log, p_sigma),
                            ops::activation(tape, Act::Log, sigma));
  auto per = ops::add_scalar(tape, ops::add(tape, log_ratio, ops::div(tape, num, den)), -0.5);
  auto ce_minus_h = ops::sum(tape, per);

  return ops::add(tape, ce_minus_h, ops::sub(tape, log_q_new, log_q_old));
}

TensorPtr layer_kl(Tape& tape, const BayesLayer& layer, const LayerPrior& prior,
                   const NoiseSlot& noise) {
  check_congruent(layer, prior);
  switch (layer.family) {
    case Family::FT:
      return Tensor::scalar(0.0);
    case Family::FFG: {
      auto sw = sigma_of(tape, layer.w_rho);
      auto p_mu = const_tensor(layer.weight_shape(), prior.w_mu);
      auto p_sigma = const_tensor(layer.weight_shape(), prior.w_sigma);
      auto kl_w = dist::kl_diag_diag(tape, layer.w_mu, sw, p_mu, p_sigma);
      return ops::add(tape, kl_w, bias_kl(tape, layer, prior));
    }
    case Family::CFG: {
      const int d = layer.block_dim();
      const int packed = d * (d + 1) / 2;
      TensorPtr acc = Tensor::scalar(0.0);
      for (int bidx = 0; bidx < layer.block_count(); ++bidx) {
        auto raw = ops::slice_flat(tape, layer.l_raw,
                                   static_cast<std::int64_t>(bidx) * packed, packed);
        auto Lq = ops::chol_unpack(tape, raw, d);
        auto mu_q = ops::slice_flat(tape, layer.w_mu, static_cast<std::int64_t>(bidx) * d, d);
        auto mu_p = const_tensor({d}, std::vector<double>(
                                          prior.w_mu.begin() + static_cast<std::ptrdiff_t>(bidx) * d,
                                          prior.w_mu.begin() +
                                              static_cast<std::ptrdiff_t>(bidx + 1) * d));
        auto Lp = const_tensor({d, d},
                               std::vector<double>(
                                   prior.chol_l.begin() + static_cast<std::ptrdiff_t>(bidx) * d * d,
                                   prior.chol_l.begin() +
                                       static_cast<std::ptrdiff_t>(bidx + 1) * d * d));
        acc = ops::add(tape, acc, dist::kl_chol_chol(tape, mu_q, Lq, mu_p, Lp));
      }
      return ops::add(tape, acc, bias_kl(tape, layer, prior));
    }
    case Family::MNF: {
      auto z0 = require_noise(noise.z0, layer.z_dim(), "z0");
      auto joint = mnf_joint_kl_estimate(tape, layer, prior, z0);
      return ops::add(tape, joint, bias_kl(tape, layer, prior));
    }
  }
  throw ContractError("layer_kl: unreachable family");
}

LayerPrior snapshot_layer(const BayesLayer& layer) {
  LayerPrior p;
  p.family = layer.family;
  p.is_dense = layer.is_dense;
  p.weight_shape = layer.weight_shape();
  if (layer.family == Family::FT) {
    p.point_w = layer.point_w->data;
    p.point_b = layer.point_b->data;
    return p;
  }
  p.w_mu = layer.w_mu->data;
  if (layer.family == Family::CFG) {
    const int d = layer.block_dim();
    const int packed = d * (d + 1) / 2;
    p.chol_l.assign(static_cast<std::size_t>(layer.block_count()) * d * d, 0.0);
    for (int bidx = 0; bidx < layer.block_count(); ++bidx) {
      std::size_t at = static_cast<std::size_t>(bidx) * packed;
      for (int i = 0; i < d; ++i) {
        for (int j = 0; j <= i; ++j, ++at) {
          const double raw = layer.l_raw->data[at];
          p.chol_l[static_cast<std::size_t>(bidx) * d * d + static_cast<std::size_t>(i) * d + j] =
              (i == j) ? softplus(raw) : raw;
        }
      }
    }
  } else {
    p.w_sigma.resize(layer.w_rho->data.size());
    for (std::size_t i = 0; i < p.w_sigma.size(); ++i) {
      p.w_sigma[i] = softplus(layer.w_rho->data[i]);
    }
  }
  p.b_mu = layer.b_mu->data;
  p.b_sigma.resize(layer.b_rho->data.size());
  for (std::size_t i = 0; i < p.b_sigma.size(); ++i) {
    p.b_sigma[i] = softplus(layer.b_rho->data[i]);
  }
  if (layer.family == Family::MNF) p.flow = layer.flow.frozen_copy();
  return p;
}

LayerPrior standard_normal_prior(const BayesLayer& layer) {
  LayerPrior p;
  p.family = layer.family;
  p.is_dense = layer.is_dense;
  p.weight_shape = layer.weight_shape();
  const auto wc = static_cast<std::size_t>(layer.weight_count());
  const auto bc = static_cast<std::size_t>(layer.bias_count());
  if (layer.family == Family::FT) {
    p.point_w.assign(wc, 0.0);
    p.point_b.assign(bc, 0.0);
    return p;
  }
  p.w_mu.assign(wc, 0.0);
  if (layer.family == Family::CFG) {
    const int d = layer.block_dim();
    p.chol_l.assign(static_cast<std::size_t>(layer.block_count()) * d * d, 0.0);
    for (int bidx = 0; bidx < layer.block_count(); ++bidx) {
      for (int i = 0; i < d; ++i) {
        p.chol_l[static_cast<std::size_t>(bidx) * d * d + static_cast<std::size_t>(i) * d + i] =
            1.0;
      }
    }
  } else {
    p.w_sigma.assign(wc, 1.0);
  }
  p.b_mu.assign(bc, 0.0);
  p.b_sigma.assign(bc, 1.0);
  if (layer.family == Family::MNF) {
    p.flow.dim = layer.z_dim();  // empty stack: standard-normal z
  }
  return p;
}

}  // namespace bil
