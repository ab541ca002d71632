#include "bil/selfcheck.hpp"

#include <cmath>
#include <sstream>

#include "bil/distributions.hpp"
#include "bil/flow.hpp"
#include "bil/layers.hpp"
#include "bil/model.hpp"
#include "bil/trainer.hpp"

namespace bil {

namespace {

constexpr double kGradTol = 1e-4;
constexpr double kEps = 1e-5;

TensorPtr rand_tensor(std::vector<int> shape, Rng& rng, bool rg, double lo = -2.0,
                      double hi = 2.0) {
  auto n = shape_numel(shape);
  std::vector<double> data(static_cast<std::size_t>(n));
  for (auto& v : data) v = lo + (hi - lo) * rng.uniform();
  return Tensor::from(std::move(shape), std::move(data), rg);
}

CheckResult grad_result(const std::string& suite, const std::string& name, double err,
                        double tol = kGradTol) {
  std::ostringstream os;
  os << "max rel err " << err << " (tol " << tol << ")";
  return CheckResult{suite, name, err < tol, os.str()};
}

CheckResult bool_result(const std::string& suite, const std::string& name, bool pass,
                        const std::string& detail) {
  return CheckResult{suite, name, pass, detail};
}

// Weighted-sum readout so gradient defects in any coordinate are visible.
TensorPtr readout(Tape& tape, const TensorPtr& x, const TensorPtr& weights) {
  return ops::sum(tape, ops::mul(tape, x, weights));
}

double checked(const std::function<TensorPtr(Tape&)>& f, const std::vector<TensorPtr>& params) {
  return grad_check(f, params, kEps);
}

std::vector<double> flow_forward_values(const FlowStack& flow, const std::vector<double>& z0) {
  Tape tape(false);
  auto z0t = Tensor::from({static_cast<int>(z0.size())}, z0);
  return nf_forward(tape, flow, z0t).z->data;
}

double flow_logdet_value(const FlowStack& flow, const std::vector<double>& z0) {
  Tape tape(false);
  auto z0t = Tensor::from({static_cast<int>(z0.size())}, z0);
  return nf_forward(tape, flow, z0t).log_det_sum->data[0];
}

double det_small(std::vector<std::vector<double>> a) {
  const std::size_t d = a.size();
  double det = 1.0;
  for (std::size_t c = 0; c < d; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < d; ++r) {
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    }
    if (a[piv][c] == 0.0) return 0.0;
    if (piv != c) {
      std::swap(a[piv], a[c]);
      det = -det;
    }
    det *= a[c][c];
    for (std::size_t r = c + 1; r < d; ++r) {
      const double f = a[r][c] / a[c][c];
      for (std::size_t k = c; k < d; ++k) a[r][k] -= f * a[c][k];
    }
  }
  return det;
}

double adaptive_simpson(const std::function<double(double)>& f, double a, double b, double fa,
                        double fb, double fm, double whole, double tol, int depth) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  if (depth <= 0 || std::abs(left + right - whole) < 15.0 * tol) {
    return left + right + (left + right - whole) / 15.0;
  }
  return adaptive_simpson(f, a, m, fa, fm, flm, left, tol * 0.5, depth - 1) +
         adaptive_simpson(f, m, b, fm, fb, frm, right, tol * 0.5, depth - 1);
}

double integrate(const std::function<double(double)>& f, double a, double b, double tol) {
  const double m = 0.5 * (a + b);
  const double fa = f(a), fb = f(b), fm = f(m);
  const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
  return adaptive_simpson(f, a, b, fa, fb, fm, whole, tol, 40);
}

void op_checks(std::vector<CheckResult>& out) {
  const std::string suite = "gradient";
  Rng rng(20240601);

  {  // matmul
    auto a = rand_tensor({3, 4}, rng, true);
    auto b = rand_tensor({4, 2}, rng, true);
    auto w = rand_tensor({3, 2}, rng, false);
    out.push_back(grad_result(suite, "op matmul", checked([&](Tape& t) {
      return readout(t, ops::matmul(t, a, b), w);
    }, {a, b})));
  }
  {  // conv2d
    auto x = rand_tensor({2, 2, 5, 5}, rng, true);
    auto k = rand_tensor({3, 2, 3, 3}, rng, true);
    auto w = rand_tensor({2, 3, 5, 5}, rng, false);
    out.push_back(grad_result(suite, "op conv2d", checked([&](Tape& t) {
      return readout(t, ops::conv2d(t, x, k, 1, 1), w);
    }, {x, k})));
  }
  {  // maxpool (random continuous values keep the argmax stable under +-eps)
    auto x = rand_tensor({1, 2, 6, 6}, rng, true);
    auto w = rand_tensor({1, 2, 3, 3}, rng, false);
    out.push_back(grad_result(suite, "op maxpool2d", checked([&](Tape& t) {
      return readout(t, ops::maxpool2d(t, x, 2, 2, 0), w);
    }, {x})));
  }
  const struct {
    Act kind;
    double lo, hi;
    const char* name;
  } acts[] = {{Act::Relu, 0.1, 2.0, "op relu"},
              {Act::Tanh, -2.0, 2.0, "op tanh"},
              {Act::Softplus, -2.0, 2.0, "op softplus"},
              {Act::Exp, -2.0, 2.0, "op exp"},
              {Act::Log, 0.2, 2.0, "op log"}};
  for (const auto& a : acts) {
    auto x = rand_tensor({8}, rng, true, a.lo, a.hi);
    auto w = rand_tensor({8}, rng, false);
    out.push_back(grad_result(suite, a.name, checked([&, kind = a.kind](Tape& t) {
      return readout(t, ops::activation(t, kind, x), w);
    }, {x})));
  }
  {  // log_softmax_nll
    auto logits = rand_tensor({4, 5}, rng, true);
    const std::vector<int> labels{0, 3, 2, 4};
    out.push_back(grad_result(suite, "op log_softmax_nll", checked([&](Tape& t) {
      return ops::log_softmax_nll(t, logits, labels);
    }, {logits})));
  }
  {  // elementwise and structural combo
    auto a = rand_tensor({6}, rng, true);
    auto b = rand_tensor({6}, rng, true, 0.5, 2.0);
    auto w = rand_tensor({6}, rng, false);
    out.push_back(grad_result(suite, "op elementwise(add/mul/div/sub)", checked([&](Tape& t) {
      auto e = ops::div(t, ops::mul(t, a, b), ops::add_scalar(t, ops::mul(t, b, b), 0.7));
      return readout(t, ops::sub(t, e, a), w);
    }, {a, b})));
  }
  {  // axpy + dot + scale_rows + slices
    auto y = rand_tensor({5}, rng, true);
    auto x = rand_tensor({5}, rng, true);
    auto s = rand_tensor({10}, rng, true);
    auto w = rand_tensor({5}, rng, false);
    out.push_back(grad_result(suite, "op axpy/dot/scale_rows/slice", checked([&](Tape& t) {
      auto s_head = ops::slice_flat(t, s, 0, 5);
      auto s_tail = ops::slice_flat(t, s, 5, 5);
      auto coef = ops::dot(t, s_head, x);
      auto z = ops::axpy(t, y, x, coef);
      auto scaled = ops::scale_rows(t, ops::concat_flat(t, {z, y}, {10}), s_tail, 2);
      return readout(t, ops::slice_flat(t, scaled, 2, 5), w);
    }, {y, x, s})));
  }
}

void distribution_checks(std::vector<CheckResult>& out) {
  const std::string suite = "gradient";
  Rng rng(77002);
  {  // kl_diag_diag through mu and rho
    auto mu = rand_tensor({5}, rng, true, -1.0, 1.0);
    auto rho = rand_tensor({5}, rng, true, -2.0, 1.0);
    auto mu_p = rand_tensor({5}, rng, false, -1.0, 1.0);
    auto sig_p = rand_tensor({5}, rng, false, 0.4, 1.5);
    out.push_back(grad_result(suite, "closed form kl_diag_diag", checked([&](Tape& t) {
      auto sigma = ops::activation(t, Act::Softplus, rho);
      return dist::kl_diag_diag(t, mu, sigma, mu_p, sig_p);
    }, {mu, rho})));
  }
  {  // kl_chol_chol through mu and packed factor
    const int d = 3;
    auto g = CholGaussian::init(d, 2.0, rng, 0.5);
    for (auto& v : g.l_raw->data) v += 0.3 * (rng.uniform() - 0.5);
    auto mu_p = rand_tensor({d}, rng, false, -1.0, 1.0);
    auto lp_raw = rand_tensor({d * (d + 1) / 2}, rng, false, 0.2, 0.9);
    out.push_back(grad_result(suite, "closed form kl_chol_chol", checked([&](Tape& t) {
      auto Lq = ops::chol_unpack(t, g.l_raw, d);
      auto Lp = ops::chol_unpack(t, lp_raw, d);
      return dist::kl_chol_chol(t, g.mu, Lq, mu_p, Lp);
    }, {g.mu, g.l_raw})));
  }
  {  // entropy and scaled cross-entropy
    auto rho = rand_tensor({4}, rng, true, -1.5, 1.0);
    auto mu = rand_tensor({4}, rng, true, -1.0, 1.0);
    auto mu_t = rand_tensor({4}, rng, false, -1.0, 1.0);
    auto sig_t = rand_tensor({4}, rng, false, 0.5, 1.5);
    auto z = rand_tensor({2}, rng, true, -1.5, 1.5);
    out.push_back(grad_result(suite, "closed form entropy/cross-entropy", checked([&](Tape& t) {
      auto sigma = ops::activation(t, Act::Softplus, rho);
      auto h = dist::entropy_diag(t, sigma);
      auto ce = dist::cross_entropy_scaled(t, mu, sigma, mu_t, sig_t, z, 2);
      return ops::add(t, ce, h);
    }, {mu, rho, z})));
  }
}

void flow_grad_checks(std::vector<CheckResult>& out) {
  const std::string suite = "gradient";
  Rng rng(31007);
  const int d = 3;
  auto flow = FlowStack::init(d, 2, rng, 0.5);
  auto z0 = rand_tensor({d}, rng, true, -1.0, 1.0);
  std::vector<TensorPtr> params{z0};
  for (const auto& l : flow.layers) {
    params.push_back(l.u);
    params.push_back(l.w);
    params.push_back(l.b);
  }
  auto w = rand_tensor({d}, rng, false);
  out.push_back(grad_result(suite, "flow nf_forward", checked([&](Tape& t) {
    auto fw = nf_forward(t, flow, z0);
    return ops::add(t, readout(t, fw.z, w), fw.log_det_sum);
  }, params)));
  out.push_back(grad_result(suite, "flow nf_log_density", checked([&](Tape& t) {
    auto fd = nf_log_density(t, flow, z0);
    return ops::add(t, readout(t, fd.z, w), fd.log_q);
  }, params)));

  Rng rng2(995511);
  auto old_flow = FlowStack::init(d, 2, rng2, 0.4).frozen_copy();
  auto z_hat = rand_tensor({d}, rng2, true, -1.0, 1.0);
  out.push_back(grad_result(suite, "flow frozen density (inverse route)", checked([&](Tape& t) {
    return frozen_flow_log_density(t, old_flow, z_hat);
  }, {z_hat})));
}

void layer_and_elbo_checks(std::vector<CheckResult>& out) {
  const std::string suite = "gradient";

  struct Case {
    const char* name;
    std::string arch;
    Family family;
  };
  const Case cases[] = {
      {"family ffg (dense)", "mlp:3-4-3", Family::FFG},
      {"family mnf (dense)", "mlp:3-4-3", Family::MNF},
      {"family ft (dense)", "mlp:3-4-3", Family::FT},
  };
  for (const auto& c : cases) {
    Rng rng(4242);
    auto model = BayesModel::build(Architecture::parse(c.arch), c.family, rng, 2);
    auto prior_src = BayesModel::build(Architecture::parse(c.arch), c.family, rng, 2);
    auto prior = prior_src.snapshot();
    Rng noise_rng(17);
    auto noise = model.draw_noise(noise_rng);
    auto x = rand_tensor({4, 3}, rng, false, -1.0, 1.0);
    const std::vector<int> labels{0, 1, 2, 1};
    out.push_back(grad_result(suite, std::string(c.name) + " elbo", checked([&](Tape& t) {
      auto logits = model.forward(t, x, noise);
      auto nll = ops::log_softmax_nll(t, logits, labels);
      auto kl = model.kl(t, prior, noise);
      return ops::add(t, ops::mul_scalar(t, nll, 40.0), kl);
    }, model.parameters())));
  }

  {  // conv model with CFG (conv blocks + dense FFG head) and with MNF
    for (Family fam : {Family::CFG, Family::MNF, Family::FFG}) {
      Rng rng(555);
      Architecture arch;
      arch.name = "tinyconv";
      arch.input_shape = {2, 5, 5};
      arch.num_classes = 3;
      {
        ArchBlock conv;
        conv.type = ArchBlock::Type::Conv;
        conv.conv = ConvDims{3, 2, 3, 3, 1, 0};
        ArchBlock relu;
        relu.type = ArchBlock::Type::Relu;
        ArchBlock pool;
        pool.type = ArchBlock::Type::MaxPool;
        pool.pool_window = 3;
        pool.pool_stride = 1;
        ArchBlock flat;
        flat.type = ArchBlock::Type::Flatten;
        ArchBlock densez;
        densez.type = ArchBlock::Type::Dense;
        densez.dense_in = 3;
        densez.dense_out = 3;
        arch.blocks = {conv, relu, pool, flat, densez};
      }
      auto model = BayesModel::build(arch, fam, rng, 2);
      auto prior_src = BayesModel::build(arch, fam, rng, 2);
      auto prior = prior_src.snapshot();
      Rng noise_rng(18);
      auto noise = model.draw_noise(noise_rng);
      auto x = rand_tensor({2, 2, 5, 5}, rng, false, -1.0, 1.0);
      const std::vector<int> labels{0, 2};
      out.push_back(grad_result(
          suite, "family " + family_name(fam) + " (conv) elbo", checked([&](Tape& t) {
            auto logits = model.forward(t, x, noise);
            auto nll = ops::log_softmax_nll(t, logits, labels);
            auto kl = model.kl(t, prior, noise);
            return ops::add(t, ops::mul_scalar(t, nll, 20.0), kl);
          }, model.parameters())));
    }
  }

  {  // the full ELBO through the trainer entry point, frozen by reseeding
    for (Family fam : {Family::FFG, Family::MNF}) {
      Rng rng(2024);
      auto model = BayesModel::build(Architecture::parse("mlp:3-4-3"), fam, rng, 2);
      auto prior_src = BayesModel::build(Architecture::parse("mlp:3-4-3"), fam, rng, 2);
      auto prior = prior_src.snapshot();
      Batch batch{rand_tensor({4, 3}, rng, false, -1.0, 1.0), {0, 1, 2, 1}};
      ElboConfig cfg;
      cfg.kl_scale = 0.31;
      cfg.mc_samples = 2;
      cfg.dataset_size = 40;
      cfg.batch_size = 4;
      out.push_back(grad_result(
          suite, "full elbo_minibatch (" + family_name(fam) + ")", checked([&](Tape& t) {
            Rng noise(777);
            return elbo_minibatch(t, model, batch, prior, cfg, noise).loss;
          }, model.parameters())));
    }
  }

  {  // local reparameterization path for dense FFG
    Rng rng(909);
    auto model = BayesModel::build(Architecture::parse("mlp:3-4-3"), Family::FFG, rng, 2);
    // Moderate sigma keeps the 1/sqrt(var) factor well conditioned for the
    // central-difference probe; the code path is identical.
    for (auto& l : model.layers) {
      for (auto& v : l.w_rho->data) v = rho_for_sigma(0.4 + 0.2 * rng.uniform());
      for (auto& v : l.b_rho->data) v = rho_for_sigma(0.4 + 0.2 * rng.uniform());
    }
    Rng noise_rng(19);
    auto noise = model.draw_noise(noise_rng);
    noise.slots[0].preact_eps = rand_tensor({4, 4}, noise_rng, false, -1.0, 1.0);
    auto x = rand_tensor({4, 3}, rng, false, -1.0, 1.0);
    const std::vector<int> labels{0, 1, 2, 1};
    out.push_back(grad_result(suite, "family ffg local reparameterization", checked([&](Tape& t) {
      auto logits = model.forward(t, x, noise);
      return ops::log_softmax_nll(t, logits, labels);
    }, model.parameters())));
  }
}

void kl_oracle_checks(std::vector<CheckResult>& out) {
  const std::string suite = "kl-oracle";
  constexpr int kSamples = 200000;
  Rng rng(60301);

  {  // diag pairs vs Monte Carlo
    bool all = true;
    std::ostringstream detail;
    for (int rep = 0; rep < 5; ++rep) {
      const int n = 4;
      std::vector<double> mu_q(n), sq(n), mu_p(n), sp(n);
      for (int i = 0; i < n; ++i) {
        mu_q[i] = rng.normal(0.0, 1.0);
        mu_p[i] = rng.normal(0.0, 1.0);
        sq[i] = 0.3 + rng.uniform();
        sp[i] = 0.3 + rng.uniform();
      }
      Tape t(false);
      auto analytic = dist::kl_diag_diag(t, Tensor::from({n}, mu_q), Tensor::from({n}, sq),
                                         Tensor::from({n}, mu_p), Tensor::from({n}, sp))
                          ->value();
      double mean = 0.0, msq = 0.0;
      for (int s = 0; s < kSamples; ++s) {
        double rel = 0.0;
        for (int i = 0; i < n; ++i) {
          const double w = mu_q[i] + sq[i] * rng.normal();
          const double dq = (w - mu_q[i]) / sq[i], dp = (w - mu_p[i]) / sp[i];
          rel += -std::log(sq[i]) - 0.5 * dq * dq + std::log(sp[i]) + 0.5 * dp * dp;
        }
        mean += rel;
        msq += rel * rel;
      }
      mean /= kSamples;
      const double var = msq / kSamples - mean * mean;
      const double se = std::sqrt(std::max(var, 1e-30) / kSamples);
      if (std::abs(mean - analytic) > 3.0 * se) {
        all = false;
        detail << "pair " << rep << " off by " << std::abs(mean - analytic) << " > 3se=" << 3 * se
               << "; ";
      }
    }
    out.push_back(bool_result(suite, "kl_diag_diag vs Monte Carlo", all,
                              all ? "5 random pairs within 3 standard errors" : detail.str()));
  }

  {  // chol pairs vs Monte Carlo (d=3)
    bool all = true;
    std::ostringstream detail;
    const int d = 3;
    for (int rep = 0; rep < 3; ++rep) {
      std::vector<double> mu_q(d), mu_p(d);
      std::vector<double> Lq(static_cast<std::size_t>(d) * d, 0.0),
          Lp(static_cast<std::size_t>(d) * d, 0.0);
      for (int i = 0; i < d; ++i) {
        mu_q[i] = rng.normal(0.0, 1.0);
        mu_p[i] = rng.normal(0.0, 1.0);
        for (int j = 0; j < i; ++j) {
          Lq[i * d + j] = 0.4 * rng.normal();
          Lp[i * d + j] = 0.4 * rng.normal();
        }
        Lq[i * d + i] = 0.5 + rng.uniform();
        Lp[i * d + i] = 0.5 + rng.uniform();
      }
      Tape t(false);
      auto analytic =
          dist::kl_chol_chol(t, Tensor::from({d}, mu_q), Tensor::from({d, d}, Lq),
                             Tensor::from({d}, mu_p), Tensor::from({d, d}, Lp))
              ->value();
      double logdet_q = 0.0, logdet_p = 0.0;
      for (int i = 0; i < d; ++i) {
        logdet_q += std::log(Lq[i * d + i]);
        logdet_p += std::log(Lp[i * d + i]);
      }
      double mean = 0.0, msq = 0.0;
      std::vector<double> eps(d), w(d), y(d);
      for (int s = 0; s < kSamples; ++s) {
        for (auto& e : eps) e = rng.normal();
        for (int i = 0; i < d; ++i) {
          w[i] = mu_q[i];
          for (int j = 0; j <= i; ++j) w[i] += Lq[i * d + j] * eps[j];
        }
        // log q - log p; the shared Gaussian constant cancels.
        double lq = -logdet_q;
        for (int i = 0; i < d; ++i) lq -= 0.5 * eps[i] * eps[i];
        for (int i = 0; i < d; ++i) {
          double acc = w[i] - mu_p[i];
          for (int j = 0; j < i; ++j) acc -= Lp[i * d + j] * y[j];
          y[i] = acc / Lp[i * d + i];
        }
        double lp = -logdet_p;
        for (int i = 0; i < d; ++i) lp -= 0.5 * y[i] * y[i];
        const double rel = lq - lp;
        mean += rel;
        msq += rel * rel;
      }
      mean /= kSamples;
      const double var = msq / kSamples - mean * mean;
      const double se = std::sqrt(std::max(var, 1e-30) / kSamples);
      if (std::abs(mean - analytic) > 3.0 * se) {
        all = false;
        detail << "pair " << rep << " off by " << std::abs(mean - analytic) << "; ";
      }
    }
    out.push_back(bool_result(suite, "kl_chol_chol vs Monte Carlo", all,
                              all ? "3 random pairs (d=3) within 3 standard errors"
                                  : detail.str()));
  }

  {  // exact self-KL
    const int n = 6;
    std::vector<double> mu(n), sigma(n);
    for (int i = 0; i < n; ++i) {
      mu[i] = rng.normal(0.0, 1.0);
      sigma[i] = 0.2 + rng.uniform();
    }
    Tape t(false);
    const double v = dist::kl_diag_diag(t, Tensor::from({n}, mu), Tensor::from({n}, sigma),
                                        Tensor::from({n}, mu), Tensor::from({n}, sigma))
                         ->value();
    const int d = 3;
    std::vector<double> L(static_cast<std::size_t>(d) * d, 0.0), mu3(d);
    for (int i = 0; i < d; ++i) {
      mu3[i] = rng.normal();
      L[i * d + i] = 0.5 + rng.uniform();
      for (int j = 0; j < i; ++j) L[i * d + j] = rng.normal(0.0, 0.3);
    }
    Tape t2(false);
    const double v2 = dist::kl_chol_chol(t2, Tensor::from({d}, mu3), Tensor::from({d, d}, L),
                                         Tensor::from({d}, mu3), Tensor::from({d, d}, L))
                          ->value();
    out.push_back(bool_result(suite, "self-KL exactly zero", v == 0.0 && v2 == 0.0,
                              "diag " + std::to_string(v) + ", chol " + std::to_string(v2)));
  }

  {  // MNF joint estimate: zero per-sample at the self-prior
    Rng lr(8899);
    auto layer = BayesLayer::dense(3, 2, Family::MNF, lr, 2);
    auto prior = snapshot_layer(layer);
    bool all = true;
    double worst = 0.0;
    for (int s = 0; s < 20; ++s) {
      auto z0 = Tensor::from({3}, lr.normal_vec(3));
      Tape t;
      const double v = mnf_joint_kl_estimate(t, layer, prior, z0)->value();
      worst = std::max(worst, std::abs(v));
      if (v != 0.0) all = false;
    }
    out.push_back(bool_result(suite, "mnf joint KL self-prior exact zero", all,
                              "worst |estimate| = " + std::to_string(worst)));
  }
}

void flow_checks(std::vector<CheckResult>& out) {
  const std::string suite = "flow";
  Rng rng(7161);

  {  // log-det vs numeric Jacobian
    bool all = true;
    std::ostringstream detail;
    for (int d : {1, 2, 3, 4}) {
      auto flow = FlowStack::init(d, 2, rng, 0.6);
      std::vector<double> z0(static_cast<std::size_t>(d));
      for (auto& v : z0) v = rng.normal();
      const double h = 1e-6;
      std::vector<std::vector<double>> J(static_cast<std::size_t>(d),
                                         std::vector<double>(static_cast<std::size_t>(d)));
      for (int j = 0; j < d; ++j) {
        auto zp = z0, zm = z0;
        zp[static_cast<std::size_t>(j)] += h;
        zm[static_cast<std::size_t>(j)] -= h;
        const auto fp = flow_forward_values(flow, zp);
        const auto fm = flow_forward_values(flow, zm);
        for (int i = 0; i < d; ++i) {
          J[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
              (fp[static_cast<std::size_t>(i)] - fm[static_cast<std::size_t>(i)]) / (2.0 * h);
        }
      }
      const double logdet_num = std::log(std::abs(det_small(J)));
      const double logdet_ad = flow_logdet_value(flow, z0);
      if (std::abs(logdet_num - logdet_ad) > 1e-5) {
        all = false;
        detail << "d=" << d << " gap " << std::abs(logdet_num - logdet_ad) << "; ";
      }
    }
    out.push_back(bool_result(suite, "log-det matches numeric Jacobian", all,
                              all ? "d in {1,2,3,4} within 1e-5" : detail.str()));
  }

  {  // pushforward density integrates to 1 (d = 1)
    auto flow = FlowStack::init(1, 2, rng, 0.8);
    const double integral = integrate(
        [&](double z) { return std::exp(flow_log_density_at(flow, {z})); }, -10.0, 10.0, 1e-7);
    out.push_back(bool_result(suite, "pushforward density integrates to 1",
                              std::abs(integral - 1.0) < 1e-3,
                              "integral = " + std::to_string(integral)));
  }

  {  // invertibility constraint sweep
    bool ok = true;
    double worst = 1.0;
    for (int rep = 0; rep < 10000; ++rep) {
      const int d = 3;
      auto u = rand_tensor({d}, rng, false, -3.0, 3.0);
      auto w = rand_tensor({d}, rng, false, -3.0, 3.0);
      Tape t(false);
      auto uh = nf_enforce_invertible(t, u, w);
      double dotv = 0.0;
      for (int i = 0; i < d; ++i) dotv += uh->data[static_cast<std::size_t>(i)] *
                                          w->data[static_cast<std::size_t>(i)];
      worst = std::min(worst, dotv);
      if (dotv < -1.0) ok = false;
    }
    out.push_back(bool_result(suite, "u_hat . w >= -1 for 1e4 random layers", ok,
                              "min u_hat.w = " + std::to_string(worst)));
  }

  {  // inversion round trip
    const int d = 4;
    auto flow = FlowStack::init(d, 3, rng, 0.7);
    bool ok = true;
    double worst = 0.0;
    for (int rep = 0; rep < 50; ++rep) {
      std::vector<double> z0(static_cast<std::size_t>(d));
      for (auto& v : z0) v = rng.normal();
      const auto z = flow_forward_values(flow, z0);
      const auto back = flow_invert(flow, z);
      for (int i = 0; i < d; ++i) {
        worst = std::max(worst, std::abs(back[static_cast<std::size_t>(i)] -
                                          z0[static_cast<std::size_t>(i)]));
      }
    }
    ok = worst < 1e-8;
    out.push_back(bool_result(suite, "numeric inversion round trip", ok,
                              "max |z0 - invert(NF(z0))| = " + std::to_string(worst)));
  }
}

}  // namespace

std::vector<CheckResult> selftest_gradient_suite() {
  std::vector<CheckResult> out;
  op_checks(out);
  distribution_checks(out);
  flow_grad_checks(out);
  layer_and_elbo_checks(out);
  return out;
}

std::vector<CheckResult> selftest_kl_oracle_suite() {
  std::vector<CheckResult> out;
  kl_oracle_checks(out);
  return out;
}

std::vector<CheckResult> selftest_flow_suite() {
  std::vector<CheckResult> out;
  flow_checks(out);
  return out;
}

std::vector<CheckResult> run_selftest() {
  std::vector<CheckResult> out;
  for (auto& r : selftest_gradient_suite()) out.push_back(std::move(r));
  for (auto& r : selftest_kl_oracle_suite()) out.push_back(std::move(r));
  for (auto& r : selftest_flow_suite()) out.push_back(std::move(r));
  return out;
}

}  // namespace bil
