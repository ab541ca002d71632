#include "bil/flow.hpp"

#include <cmath>

#include "bil/errors.hpp"

namespace bil {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// Keeps m(a) = -1 + softplus(a) strictly above -1 in floating point: without
// the floor, softplus underflows below an ulp of 1 for a < -36 and the layer
// determinant can round to zero or below.
constexpr double kMarginFloor = 1e-9;

bool all_zero(const std::vector<double>& v) {
  for (double x : v) {
    if (x != 0.0) return false;
  }
  return true;
}

// Plain-value u_hat (same formula as the tape op).
std::vector<double> u_hat_values(const std::vector<double>& u, const std::vector<double>& w) {
  if (all_zero(w)) return u;
  double uw = 0.0, ww = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uw += u[i] * w[i];
    ww += w[i] * w[i];
  }
  const double sp = softplus(uw);
  const double floored = (sp - kMarginFloor > 0.0 ? sp - kMarginFloor : 0.0) + kMarginFloor;
  const double m = -1.0 + floored;
  const double coef = (m - uw) / ww;
  std::vector<double> out(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) out[i] = u[i] + coef * w[i];
  return out;
}

}  // namespace

FlowStack FlowStack::init(int dim, int depth, Rng& rng, double scale) {
  FlowStack f;
  f.dim = dim;
  f.layers.reserve(static_cast<std::size_t>(depth));
  for (int k = 0; k < depth; ++k) {
    std::vector<double> u(static_cast<std::size_t>(dim)), w(static_cast<std::size_t>(dim));
    std::vector<double> b{0.0};
    if (k + 1 == depth) {
      // The last layer starts as an approximate +1 shift: u = 1, b in the
      // tanh saturation region, w at unit norm (the reparameterization is
      // singular near ||w|| = 0, so w must stay well scaled). This centers
      // the pushforward near 1 and the multiplicative scaling starts around
      // the identity instead of annihilating the weight means.
      std::fill(u.begin(), u.end(), 1.0);
      for (auto& v : w) v = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
      b[0] = 2.5;
    } else {
      for (auto& v : u) v = rng.normal(0.0, scale);
      for (auto& v : w) v = rng.normal(0.0, scale);
    }
    f.layers.push_back(PlanarLayer{Tensor::from({dim}, std::move(u), true),
                                   Tensor::from({dim}, std::move(w), true),
                                   Tensor::from({1}, std::move(b), true)});
  }
  return f;
}

FlowStack FlowStack::frozen_copy() const {
  FlowStack f;
  f.dim = dim;
  for (const auto& l : layers) {
    f.layers.push_back(PlanarLayer{Tensor::from(l.u->shape, l.u->data, false),
                                   Tensor::from(l.w->shape, l.w->data, false),
                                   Tensor::from(l.b->shape, l.b->data, false)});
  }
  return f;
}

TensorPtr nf_enforce_invertible(Tape& tape, const TensorPtr& u, const TensorPtr& w) {
  if (u->size() != w->size()) {
    throw DimensionError("nf_enforce_invertible: u " + u->shape_str() + " vs w " + w->shape_str());
  }
  if (all_zero(w->data)) return u;  // constant-shift layer, log-det 0
  auto uw = ops::dot(tape, u, w);
  auto sp = ops::activation(tape, Act::Softplus, uw);
  // relu(sp - floor) + floor == max(sp, floor); same arithmetic as u_hat_values
  auto floored = ops::add_scalar(
      tape, ops::activation(tape, Act::Relu, ops::add_scalar(tape, sp, -kMarginFloor)),
      kMarginFloor);
  auto m = ops::add_scalar(tape, floored, -1.0);
  auto coef = ops::div(tape, ops::sub(tape, m, uw), ops::dot(tape, w, w));
  return ops::axpy(tape, u, w, coef);
}

FlowForward nf_forward(Tape& tape, const FlowStack& flow, const TensorPtr& z0) {
  if (flow.dim != 0 && z0->size() != flow.dim) {
    throw DimensionError("nf_forward: z0 length " + std::to_string(z0->size()) +
                         " != flow dim " + std::to_string(flow.dim));
  }
  TensorPtr z = z0;
  TensorPtr log_det = Tensor::scalar(0.0);
  for (const auto& layer : flow.layers) {
    auto u_hat = nf_enforce_invertible(tape, layer.u, layer.w);
    auto a = ops::add(tape, ops::dot(tape, layer.w, z), layer.b);
    auto t = ops::activation(tape, Act::Tanh, a);
    z = ops::axpy(tape, z, u_hat, t);
    // det = 1 + (1 - tanh^2(a)) * (u_hat . w); positive under the constraint.
    auto h_prime = ops::add_scalar(tape, ops::mul_scalar(tape, ops::mul(tape, t, t), -1.0), 1.0);
    auto det = ops::add_scalar(tape, ops::mul(tape, h_prime, ops::dot(tape, u_hat, layer.w)), 1.0);
    log_det = ops::add(tape, log_det, ops::activation(tape, Act::Log, det));
  }
  return FlowForward{z, log_det};
}

FlowDensity nf_log_density(Tape& tape, const FlowStack& flow, const TensorPtr& z0) {
  auto fw = nf_forward(tape, flow, z0);
  auto sq = ops::sum(tape, ops::mul(tape, z0, z0));
  auto base = ops::add_scalar(tape, ops::mul_scalar(tape, sq, -0.5),
                              -0.5 * kLog2Pi * static_cast<double>(z0->size()));
  return FlowDensity{fw.z, ops::sub(tape, base, fw.log_det_sum)};
}

std::vector<double> flow_invert(const FlowStack& flow, const std::vector<double>& z, double tol,
                                int max_iter) {
  if (static_cast<int>(z.size()) != flow.dim) {
    throw DimensionError("flow_invert: point length " + std::to_string(z.size()) +
                         " != flow dim " + std::to_string(flow.dim));
  }
  std::vector<double> cur = z;
  for (auto it = flow.layers.rbegin(); it != flow.layers.rend(); ++it) {
    const auto& layer = *it;
    const auto uh = u_hat_values(layer.u->data, layer.w->data);
    const double b = layer.b->data[0];
    double c = 0.0, s = 0.0;
    for (std::size_t i = 0; i < uh.size(); ++i) {
      c += uh[i] * layer.w->data[i];
      s += layer.w->data[i] * cur[i];
    }
    // Solve a + c tanh(a + b) = s for a = w . z_prev; strictly increasing since c > -1.
    double lo = s - std::abs(c) - 1.0;
    double hi = s + std::abs(c) + 1.0;
    double a = 0.5 * (lo + hi);
    bool converged = false;
    for (int iter = 0; iter < max_iter; ++iter) {
      const double th = std::tanh(a + b);
      const double f = a + c * th - s;
      if (std::abs(f) <= tol) {
        converged = true;
        break;
      }
      if (f > 0.0) {
        hi = a;
      } else {
        lo = a;
      }
      const double fp = 1.0 + c * (1.0 - th * th);
      double next = a - f / fp;
      if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
      a = next;
    }
    if (!converged) {
      throw DomainError("flow_invert: no preimage found within tolerance (layer solve stalled)");
    }
    const double t = std::tanh(a + b);
    for (std::size_t i = 0; i < cur.size(); ++i) cur[i] -= uh[i] * t;
  }
  return cur;
}

double flow_log_density_at(const FlowStack& flow, const std::vector<double>& z) {
  const auto z0 = flow_invert(flow, z);
  double log_q = -0.5 * kLog2Pi * static_cast<double>(z0.size());
  for (double v : z0) log_q -= 0.5 * v * v;
  // Change of variables along the forward trajectory from z0.
  std::vector<double> cur = z0;
  for (const auto& layer : flow.layers) {
    const auto uh = u_hat_values(layer.u->data, layer.w->data);
    double a = layer.b->data[0], c = 0.0;
    for (std::size_t i = 0; i < cur.size(); ++i) {
      a += layer.w->data[i] * cur[i];
      c += uh[i] * layer.w->data[i];
    }
    const double t = std::tanh(a);
    log_q -= std::log(1.0 + (1.0 - t * t) * c);
    for (std::size_t i = 0; i < cur.size(); ++i) cur[i] += uh[i] * t;
  }
  return log_q;
}

TensorPtr frozen_flow_log_density(Tape& tape, const FlowStack& frozen, const TensorPtr& z_hat) {
  if (static_cast<int>(z_hat->size()) != frozen.dim) {
    throw DimensionError("frozen_flow_log_density: z length " + std::to_string(z_hat->size()) +
                         " != flow dim " + std::to_string(frozen.dim));
  }
  const int d = frozen.dim;
  const auto z0 = flow_invert(frozen, z_hat->data);
  const double value = [&] {
    double log_q = -0.5 * kLog2Pi * d;
    for (double v : z0) log_q -= 0.5 * v * v;
    std::vector<double> cur = z0;
    for (const auto& layer : frozen.layers) {
      const auto uh = u_hat_values(layer.u->data, layer.w->data);
      double a = layer.b->data[0], c = 0.0;
      for (int i = 0; i < d; ++i) {
        a += layer.w->data[i] * cur[i];
        c += uh[i] * layer.w->data[i];
      }
      const double t = std::tanh(a);
      log_q -= std::log(1.0 + (1.0 - t * t) * c);
      for (int i = 0; i < d; ++i) cur[i] += uh[i] * t;
    }
    return log_q;
  }();

  auto out = Tensor::scalar(value, z_hat->requires_grad);
  tape.push(out, {z_hat}, [frozen, z_hat, out, z0, d]() {
    // grad_z log q(z) = J^-T grad_{z0} [log q0(z0) - sum log det], with J the
    // forward Jacobian at z0. The z0-gradient comes from a sub-tape replay of
    // the frozen stack; J^-T is applied layer by layer (rank-1 updates).
    Tape sub;
    auto z0_leaf = Tensor::from({d}, z0, true);
    auto dens = nf_log_density(sub, frozen, z0_leaf);
    sub.backward(dens.log_q);
    std::vector<double> v = z0_leaf->grad;

    std::vector<double> cur = z0;
    for (const auto& layer : frozen.layers) {
      const auto uh = u_hat_values(layer.u->data, layer.w->data);
      double a = layer.b->data[0];
      for (int i = 0; i < d; ++i) a += layer.w->data[i] * cur[i];
      const double t = std::tanh(a);
      const double hp = 1.0 - t * t;
      // psi = hp * w; (J_k^T)^-1 v = v - psi (uh . v) / (1 + uh . psi)
      double uv = 0.0, upsi = 0.0;
      for (int i = 0; i < d; ++i) {
        uv += uh[i] * v[i];
        upsi += uh[i] * hp * layer.w->data[i];
      }
      const double scale = uv / (1.0 + upsi);
      for (int i = 0; i < d; ++i) v[i] -= hp * layer.w->data[i] * scale;
      for (int i = 0; i < d; ++i) cur[i] += uh[i] * t;
    }
    const double g = out->grad[0];
    for (int i = 0; i < d; ++i) {
      if (z_hat->requires_grad) z_hat->grad[static_cast<std::size_t>(i)] += g * v[i];
    }
  });
  return out;
}

bool flows_equal(const FlowStack& a, const FlowStack& b) {
  if (a.dim != b.dim || a.layers.size() != b.layers.size()) return false;
  for (std::size_t k = 0; k < a.layers.size(); ++k) {
    if (a.layers[k].u->data != b.layers[k].u->data) return false;
    if (a.layers[k].w->data != b.layers[k].w->data) return false;
    if (a.layers[k].b->data != b.layers[k].b->data) return false;
  }
  return true;
}

}  // namespace bil
