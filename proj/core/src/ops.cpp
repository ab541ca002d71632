#include "bil/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "bil/errors.hpp"

namespace bil {

namespace {

std::string g_backward_fault;  // NOLINT: test hook, single-threaded use

void require_same_shape(const TensorPtr& a, const TensorPtr& b, const char* op) {
  if (a->shape != b->shape) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a->shape_str() + " vs " +
                         b->shape_str());
  }
}

inline void accum(const TensorPtr& t, std::size_t i, double v) {
  if (t->requires_grad) t->grad[i] += v;
}

}  // namespace

std::string act_name(Act kind) {
  switch (kind) {
    case Act::Relu: return "relu";
    case Act::Tanh: return "tanh";
    case Act::Softplus: return "softplus";
    case Act::Exp: return "exp";
    case Act::Log: return "log";
  }
  return "?";
}

double softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

namespace testing {
void set_backward_fault(const std::string& op_name) { g_backward_fault = op_name; }
const std::string& backward_fault() { return g_backward_fault; }
}  // namespace testing

namespace ops {

TensorPtr matmul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  if (a->shape.size() != 2 || b->shape.size() != 2) {
    throw DimensionError("matmul: expected 2-d tensors, got " + a->shape_str() + " and " +
                         b->shape_str());
  }
  const int m = a->shape[0], k = a->shape[1];
  const int k2 = b->shape[0], n = b->shape[1];
  if (k != k2) {
    throw DimensionError("matmul: inner dimensions disagree, " + a->shape_str() + " x " +
                         b->shape_str());
  }
  auto out = Tensor::zeros({m, n}, any_requires_grad({a, b}));
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      const double av = a->data[i * k + p];
      if (av == 0.0) continue;
      for (int j = 0; j < n; ++j) {
        out->data[i * n + j] += av * b->data[p * n + j];
      }
    }
  }
  tape.push(out, {a, b}, [a, b, out, m, k, n]() {
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) {
        const double g = out->grad[i * n + j];
        if (g == 0.0) continue;
        for (int p = 0; p < k; ++p) {
          accum(a, static_cast<std::size_t>(i * k + p), g * b->data[p * n + j]);
          accum(b, static_cast<std::size_t>(p * n + j), g * a->data[i * k + p]);
        }
      }
    }
  });
  return out;
}

TensorPtr conv2d(Tape& tape, const TensorPtr& input, const TensorPtr& kernel, int stride,
                 int padding) {
  if (input->shape.size() != 4 || kernel->shape.size() != 4) {
    throw DimensionError("conv2d: expected 4-d input and kernel, got " + input->shape_str() +
                         " and " + kernel->shape_str());
  }
  if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
  if (padding < 0) throw DimensionError("conv2d: padding must be >= 0");
  const int M = input->shape[0], C = input->shape[1], H = input->shape[2], W = input->shape[3];
  const int N = kernel->shape[0], Ck = kernel->shape[1], kh = kernel->shape[2],
            kw = kernel->shape[3];
  if (C != Ck) {
    throw DimensionError("conv2d: channel mismatch, input " + input->shape_str() + " kernel " +
                         kernel->shape_str());
  }
  if (kh > H + 2 * padding || kw > W + 2 * padding) {
    throw DimensionError("conv2d: kernel " + kernel->shape_str() + " larger than padded input " +
                         input->shape_str() + " (padding " + std::to_string(padding) + ")");
  }
  const int Ho = (H + 2 * padding - kh) / stride + 1;
  const int Wo = (W + 2 * padding - kw) / stride + 1;

  auto out = Tensor::zeros({M, N, Ho, Wo}, any_requires_grad({input, kernel}));
  auto in_at = [&](int m, int c, int y, int x) -> double {
    if (y < 0 || y >= H || x < 0 || x >= W) return 0.0;
    return input->data[((m * C + c) * H + y) * W + x];
  };
  for (int m = 0; m < M; ++m) {
    for (int n = 0; n < N; ++n) {
      for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox) {
          double acc = 0.0;
          for (int c = 0; c < C; ++c) {
            for (int ky = 0; ky < kh; ++ky) {
              for (int kx = 0; kx < kw; ++kx) {
                acc += in_at(m, c, oy * stride - padding + ky, ox * stride - padding + kx) *
                       kernel->data[((n * C + c) * kh + ky) * kw + kx];
              }
            }
          }
          out->data[((m * N + n) * Ho + oy) * Wo + ox] = acc;
        }
      }
    }
  }
  tape.push(out, {input, kernel}, [input, kernel, out, M, C, H, W, N, kh, kw, Ho, Wo, stride,
                                   padding]() {
    for (int m = 0; m < M; ++m) {
      for (int n = 0; n < N; ++n) {
        for (int oy = 0; oy < Ho; ++oy) {
          for (int ox = 0; ox < Wo; ++ox) {
            const double g = out->grad[((m * N + n) * Ho + oy) * Wo + ox];
            if (g == 0.0) continue;
            for (int c = 0; c < C; ++c) {
              for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) {
                  const int y = oy * stride - padding + ky;
                  const int x = ox * stride - padding + kx;
                  if (y < 0 || y >= H || x < 0 || x >= W) continue;
                  const std::size_t ii = ((m * C + c) * H + y) * W + x;
                  const std::size_t ki = ((n * C + c) * kh + ky) * kw + kx;
                  accum(input, ii, g * kernel->data[ki]);
                  accum(kernel, ki, g * input->data[ii]);
                }
              }
            }
          }
        }
      }
    }
  });
  return out;
}

TensorPtr maxpool2d(Tape& tape, const TensorPtr& input, int window, int stride, int padding) {
  if (input->shape.size() != 4) {
    throw DimensionError("maxpool2d: expected 4-d input, got " + input->shape_str());
  }
  if (window < 1 || stride < 1 || padding < 0) {
    throw DimensionError("maxpool2d: bad window/stride/padding");
  }
  const int M = input->shape[0], C = input->shape[1], H = input->shape[2], W = input->shape[3];
  if (window > H + 2 * padding || window > W + 2 * padding) {
    throw DimensionError("maxpool2d: window larger than padded input " + input->shape_str());
  }
  const int Ho = (H + 2 * padding - window) / stride + 1;
  const int Wo = (W + 2 * padding - window) / stride + 1;

  auto out = Tensor::zeros({M, C, Ho, Wo}, input->requires_grad);
  // argmax recorded per output cell; padded cells are skipped, so every
  // window must contain at least one valid cell (guaranteed when padding < window).
  auto argmax = std::make_shared<std::vector<std::int64_t>>(out->data.size(), -1);
  for (int m = 0; m < M; ++m) {
    for (int c = 0; c < C; ++c) {
      for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox) {
          double best = -std::numeric_limits<double>::infinity();
          std::int64_t best_idx = -1;
          for (int ky = 0; ky < window; ++ky) {
            for (int kx = 0; kx < window; ++kx) {
              const int y = oy * stride - padding + ky;
              const int x = ox * stride - padding + kx;
              if (y < 0 || y >= H || x < 0 || x >= W) continue;
              const std::size_t ii = ((m * C + c) * H + y) * W + x;
              if (input->data[ii] > best) {  // strict: first index wins ties
                best = input->data[ii];
                best_idx = static_cast<std::int64_t>(ii);
              }
            }
          }
          if (best_idx < 0) {
            throw DimensionError("maxpool2d: window contains no valid cells");
          }
          const std::size_t oi = ((m * C + c) * Ho + oy) * Wo + ox;
          out->data[oi] = best;
          (*argmax)[oi] = best_idx;
        }
      }
    }
  }
  tape.push(out, {input}, [input, out, argmax]() {
    for (std::size_t oi = 0; oi < out->data.size(); ++oi) {
      accum(input, static_cast<std::size_t>((*argmax)[oi]), out->grad[oi]);
    }
  });
  return out;
}

TensorPtr trisolve_lower(Tape& tape, const TensorPtr& L, const TensorPtr& B) {
  if (L->shape.size() != 2 || L->shape[0] != L->shape[1]) {
    throw DimensionError("trisolve_lower: L must be square, got " + L->shape_str());
  }
  const int d = L->shape[0];
  if (B->shape.size() != 2 || B->shape[0] != d) {
    throw DimensionError("trisolve_lower: B " + B->shape_str() + " incompatible with L " +
                         L->shape_str());
  }
  const int m = B->shape[1];
  auto X = Tensor::zeros({d, m}, any_requires_grad({L, B}));
  for (int j = 0; j < m; ++j) {
    for (int i = 0; i < d; ++i) {
      double acc = B->data[i * m + j];
      for (int k = 0; k < i; ++k) acc -= L->data[i * d + k] * X->data[k * m + j];
      const double diag = L->data[i * d + i];
      if (diag == 0.0) throw DomainError("trisolve_lower: zero diagonal at row " + std::to_string(i));
      X->data[i * m + j] = acc / diag;
    }
  }
  tape.push(X, {L, B}, [L, B, X, d, m]() {
    // Y = L^-T G via back substitution; dB = Y, dL = -Y X^T.
    std::vector<double> Y(static_cast<std::size_t>(d) * m, 0.0);
    for (int j = 0; j < m; ++j) {
      for (int i = d - 1; i >= 0; --i) {
        double acc = X->grad[i * m + j];
        for (int k = i + 1; k < d; ++k) acc -= L->data[k * d + i] * Y[k * m + j];
        Y[i * m + j] = acc / L->data[i * d + i];
      }
    }
    for (int i = 0; i < d; ++i) {
      for (int j = 0; j < m; ++j) accum(B, static_cast<std::size_t>(i * m + j), Y[i * m + j]);
    }
    if (L->requires_grad) {
      for (int i = 0; i < d; ++i) {
        for (int k = 0; k <= i; ++k) {  // lower triangle only; upper is structurally zero
          double acc = 0.0;
          for (int j = 0; j < m; ++j) acc += Y[i * m + j] * X->data[k * m + j];
          L->grad[i * d + k] -= acc;
        }
      }
    }
  });
  return X;
}

TensorPtr diag_part(Tape& tape, const TensorPtr& A) {
  if (A->shape.size() != 2 || A->shape[0] != A->shape[1]) {
    throw DimensionError("diag_part: expected square matrix, got " + A->shape_str());
  }
  const int d = A->shape[0];
  auto out = Tensor::zeros({d}, A->requires_grad);
  for (int i = 0; i < d; ++i) out->data[i] = A->data[i * d + i];
  tape.push(out, {A}, [A, out, d]() {
    for (int i = 0; i < d; ++i) accum(A, static_cast<std::size_t>(i * d + i), out->grad[i]);
  });
  return out;
}

TensorPtr activation(Tape& tape, Act kind, const TensorPtr& x) {
  auto out = Tensor::zeros(x->shape, x->requires_grad);
  const std::size_t n = x->data.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x->data[i];
    switch (kind) {
      case Act::Relu: out->data[i] = v > 0.0 ? v : 0.0; break;
      case Act::Tanh: out->data[i] = std::tanh(v); break;
      case Act::Softplus: out->data[i] = softplus(v); break;
      case Act::Exp: out->data[i] = std::exp(v); break;
      case Act::Log:
        if (v <= 0.0) {
          throw DomainError("log: non-positive input " + std::to_string(v));
        }
        out->data[i] = std::log(v);
        break;
    }
  }
  tape.push(out, {x}, [x, out, kind, n]() {
    const double fault = (testing::backward_fault() == act_name(kind)) ? -1.0 : 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      double d = 0.0;
      switch (kind) {
        case Act::Relu: d = x->data[i] > 0.0 ? 1.0 : 0.0; break;
        case Act::Tanh: d = 1.0 - out->data[i] * out->data[i]; break;
        case Act::Softplus: d = sigmoid(x->data[i]); break;
        case Act::Exp: d = out->data[i]; break;
        case Act::Log: d = 1.0 / x->data[i]; break;
      }
      accum(x, i, fault * d * out->grad[i]);
    }
  });
  return out;
}

TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  require_same_shape(a, b, "add");
  auto out = Tensor::zeros(a->shape, any_requires_grad({a, b}));
  for (std::size_t i = 0; i < a->data.size(); ++i) out->data[i] = a->data[i] + b->data[i];
  tape.push(out, {a, b}, [a, b, out]() {
    for (std::size_t i = 0; i < out->data.size(); ++i) {
      accum(a, i, out->grad[i]);
      accum(b, i, out->grad[i]);
    }
  });
  return out;
}

TensorPtr sub(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  require_same_shape(a, b, "sub");
  auto out = Tensor::zeros(a->shape, any_requires_grad({a, b}));
  for (std::size_t i = 0; i < a->data.size(); ++i) out->data[i] = a->data[i] - b->data[i];
  tape.push(out, {a, b}, [a, b, out]() {
    for (std::size_t i = 0; i < out->data.size(); ++i) {
      accum(a, i, out->grad[i]);
      accum(b, i, -out->grad[i]);
    }
  });
  return out;
}

TensorPtr mul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  require_same_shape(a, b, "mul");
  auto out = Tensor::zeros(a->shape, any_requires_grad({a, b}));
  for (std::size_t i = 0; i < a->data.size(); ++i) out->data[i] = a->data[i] * b->data[i];
  tape.push(out, {a, b}, [a, b, out]() {
    for (std::size_t i = 0; i < out->data.size(); ++i) {
      accum(a, i, b->data[i] * out->grad[i]);
      accum(b, i, a->data[i] * out->grad[i]);
    }
  });
  return out;
}

TensorPtr div(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  require_same_shape(a, b, "div");
  auto out = Tensor::zeros(a->shape, any_requires_grad({a, b}));
  for (std::size_t i = 0; i < a->data.size(); ++i) {
    if (b->data[i] == 0.0) throw DomainError("div: zero denominator");
    out->data[i] = a->data[i] / b->data[i];
  }
  tape.push(out, {a, b}, [a, b, out]() {
    for (std::size_t i = 0; i < out->data.size(); ++i) {
      const double inv = 1.0 / b->data[i];
      accum(a, i, inv * out->grad[i]);
      accum(b, i, -out->data[i] * inv * out->grad[i]);
    }
  });
  return out;
}

TensorPtr add_scalar(Tape& tape, const TensorPtr& x, double c) {
  auto out = Tensor::zeros(x->shape, x->requires_grad);
  for (std::size_t i = 0; i < x->data.size(); ++i) out->data[i] = x->data[i] + c;
  tape.push(out, {x}, [x, out]() {
    for (std::size_t i = 0; i < out->data.size(); ++i) accum(x, i, out->grad[i]);
  });
  return out;
}

TensorPtr mul_scalar(Tape& tape, const TensorPtr& x, double c) {
  auto out = Tensor::zeros(x->shape, x->requires_grad);
  for (std::size_t i = 0; i < x->data.size(); ++i) out->data[i] = x->data[i] * c;
  tape.push(out, {x}, [x, out, c]() {
    for (std::size_t i = 0; i < out->data.size(); ++i) accum(x, i, c * out->grad[i]);
  });
  return out;
}

TensorPtr sum(Tape& tape, const TensorPtr& x) {
  double acc = 0.0;
  for (double v : x->data) acc += v;
  auto out = Tensor::scalar(acc, x->requires_grad);
  tape.push(out, {x}, [x, out]() {
    const double g = out->grad[0];
    for (std::size_t i = 0; i < x->data.size(); ++i) accum(x, i, g);
  });
  return out;
}

TensorPtr dot(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  if (a->size() != b->size()) {
    throw DimensionError("dot: length mismatch " + a->shape_str() + " vs " + b->shape_str());
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a->data.size(); ++i) acc += a->data[i] * b->data[i];
  auto out = Tensor::scalar(acc, any_requires_grad({a, b}));
  tape.push(out, {a, b}, [a, b, out]() {
    const double g = out->grad[0];
    for (std::size_t i = 0; i < a->data.size(); ++i) {
      accum(a, i, g * b->data[i]);
      accum(b, i, g * a->data[i]);
    }
  });
  return out;
}

TensorPtr axpy(Tape& tape, const TensorPtr& y, const TensorPtr& x, const TensorPtr& s) {
  require_same_shape(y, x, "axpy");
  if (!s->is_scalar()) throw DimensionError("axpy: s must be scalar, got " + s->shape_str());
  const double sv = s->data[0];
  auto out = Tensor::zeros(y->shape, any_requires_grad({y, x, s}));
  for (std::size_t i = 0; i < y->data.size(); ++i) out->data[i] = y->data[i] + sv * x->data[i];
  tape.push(out, {y, x, s}, [y, x, s, out]() {
    const double sv2 = s->data[0];
    double sg = 0.0;
    for (std::size_t i = 0; i < out->data.size(); ++i) {
      const double g = out->grad[i];
      accum(y, i, g);
      accum(x, i, sv2 * g);
      sg += g * x->data[i];
    }
    accum(s, 0, sg);
  });
  return out;
}

TensorPtr scale_rows(Tape& tape, const TensorPtr& x, const TensorPtr& s, std::int64_t group) {
  if (group <= 0 || x->size() % group != 0) {
    throw DimensionError("scale_rows: group " + std::to_string(group) + " does not divide " +
                         std::to_string(x->size()));
  }
  const std::int64_t rows = x->size() / group;
  if (s->size() != rows) {
    throw DimensionError("scale_rows: scale length " + std::to_string(s->size()) +
                         " != row count " + std::to_string(rows));
  }
  auto out = Tensor::zeros(x->shape, any_requires_grad({x, s}));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double sv = s->data[static_cast<std::size_t>(r)];
    for (std::int64_t k = 0; k < group; ++k) {
      out->data[static_cast<std::size_t>(r * group + k)] =
          sv * x->data[static_cast<std::size_t>(r * group + k)];
    }
  }
  tape.push(out, {x, s}, [x, s, out, rows, group]() {
    for (std::int64_t r = 0; r < rows; ++r) {
      const double sv = s->data[static_cast<std::size_t>(r)];
      double sg = 0.0;
      for (std::int64_t k = 0; k < group; ++k) {
        const std::size_t i = static_cast<std::size_t>(r * group + k);
        accum(x, i, sv * out->grad[i]);
        sg += out->grad[i] * x->data[i];
      }
      accum(s, static_cast<std::size_t>(r), sg);
    }
  });
  return out;
}

TensorPtr add_rowvec(Tape& tape, const TensorPtr& x, const TensorPtr& b) {
  if (x->shape.size() != 2 || b->size() != x->shape[1]) {
    throw DimensionError("add_rowvec: x " + x->shape_str() + " vs b " + b->shape_str());
  }
  const int M = x->shape[0], O = x->shape[1];
  auto out = Tensor::zeros(x->shape, any_requires_grad({x, b}));
  for (int i = 0; i < M; ++i) {
    for (int j = 0; j < O; ++j) out->data[i * O + j] = x->data[i * O + j] + b->data[j];
  }
  tape.push(out, {x, b}, [x, b, out, M, O]() {
    for (int i = 0; i < M; ++i) {
      for (int j = 0; j < O; ++j) {
        const double g = out->grad[i * O + j];
        accum(x, static_cast<std::size_t>(i * O + j), g);
        accum(b, static_cast<std::size_t>(j), g);
      }
    }
  });
  return out;
}

TensorPtr add_channel_bias(Tape& tape, const TensorPtr& x, const TensorPtr& b) {
  if (x->shape.size() != 4 || b->size() != x->shape[1]) {
    throw DimensionError("add_channel_bias: x " + x->shape_str() + " vs b " + b->shape_str());
  }
  const int M = x->shape[0], N = x->shape[1];
  const std::int64_t plane = static_cast<std::int64_t>(x->shape[2]) * x->shape[3];
  auto out = Tensor::zeros(x->shape, any_requires_grad({x, b}));
  for (int m = 0; m < M; ++m) {
    for (int n = 0; n < N; ++n) {
      const std::size_t base = static_cast<std::size_t>((m * N + n) * plane);
      for (std::int64_t p = 0; p < plane; ++p) {
        out->data[base + p] = x->data[base + p] + b->data[n];
      }
    }
  }
  tape.push(out, {x, b}, [x, b, out, M, N, plane]() {
    for (int m = 0; m < M; ++m) {
      for (int n = 0; n < N; ++n) {
        const std::size_t base = static_cast<std::size_t>((m * N + n) * plane);
        for (std::int64_t p = 0; p < plane; ++p) {
          accum(x, base + p, out->grad[base + p]);
          accum(b, static_cast<std::size_t>(n), out->grad[base + p]);
        }
      }
    }
  });
  return out;
}

TensorPtr reshape(Tape& tape, const TensorPtr& x, std::vector<int> shape) {
  if (shape_numel(shape) != x->size()) {
    throw DimensionError("reshape: " + x->shape_str() + " -> " + shape_to_string(shape));
  }
  auto out = Tensor::from(std::move(shape), x->data, x->requires_grad);
  tape.push(out, {x}, [x, out]() {
    for (std::size_t i = 0; i < out->data.size(); ++i) accum(x, i, out->grad[i]);
  });
  return out;
}

TensorPtr slice_flat(Tape& tape, const TensorPtr& x, std::int64_t offset, std::int64_t len) {
  if (offset < 0 || len <= 0 || offset + len > x->size()) {
    throw DimensionError("slice_flat: [" + std::to_string(offset) + ", " +
                         std::to_string(offset + len) + ") out of " + std::to_string(x->size()));
  }
  auto out = Tensor::zeros({static_cast<int>(len)}, x->requires_grad);
  for (std::int64_t i = 0; i < len; ++i) {
    out->data[static_cast<std::size_t>(i)] = x->data[static_cast<std::size_t>(offset + i)];
  }
  tape.push(out, {x}, [x, out, offset, len]() {
    for (std::int64_t i = 0; i < len; ++i) {
      accum(x, static_cast<std::size_t>(offset + i), out->grad[static_cast<std::size_t>(i)]);
    }
  });
  return out;
}

TensorPtr concat_flat(Tape& tape, const std::vector<TensorPtr>& pieces, std::vector<int> shape) {
  std::int64_t total = 0;
  for (const auto& p : pieces) total += p->size();
  if (shape_numel(shape) != total) {
    throw DimensionError("concat_flat: pieces total " + std::to_string(total) + " != shape " +
                         shape_to_string(shape));
  }
  bool rg = any_requires_grad(pieces);
  auto out = Tensor::zeros(std::move(shape), rg);
  std::size_t at = 0;
  for (const auto& p : pieces) {
    std::copy(p->data.begin(), p->data.end(), out->data.begin() + at);
    at += p->data.size();
  }
  tape.push(out, pieces, [pieces, out]() {
    std::size_t at2 = 0;
    for (const auto& p : pieces) {
      for (std::size_t i = 0; i < p->data.size(); ++i) accum(p, i, out->grad[at2 + i]);
      at2 += p->data.size();
    }
  });
  return out;
}

TensorPtr chol_unpack(Tape& tape, const TensorPtr& raw, int d) {
  const std::int64_t packed = static_cast<std::int64_t>(d) * (d + 1) / 2;
  if (raw->size() != packed) {
    throw DimensionError("chol_unpack: raw length " + std::to_string(raw->size()) +
                         " != d(d+1)/2 = " + std::to_string(packed));
  }
  auto out = Tensor::zeros({d, d}, raw->requires_grad);
  std::size_t at = 0;
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j <= i; ++j, ++at) {
      out->data[i * d + j] = (i == j) ? softplus(raw->data[at]) : raw->data[at];
    }
  }
  tape.push(out, {raw}, [raw, out, d]() {
    std::size_t at2 = 0;
    for (int i = 0; i < d; ++i) {
      for (int j = 0; j <= i; ++j, ++at2) {
        const double g = out->grad[i * d + j];
        accum(raw, at2, (i == j) ? sigmoid(raw->data[at2]) * g : g);
      }
    }
  });
  return out;
}

TensorPtr log_softmax_nll(Tape& tape, const TensorPtr& logits, const std::vector<int>& labels) {
  if (logits->shape.size() != 2) {
    throw DimensionError("log_softmax_nll: expected [M x K] logits, got " + logits->shape_str());
  }
  const int M = logits->shape[0], K = logits->shape[1];
  if (static_cast<int>(labels.size()) != M) {
    throw DimensionError("log_softmax_nll: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(M) + " rows");
  }
  for (int i = 0; i < M; ++i) {
    if (labels[i] < 0 || labels[i] >= K) {
      throw IndexError("log_softmax_nll: label " + std::to_string(labels[i]) + " outside [0, " +
                       std::to_string(K) + ") at row " + std::to_string(i));
    }
  }
  // Per-row softmax probabilities cached for the backward rule.
  auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(M) * K);
  double nll = 0.0;
  for (int i = 0; i < M; ++i) {
    double mx = logits->data[i * K];
    for (int k = 1; k < K; ++k) mx = std::max(mx, logits->data[i * K + k]);
    double z = 0.0;
    for (int k = 0; k < K; ++k) z += std::exp(logits->data[i * K + k] - mx);
    const double log_z = std::log(z) + mx;
    for (int k = 0; k < K; ++k) {
      (*probs)[i * K + k] = std::exp(logits->data[i * K + k] - log_z);
    }
    nll -= logits->data[i * K + labels[i]] - log_z;
  }
  auto out = Tensor::scalar(nll / M, logits->requires_grad);
  tape.push(out, {logits}, [logits, out, probs, labels, M, K]() {
    const double g = out->grad[0] / M;
    for (int i = 0; i < M; ++i) {
      for (int k = 0; k < K; ++k) {
        const double onehot = (k == labels[i]) ? 1.0 : 0.0;
        accum(logits, static_cast<std::size_t>(i * K + k), g * ((*probs)[i * K + k] - onehot));
      }
    }
  });
  return out;
}

std::vector<double> softmax_rows(const TensorPtr& logits) {
  if (logits->shape.size() != 2) {
    throw DimensionError("softmax_rows: expected [M x K], got " + logits->shape_str());
  }
  const int M = logits->shape[0], K = logits->shape[1];
  std::vector<double> probs(static_cast<std::size_t>(M) * K);
  for (int i = 0; i < M; ++i) {
    double mx = logits->data[i * K];
    for (int k = 1; k < K; ++k) mx = std::max(mx, logits->data[i * K + k]);
    double z = 0.0;
    for (int k = 0; k < K; ++k) z += std::exp(logits->data[i * K + k] - mx);
    for (int k = 0; k < K; ++k) probs[i * K + k] = std::exp(logits->data[i * K + k] - mx) / z;
  }
  return probs;
}

}  // namespace ops

double grad_check(const std::function<TensorPtr(Tape&)>& f, const std::vector<TensorPtr>& params,
                  double epsilon) {
  auto eval = [&]() -> double {
    Tape t(false);
    return f(t)->value();
  };
  const double base1 = eval();
  const double base2 = eval();
  if (base1 != base2) {
    throw ContractError("grad_check: evaluation is not deterministic (" + std::to_string(base1) +
                        " vs " + std::to_string(base2) + "); freeze all noise inputs");
  }

  Tape tape;
  auto loss = f(tape);
  tape.backward(loss);
  std::vector<std::vector<double>> ad;
  ad.reserve(params.size());
  for (const auto& p : params) {
    p->ensure_grad();
    ad.push_back(p->grad);
  }

  double max_rel = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    for (std::size_t i = 0; i < p->data.size(); ++i) {
      const double keep = p->data[i];
      p->data[i] = keep + epsilon;
      const double up = eval();
      p->data[i] = keep - epsilon;
      const double down = eval();
      p->data[i] = keep;
      const double fd = (up - down) / (2.0 * epsilon);
      const double g = ad[pi][i];
      const double rel = std::abs(g - fd) / std::max(1e-8, std::abs(g) + std::abs(fd));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace bil
