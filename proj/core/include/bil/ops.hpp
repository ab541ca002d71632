#pragma once

#include <functional>
#include <string>
#include <vector>

#include "bil/tape.hpp"
#include "bil/tensor.hpp"

namespace bil {

enum class Act { Relu, Tanh, Softplus, Exp, Log };

std::string act_name(Act kind);

namespace ops {

// -- linear algebra ---------------------------------------------------------

/// [m x k] * [k x n] -> [m x n]; backward: a.grad += g b^T, b.grad += a^T g.
TensorPtr matmul(Tape& tape, const TensorPtr& a, const TensorPtr& b);

/// Cross-correlation of input [M,C,H,W] with kernel [N,C,h,w].
/// H' = (H + 2*padding - h) / stride + 1 (floor), likewise W'.
TensorPtr conv2d(Tape& tape, const TensorPtr& input, const TensorPtr& kernel, int stride,
                 int padding);

/// Max pooling with square window; gradient routes to the argmax, first index
/// (row-major within the window) winning ties. Padded cells never win.
TensorPtr maxpool2d(Tape& tape, const TensorPtr& input, int window, int stride, int padding);

/// Solves L X = B for X with L [d x d] lower triangular, B [d x m].
TensorPtr trisolve_lower(Tape& tape, const TensorPtr& L, const TensorPtr& B);

/// Diagonal of a square matrix as a [d] vector.
TensorPtr diag_part(Tape& tape, const TensorPtr& A);

// -- elementwise and reductions ---------------------------------------------

TensorPtr activation(Tape& tape, Act kind, const TensorPtr& x);
TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(Tape& tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(Tape& tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr div(Tape& tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr add_scalar(Tape& tape, const TensorPtr& x, double c);
TensorPtr mul_scalar(Tape& tape, const TensorPtr& x, double c);
TensorPtr sum(Tape& tape, const TensorPtr& x);
TensorPtr dot(Tape& tape, const TensorPtr& a, const TensorPtr& b);

/// y + s * x with s a scalar tensor broadcast over x; shapes of y and x match.
TensorPtr axpy(Tape& tape, const TensorPtr& y, const TensorPtr& x, const TensorPtr& s);

/// Viewing x as [len(s) x group]: out[g, :] = s[g] * x[g, :].
TensorPtr scale_rows(Tape& tape, const TensorPtr& x, const TensorPtr& s, std::int64_t group);

/// x [M x O] + row vector b [O], broadcast over rows.
TensorPtr add_rowvec(Tape& tape, const TensorPtr& x, const TensorPtr& b);

/// x [M,N,H,W] + per-channel bias b [N].
TensorPtr add_channel_bias(Tape& tape, const TensorPtr& x, const TensorPtr& b);

// -- structural --------------------------------------------------------------

TensorPtr reshape(Tape& tape, const TensorPtr& x, std::vector<int> shape);
TensorPtr slice_flat(Tape& tape, const TensorPtr& x, std::int64_t offset, std::int64_t len);
TensorPtr concat_flat(Tape& tape, const std::vector<TensorPtr>& pieces, std::vector<int> shape);

/// Packed lower triangle [d(d+1)/2] -> [d x d] lower-triangular matrix with
/// softplus applied to the diagonal slots (strictly positive diagonal).
TensorPtr chol_unpack(Tape& tape, const TensorPtr& raw, int d);

// -- objectives ---------------------------------------------------------------

/// Mean negative log-likelihood of `labels` under row-wise log-softmax of
/// logits [M x K]; max-subtraction stabilized.
TensorPtr log_softmax_nll(Tape& tape, const TensorPtr& logits, const std::vector<int>& labels);

/// Row-wise softmax probabilities, no tape participation (inference helper).
std::vector<double> softmax_rows(const TensorPtr& logits);

}  // namespace ops

// -- numerics helpers shared across modules -----------------------------------

double softplus(double x);
double sigmoid(double x);

/// Central-difference gradient verification. `f` must rebuild its graph on the
/// given tape and return a scalar loss; it is evaluated twice at the base
/// point and a ContractError is raised if the two values differ (frozen noise
/// contract). Returns max_i |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
double grad_check(const std::function<TensorPtr(Tape&)>& f, const std::vector<TensorPtr>& params,
                  double epsilon);

namespace testing {
/// Flips the sign of one op's backward rule; "" disables. Used by the
/// selftest command to prove the gradient suite actually catches defects.
void set_backward_fault(const std::string& op_name);
const std::string& backward_fault();
}  // namespace testing

}  // namespace bil
