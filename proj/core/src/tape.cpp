#include "bil/tape.hpp"

#include "bil/errors.hpp"

namespace bil {

bool any_requires_grad(const std::vector<TensorPtr>& inputs) {
  for (const auto& t : inputs) {
    if (t && t->requires_grad) return true;
  }
  return false;
}

void Tape::track(const TensorPtr& t) {
  if (!t) return;
  if (seen_.insert(t.get()).second) tracked_.push_back(t);
}

void Tape::push(const TensorPtr& out, const std::vector<TensorPtr>& inputs,
                std::function<void()> backward) {
  if (!recording_ || !out->requires_grad) return;
  track(out);
  for (const auto& in : inputs) track(in);
  nodes_.push_back(Node{out, std::move(backward)});
}

void Tape::backward(const TensorPtr& loss) {
  if (!loss->is_scalar()) {
    throw ContractError("backward requires a scalar loss, got " + loss->shape_str());
  }
  for (const auto& t : tracked_) {
    t->ensure_grad();
    t->zero_grad();
  }
  loss->ensure_grad();
  loss->zero_grad();
  loss->grad[0] = 1.0;

  last_backward_nodes_ = 0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    it->backward();
    ++last_backward_nodes_;
  }
}

}  // namespace bil
