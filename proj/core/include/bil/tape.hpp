#pragma once

#include <functional>
#include <unordered_set>
#include <vector>

#include "bil/tensor.hpp"

namespace bil {

/// Records operations in execution (topological) order so a reverse replay
/// computes gradients of a scalar loss w.r.t. every participating tensor.
/// A tape and its tensors are confined to one thread.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }

  /// Registers a node. `inputs` are the tensors the backward rule reads or
  /// writes gradients for; `backward` pulls out->grad and accumulates into
  /// the inputs' grad buffers. No-op when not recording or when the output
  /// carries no gradient requirement.
  void push(const TensorPtr& out, const std::vector<TensorPtr>& inputs,
            std::function<void()> backward);

  /// Reverse replay from a scalar loss: zeroes the grads of every tensor the
  /// tape has seen, seeds loss->grad with 1, then runs each node's backward
  /// rule exactly once, newest to oldest.
  void backward(const TensorPtr& loss);

  std::size_t node_count() const { return nodes_.size(); }
  std::size_t last_backward_nodes() const { return last_backward_nodes_; }

 private:
  struct Node {
    TensorPtr out;
    std::function<void()> backward;
  };

  void track(const TensorPtr& t);

  bool recording_;
  std::vector<Node> nodes_;
  std::vector<TensorPtr> tracked_;
  std::unordered_set<const Tensor*> seen_;
  std::size_t last_backward_nodes_ = 0;
};

/// True when any input requires a gradient (ops propagate this to outputs).
bool any_requires_grad(const std::vector<TensorPtr>& inputs);

}  // namespace bil
