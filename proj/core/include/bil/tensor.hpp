#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace bil {

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

/// Dense n-dimensional array of 64-bit floats, row-major, with an optional
/// gradient buffer of the same length. Tensors are created by ops or as
/// leaves; a Tensor belongs to at most one thread at a time.
class Tensor {
 public:
  std::vector<int> shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until ensure_grad()

  Tensor() = default;
  Tensor(std::vector<int> shape_, std::vector<double> data_, bool rg = false);

  static TensorPtr zeros(std::vector<int> shape, bool requires_grad = false);
  static TensorPtr full(std::vector<int> shape, double value, bool requires_grad = false);
  static TensorPtr scalar(double value, bool requires_grad = false);
  static TensorPtr from(std::vector<int> shape, std::vector<double> data,
                        bool requires_grad = false);

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  bool is_scalar() const { return data.size() == 1; }
  double value() const;  // scalar contents; ContractError otherwise

  /// Sizes (and zero-fills on first call) the gradient buffer.
  void ensure_grad();
  void zero_grad();

  std::string shape_str() const;
};

std::int64_t shape_numel(const std::vector<int>& shape);
std::string shape_to_string(const std::vector<int>& shape);

}  // namespace bil
