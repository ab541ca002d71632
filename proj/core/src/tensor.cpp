#include "bil/tensor.hpp"

#include <sstream>

#include "bil/errors.hpp"

namespace bil {

std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_to_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_to_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(std::vector<int> shape_, std::vector<double> data_, bool rg)
    : shape(std::move(shape_)), data(std::move(data_)), requires_grad(rg) {
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw DimensionError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_to_string(shape));
  }
}

TensorPtr Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

TensorPtr Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  auto n = shape_numel(shape);
  return std::make_shared<Tensor>(std::move(shape),
                                  std::vector<double>(static_cast<std::size_t>(n), value),
                                  requires_grad);
}

TensorPtr Tensor::scalar(double value, bool requires_grad) {
  return std::make_shared<Tensor>(std::vector<int>{1}, std::vector<double>{value}, requires_grad);
}

TensorPtr Tensor::from(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
  return std::make_shared<Tensor>(std::move(shape), std::move(data), requires_grad);
}

double Tensor::value() const {
  if (!is_scalar()) throw ContractError("value() requires a scalar tensor, got " + shape_str());
  return data[0];
}

void Tensor::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() { grad.assign(data.size(), 0.0); }

std::string Tensor::shape_str() const { return shape_to_string(shape); }

}  // namespace bil
