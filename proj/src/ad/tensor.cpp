#include "hyke/ad/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "hyke/error.hpp"

namespace hyke::ad {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

Tensor::Tensor(Shape s, std::vector<double> v, bool rg)
    : shape(std::move(s)), values(std::move(v)), requires_grad(rg) {
  if (values.size() != numel(shape)) {
    throw ShapeError("tensor: " + std::to_string(values.size()) + " values do not fill shape " +
                     to_string(shape));
  }
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return filled(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::filled(Shape shape, double value, bool requires_grad) {
  const auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

Tensor Tensor::vector(std::initializer_list<double> v, bool requires_grad) {
  return Tensor({v.size()}, std::vector<double>(v), requires_grad);
}

Tensor Tensor::vector(std::vector<double> v, bool requires_grad) {
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v), requires_grad);
}

double Tensor::item() const {
  if (values.size() != 1) throw ShapeError("tensor: item() on shape " + to_string(shape));
  return values[0];
}

void Tensor::zero_grad() { grad.emplace(values.size(), 0.0); }

std::span<double> Tensor::grad_span() {
  if (!grad) zero_grad();
  return *grad;
}

bool Tensor::all_finite() const { return ad::all_finite(values); }

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace hyke::ad
