#pragma once

#include <cstddef>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace hyke::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major array of 64-bit reals with an optional gradient buffer.
///
/// Learnable parameters live in Tensors owned by the caller; a Graph only
/// references them, and backward() accumulates into `grad`.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::optional<std::vector<double>> grad;

  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::initializer_list<double> values, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);

  std::size_t size() const { return values.size(); }
  std::size_t rank() const { return shape.size(); }
  double item() const;

  std::span<double> data() { return values; }
  std::span<const double> data() const { return values; }

  void zero_grad();
  std::span<double> grad_span();

  bool all_finite() const;
};

bool all_finite(std::span<const double> values);

}  // namespace hyke::ad
