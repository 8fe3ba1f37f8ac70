#pragma once

#include <cstdint>
#include <functional>
#include <span>

#include "hyke/ad/graph.hpp"

namespace hyke::ad {

/// Builds a scalar loss on a fresh graph. Learnable inputs must be bound with
/// graph.parameter() on the tensors handed to grad_check.
using ScalarFn = std::function<Var(Graph&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares reverse-mode gradients against central finite differences.
/// Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
/// With `max_samples` > 0 only that many randomly chosen components are
/// perturbed (drawn with `seed`).
GradCheckResult grad_check(const ScalarFn& f, std::span<Tensor* const> params, double eps,
                           std::size_t max_samples = 0, std::uint64_t seed = 0);

/// Single-tensor convenience: f receives the bound point.
double grad_check(const std::function<Var(Graph&, Var)>& f, const Tensor& point, double eps);

}  // namespace hyke::ad
