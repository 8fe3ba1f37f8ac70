#include "hyke/ad/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "hyke/error.hpp"

namespace hyke::ad {

namespace {

double evaluate(const ScalarFn& f) {
  Graph g;
  return f(g).value().item();
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& f, std::span<Tensor* const> params, double eps, std::size_t max_samples,
                           std::uint64_t seed) {
  if (!(eps > 0.0)) throw ConfigError("grad_check: eps must be positive");
  for (Tensor* p : params) p->zero_grad();
  {
    Graph g;
    Var loss = f(g);
    g.backward(loss);
  }

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (std::size_t i = 0; i < params[t]->size(); ++i) coords.emplace_back(t, i);
  }
  if (max_samples > 0 && coords.size() > max_samples) {
    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(max_samples);
  }

  GradCheckResult result;
  for (const auto& [t, i] : coords) {
    Tensor& p = *params[t];
    const double analytic = (*p.grad)[i];
    const double saved = p.values[i];
    p.values[i] = saved + eps;
    const double up = evaluate(f);
    p.values[i] = saved - eps;
    const double down = evaluate(f);
    p.values[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    const double rel = std::abs(analytic - numeric) / denom;
    if (rel >= result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_analytic = analytic;
      result.worst_numeric = numeric;
    }
    ++result.checked;
  }
  return result;
}

double grad_check(const std::function<Var(Graph&, Var)>& f, const Tensor& point, double eps) {
  Tensor x = point;
  x.requires_grad = true;
  Tensor* params[] = {&x};
  return grad_check([&](Graph& g) { return f(g, g.parameter(x)); }, params, eps).max_rel_error;
}

}  // namespace hyke::ad
