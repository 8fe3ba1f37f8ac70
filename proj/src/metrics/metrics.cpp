#include "hyke/metrics/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "hyke/error.hpp"

namespace hyke::metrics {

namespace {

void check_sizes(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": sequences differ in size (" + std::to_string(a) + " vs " +
                               std::to_string(b) + ")");
}

constexpr int kWin = 11;

std::array<double, kWin> gaussian_window() {
  std::array<double, kWin> g{};
  double s = 0;
  for (int i = 0; i < kWin; ++i) {
    const double d = i - kWin / 2;
    g[static_cast<std::size_t>(i)] = std::exp(-d * d / (2 * 1.5 * 1.5));
    s += g[static_cast<std::size_t>(i)];
  }
  for (double& v : g) v /= s;
  return g;
}

// Separable valid-mode filtering of one frame.
std::vector<double> filter_valid(const double* img, std::size_t h, std::size_t w, const std::array<double, kWin>& g) {
  const std::size_t oh = h - kWin + 1, ow = w - kWin + 1;
  std::vector<double> tmp(h * ow), out(oh * ow);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < ow; ++c) {
      double s = 0;
      for (int k = 0; k < kWin; ++k) s += g[static_cast<std::size_t>(k)] * img[r * w + c + static_cast<std::size_t>(k)];
      tmp[r * ow + c] = s;
    }
  }
  for (std::size_t r = 0; r < oh; ++r) {
    for (std::size_t c = 0; c < ow; ++c) {
      double s = 0;
      for (int k = 0; k < kWin; ++k) s += g[static_cast<std::size_t>(k)] * tmp[(r + static_cast<std::size_t>(k)) * ow + c];
      out[r * ow + c] = s;
    }
  }
  return out;
}

}  // namespace

double mse_roi(std::span<const double> x, std::span<const double> xhat, std::span<const bool> mask, const SeqShape& shape) {
  check_sizes(x.size(), xhat.size(), "mse_roi");
  check_sizes(x.size(), shape.size(), "mse_roi");
  check_sizes(mask.size(), shape.pixels(), "mse_roi mask");
  const auto n = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
  if (n == 0) throw ConfigError("mse_roi: empty mask");
  double s = 0;
  for (std::size_t k = 0; k < shape.frames; ++k) {
    for (std::size_t p = 0; p < shape.pixels(); ++p) {
      if (!mask[p]) continue;
      const double d = x[k * shape.pixels() + p] - xhat[k * shape.pixels() + p];
      s += d * d;
    }
  }
  return s / static_cast<double>(n * shape.frames);
}

double mse(std::span<const double> x, std::span<const double> xhat) {
  check_sizes(x.size(), xhat.size(), "mse");
  if (x.empty()) throw ConfigError("mse: empty sequence");
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - xhat[i]) * (x[i] - xhat[i]);
  return s / static_cast<double>(x.size());
}

double psnr(std::span<const double> x, std::span<const double> xhat) {
  const double m = mse(x, xhat);
  const double peak = *std::max_element(x.begin(), x.end());
  if (!(peak > 0)) throw NumericalError("psnr: ground truth has no positive peak");
  if (m == 0.0) return kPsnrExact;
  return 10.0 * std::log10(peak * peak / m);
}

double ssim(std::span<const double> x, std::span<const double> xhat, const SeqShape& shape, std::optional<double> range) {
  check_sizes(x.size(), xhat.size(), "ssim");
  check_sizes(x.size(), shape.size(), "ssim");
  if (shape.height < kWin || shape.width < kWin) {
    throw ConfigError("ssim: frames of " + std::to_string(shape.height) + "x" + std::to_string(shape.width) +
                      " are smaller than the 11x11 window");
  }
  if (shape.frames == 0) throw ConfigError("ssim: no frames");
  const double L = range ? *range : *std::max_element(x.begin(), x.end());
  const double c1 = (0.01 * L) * (0.01 * L), c2 = (0.03 * L) * (0.03 * L);
  const auto g = gaussian_window();
  const std::size_t P = shape.pixels();
  std::vector<double> xx(P), yy(P), xy(P);
  double total = 0;
  for (std::size_t k = 0; k < shape.frames; ++k) {
    const double* a = x.data() + k * P;
    const double* b = xhat.data() + k * P;
    for (std::size_t p = 0; p < P; ++p) {
      xx[p] = a[p] * a[p];
      yy[p] = b[p] * b[p];
      xy[p] = a[p] * b[p];
    }
    const auto mx = filter_valid(a, shape.height, shape.width, g), my = filter_valid(b, shape.height, shape.width, g);
    const auto sxx = filter_valid(xx.data(), shape.height, shape.width, g);
    const auto syy = filter_valid(yy.data(), shape.height, shape.width, g);
    const auto sxy = filter_valid(xy.data(), shape.height, shape.width, g);
    double frame = 0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
      const double num = (2 * mx[i] * my[i] + c1) * (2 * cxy + c2);
      const double den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
      frame += den > 0 ? num / den : 1.0;  // both windows constant zero
    }
    total += frame / static_cast<double>(mx.size());
  }
  return std::clamp(total / static_cast<double>(shape.frames), -1.0, 1.0);
}

MeanStd mean_std(std::span<const double> values) {
  MeanStd r;
  if (values.empty()) return r;
  for (double v : values) r.mean += v;
  r.mean /= static_cast<double>(values.size());
  for (double v : values) r.std += (v - r.mean) * (v - r.mean);
  r.std = std::sqrt(r.std / static_cast<double>(values.size()));
  return r;
}

}  // namespace hyke::metrics
