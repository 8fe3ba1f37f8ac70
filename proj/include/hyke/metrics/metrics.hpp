#pragma once

#include <limits>
#include <optional>
#include <span>
#include <vector>

namespace hyke::metrics {

/// Image sequences are [T, H, W] row-major.
struct SeqShape {
  std::size_t frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t pixels() const { return height * width; }
  std::size_t size() const { return frames * height * width; }
};

/// Mean over masked pixels and all frames. `mask` is [H, W]; throws
/// ConfigError when it selects nothing.
double mse_roi(std::span<const double> x, std::span<const double> xhat, std::span<const bool> mask, const SeqShape& shape);
double mse(std::span<const double> x, std::span<const double> xhat);

/// Returned by psnr when the reconstruction is exact.
constexpr double kPsnrExact = std::numeric_limits<double>::infinity();

/// 10 log10(peak^2 / MSE), peak = max of the ground truth over the whole
/// sequence. Throws NumericalError when the ground truth has no positive peak.
double psnr(std::span<const double> x, std::span<const double> xhat);

/// Mean local SSIM per frame (11x11 Gaussian window, sigma 1.5, K1 0.01,
/// K2 0.03, valid windows only), averaged over frames. The dynamic range
/// defaults to the peak of x over the sequence. Throws ConfigError when a
/// frame is smaller than the window.
double ssim(std::span<const double> x, std::span<const double> xhat, const SeqShape& shape,
            std::optional<double> range = std::nullopt);

/// Mean and population standard deviation.
struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};
MeanStd mean_std(std::span<const double> values);

}  // namespace hyke::metrics
