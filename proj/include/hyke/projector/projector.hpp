#pragma once

#include <Eigen/SparseCore>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "hyke/ad/graph.hpp"
#include "hyke/io/raw.hpp"

namespace hyke::projector {

struct ProjectorConfig {
  std::size_t num_angles = 160;
  std::size_t num_bins = 128;
  std::size_t height = 128;
  std::size_t width = 128;
  double bin_spacing = 1.0;               // pixels
  std::vector<double> efficiencies;       // per bin; empty means all 1
  double randoms_fraction = 0.2;          // share of expected counts from randoms
  double target_total_counts = 1.8e7;     // across all frames

  void validate() const;
  double efficiency(std::size_t bin) const { return efficiencies.empty() ? 1.0 : efficiencies[bin]; }
  std::size_t rays() const { return num_angles * num_bins; }
  std::size_t pixels() const { return height * width; }
};

/// Parallel-beam discrete Radon transform with angles a*pi/A, a = 0..A-1.
/// Each ray is sampled every half pixel with bilinear interpolation; the
/// weights are stored once as a sparse matrix so the adjoint is its exact
/// transpose. Sinograms are [A, B] row-major, images [H, W] row-major.
class Projector {
 public:
  explicit Projector(ProjectorConfig config);

  const ProjectorConfig& config() const { return config_; }
  std::size_t rays() const { return config_.rays(); }
  std::size_t pixels() const { return config_.pixels(); }
  std::size_t nonzeros() const { return static_cast<std::size_t>(g_.nonZeros()); }

  /// Single image / sinogram.
  std::vector<double> forward(std::span<const double> image) const;
  std::vector<double> adjoint(std::span<const double> sinogram) const;
  /// Frame stacks: [T, P] -> [T, A*B] and back.
  std::vector<double> forward_frames(std::span<const double> frames, std::size_t count) const;
  std::vector<double> adjoint_frames(std::span<const double> sinos, std::size_t count) const;

 private:
  ProjectorConfig config_;
  Eigen::SparseMatrix<double, Eigen::RowMajor> g_;
};

/// Differentiable wrappers: x [T, P] -> [T, A*B], y [T, A*B] -> [T, P].
/// The projector must outlive the graph's backward pass.
ad::Var project(const Projector& g, ad::Var frames);
ad::Var backproject(const Projector& g, ad::Var sinos);

/// Expected sinograms [T, A, B] together with the normalization that produced them:
///   ybar = scale * D * (G x) + randoms.
struct ExpectedSinograms {
  std::size_t frames = 0;
  std::vector<double> values;
  double scale_factor = 0.0;
  double randoms_per_bin = 0.0;
};

/// Projects every frame, applies efficiencies, scales so the true counts sum
/// to target*(1-r) and adds a uniform randoms plane summing to target*r.
/// Throws DataError for negative activity and NumericalError when the
/// activity projects to zero with a nonzero count target.
ExpectedSinograms measurement_expectation(const Projector& g, std::span<const double> activity, std::size_t frames);

/// Independent Poisson draws per element, reproducible for a seed.
std::vector<std::uint32_t> sample_poisson(std::span<const double> expected, std::uint64_t seed);

/// Sidecar fields shared by expected and measured sinogram files.
struct SinogramInfo {
  std::vector<std::size_t> shape;  // [T, A, B]
  std::string kind;                // "expected" | "measured"
  std::uint64_t seed = 0;
  double scale_factor = 0.0;
  double randoms_fraction = 0.0;
  double randoms_per_bin = 0.0;
};

void write_expected(const std::filesystem::path& raw, const std::vector<double>& values, const SinogramInfo& info);
void write_measured(const std::filesystem::path& raw, const std::vector<std::uint32_t>& counts,
                    const SinogramInfo& info);
SinogramInfo read_sinogram_info(const std::filesystem::path& raw);
std::vector<double> read_expected(const std::filesystem::path& raw, SinogramInfo* info = nullptr);
std::vector<std::uint32_t> read_measured(const std::filesystem::path& raw, SinogramInfo* info = nullptr);

}  // namespace hyke::projector
