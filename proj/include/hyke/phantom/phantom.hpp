#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "hyke/io/raw.hpp"
#include "hyke/phantom/schedule.hpp"

namespace hyke::phantom {

/// ROI ids of the synthetic phantom. 0 is background.
enum Roi : std::uint8_t {
  kBackground = 0,
  kSkull = 1,
  kGrayMatter = 2,
  kWhiteMatter = 3,
  kVentricleLeft = 4,
  kVentricleRight = 5,
  kDeepNucleus = 6,
  kTumor = 7,
};
constexpr std::uint8_t kNumRois = 7;

/// H x W row-major labels.
struct LabelMap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> labels;

  std::size_t size() const { return width * height; }
  std::uint8_t at(std::size_t row, std::size_t col) const { return labels[row * width + col]; }
  /// Largest label present.
  std::uint8_t max_label() const;
  std::size_t count(std::uint8_t label) const;
};

/// Nested-ellipse brain: skull ring, gray-matter shell, white-matter core,
/// two ventricle lobes, a deep nucleus and a circular tumor inside white
/// matter. Geometry is jittered slightly by `seed`. Throws ConfigError for
/// sizes below 16 or when an ROI cannot be placed.
LabelMap build_label_map(std::size_t width, std::size_t height, std::uint64_t seed);

/// Tumor radius in pixels for a given grid.
std::size_t tumor_radius(std::size_t width, std::size_t height);

/// Loads a user-supplied raw u8 raster; every nonzero label must be present.
LabelMap load_label_map(const std::filesystem::path& raw, std::size_t width, std::size_t height);

/// Parameter order used for kinetic planes.
enum Param : std::size_t { kK1 = 0, kK2 = 1, kK3 = 2, kK4 = 3, kV = 4 };
constexpr std::size_t kNumParams = 5;

struct RoiKineticPrior {
  std::array<double, kNumParams> mean{};
  std::array<double, kNumParams> sd{};

  void validate(int roi) const;
};

using RoiPriors = std::map<int, RoiKineticPrior>;

/// Built-in table (also shipped as configs/roi_priors.json).
RoiPriors default_priors();
/// `{"rois": {"<id>": {"name": ..., "mean": [k1,k2,k3,k4,V], "sd": [...]}}}`
RoiPriors priors_from_json(const io::Json& j);
io::Json priors_to_json(const RoiPriors& priors);

/// Per-pixel parameter planes [5, H, W] in the order k1, k2, k3, k4, V.
struct KineticFields {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> planes;

  std::size_t pixels() const { return width * height; }
  double get(Param p, std::size_t pixel) const { return planes[p * pixels() + pixel]; }
  double& get(Param p, std::size_t pixel) { return planes[p * pixels() + pixel]; }
};

/// Gaussian draws per ROI; rates truncated below at 1e-4, V clamped to
/// [0.01, 0.99]; background is all zero. Throws ConfigError when a present
/// ROI has no prior.
KineticFields sample_kinetics(const LabelMap& labels, const RoiPriors& priors, std::uint64_t seed);

struct SolverConfig {
  double dt = 0.05;
  double tau = 0.0;  // <= 0 selects the F-18 default; +inf disables decay
  std::size_t threads = 1;

  double decay_tau() const;
};

/// [T, H, W] activity, row-major.
struct ActivitySeq {
  std::size_t frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  std::size_t pixels() const { return width * height; }
  double max() const;
};

/// Two-tissue solve from zero state per pixel plus decay-weighted frame
/// averaging. Throws NumericalError naming the pixel and time when the
/// solve diverges.
ActivitySeq generate_ground_truth(const KineticFields& fields, const FengParams& feng, const ScanSchedule& schedule,
                                  const SolverConfig& solver);

/// Raw + sidecar files in a sequence directory.
void write_labels(const std::filesystem::path& dir, const LabelMap& labels, std::uint64_t seed,
                  const ScanSchedule& schedule);
void write_kinetics(const std::filesystem::path& dir, const KineticFields& fields, std::uint64_t seed,
                    const ScanSchedule& schedule);
void write_activity(const std::filesystem::path& dir, const ActivitySeq& activity, std::uint64_t seed,
                    const ScanSchedule& schedule);
LabelMap read_labels(const std::filesystem::path& dir);
KineticFields read_kinetics(const std::filesystem::path& dir);
ActivitySeq read_activity(const std::filesystem::path& dir);

}  // namespace hyke::phantom
