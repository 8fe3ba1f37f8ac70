#pragma once

#include <vector>

namespace hyke::phantom {

/// Frame boundaries in minutes, t0 = 0, strictly increasing.
class ScanSchedule {
 public:
  ScanSchedule() = default;
  explicit ScanSchedule(std::vector<double> boundaries);

  /// Builds boundaries from consecutive frame durations (minutes).
  static ScanSchedule from_durations(const std::vector<double>& durations);
  /// 3 x 1 min, 9 x 3 min, 6 x 5 min: 18 frames over 60 min.
  static ScanSchedule standard();

  const std::vector<double>& boundaries() const { return boundaries_; }
  std::size_t num_frames() const { return boundaries_.size() - 1; }
  double start(std::size_t k) const { return boundaries_[k]; }
  double end(std::size_t k) const { return boundaries_[k + 1]; }
  double duration(std::size_t k) const { return end(k) - start(k); }
  double total() const { return boundaries_.back(); }

  /// Keeps only the first `frames` frames.
  ScanSchedule truncated(std::size_t frames) const;

  bool operator==(const ScanSchedule&) const = default;

 private:
  std::vector<double> boundaries_{0.0, 1.0};
};

/// Feng plasma input function
///   C_P(t) = (A1 t - A2 - A3) e^{-L1 t} + A2 e^{-L2 t} + A3 e^{-L3 t}.
struct FengParams {
  double a1 = 851.1;
  double a2 = 21.88;
  double a3 = 20.81;
  double l1 = 4.134;
  double l2 = 0.0104;
  double l3 = 0.1191;

  /// Throws ConfigError unless L1 > L3 > L2 > 0.
  void validate() const;
};

/// Plasma concentration at t >= 0 minutes (throws ConfigError for t < 0).
double feng_input(const FengParams& p, double t);

/// F-18 decay constant in minutes (half-life 109.77 min / ln 2).
double f18_decay_tau();

}  // namespace hyke::phantom
