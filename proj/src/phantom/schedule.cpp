#include "hyke/phantom/schedule.hpp"

#include <cmath>
#include <string>

#include "hyke/error.hpp"

namespace hyke::phantom {

ScanSchedule::ScanSchedule(std::vector<double> boundaries) : boundaries_(std::move(boundaries)) {
  if (boundaries_.size() < 2) throw ConfigError("schedule: need at least one frame");
  if (boundaries_.front() != 0.0) throw ConfigError("schedule: first boundary must be 0");
  for (std::size_t i = 1; i < boundaries_.size(); ++i) {
    if (!(boundaries_[i] > boundaries_[i - 1]) || !std::isfinite(boundaries_[i])) {
      throw ConfigError("schedule: boundaries must be strictly increasing (index " + std::to_string(i) + ")");
    }
  }
}

ScanSchedule ScanSchedule::from_durations(const std::vector<double>& durations) {
  std::vector<double> b{0.0};
  for (double d : durations) b.push_back(b.back() + d);
  return ScanSchedule(std::move(b));
}

ScanSchedule ScanSchedule::standard() {
  std::vector<double> d;
  d.insert(d.end(), 3, 1.0);
  d.insert(d.end(), 9, 3.0);
  d.insert(d.end(), 6, 5.0);
  return from_durations(d);
}

ScanSchedule ScanSchedule::truncated(std::size_t frames) const {
  if (frames == 0 || frames > num_frames()) throw ConfigError("schedule: cannot truncate to " + std::to_string(frames));
  return ScanSchedule(std::vector<double>(boundaries_.begin(), boundaries_.begin() + static_cast<std::ptrdiff_t>(frames) + 1));
}

void FengParams::validate() const {
  if (!(l1 > l3 && l3 > l2 && l2 > 0.0)) {
    throw ConfigError("feng: rate constants must satisfy L1 > L3 > L2 > 0");
  }
}

double feng_input(const FengParams& p, double t) {
  if (t < 0.0) throw ConfigError("feng_input: negative time " + std::to_string(t));
  if (t == 0.0) return 0.0;  // the three terms cancel analytically; avoid rounding residue
  return (p.a1 * t - p.a2 - p.a3) * std::exp(-p.l1 * t) + p.a2 * std::exp(-p.l2 * t) + p.a3 * std::exp(-p.l3 * t);
}

double f18_decay_tau() { return 109.77 / std::log(2.0); }

}  // namespace hyke::phantom
