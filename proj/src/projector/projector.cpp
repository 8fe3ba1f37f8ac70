#include "hyke/projector/projector.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "hyke/error.hpp"

namespace hyke::projector {

void ProjectorConfig::validate() const {
  if (num_angles < 1 || num_bins < 1) throw ConfigError("projector: need at least one angle and one bin");
  if (height < 1 || width < 1) throw ConfigError("projector: empty image grid");
  if (!(bin_spacing > 0)) throw ConfigError("projector: bin spacing must be positive");
  if (!efficiencies.empty()) {
    if (efficiencies.size() != num_bins) {
      throw ConfigError("projector: " + std::to_string(efficiencies.size()) + " efficiencies for " +
                        std::to_string(num_bins) + " bins");
    }
    for (double e : efficiencies) {
      if (!(e > 0) || !std::isfinite(e)) throw ConfigError("projector: efficiencies must be positive");
    }
  }
  if (!(randoms_fraction >= 0 && randoms_fraction < 1)) throw ConfigError("projector: randoms fraction must lie in [0,1)");
  if (!(target_total_counts >= 0) || !std::isfinite(target_total_counts)) {
    throw ConfigError("projector: target counts must be finite and >= 0");
  }
}

Projector::Projector(ProjectorConfig config) : config_(std::move(config)) {
  config_.validate();
  const std::size_t A = config_.num_angles, B = config_.num_bins, H = config_.height, W = config_.width;
  const double cx = 0.5 * static_cast<double>(W), cy = 0.5 * static_cast<double>(H);
  const double half_len = 0.5 * std::hypot(static_cast<double>(W), static_cast<double>(H)) + 1.0;
  constexpr double kStep = 0.5;
  const auto samples = static_cast<long>(std::ceil(half_len / kStep));

  std::vector<Eigen::Triplet<double>> trips;
  std::vector<std::pair<std::size_t, double>> row;
  for (std::size_t a = 0; a < A; ++a) {
    const double th = std::numbers::pi * static_cast<double>(a) / static_cast<double>(A);
    const double nx = std::cos(th), ny = std::sin(th);  // detector axis
    const double dx = -ny, dy = nx;                     // ray direction
    for (std::size_t b = 0; b < B; ++b) {
      const double s = (static_cast<double>(b) - 0.5 * static_cast<double>(B - 1)) * config_.bin_spacing;
      row.clear();
      for (long i = -samples; i <= samples; ++i) {
        const double t = static_cast<double>(i) * kStep;
        // continuous coordinates with pixel (r, c) centered at (c + 0.5, r + 0.5)
        const double x = cx + s * nx + t * dx - 0.5, y = cy + s * ny + t * dy - 0.5;
        const double fx = std::floor(x), fy = std::floor(y);
        const double wx = x - fx, wy = y - fy;
        const long c0 = static_cast<long>(fx), r0 = static_cast<long>(fy);
        const long cs[2] = {c0, c0 + 1}, rs[2] = {r0, r0 + 1};
        const double wxs[2] = {1.0 - wx, wx}, wys[2] = {1.0 - wy, wy};
        for (int jr = 0; jr < 2; ++jr) {
          if (rs[jr] < 0 || rs[jr] >= static_cast<long>(H)) continue;
          for (int jc = 0; jc < 2; ++jc) {
            if (cs[jc] < 0 || cs[jc] >= static_cast<long>(W)) continue;
            const double w = kStep * wxs[jc] * wys[jr];
            if (w > 0) row.emplace_back(static_cast<std::size_t>(rs[jr]) * W + static_cast<std::size_t>(cs[jc]), w);
          }
        }
      }
      std::sort(row.begin(), row.end());
      const auto r = static_cast<int>(a * B + b);
      for (std::size_t i = 0; i < row.size();) {
        double w = 0;
        const std::size_t col = row[i].first;
        for (; i < row.size() && row[i].first == col; ++i) w += row[i].second;
        trips.emplace_back(r, static_cast<int>(col), w);
      }
    }
  }
  g_.resize(static_cast<Eigen::Index>(A * B), static_cast<Eigen::Index>(H * W));
  g_.setFromTriplets(trips.begin(), trips.end());
  g_.makeCompressed();
}

namespace {

using ColMat = Eigen::MatrixXd;

}  // namespace

std::vector<double> Projector::forward_frames(std::span<const double> frames, std::size_t count) const {
  if (frames.size() != count * pixels()) {
    throw ShapeError("radon_forward: got " + std::to_string(frames.size()) + " values for " + std::to_string(count) +
                     " frames of " + std::to_string(config_.height) + "x" + std::to_string(config_.width));
  }
  std::vector<double> out(count * rays());
  Eigen::Map<const ColMat> X(frames.data(), static_cast<Eigen::Index>(pixels()), static_cast<Eigen::Index>(count));
  Eigen::Map<ColMat> Y(out.data(), static_cast<Eigen::Index>(rays()), static_cast<Eigen::Index>(count));
  Y.noalias() = g_ * X;
  return out;
}

std::vector<double> Projector::adjoint_frames(std::span<const double> sinos, std::size_t count) const {
  if (sinos.size() != count * rays()) {
    throw ShapeError("backproject: got " + std::to_string(sinos.size()) + " values for " + std::to_string(count) +
                     " sinograms of " + std::to_string(config_.num_angles) + "x" + std::to_string(config_.num_bins));
  }
  std::vector<double> out(count * pixels());
  Eigen::Map<const ColMat> Y(sinos.data(), static_cast<Eigen::Index>(rays()), static_cast<Eigen::Index>(count));
  Eigen::Map<ColMat> X(out.data(), static_cast<Eigen::Index>(pixels()), static_cast<Eigen::Index>(count));
  X.noalias() = g_.transpose() * Y;
  return out;
}

std::vector<double> Projector::forward(std::span<const double> image) const { return forward_frames(image, 1); }
std::vector<double> Projector::adjoint(std::span<const double> sinogram) const { return adjoint_frames(sinogram, 1); }

ad::Var project(const Projector& g, ad::Var frames) {
  const auto& shape = frames.shape();
  if (shape.size() != 2 || shape[1] != g.pixels()) {
    throw ShapeError("project: expected [T," + std::to_string(g.pixels()) + "], got " + ad::to_string(shape));
  }
  const std::size_t T = shape[0];
  ad::Tensor out({T, g.rays()}, g.forward_frames(frames.value().values, T));
  const Projector* gp = &g;
  ad::Var ops[] = {frames};
  return frames.graph->record_custom("project", ops, std::move(out),
                                     [gp, T](std::span<const double> gout, std::span<const std::span<double>> gin) {
                                       if (gin[0].empty()) return;
                                       const auto back = gp->adjoint_frames(gout, T);
                                       for (std::size_t i = 0; i < back.size(); ++i) gin[0][i] += back[i];
                                     });
}

ad::Var backproject(const Projector& g, ad::Var sinos) {
  const auto& shape = sinos.shape();
  if (shape.size() != 2 || shape[1] != g.rays()) {
    throw ShapeError("backproject: expected [T," + std::to_string(g.rays()) + "], got " + ad::to_string(shape));
  }
  const std::size_t T = shape[0];
  ad::Tensor out({T, g.pixels()}, g.adjoint_frames(sinos.value().values, T));
  const Projector* gp = &g;
  ad::Var ops[] = {sinos};
  return sinos.graph->record_custom("backproject", ops, std::move(out),
                                    [gp, T](std::span<const double> gout, std::span<const std::span<double>> gin) {
                                      if (gin[0].empty()) return;
                                      const auto fwd = gp->forward_frames(gout, T);
                                      for (std::size_t i = 0; i < fwd.size(); ++i) gin[0][i] += fwd[i];
                                    });
}

ExpectedSinograms measurement_expectation(const Projector& g, std::span<const double> activity, std::size_t frames) {
  for (double v : activity) {
    if (!(v >= 0) || !std::isfinite(v)) throw DataError("measurement_expectation: activity must be finite and >= 0");
  }
  const auto& cfg = g.config();
  ExpectedSinograms out;
  out.frames = frames;
  out.values = g.forward_frames(activity, frames);
  const std::size_t B = cfg.num_bins;
  double total = 0.0;
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    out.values[i] *= cfg.efficiency(i % B);
    total += out.values[i];
  }
  const double trues = cfg.target_total_counts * (1.0 - cfg.randoms_fraction);
  if (trues > 0 && !(total > 0)) {
    throw NumericalError("measurement_expectation: activity projects to zero, cannot scale to the count target");
  }
  out.scale_factor = total > 0 ? trues / total : 0.0;
  out.randoms_per_bin = cfg.target_total_counts * cfg.randoms_fraction / static_cast<double>(out.values.size());
  for (double& v : out.values) v = out.scale_factor * v + out.randoms_per_bin;
  return out;
}

std::vector<std::uint32_t> sample_poisson(std::span<const double> expected, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::uint32_t> out(expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const double lam = expected[i];
    if (!(lam >= 0) || !std::isfinite(lam)) throw DataError("sample_poisson: expectation must be finite and >= 0");
    if (lam == 0.0) continue;
    std::poisson_distribution<std::uint64_t> d(lam);
    const auto k = d(rng);
    if (k > 0xffffffffULL) throw NumericalError("sample_poisson: count exceeds 32 bits");
    out[i] = static_cast<std::uint32_t>(k);
  }
  return out;
}

namespace {

io::Json info_json(const SinogramInfo& info) {
  return {{"shape", info.shape},
          {"kind", info.kind},
          {"dtype", info.kind == "measured" ? "u32" : "f32"},
          {"seed", info.seed},
          {"scale_factor", info.scale_factor},
          {"randoms_fraction", info.randoms_fraction},
          {"randoms_per_bin", info.randoms_per_bin}};
}

std::size_t count_of(const SinogramInfo& info) {
  std::size_t n = 1;
  for (auto e : info.shape) n *= e;
  return n;
}

}  // namespace

void write_expected(const std::filesystem::path& raw, const std::vector<double>& values, const SinogramInfo& info) {
  auto i = info;
  i.kind = "expected";
  if (count_of(i) != values.size()) throw ShapeError("write_expected: shape does not match data");
  io::write_f32(raw, values);
  io::write_json(io::sidecar_path(raw), info_json(i));
}

void write_measured(const std::filesystem::path& raw, const std::vector<std::uint32_t>& counts,
                    const SinogramInfo& info) {
  auto i = info;
  i.kind = "measured";
  if (count_of(i) != counts.size()) throw ShapeError("write_measured: shape does not match data");
  io::write_u32(raw, counts);
  io::write_json(io::sidecar_path(raw), info_json(i));
}

SinogramInfo read_sinogram_info(const std::filesystem::path& raw) {
  const auto j = io::read_json(io::sidecar_path(raw));
  SinogramInfo info;
  info.shape = io::sidecar_shape(j, raw);
  if (info.shape.size() != 3) throw DataError(raw.string() + ": sinograms must be [T,A,B]");
  try {
    info.kind = j.at("kind").get<std::string>();
    info.seed = j.at("seed").get<std::uint64_t>();
    info.scale_factor = j.at("scale_factor").get<double>();
    info.randoms_fraction = j.at("randoms_fraction").get<double>();
    info.randoms_per_bin = j.value("randoms_per_bin", 0.0);
  } catch (const io::Json::exception& e) {
    throw DataError(raw.string() + ": bad sinogram sidecar (" + e.what() + ")");
  }
  return info;
}

std::vector<double> read_expected(const std::filesystem::path& raw, SinogramInfo* info) {
  const auto i = read_sinogram_info(raw);
  if (i.kind != "expected") throw DataError(raw.string() + ": not an expected sinogram");
  if (info) *info = i;
  return io::read_f32(raw, count_of(i));
}

std::vector<std::uint32_t> read_measured(const std::filesystem::path& raw, SinogramInfo* info) {
  const auto i = read_sinogram_info(raw);
  if (i.kind != "measured") throw DataError(raw.string() + ": not a measured sinogram");
  if (info) *info = i;
  return io::read_u32(raw, count_of(i));
}

}  // namespace hyke::projector
