#include "hyke/phantom/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <thread>

#include "hyke/error.hpp"
#include "hyke/kinetics/kinetics.hpp"

namespace hyke::phantom {

std::uint8_t LabelMap::max_label() const {
  return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end());
}

std::size_t LabelMap::count(std::uint8_t label) const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), label));
}

std::size_t tumor_radius(std::size_t width, std::size_t height) {
  const double r = std::round(0.06 * static_cast<double>(std::min(width, height)));
  return std::max<std::size_t>(1, static_cast<std::size_t>(r));
}

LabelMap build_label_map(std::size_t width, std::size_t height, std::uint64_t seed) {
  if (width < 16 || height < 16) {
    throw ConfigError("phantom: need at least 16x16 pixels, got " + std::to_string(width) + "x" + std::to_string(height));
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(-1.0, 1.0);
  const double hw = 0.5 * static_cast<double>(width), hh = 0.5 * static_cast<double>(height);
  const double cx = hw + 0.02 * hw * jitter(rng), cy = hh + 0.02 * hh * jitter(rng);
  const double s = 1.0 + 0.03 * jitter(rng);
  const double vent_shift = 0.02 * jitter(rng);

  LabelMap m{width, height, std::vector<std::uint8_t>(width * height, kBackground)};
  auto paint = [&](double ox, double oy, double a, double b, std::uint8_t label, auto keep) {
    for (std::size_t r = 0; r < height; ++r) {
      for (std::size_t c = 0; c < width; ++c) {
        const double x = (static_cast<double>(c) + 0.5 - cx - ox) / a;
        const double y = (static_cast<double>(r) + 0.5 - cy - oy) / b;
        auto& l = m.labels[r * width + c];
        if (x * x + y * y <= 1.0 && keep(l)) l = label;
      }
    }
  };
  auto any = [](std::uint8_t) { return true; };
  auto inside_brain = [](std::uint8_t l) { return l == kGrayMatter || l == kWhiteMatter; };

  const double head_a = 0.92 * hw * s, head_b = 0.96 * hh * s;
  const double ring = std::max(1.3, 0.09 * std::min(hw, hh));
  paint(0, 0, head_a, head_b, kSkull, any);
  paint(0, 0, head_a - ring, head_b - ring, kGrayMatter, any);
  paint(0, 0, 0.58 * hw * s, 0.66 * hh * s, kWhiteMatter, any);
  const double va = std::max(0.9, 0.08 * hw), vb = std::max(1.6, 0.2 * hh);
  const double vx = std::max(1.2, (0.17 + vent_shift) * hw), vy = -0.12 * hh;
  paint(-vx, vy, va, vb, kVentricleLeft, inside_brain);
  paint(vx, vy, va, vb, kVentricleRight, inside_brain);
  paint(0, 0.34 * hh, std::max(1.6, 0.2 * hw), std::max(0.9, 0.09 * hh), kDeepNucleus, inside_brain);

  // Tumor: a disk fully inside white matter, center drawn by seed.
  const auto rad = static_cast<long>(tumor_radius(width, height));
  std::vector<std::size_t> centers;
  for (long r = rad; r + rad < static_cast<long>(height); ++r) {
    for (long c = rad; c + rad < static_cast<long>(width); ++c) {
      bool ok = true;
      for (long dr = -rad; dr <= rad && ok; ++dr) {
        for (long dc = -rad; dc <= rad && ok; ++dc) {
          if (dr * dr + dc * dc > rad * rad) continue;
          ok = m.at(static_cast<std::size_t>(r + dr), static_cast<std::size_t>(c + dc)) == kWhiteMatter;
        }
      }
      if (ok) centers.push_back(static_cast<std::size_t>(r) * width + static_cast<std::size_t>(c));
    }
  }
  if (centers.empty()) throw ConfigError("phantom: no room for the tumor inside white matter");
  const std::size_t center = centers[std::uniform_int_distribution<std::size_t>(0, centers.size() - 1)(rng)];
  const auto tr = static_cast<long>(center / width), tc = static_cast<long>(center % width);
  for (long dr = -rad; dr <= rad; ++dr) {
    for (long dc = -rad; dc <= rad; ++dc) {
      if (dr * dr + dc * dc <= rad * rad) {
        m.labels[static_cast<std::size_t>(tr + dr) * width + static_cast<std::size_t>(tc + dc)] = kTumor;
      }
    }
  }

  for (std::uint8_t l = 1; l <= kNumRois; ++l) {
    if (m.count(l) == 0) {
      throw ConfigError("phantom: ROI " + std::to_string(l) + " is empty at " + std::to_string(width) + "x" +
                        std::to_string(height));
    }
  }
  return m;
}

LabelMap load_label_map(const std::filesystem::path& raw, std::size_t width, std::size_t height) {
  LabelMap m{width, height, io::read_u8(raw, width * height)};
  const std::uint8_t top = m.max_label();
  if (top == 0) throw DataError(raw.string() + ": label map has no ROI");
  for (std::uint8_t l = 1; l <= top; ++l) {
    if (m.count(l) == 0) throw DataError(raw.string() + ": label " + std::to_string(l) + " has no pixels");
  }
  return m;
}

void RoiKineticPrior::validate(int roi) const {
  for (std::size_t i = 0; i < kNumParams; ++i) {
    if (!(mean[i] > 0) || !(sd[i] >= 0)) {
      throw ConfigError("prior for ROI " + std::to_string(roi) + ": means must be > 0 and sd >= 0");
    }
  }
  if (!(mean[kV] < 1)) throw ConfigError("prior for ROI " + std::to_string(roi) + ": V mean must lie in (0,1)");
}

namespace {

RoiKineticPrior prior10(double k1, double k2, double k3, double k4, double v) {
  RoiKineticPrior p{{k1, k2, k3, k4, v}, {}};
  for (std::size_t i = 0; i < kNumParams; ++i) p.sd[i] = 0.1 * p.mean[i];
  return p;
}

const char* roi_name(int roi) {
  switch (roi) {
    case kSkull: return "skull";
    case kGrayMatter: return "gray_matter";
    case kWhiteMatter: return "white_matter";
    case kVentricleLeft: return "ventricle_left";
    case kVentricleRight: return "ventricle_right";
    case kDeepNucleus: return "deep_nucleus";
    case kTumor: return "tumor";
    default: return "roi";
  }
}

}  // namespace

RoiPriors default_priors() {
  return {
      {kSkull, prior10(0.02, 0.10, 0.01, 0.02, 0.02)},
      {kGrayMatter, prior10(0.10, 0.15, 0.06, 0.05, 0.05)},
      {kWhiteMatter, prior10(0.05, 0.12, 0.03, 0.02, 0.03)},
      {kVentricleLeft, prior10(0.01, 0.05, 0.005, 0.01, 0.01)},
      {kVentricleRight, prior10(0.01, 0.05, 0.005, 0.01, 0.01)},
      {kDeepNucleus, prior10(0.12, 0.14, 0.08, 0.04, 0.05)},
      {kTumor, prior10(0.15, 0.10, 0.10, 0.01, 0.08)},
  };
}

RoiPriors priors_from_json(const io::Json& j) {
  RoiPriors out;
  try {
    for (const auto& [key, v] : j.at("rois").items()) {
      const int roi = std::stoi(key);
      RoiKineticPrior p;
      const auto mean = v.at("mean").get<std::vector<double>>();
      const auto sd = v.at("sd").get<std::vector<double>>();
      if (mean.size() != kNumParams || sd.size() != kNumParams) {
        throw ConfigError("prior for ROI " + key + ": mean and sd need 5 entries (k1,k2,k3,k4,V)");
      }
      std::copy(mean.begin(), mean.end(), p.mean.begin());
      std::copy(sd.begin(), sd.end(), p.sd.begin());
      p.validate(roi);
      out[roi] = p;
    }
  } catch (const io::Json::exception& e) {
    throw ConfigError(std::string("ROI priors: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw ConfigError("ROI priors: ROI keys must be integers");
  }
  return out;
}

io::Json priors_to_json(const RoiPriors& priors) {
  io::Json rois = io::Json::object();
  for (const auto& [roi, p] : priors) {
    rois[std::to_string(roi)] = {{"name", roi_name(roi)}, {"mean", p.mean}, {"sd", p.sd}};
  }
  return {{"params", {"k1", "k2", "k3", "k4", "V"}}, {"units", {"1/min", "1/min", "1/min", "1/min", "fraction"}},
          {"rois", rois}};
}

KineticFields sample_kinetics(const LabelMap& labels, const RoiPriors& priors, std::uint64_t seed) {
  for (std::uint8_t l = 1; l <= labels.max_label(); ++l) {
    if (labels.count(l) > 0 && !priors.contains(l)) {
      throw ConfigError("sample_kinetics: no prior for ROI " + std::to_string(l));
    }
  }
  KineticFields f{labels.width, labels.height, std::vector<double>(kNumParams * labels.size(), 0.0)};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t p = 0; p < labels.size(); ++p) {
    const std::uint8_t l = labels.labels[p];
    if (l == kBackground) continue;
    const auto& prior = priors.at(l);
    for (std::size_t i = 0; i < kNumParams; ++i) {
      const double draw = prior.mean[i] + prior.sd[i] * normal(rng);
      f.get(static_cast<Param>(i), p) = i == kV ? std::clamp(draw, 0.01, 0.99) : std::max(draw, 1e-4);
    }
  }
  return f;
}

double SolverConfig::decay_tau() const { return tau > 0 ? tau : f18_decay_tau(); }

double ActivitySeq::max() const { return values.empty() ? 0.0 : *std::max_element(values.begin(), values.end()); }

ActivitySeq generate_ground_truth(const KineticFields& fields, const FengParams& feng, const ScanSchedule& schedule,
                                  const SolverConfig& solver) {
  feng.validate();
  const std::size_t P = fields.pixels(), T = schedule.num_frames();
  if (fields.planes.size() != kNumParams * P) throw ConfigError("generate_ground_truth: kinetic planes do not cover the grid");
  for (std::size_t p = 0; p < P; ++p) {
    kinetics::CompartmentParams{fields.get(kK1, p), fields.get(kK2, p), fields.get(kK3, p), fields.get(kK4, p),
                                fields.get(kV, p)}
        .validate();
  }
  const auto ctx = kinetics::DecodeContext::build(
      schedule, [&](double t) { return feng_input(feng, t); }, solver.decay_tau(),
      kinetics::SolverGrid::uniform(schedule, solver.dt));
  const auto model = kinetics::HybridModel::physics_only(kinetics::Physics::TwoTissue);

  ActivitySeq out{T, fields.height, fields.width, std::vector<double>(T * P, 0.0)};
  constexpr std::size_t kChunk = 512;
  const std::size_t chunks = (P + kChunk - 1) / kChunk;
  auto run_chunk = [&](std::size_t c) {
    const std::size_t p0 = c * kChunk, n = std::min(kChunk, P - p0);
    std::vector<double> rates(4 * n), vol(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t r = 0; r < 4; ++r) rates[r * n + i] = fields.get(static_cast<Param>(r), p0 + i);
      vol[i] = fields.get(kV, p0 + i);
    }
    std::vector<double> x;
    try {
      x = kinetics::decode_values(model, rates, vol, {}, ctx);
    } catch (const NumericalError& e) {
      throw NumericalError(std::string(e.what()) + " in pixel block starting at " + std::to_string(p0));
    }
    for (std::size_t k = 0; k < T; ++k) {
      for (std::size_t i = 0; i < n; ++i) out.values[k * P + p0 + i] = std::max(0.0, x[k * n + i]);
    }
  };

  const std::size_t threads = std::clamp<std::size_t>(solver.threads, 1, chunks);
  if (threads == 1) {
    for (std::size_t c = 0; c < chunks; ++c) run_chunk(c);
  } else {
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (std::size_t c = t; c < chunks; c += threads) run_chunk(c);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  return out;
}

namespace {

io::Json sidecar(std::vector<std::size_t> shape, const std::string& dtype, const io::Json& units, std::uint64_t seed,
                 const ScanSchedule& schedule) {
  return {{"shape", shape}, {"dtype", dtype}, {"units", units}, {"seed", seed}, {"schedule", schedule.boundaries()}};
}

}  // namespace

void write_labels(const std::filesystem::path& dir, const LabelMap& labels, std::uint64_t seed,
                  const ScanSchedule& schedule) {
  const auto raw = dir / "labels.u8";
  io::write_u8(raw, labels.labels);
  io::write_json(io::sidecar_path(raw), sidecar({labels.height, labels.width}, "u8", "label", seed, schedule));
}

void write_kinetics(const std::filesystem::path& dir, const KineticFields& fields, std::uint64_t seed,
                    const ScanSchedule& schedule) {
  const auto raw = dir / "kinetics.f32";
  io::write_f32(raw, fields.planes);
  auto j = sidecar({kNumParams, fields.height, fields.width}, "f32",
                   {"1/min", "1/min", "1/min", "1/min", "fraction"}, seed, schedule);
  j["planes"] = {"k1", "k2", "k3", "k4", "V"};
  io::write_json(io::sidecar_path(raw), j);
}

void write_activity(const std::filesystem::path& dir, const ActivitySeq& activity, std::uint64_t seed,
                    const ScanSchedule& schedule) {
  const auto raw = dir / "activity.f32";
  io::write_f32(raw, activity.values);
  io::write_json(io::sidecar_path(raw),
                 sidecar({activity.frames, activity.height, activity.width}, "f32", "activity (a.u.)", seed, schedule));
}

LabelMap read_labels(const std::filesystem::path& dir) {
  const auto raw = dir / "labels.u8";
  const auto shape = io::sidecar_shape(io::read_json(io::sidecar_path(raw)), raw);
  if (shape.size() != 2) throw DataError(raw.string() + ": labels must be 2D");
  return {shape[1], shape[0], io::read_u8(raw, shape[0] * shape[1])};
}

KineticFields read_kinetics(const std::filesystem::path& dir) {
  const auto raw = dir / "kinetics.f32";
  const auto shape = io::sidecar_shape(io::read_json(io::sidecar_path(raw)), raw);
  if (shape.size() != 3 || shape[0] != kNumParams) throw DataError(raw.string() + ": expected [5,H,W]");
  return {shape[2], shape[1], io::read_f32(raw, shape[0] * shape[1] * shape[2])};
}

ActivitySeq read_activity(const std::filesystem::path& dir) {
  const auto raw = dir / "activity.f32";
  const auto shape = io::sidecar_shape(io::read_json(io::sidecar_path(raw)), raw);
  if (shape.size() != 3) throw DataError(raw.string() + ": expected [T,H,W]");
  return {shape[0], shape[1], shape[2], io::read_f32(raw, shape[0] * shape[1] * shape[2])};
}

}  // namespace hyke::phantom
