#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "hyke/error.hpp"
#include "hyke/kinetics/kinetics.hpp"
#include "hyke/phantom/phantom.hpp"

using namespace hyke;
using namespace hyke::phantom;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("hyke_test_phantom_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

RoiPriors degenerate_priors() {
  auto p = default_priors();
  for (auto& [roi, prior] : p) prior.sd.fill(0.0);
  return p;
}

}  // namespace

TEST_CASE("label map: composition, small grids, determinism") {
  const auto m = build_label_map(128, 128, 1);
  CHECK(m.max_label() == 7);
  for (std::uint8_t l = 0; l <= 7; ++l) CHECK(m.count(l) > 0);

  const auto small = build_label_map(16, 16, 42);
  CHECK(tumor_radius(16, 16) == 1);
  for (std::uint8_t l = 1; l <= 7; ++l) CHECK(small.count(l) > 0);
  CHECK(small.count(kTumor) == 5);  // radius-1 disk

  CHECK(build_label_map(40, 36, 9).labels == build_label_map(40, 36, 9).labels);
  CHECK(build_label_map(32, 32, 1).labels != build_label_map(32, 32, 2).labels);
  CHECK_THROWS_AS(build_label_map(15, 64, 1), ConfigError);

  // Every ROI survives across seeds on the desk-scale grid.
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto d = build_label_map(32, 32, seed);
    for (std::uint8_t l = 1; l <= 7; ++l) CHECK(d.count(l) > 0);
  }
}

TEST_CASE("label map: user raster loader") {
  const auto dir = scratch("labels");
  const auto m = build_label_map(20, 24, 3);
  io::write_u8(dir / "user.u8", m.labels);
  const auto back = load_label_map(dir / "user.u8", 20, 24);
  CHECK(back.labels == m.labels);
  CHECK_THROWS_AS(load_label_map(dir / "user.u8", 20, 20), DataError);

  std::vector<std::uint8_t> gap(16 * 16, 0);
  gap[0] = 1;
  gap[1] = 3;
  io::write_u8(dir / "gap.u8", gap);
  CHECK_THROWS_AS(load_label_map(dir / "gap.u8", 16, 16), DataError);
}

TEST_CASE("feng input function") {
  const FengParams p;
  CHECK(feng_input(p, 0.0) == 0.0);
  CHECK(feng_input(FengParams{10, 3, 2, 5, 0.1, 1}, 0.0) == 0.0);
  const double t = 0.5;
  const double direct = (851.1 * t - 21.88 - 20.81) * std::exp(-4.134 * t) + 21.88 * std::exp(-0.0104 * t) +
                        20.81 * std::exp(-0.1191 * t);
  CHECK(feng_input(p, t) == doctest::Approx(direct).epsilon(1e-14));
  const double tail = 21.88 * std::exp(-0.0104 * 60.0);
  CHECK(std::abs(feng_input(p, 60.0) - tail) <= 0.01 * tail);
  CHECK_THROWS_AS(feng_input(p, -0.1), ConfigError);
  CHECK_THROWS_AS((FengParams{1, 1, 1, 0.1, 0.2, 0.3}.validate()), ConfigError);
  CHECK_NOTHROW(p.validate());
}

TEST_CASE("schedule: standard protocol and validation") {
  const auto s = ScanSchedule::standard();
  CHECK(s.num_frames() == 18);
  CHECK(s.duration(0) == 1.0);
  CHECK(s.duration(3) == 3.0);
  CHECK(s.duration(17) == 5.0);
  CHECK(s.total() == 60.0);
  CHECK(s.truncated(6).total() == 12.0);
  CHECK_THROWS_AS(ScanSchedule({0.0, 2.0, 1.0}), ConfigError);
  CHECK_THROWS_AS(ScanSchedule({0.5, 2.0}), ConfigError);
}

TEST_CASE("sample_kinetics: degenerate priors, background, law of large numbers") {
  const auto m = build_label_map(64, 64, 5);
  const auto f = sample_kinetics(m, degenerate_priors(), 1);
  const auto priors = default_priors();
  for (std::size_t p = 0; p < m.size(); ++p) {
    const auto l = m.labels[p];
    for (std::size_t i = 0; i < kNumParams; ++i) {
      const double v = f.get(static_cast<Param>(i), p);
      if (l == kBackground) {
        CHECK(v == 0.0);
      } else {
        CHECK(v == priors.at(l).mean[i]);
      }
    }
  }

  RoiPriors one;
  for (int l = 1; l <= 7; ++l) one[l] = RoiKineticPrior{{0.1, 0.1, 0.1, 0.1, 0.5}, {0.01, 0.0, 0.0, 0.0, 0.0}};
  const auto g = sample_kinetics(m, one, 77);
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t p = 0; p < m.size(); ++p) {
    if (m.labels[p] == kGrayMatter) {
      sum += g.get(kK1, p);
      ++n;
    }
  }
  CHECK(std::abs(sum / static_cast<double>(n) - 0.1) <= 3 * 0.01 / std::sqrt(static_cast<double>(n)));
  CHECK(sample_kinetics(m, one, 77).planes == g.planes);

  RoiPriors wide = one;
  for (auto& [l, p] : wide) p.sd = {1.0, 1.0, 1.0, 1.0, 5.0};
  const auto h = sample_kinetics(m, wide, 3);
  for (std::size_t p = 0; p < m.size(); ++p) {
    if (m.labels[p] == kBackground) continue;
    CHECK(h.get(kK1, p) >= 1e-4);
    CHECK(h.get(kV, p) >= 0.01);
    CHECK(h.get(kV, p) <= 0.99);
  }

  RoiPriors missing = degenerate_priors();
  missing.erase(kTumor);
  CHECK_THROWS_AS(sample_kinetics(m, missing, 1), ConfigError);
}

TEST_CASE("priors: JSON round trip and validation") {
  const auto p = default_priors();
  const auto back = priors_from_json(priors_to_json(p));
  REQUIRE(back.size() == p.size());
  for (const auto& [roi, prior] : p) {
    CHECK(back.at(roi).mean == prior.mean);
    CHECK(back.at(roi).sd == prior.sd);
  }
  auto j = priors_to_json(p);
  j["rois"]["2"]["mean"][4] = 1.2;
  CHECK_THROWS_AS(priors_from_json(j), ConfigError);
  j = priors_to_json(p);
  j["rois"]["3"]["sd"][0] = -0.1;
  CHECK_THROWS_AS(priors_from_json(j), ConfigError);
  j = priors_to_json(p);
  j["rois"]["3"]["mean"] = {0.1, 0.2};
  CHECK_THROWS_AS(priors_from_json(j), ConfigError);
}

TEST_CASE("ground truth: zero kinetics, linear ramp oracle") {
  KineticFields zero{16, 16, std::vector<double>(kNumParams * 256, 0.0)};
  const auto a = generate_ground_truth(zero, FengParams{}, ScanSchedule::standard(), {});
  CHECK(a.frames == 18);
  for (double v : a.values) CHECK(v == 0.0);

  // k1=0.1, k2=k3=k4=0, V=0, C_P = 1, no decay: C_T = 0.1 t, frame [0,1] averages 0.05.
  const auto sched = ScanSchedule::from_durations({1, 1, 2});
  const auto ctx = kinetics::DecodeContext::build(sched, [](double) { return 1.0; }, kinetics::kNoDecay,
                                                  kinetics::SolverGrid::uniform(sched, 0.05));
  const auto model = kinetics::HybridModel::physics_only(kinetics::Physics::TwoTissue);
  const std::vector<double> rates{0.1, 0.0, 0.0, 0.0}, vol{0.0};
  const auto x = kinetics::decode_values(model, rates, vol, {}, ctx);
  CHECK(x[0] == doctest::Approx(0.05).epsilon(1e-12));
  CHECK(x[1] == doctest::Approx(0.15).epsilon(1e-12));
  CHECK(x[2] == doctest::Approx(0.30).epsilon(1e-12));
}

TEST_CASE("ground truth: default phantom TACs and nonnegativity") {
  const auto m = build_label_map(128, 128, 1);
  const auto f = sample_kinetics(m, default_priors(), 1);
  const auto a = generate_ground_truth(f, FengParams{}, ScanSchedule::standard(), {0.05, 0.0, 2});
  CHECK(a.frames == 18);
  CHECK(a.values.size() == 18u * 128 * 128);
  for (double v : a.values) REQUIRE(v >= 0.0);

  std::vector<double> gm(18, 0.0);
  for (std::size_t p = 0; p < a.pixels(); ++p) {
    if (m.labels[p] != kGrayMatter) continue;
    for (std::size_t k = 0; k < 18; ++k) gm[k] += a.values[k * a.pixels() + p];
  }
  const auto peak = static_cast<std::size_t>(std::max_element(gm.begin(), gm.end()) - gm.begin());
  CHECK(peak >= 3);
  CHECK(peak <= 12);
  for (std::size_t p = 0; p < a.pixels(); ++p) {
    if (m.labels[p] == kBackground) CHECK(a.values[p] == 0.0);
  }

  // Threaded and serial generation agree exactly.
  const auto serial = generate_ground_truth(f, FengParams{}, ScanSchedule::standard(), {0.05, 0.0, 1});
  CHECK(serial.values == a.values);
}

TEST_CASE("ground truth: frames are nondecreasing in k1 (property)") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0.005, 0.3), v(0.0, 0.3);
  for (int trial = 0; trial < 20; ++trial) {
    KineticFields f{2, 1, std::vector<double>(kNumParams * 2)};
    const double k1 = u(rng), k2 = u(rng), k3 = u(rng), k4 = u(rng), vf = v(rng);
    const double scaled = k1 * (1.0 + 2.0 * v(rng));
    const double vals[2][5] = {{k1, k2, k3, k4, vf}, {scaled, k2, k3, k4, vf}};
    for (std::size_t p = 0; p < 2; ++p) {
      for (std::size_t i = 0; i < kNumParams; ++i) f.get(static_cast<Param>(i), p) = vals[p][i];
    }
    const auto a = generate_ground_truth(f, FengParams{}, ScanSchedule::standard(), {0.1, 0.0, 1});
    for (std::size_t k = 0; k < a.frames; ++k) CHECK(a.values[k * 2 + 1] >= a.values[k * 2]);
  }
}

TEST_CASE("dataset files: round trip and shape checks") {
  const auto dir = scratch("io");
  const auto sched = ScanSchedule::standard().truncated(4);
  const auto m = build_label_map(20, 18, 2);
  const auto f = sample_kinetics(m, default_priors(), 2);
  const auto a = generate_ground_truth(f, FengParams{}, sched, {0.05, 0.0, 1});
  write_labels(dir, m, 2, sched);
  write_kinetics(dir, f, 2, sched);
  write_activity(dir, a, 2, sched);

  const auto m2 = read_labels(dir);
  CHECK(m2.width == 20);
  CHECK(m2.height == 18);
  CHECK(m2.labels == m.labels);
  const auto f2 = read_kinetics(dir);
  const auto a2 = read_activity(dir);
  CHECK(a2.frames == 4);
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    CHECK(a2.values[i] == doctest::Approx(a.values[i]).epsilon(1e-6));
  }
  CHECK(f2.planes[kNumParams * 0 + 100] == doctest::Approx(f.planes[100]).epsilon(1e-6));

  const auto side = io::read_json(dir / "activity.f32.json");
  CHECK(side.at("dtype") == "f32");
  CHECK(side.at("seed") == 2);
  CHECK(side.at("schedule").size() == 5);
  CHECK_THROWS_AS(io::expect_shape(side, {4, 18, 21}, dir / "activity.f32"), DataError);

  std::filesystem::resize_file(dir / "activity.f32", 12);
  CHECK_THROWS_AS(read_activity(dir), DataError);
  CHECK_THROWS_AS(read_labels(dir / "missing"), DataError);
}
