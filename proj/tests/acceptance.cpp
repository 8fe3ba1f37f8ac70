// Acceptance run: one PASS/FAIL line per criterion.
//
// Criteria 1-6 are oracle and property checks. Criteria 7-10 train every
// variant on a simulated desk-scale dataset (created on first use) and compare
// test-split PSNR.

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "hyke/error.hpp"
#include "hyke/kinetics/kinetics.hpp"
#include "hyke/metrics/metrics.hpp"
#include "hyke/phantom/phantom.hpp"
#include "hyke/projector/projector.hpp"
#include "hyke/recon/recon.hpp"
#include "hyke/train/train.hpp"

namespace fs = std::filesystem;
using namespace hyke;

namespace {

using Clock = std::chrono::steady_clock;

constexpr std::size_t kDeskEpochs = 60;

int failures = 0;

void report(int id, bool pass, const std::string& what, Clock::time_point t0) {
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  std::printf("%s %2d  %s  [%.1f s]\n", pass ? "PASS" : "FAIL", id, what.c_str(), secs);
  std::fflush(stdout);
  if (!pass) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::vector<double> randn(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

// ------------------------------------------------------------------ 1

void ode_oracle() {
  const auto t0 = Clock::now();
  const double k1 = 0.1, k2 = 0.2, t_end = 30.0;
  kinetics::Rhs one = [&](double, std::span<const double> z, std::span<double> dz) {
    dz[0] = kinetics::one_tissue_rhs(z[0], 1.0, k1, k2);
  };
  auto exact = [&](double t) { return k1 / k2 * (1.0 - std::exp(-k2 * t)); };
  const auto path = kinetics::integrate(one, {0.0}, t_end, 0.01);
  double worst = 0.0;
  for (std::size_t n = 0; n < path.num_nodes(); ++n) worst = std::max(worst, std::abs(path.states[n] - exact(path.times[n])));

  const std::vector<double> dts{1.0, 0.5, 0.25, 0.2, 0.1};
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (double dt : dts) {
    const double x = std::log(dt);
    const double y = std::log(std::abs(kinetics::integrate(one, {0.0}, 5.0, dt).states.back() - exact(5.0)));
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double n = static_cast<double>(dts.size());
  const double order = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  report(1, worst <= 1e-6 && order >= 3.8,
         fmt("one-tissue closed form: max abs error %.2e at dt 0.01 (<= 1e-6); RK4 order %.3f (>= 3.8)", worst, order),
         t0);
}

// ------------------------------------------------------------------ 2

void adjointness() {
  const auto t0 = Clock::now();
  struct Geo {
    std::size_t angles, bins, n;
  };
  std::mt19937_64 rng(2024);
  double worst = 0.0;
  std::size_t trials = 0;
  for (const Geo geo : {Geo{64, 48, 32}, Geo{160, 128, 128}}) {
    projector::ProjectorConfig cfg;
    cfg.num_angles = geo.angles;
    cfg.num_bins = geo.bins;
    cfg.height = cfg.width = geo.n;
    const projector::Projector g(cfg);
    for (int i = 0; i < 100; ++i, ++trials) {
      const auto x = randn(g.pixels(), rng), y = randn(g.rays(), rng);
      const double lhs = dot(g.forward(x), y), rhs = dot(x, g.adjoint(y));
      worst = std::max(worst, std::abs(lhs - rhs) / std::max(std::abs(lhs), std::abs(rhs)));
    }
  }
  report(2, worst <= 1e-10,
         fmt("<Gx,y> = <x,G'y> over %zu random instances at 64x48 and 160x128: max rel gap %.2e (<= 1e-10)", trials,
             worst),
         t0);
}

// ------------------------------------------------------------------ 3

void gradient_suite() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::size_t least = SIZE_MAX;
  for (auto v : train::kAllVariants) {
    for (auto m : {train::Mode::Supervised, train::Mode::Unsupervised}) {
      const auto r = train::end_to_end_gradcheck(v, m, 11);
      worst = std::max(worst, r.max_rel_error);
      least = std::min(least, r.checked);
    }
  }
  report(3, worst < 1e-4 && least >= 50,
         fmt("end-to-end gradients, 4 variants x 2 losses on 4x4, T=6: max rel error %.2e (< 1e-4), >= %zu "
             "parameters each",
             worst, least),
         t0);
}

// ------------------------------------------------------------------ 4

void poisson_statistics() {
  const auto t0 = Clock::now();
  const double lam = 1000.0;
  const std::size_t n = 100000;
  const auto draws = projector::sample_poisson(std::vector<double>(n, lam), 4);
  double mean = 0.0, var = 0.0;
  for (auto v : draws) mean += v;
  mean /= static_cast<double>(n);
  for (auto v : draws) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n - 1);
  const double sigma = std::sqrt(lam / static_cast<double>(n));
  report(4, std::abs(mean - lam) <= 3 * sigma && std::abs(var - lam) <= 0.05 * lam,
         fmt("Poisson(1000) x 1e5: mean %.3f (|d| %.2f sigma), variance %.1f (%.2f%% off)", mean,
             std::abs(mean - lam) / sigma, var, 100 * std::abs(var - lam) / lam),
         t0);
}

// ------------------------------------------------------------------ 5

void fbp_sanity() {
  const auto t0 = Clock::now();
  const std::size_t n = 128;
  projector::ProjectorConfig cfg;
  cfg.num_angles = 160;
  cfg.num_bins = 128;
  cfg.height = cfg.width = n;
  const projector::Projector g(cfg);
  std::vector<double> disk(n * n, 0.0);
  const double c = 0.5 * static_cast<double>(n), r = 40.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      int inside = 0;
      for (int a = 0; a < 8; ++a) {
        for (int b = 0; b < 8; ++b) {
          const double x = static_cast<double>(j) + (b + 0.5) / 8 - c, y = static_cast<double>(i) + (a + 0.5) / 8 - c;
          inside += x * x + y * y <= r * r;
        }
      }
      disk[i * n + j] = inside / 64.0;
    }
  }
  const double p = metrics::psnr(disk, recon::fbp_baseline(g, g.forward(disk), 1));
  report(5, p > 20.0, fmt("noiseless disk, 160 angles, 128x128: FBP PSNR %.2f dB (> 20)", p), t0);
}

// ------------------------------------------------------------------ 6

void nesting() {
  const auto t0 = Clock::now();
  const phantom::FengParams feng;
  auto cp = [&](double t) { return phantom::feng_input(feng, t); };
  kinetics::Rhs one = [&](double t, std::span<const double> z, std::span<double> dz) {
    dz[0] = kinetics::one_tissue_rhs(z[0], cp(t), 0.2, 0.12);
  };
  kinetics::Rhs two = [&](double t, std::span<const double> z, std::span<double> dz) {
    const auto d = kinetics::two_tissue_rhs({z[0], z[1]}, cp(t), 0.2, 0.12, 0.0, 0.0);
    dz[0] = d[0];
    dz[1] = d[1];
  };
  const auto p1 = kinetics::integrate(one, {0.0}, 60.0, 0.05);
  const auto p2 = kinetics::integrate(two, {0.0, 0.0}, 60.0, 0.05);
  double gap = 0.0;
  for (std::size_t k = 0; k < p1.num_nodes(); ++k) gap = std::max(gap, std::abs(p1.total(k) - p2.total(k)));

  // Hyke with theta = 0 against PurelyPhysics sharing filter and encoder.
  recon::Architecture base;
  base.frames = 18;
  base.height = base.width = 16;
  base.num_bins = 24;
  const auto ha = train::architecture_for(train::Variant::Hyke, base);
  const auto pa = train::architecture_for(train::Variant::PurelyPhysics, base);
  recon::Model hyke = recon::Model::init(ha, 3);
  recon::Model phys = recon::Model::init(pa, 3);
  for (auto* t : hyke.kinetics.theta.tensors()) std::fill(t->values.begin(), t->values.end(), 0.0);
  std::mt19937_64 rng(6);
  hyke.filter = phys.filter;
  hyke.encoder_mlp.weights[0] = phys.encoder_mlp.weights[0];
  hyke.encoder_mlp.biases[0] = phys.encoder_mlp.biases[0];
  // Output planes: Hyke [rates, code, V], PurelyPhysics [rates, V].
  const std::size_t hidden = ha.encoder_hidden, nr = ha.num_rates(), hp = ha.planes(), pp = pa.planes();
  auto plane_of = [&](std::size_t j) { return j < nr ? j : hp - 1; };
  for (std::size_t j = 0; j < pp; ++j) {
    const std::size_t hj = plane_of(j);
    for (std::size_t i = 0; i < hidden; ++i) {
      hyke.encoder_mlp.weights[1].values[i * hp + hj] = phys.encoder_mlp.weights[1].values[i * pp + j];
    }
    hyke.encoder_mlp.biases[1].values[hj] = phys.encoder_mlp.biases[1].values[j];
    for (std::size_t k = 0; k < 9; ++k) {
      phys.encoder_kernel.values[j * 9 + k] = 0.05 * std::normal_distribution<double>()(rng);
      hyke.encoder_kernel.values[hj * 9 + k] = phys.encoder_kernel.values[j * 9 + k];
    }
  }

  projector::ProjectorConfig pc;
  pc.num_angles = 20;
  pc.num_bins = 24;
  pc.height = pc.width = 16;
  const projector::Projector g(pc);
  const auto sched = phantom::ScanSchedule::standard();
  const auto ctx = kinetics::DecodeContext::build(sched, cp, phantom::f18_decay_tau(),
                                                  kinetics::SolverGrid::per_frame(sched, 1.0, 2), 8);
  std::vector<double> sinos;
  for (std::size_t k = 0; k < 18; ++k) {
    auto img = randn(256, rng);
    for (double& v : img) v = std::abs(v) * (1.0 + 0.1 * static_cast<double>(k));
    const auto s = g.forward(img);
    sinos.insert(sinos.end(), s.begin(), s.end());
  }
  const auto input = recon::make_sequence_input(g, sinos, 18);
  const auto rh = recon::reconstruct(hyke, g, ctx, input);
  const auto rp = recon::reconstruct(phys, g, ctx, input);
  const bool bitwise = rh.xhat == rp.xhat;
  report(6, gap <= 1e-8 && bitwise,
         fmt("two-tissue(k3=k4=0) vs one-tissue max gap %.1e (<= 1e-8); Hyke(theta=0) vs PurelyPhysics frames %s",
             gap, bitwise ? "bitwise equal" : "differ"),
         t0);
}

// ------------------------------------------------------------------ 7-10

struct Job {
  train::Variant variant;
  train::Mode mode;
  std::uint64_t seed;
};

struct Outcome {
  std::vector<train::SequenceScores> test;
  std::vector<train::EpochRecord> history;
  double seconds = 0.0;
  std::string error;
};

double mean_psnr(const std::vector<train::SequenceScores>& s) {
  double m = 0.0;
  for (const auto& x : s) m += x.psnr;
  return m / static_cast<double>(s.size());
}

bool finite_history(const std::vector<train::EpochRecord>& h) {
  return std::all_of(h.begin(), h.end(), [](const train::EpochRecord& r) {
    return std::isfinite(r.loss) && std::isfinite(r.mse) && std::isfinite(r.psnr);
  });
}

// Smallest training loss in epochs 1..10 relative to epoch 0.
double loss_ratio(const std::vector<train::EpochRecord>& h) {
  double first = NAN, best = INFINITY;
  for (const auto& r : h) {
    if (r.split != "train") continue;
    if (r.epoch == 0) first = r.loss;
    else if (r.epoch <= 10) best = std::min(best, r.loss);
  }
  return best / first;
}

void desk_scale(const fs::path& data_dir, std::size_t epochs, std::size_t jobs_in_parallel) {
  auto t0 = Clock::now();
  const train::SimulationConfig sim;
  bool reuse = false;
  if (fs::exists(data_dir / "manifest.json")) {
    try {
      reuse = train::Dataset::open(data_dir).config().to_json() == sim.to_json();
    } catch (const Error&) {
      reuse = false;
    }
  }
  if (!reuse) train::simulate_dataset(sim, data_dir, true);
  const auto data = train::Dataset::open(data_dir);
  train::TrainConfig tc;
  tc.epochs = epochs;
  const auto pb = train::make_problem(data, tc, true);
  const double fbp = mean_psnr(train::evaluate_fbp(pb, "test"));
  std::printf("info    desk dataset %s (%s), %zu/%zu/%zu sequences, FBP test PSNR %.2f dB [%.1f s]\n",
              data_dir.string().c_str(), reuse ? "reused" : "simulated", pb.train.size(), pb.val.size(),
              pb.test.size(), fbp, std::chrono::duration<double>(Clock::now() - t0).count());
  std::fflush(stdout);

  const std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<Job> jobs;
  for (auto seed : seeds) {
    for (auto v : train::kAllVariants) jobs.push_back({v, train::Mode::Unsupervised, seed});
  }
  jobs.push_back({train::Variant::Hyke, train::Mode::Supervised, seeds.front()});

  std::vector<Outcome> out(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex print;
  const recon::Architecture base;
  auto worker = [&] {
    for (std::size_t i; (i = next++) < jobs.size();) {
      const auto& job = jobs[i];
      const auto start = Clock::now();
      train::TrainConfig cfg = tc;
      cfg.mode = job.mode;
      cfg.seed = job.seed;
      try {
        auto res = train::train_run(pb, job.variant, base, cfg);
        out[i].history = res.history;
        out[i].test = train::evaluate_model(res.model, pb, "test");
      } catch (const std::exception& e) {
        out[i].error = e.what();
      }
      out[i].seconds = std::chrono::duration<double>(Clock::now() - start).count();
      std::lock_guard lock(print);
      std::printf("info    %-14s %-12s seed %llu: ", train::variant_name(job.variant).c_str(),
                  train::mode_name(job.mode).c_str(), static_cast<unsigned long long>(job.seed));
      if (out[i].error.empty()) {
        std::printf("test PSNR %.2f dB, loss ratio at 10 epochs %.3f [%.1f s]\n", mean_psnr(out[i].test),
                    loss_ratio(out[i].history), out[i].seconds);
      } else {
        std::printf("error: %s\n", out[i].error.c_str());
      }
      std::fflush(stdout);
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::max<std::size_t>(1, std::min(jobs_in_parallel, jobs.size())); ++w) {
    pool.emplace_back(worker);
  }
  for (auto& th : pool) th.join();

  bool all_ok = true;
  for (const auto& o : out) all_ok = all_ok && o.error.empty();
  if (!all_ok) {
    for (int id = 7; id <= 10; ++id) report(id, false, "training runs failed (see errors above)", t0);
    return;
  }

  // 7: ordering over seed means.
  std::map<train::Variant, std::vector<std::vector<train::SequenceScores>>> runs;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (jobs[i].mode == train::Mode::Unsupervised) runs[jobs[i].variant].push_back(out[i].test);
  }
  const auto rows = train::variant_ordering_report(runs);
  std::map<std::string, double> psnr;
  std::string table;
  for (const auto& r : rows) {
    psnr[r.method] = r.psnr_mean;
    table += fmt("%s %.2f+-%.2f  ", r.method.c_str(), r.psnr_mean, r.psnr_std);
  }
  const double hyke = psnr.at("hyke");
  const double margin = std::min({hyke - psnr.at("global-hybrid"), hyke - psnr.at("purely-physics"),
                                  hyke - psnr.at("purely-neural")});
  report(7, margin >= 0.5, fmt("unsupervised test PSNR over 3 seeds: %s-> Hyke margin %.2f dB (>= 0.5)", table.c_str(),
                               margin),
         t0);

  // 8: Hyke against FBP on the same test split.
  report(8, hyke - fbp >= 5.0,
         fmt("unsupervised Hyke %.2f dB vs FBP %.2f dB: +%.2f dB (>= 5)", hyke, fbp, hyke - fbp), t0);

  // 9: supervised above unsupervised for the same seed.
  double sup = NAN, unsup = NAN;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (jobs[i].variant != train::Variant::Hyke || jobs[i].seed != seeds.front()) continue;
    (jobs[i].mode == train::Mode::Supervised ? sup : unsup) = mean_psnr(out[i].test);
  }
  report(9, sup > unsup, fmt("Hyke seed %llu: supervised %.2f dB vs unsupervised %.2f dB",
                             static_cast<unsigned long long>(seeds.front()), sup, unsup),
         t0);

  // 10: loss halves within 10 epochs; nothing non-finite.
  double worst = 0.0;
  bool finite = true;
  for (const auto& o : out) {
    worst = std::max(worst, loss_ratio(o.history));
    finite = finite && finite_history(o.history);
    for (const auto& s : o.test) finite = finite && std::isfinite(s.psnr) && std::isfinite(s.mse);
  }
  report(10, worst <= 0.5 && finite,
         fmt("worst training-loss ratio within 10 epochs %.3f (<= 0.5) over %zu runs; %s", worst, out.size(),
             finite ? "all values finite" : "non-finite values seen"),
         t0);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string data = "acceptance_data";
  std::size_t epochs = kDeskEpochs;
  std::size_t jobs = std::max(1u, std::thread::hardware_concurrency());
  bool oracles_only = false;
  app.add_option("--data", data, "Desk dataset directory (simulated when missing)");
  app.add_option("--epochs", epochs, "Training epochs per run");
  app.add_option("--jobs", jobs, "Training runs in parallel");
  app.add_flag("--oracles-only", oracles_only, "Run criteria 1-6 only");
  CLI11_PARSE(app, argc, argv);

  const auto t0 = Clock::now();
  try {
    ode_oracle();
    adjointness();
    gradient_suite();
    poisson_statistics();
    fbp_sanity();
    nesting();
    if (!oracles_only) desk_scale(data, epochs, jobs);
  } catch (const std::exception& e) {
    std::printf("FAIL     harness error: %s\n", e.what());
    return 2;
  }
  std::printf("%s: %d failed, %.1f min total\n", failures ? "FAILED" : "ALL PASSED", failures,
              std::chrono::duration<double>(Clock::now() - t0).count() / 60.0);
  return failures ? 1 : 0;
}
