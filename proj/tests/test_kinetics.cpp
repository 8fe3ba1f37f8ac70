#include <doctest.h>

#include <cmath>
#include <random>

#include "hyke/ad/gradcheck.hpp"
#include "hyke/ad/ops.hpp"
#include "hyke/error.hpp"
#include "hyke/kinetics/kinetics.hpp"

using namespace hyke;
using namespace hyke::kinetics;
using ad::Graph;
using ad::Tensor;
using ad::Var;

namespace {

// Straight-line forward pass, independent of mlp_eval.
std::vector<double> mlp_oracle(const ad::MlpWeights& w, std::vector<double> x) {
  for (std::size_t l = 0; l < w.num_layers(); ++l) {
    const std::size_t in = w.layer_sizes[l], out = w.layer_sizes[l + 1];
    std::vector<double> y(out);
    for (std::size_t j = 0; j < out; ++j) {
      double s = w.biases[l].values[j];
      for (std::size_t i = 0; i < in; ++i) s += x[i] * w.weights[l].values[i * out + j];
      y[j] = l + 1 < w.num_layers() ? std::tanh(s) : s;
    }
    x = std::move(y);
  }
  return x;
}

phantom::ScanSchedule short_schedule() { return phantom::ScanSchedule::from_durations({1, 1, 2, 3, 5, 8}); }

double feng(double t) { return phantom::feng_input(phantom::FengParams{}, t); }

Tensor planes(std::vector<double> v, std::size_t rows) {
  Tensor t = Tensor::zeros({rows, v.size() / rows}, true);
  t.values = std::move(v);
  return t;
}

Tensor vec(std::vector<double> v) {
  Tensor t = Tensor::vector(std::move(v));
  t.requires_grad = true;
  return t;
}

}  // namespace

TEST_CASE("compartment right-hand sides") {
  CHECK(one_tissue_rhs(0, 0, 0.3, 0.7) == 0.0);
  CHECK(one_tissue_rhs(1, 0, 0.0, 0.2) == doctest::Approx(-0.2).epsilon(1e-15));
  CHECK(std::abs(one_tissue_rhs(0.5, 1, 0.1, 0.2)) < 1e-16);

  CHECK(two_tissue_rhs({0, 0}, 0, 0.1, 0.2, 0.3, 0.4) == std::array<double, 2>{0, 0});
  const auto d = two_tissue_rhs({1, 1}, 0, 0.0, 0.1, 0.2, 0.3);
  CHECK(std::abs(d[0]) < 1e-15);
  CHECK(d[1] == doctest::Approx(-0.1).epsilon(1e-14));
  const auto nested = two_tissue_rhs({0.7, 0.0}, 2.5, 0.13, 0.21, 0.0, 0.0);
  CHECK(nested[0] == one_tissue_rhs(0.7, 2.5, 0.13, 0.21));
  CHECK(nested[1] == 0.0);

  CompartmentParams bad{0.1, -0.1, 0, 0, 0.5};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS((CompartmentParams{0.1, 0.1, 0, 0, 1.5}.validate()), ConfigError);
}

TEST_CASE("hybrid_rhs: zero residual, neural only, seeded oracle") {
  HybridModel zero = HybridModel::with_residual(Physics::OneTissue, 1, 4, {16, 16}, 3);
  for (auto* t : zero.theta.tensors()) std::fill(t->values.begin(), t->values.end(), 0.0);
  const std::vector<double> rates{0.1, 0.2}, code{0.3, -0.2, 0.9, 0.0};
  CHECK(hybrid_rhs(zero, std::vector<double>{0.2}, 1.0, rates, code)[0] == one_tissue_rhs(0.2, 1.0, 0.1, 0.2));

  HybridModel neural = HybridModel::with_residual(Physics::None, 2, 4, {16, 16}, 5);
  const std::vector<double> z{0.4, -0.1};
  const auto nn = mlp_oracle(neural.theta, {0.4, -0.1, 0.3, -0.2, 0.9, 0.0});
  const auto out = hybrid_rhs(neural, z, 3.0, {}, code);
  CHECK(out[0] == doctest::Approx(nn[0]).epsilon(1e-13));
  CHECK(out[1] == doctest::Approx(nn[1]).epsilon(1e-13));

  HybridModel seeded = HybridModel::with_residual(Physics::OneTissue, 1, 4, {16, 16}, 3);
  const std::vector<double> zero_code(4, 0.0);
  const double expect = 0.06 + mlp_oracle(seeded.theta, {0.2, 0, 0, 0, 0})[0];
  CHECK(hybrid_rhs(seeded, std::vector<double>{0.2}, 1.0, rates, zero_code)[0] ==
        doctest::Approx(expect).epsilon(1e-12));

  CHECK_THROWS_AS(hybrid_rhs(seeded, std::vector<double>{0.2, 0.1}, 1.0, rates, zero_code), ShapeError);
  CHECK_THROWS_AS(HybridModel::with_residual(Physics::TwoTissue, 1, 0, {4}, 1), ConfigError);
}

TEST_CASE("hybrid_rhs: taped and tape-free agree, taped is differentiable") {
  HybridModel m = HybridModel::with_residual(Physics::TwoTissue, 2, 3, {8}, 9, 1.0, true, 2.5);
  const std::vector<double> z{0.4, 0.8}, rates{0.1, 0.2, 0.05, 0.03}, code{0.1, -0.4, 0.7};
  const auto ref = hybrid_rhs(m, z, 1.7, rates, code);

  Graph g;
  auto th = ad::bind(g, m.theta);
  Var out = hybrid_rhs(m, &th, g.input(Tensor::vector(z)), 1.7, g.input(Tensor::vector(rates)),
                       g.input(Tensor::vector(code)));
  CHECK(out.value().values[0] == doctest::Approx(ref[0]).epsilon(1e-13));
  CHECK(out.value().values[1] == doctest::Approx(ref[1]).epsilon(1e-13));

  Tensor zt = vec(z), rt = vec(rates), ct = vec(code);
  std::vector<Tensor*> params{&zt, &rt, &ct};
  for (auto* t : m.theta.tensors()) params.push_back(t);
  auto f = [&](Graph& gg) {
    auto tv = ad::bind(gg, m.theta);
    Var d = hybrid_rhs(m, &tv, gg.parameter(zt), 1.7, gg.parameter(rt), gg.parameter(ct));
    return ad::sum(ad::square(d));
  };
  CHECK(ad::grad_check(f, params, 1e-6).max_rel_error < 1e-6);
}

TEST_CASE("integrate: zero rhs, closed form, fourth-order convergence") {
  Rhs zero = [](double, std::span<const double>, std::span<double> dz) { dz[0] = 0.0; };
  const auto flat = integrate(zero, {0.0}, 2.0, 0.1);
  CHECK(flat.num_nodes() == 21);
  for (double v : flat.states) CHECK(v == 0.0);

  const double k1 = 0.1, k2 = 0.2;
  Rhs one = [&](double, std::span<const double> z, std::span<double> dz) { dz[0] = one_tissue_rhs(z[0], 1.0, k1, k2); };
  const double exact = k1 / k2 * (1.0 - std::exp(-k2 * 5.0));
  CHECK(exact == doctest::Approx(0.316060).epsilon(1e-6));
  const auto path = integrate(one, {0.0}, 5.0, 0.01);
  CHECK(path.times.back() == 5.0);
  CHECK(std::abs(path.states.back() - exact) <= 1e-6);

  // Least-squares slope of log(error) against log(dt) over one decade.
  const std::vector<double> dts{1.0, 0.5, 0.25, 0.2, 0.1};
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (double dt : dts) {
    const double err = std::abs(integrate(one, {0.0}, 5.0, dt).states.back() - exact);
    const double x = std::log(dt), y = std::log(err);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double n = static_cast<double>(dts.size());
  const double order = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  CHECK(order >= 3.8);

  const auto shortened = integrate(one, {0.0}, 1.05, 0.1);
  CHECK(shortened.num_nodes() == 12);
  CHECK(shortened.times.back() == 1.05);
}

TEST_CASE("integrate: non-finite state names the step") {
  Rhs blowup = [](double t, std::span<const double>, std::span<double> dz) {
    dz[0] = t > 0.25 ? std::numeric_limits<double>::infinity() : 1.0;
  };
  try {
    (void)integrate(blowup, {0.0}, 1.0, 0.1);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("step 2") != std::string::npos);
  }
  CHECK_THROWS_AS(integrate(blowup, {0.0}, 1.0, 0.0), ConfigError);
}

TEST_CASE("frame_activity: blood-only pixel, ramp, decay") {
  const auto sched = phantom::ScanSchedule::from_durations({1, 2, 3});
  Rhs zero = [](double, std::span<const double>, std::span<double> dz) { dz[0] = 0.0; };
  const auto flat = integrate(zero, {0.0}, sched.total(), 0.05);
  for (double x : frame_activity(flat, [](double) { return 2.5; }, 1.0, kNoDecay, sched)) {
    CHECK(x == doctest::Approx(2.5).epsilon(1e-14));
  }

  Rhs ramp = [](double, std::span<const double>, std::span<double> dz) { dz[0] = 1.0; };
  const auto lin = integrate(ramp, {0.0}, sched.total(), 0.05);
  const auto x = frame_activity(lin, [](double) { return 0.0; }, 0.0, kNoDecay, sched);
  CHECK(x[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(x[1] == doctest::Approx(2.0).epsilon(1e-12));

  const auto sched1 = phantom::ScanSchedule::from_durations(std::vector<double>(6, 1.0));
  const auto path = integrate(ramp, {0.0}, 6.0, 0.05);
  const auto plain = frame_activity(path, feng, 0.05, kNoDecay, sched1);
  const double tau = phantom::f18_decay_tau();
  CHECK(tau == doctest::Approx(158.4).epsilon(1e-3));
  const auto decayed = frame_activity(path, feng, 0.05, tau, sched1);
  for (std::size_t k = 0; k < plain.size(); ++k) {
    CHECK(decayed[k] < plain[k]);
    const double mid = 0.5 * (sched1.start(k) + sched1.end(k));
    CHECK(decayed[k] / plain[k] == doctest::Approx(std::exp(-mid / tau)).epsilon(0.01));
  }

  const auto coarse = integrate(ramp, {0.0}, 6.0, 0.3);
  CHECK_THROWS_AS(frame_activity(coarse, feng, 0.0, kNoDecay, sched), ConfigError);
}

TEST_CASE("solver grids align with frame boundaries") {
  const auto sched = phantom::ScanSchedule::standard();
  CHECK(sched.num_frames() == 18);
  CHECK(sched.total() == 60.0);
  const auto g = SolverGrid::uniform(sched, 0.05);
  CHECK(g.num_steps() == 1200);
  for (std::size_t k = 0; k <= 18; ++k) CHECK(g.times[g.boundary_nodes[k]] == sched.boundaries()[k]);
  CHECK_THROWS_AS(SolverGrid::uniform(sched, 0.7), ConfigError);

  const auto pf = SolverGrid::per_frame(sched, 1.0, 4);
  CHECK(pf.num_steps() == 3 * 4 + 9 * 4 + 6 * 5);
  for (std::size_t k = 0; k <= 18; ++k) CHECK(pf.times[pf.boundary_nodes[k]] == sched.boundaries()[k]);
}

TEST_CASE("decode: frame values match the scalar reference path") {
  const auto sched = short_schedule();
  const auto ctx = DecodeContext::build(sched, feng, phantom::f18_decay_tau(), SolverGrid::uniform(sched, 0.05));
  const std::vector<CompartmentParams> px{{0.1, 0.15, 0.06, 0.05, 0.05}, {0.3, 0.1, 0.0, 0.0, 0.2}};

  Graph g;
  Tensor rates = Tensor::zeros({4, 2}), vol = Tensor::zeros({2});
  for (std::size_t p = 0; p < 2; ++p) {
    rates.values[0 * 2 + p] = px[p].k1;
    rates.values[1 * 2 + p] = px[p].k2;
    rates.values[2 * 2 + p] = px[p].k3;
    rates.values[3 * 2 + p] = px[p].k4;
    vol.values[p] = px[p].volume;
  }
  const auto model = HybridModel::physics_only(Physics::TwoTissue);
  Var out = decode_frames(model, nullptr, {g.input(rates), g.input(vol), std::nullopt}, ctx);
  CHECK(out.shape() == ad::Shape{6, 2});

  for (std::size_t p = 0; p < 2; ++p) {
    const auto c = px[p];
    Rhs rhs = [&](double t, std::span<const double> z, std::span<double> dz) {
      const auto d = two_tissue_rhs({z[0], z[1]}, feng(t), c.k1, c.k2, c.k3, c.k4);
      dz[0] = d[0];
      dz[1] = d[1];
    };
    const auto path = integrate(rhs, {0.0, 0.0}, ctx.grid.times);
    const auto ref = frame_activity(path, feng, c.volume, phantom::f18_decay_tau(), sched);
    for (std::size_t k = 0; k < 6; ++k) {
      CHECK(out.value().values[k * 2 + p] == doctest::Approx(ref[k]).epsilon(1e-12));
      CHECK(ref[k] > 0.0);
    }
  }
}

TEST_CASE("nesting, zero residual and input linearity") {
  const auto sched = short_schedule();
  const double tau = phantom::f18_decay_tau();

  // Two-tissue with k3 = k4 = 0 against one-tissue.
  Rhs one = [](double t, std::span<const double> z, std::span<double> dz) { dz[0] = one_tissue_rhs(z[0], feng(t), 0.2, 0.12); };
  Rhs two = [](double t, std::span<const double> z, std::span<double> dz) {
    const auto d = two_tissue_rhs({z[0], z[1]}, feng(t), 0.2, 0.12, 0.0, 0.0);
    dz[0] = d[0];
    dz[1] = d[1];
  };
  const auto p1 = integrate(one, {0.0}, 20.0, 0.05);
  const auto p2 = integrate(two, {0.0, 0.0}, 20.0, 0.05);
  for (std::size_t n = 0; n < p1.num_nodes(); ++n) CHECK(std::abs(p1.total(n) - p2.total(n)) <= 1e-8);

  // theta = 0 decodes exactly like the physics-only model.
  const auto ctx = DecodeContext::build(sched, feng, tau, SolverGrid::per_frame(sched, 0.5, 2));
  HybridModel hyke = HybridModel::with_residual(Physics::OneTissue, 1, 4, {16, 16}, 1, 1.0, false, 3.0);
  for (auto* t : hyke.theta.tensors()) std::fill(t->values.begin(), t->values.end(), 0.0);
  const auto phys = HybridModel::physics_only(Physics::OneTissue);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.01, 0.5);
  const std::size_t P = 9;
  Tensor rates = Tensor::zeros({2, P}), vol = Tensor::zeros({P}), code = Tensor::zeros({4, P});
  for (double& v : rates.values) v = u(rng);
  for (double& v : vol.values) v = u(rng);
  for (double& v : code.values) v = u(rng) - 0.25;
  Graph g;
  auto th = ad::bind(g, hyke.theta);
  Var a = decode_frames(hyke, &th, {g.input(rates), g.input(vol), g.input(code)}, ctx);
  Var b = decode_frames(phys, nullptr, {g.input(rates), g.input(vol), std::nullopt}, ctx);
  CHECK(a.value().values == b.value().values);

  // Scaling C_P by alpha scales the one-tissue frames by alpha.
  const double alpha = 3.7;
  const auto scaled = DecodeContext::build(sched, [&](double t) { return alpha * feng(t); }, tau,
                                           SolverGrid::per_frame(sched, 0.5, 2));
  Var c = decode_frames(phys, nullptr, {g.input(rates), g.input(vol), std::nullopt}, scaled);
  for (std::size_t i = 0; i < c.size(); ++i) {
    CHECK(std::abs(c.value().values[i] - alpha * b.value().values[i]) <= 1e-10 * std::abs(alpha * b.value().values[i]));
  }
}

TEST_CASE("decode: gradients on a one-pixel instance") {
  const auto sched = short_schedule();
  const auto ctx = DecodeContext::build(sched, feng, phantom::f18_decay_tau(), SolverGrid::per_frame(sched, 0.5, 2), 4);

  SUBCASE("hyke, one-tissue prior") {
    HybridModel m = HybridModel::with_residual(Physics::OneTissue, 1, 4, {16, 16}, 3, 0.5, false, 5.0);
    Tensor rates = planes({0.12, 0.2}, 2), vol = vec({0.07}), code = planes({0.3, -0.4, 0.1, 0.9}, 4);
    std::vector<Tensor*> params{&rates, &vol, &code};
    for (auto* t : m.theta.tensors()) params.push_back(t);
    auto f = [&](Graph& g) {
      auto th = ad::bind(g, m.theta);
      Var x = decode_frames(m, &th, {g.parameter(rates), g.parameter(vol), g.parameter(code)}, ctx);
      return ad::sum(ad::square(x));
    };
    const auto r = ad::grad_check(f, params, 1e-6);
    CHECK(r.checked > 300);
    CHECK(r.max_rel_error < 1e-4);
  }
  SUBCASE("two-tissue physics with input-fed residual") {
    HybridModel m = HybridModel::with_residual(Physics::TwoTissue, 2, 2, {6}, 8, 0.5, true, 5.0);
    Tensor rates = planes({0.1, 0.15, 0.06, 0.05}, 4), vol = vec({0.05}), code = planes({0.2, -0.3}, 2);
    std::vector<Tensor*> params{&rates, &vol, &code};
    for (auto* t : m.theta.tensors()) params.push_back(t);
    auto f = [&](Graph& g) {
      auto th = ad::bind(g, m.theta);
      Var x = decode_frames(m, &th, {g.parameter(rates), g.parameter(vol), g.parameter(code)}, ctx);
      return ad::sum(ad::square(x));
    };
    CHECK(ad::grad_check(f, params, 1e-6).max_rel_error < 1e-4);
  }
}

TEST_CASE("decode: fused primitive matches a taped RK4 unroll") {
  const auto sched = phantom::ScanSchedule::from_durations({1, 2});
  const auto grid = SolverGrid::per_frame(sched, 0.5, 2);
  const auto ctx = DecodeContext::build(sched, feng, kNoDecay, grid);
  HybridModel m = HybridModel::with_residual(Physics::OneTissue, 1, 2, {5}, 12, 1.0, true, 4.0);
  const std::size_t P = 3;
  Tensor rates = planes({0.1, 0.2, 0.3, 0.2, 0.1, 0.05}, 2);
  Tensor vol = vec({0.1, 0.0, 0.4});
  Tensor code = planes({0.5, -0.5, 0.0, 0.2, 0.3, -0.1}, 2);
  std::vector<double> w(ctx.num_frames * P);
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.3 + 0.1 * static_cast<double>(i);

  auto grads = [&](bool fused) {
    for (Tensor* t : {&rates, &vol, &code}) t->zero_grad();
    for (auto* t : m.theta.tensors()) t->zero_grad();
    Graph g;
    auto th = ad::bind(g, m.theta);
    Var R = g.parameter(rates), V = g.parameter(vol), C = g.parameter(code);
    Var x;
    if (fused) {
      x = decode_frames(m, &th, {R, V, C}, ctx);
    } else {
      std::vector<Var> cols;
      for (std::size_t p = 0; p < P; ++p) {
        Var rp = ad::reshape(ad::slice(R, 1, p, p + 1), {2});
        Var cp = ad::reshape(ad::slice(C, 1, p, p + 1), {2});
        auto f = [&](Var z, double t) { return hybrid_rhs(m, &th, z, feng(t), rp, cp); };
        std::vector<Var> states{g.input(Tensor::vector({0.0}))};
        for (std::size_t n = 0; n < grid.num_steps(); ++n) {
          const double t = grid.times[n], h = grid.times[n + 1] - t;
          Var z = states.back();
          Var k1 = f(z, t);
          Var k2 = f(ad::add(z, ad::scale(k1, h / 2)), t + h / 2);
          Var k3 = f(ad::add(z, ad::scale(k2, h / 2)), t + h / 2);
          Var k4 = f(ad::add(z, ad::scale(k3, h)), t + h);
          Var inc = ad::add(ad::add(k1, ad::scale(k2, 2.0)), ad::add(ad::scale(k3, 2.0), k4));
          states.push_back(ad::add(z, ad::scale(inc, h / 6)));
        }
        Var vp = ad::slice(V, 0, p, p + 1);
        std::vector<Var> frames;
        for (std::size_t k = 0; k < ctx.num_frames; ++k) {
          Var tissue = g.input(Tensor::vector({0.0}));
          for (const auto& [node, wt] : ctx.frame_weights[k]) tissue = ad::add(tissue, ad::scale(states[node], wt));
          Var one_minus = ad::add_scalar(ad::neg(vp), 1.0);
          frames.push_back(ad::add(ad::mul(one_minus, tissue), ad::scale(vp, ctx.blood[k])));
        }
        cols.push_back(ad::reshape(ad::concat(frames, 0), {ctx.num_frames, 1}));
      }
      x = ad::concat(cols, 1);
    }
    Var loss = ad::sum(ad::mul(x, g.input(planes(w, ctx.num_frames))));
    const double value = loss.value().item();
    g.backward(loss);
    std::vector<double> all{value};
    for (Tensor* t : {&rates, &vol, &code}) all.insert(all.end(), t->grad->begin(), t->grad->end());
    for (auto* t : m.theta.tensors()) all.insert(all.end(), t->grad->begin(), t->grad->end());
    return all;
  };
  const auto a = grads(true), b = grads(false);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-11));
}

TEST_CASE("decode: shape and configuration errors") {
  const auto sched = short_schedule();
  const auto ctx = DecodeContext::build(sched, feng, kNoDecay, SolverGrid::per_frame(sched, 1.0, 1));
  Graph g;
  const auto phys = HybridModel::physics_only(Physics::OneTissue);
  CHECK_THROWS_AS(decode_frames(phys, nullptr, {g.input(Tensor::zeros({3, 2})), g.input(Tensor::zeros({2})), std::nullopt}, ctx),
                  ShapeError);
  auto hy = HybridModel::with_residual(Physics::OneTissue, 1, 4, {4}, 1);
  CHECK_THROWS_AS(decode_frames(hy, nullptr, {g.input(Tensor::zeros({2, 2})), g.input(Tensor::zeros({2})), g.input(Tensor::zeros({4, 2}))}, ctx),
                  ConfigError);
  const auto other = phantom::ScanSchedule::from_durations({1, 1});
  CHECK_THROWS_AS(DecodeContext::build(other, feng, kNoDecay, SolverGrid::per_frame(sched, 1.0, 1)), ConfigError);
}
