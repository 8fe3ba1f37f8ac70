#include "hyke/train/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "hyke/ad/ops.hpp"
#include "hyke/error.hpp"

namespace hyke::train {

using ad::Tensor;
using ad::Var;
using io::Json;

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::PurelyPhysics: return "purely-physics";
    case Variant::PurelyNeural: return "purely-neural";
    case Variant::GlobalHybrid: return "global-hybrid";
    case Variant::Hyke: return "hyke";
  }
  return "?";
}

Variant variant_from_name(const std::string& name) {
  for (auto v : kAllVariants) {
    if (variant_name(v) == name) return v;
  }
  throw ConfigError("unknown variant '" + name + "' (purely-physics, purely-neural, global-hybrid, hyke)");
}

recon::Architecture architecture_for(Variant v, recon::Architecture base) {
  switch (v) {
    case Variant::PurelyPhysics:
      if (base.physics == kinetics::Physics::None) throw ConfigError("purely-physics needs a physics prior");
      base.neural = false;
      base.code_dim = 0;
      break;
    case Variant::PurelyNeural:
      base.physics = kinetics::Physics::None;
      base.neural = true;
      break;
    case Variant::GlobalHybrid:
      base.neural = true;
      base.code_dim = 0;
      break;
    case Variant::Hyke:
      base.neural = true;
      break;
  }
  base.validate();
  return base;
}

std::string mode_name(Mode m) { return m == Mode::Supervised ? "supervised" : "unsupervised"; }

Mode mode_from_name(const std::string& name) {
  if (name == "supervised") return Mode::Supervised;
  if (name == "unsupervised") return Mode::Unsupervised;
  throw ConfigError("unknown mode '" + name + "' (supervised, unsupervised)");
}

// ---------------------------------------------------------------- losses

Var supervised_loss(Var x, Var xhat, Var xtilde, double lambda) {
  if (x.shape() != xhat.shape() || x.shape() != xtilde.shape()) {
    throw ShapeError("supervised_loss: shapes " + ad::to_string(x.shape()) + ", " + ad::to_string(xhat.shape()) +
                     ", " + ad::to_string(xtilde.shape()) + " differ");
  }
  if (lambda < 0) throw ConfigError("supervised_loss: lambda must be >= 0");
  Var data = ad::mean(ad::square(ad::sub(x, xhat)));
  return ad::add(data, ad::scale(ad::mean(ad::square(ad::sub(xhat, xtilde))), lambda));
}

double poisson_nll_value(std::span<const double> ybar, std::span<const double> y) {
  if (ybar.size() != y.size() || y.empty()) throw ShapeError("poisson_nll: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (ybar[i] < 0 || std::isnan(ybar[i])) {
      throw NumericalError("poisson_nll: negative expected count at element " + std::to_string(i));
    }
    const double yb = std::max(ybar[i], kExpectedFloor);
    s += y[i] * std::log(yb) - yb;
  }
  return -s / static_cast<double>(y.size());
}

double saturated_nll(std::span<const double> y) {
  double s = 0.0;
  for (double v : y) s += v > 0 ? v * std::log(v) - v : 0.0;
  return -s / static_cast<double>(y.size());
}

Var poisson_nll(Var ybar, std::span<const double> y) {
  const auto& yb = ybar.value().values;
  const double value = poisson_nll_value(yb, y);
  std::vector<double> counts(y.begin(), y.end());
  auto floored = std::make_shared<std::vector<double>>(yb.size());
  for (std::size_t i = 0; i < yb.size(); ++i) (*floored)[i] = std::max(yb[i], kExpectedFloor);
  const Var ops[] = {ybar};
  return ybar.graph->record_custom(
      "poisson_nll", ops, Tensor::scalar(value),
      [counts = std::move(counts), floored](std::span<const double> go, std::span<const std::span<double>> gi) {
        if (gi[0].empty()) return;
        const double c = go[0] / static_cast<double>(counts.size());
        for (std::size_t i = 0; i < counts.size(); ++i) gi[0][i] += c * (1.0 - counts[i] / (*floored)[i]);
      });
}

Var unsupervised_loss(std::span<const double> y, Var ybar, Var xhat, Var xtilde, double lambda) {
  if (xhat.shape() != xtilde.shape()) throw ShapeError("unsupervised_loss: xhat and xtilde differ in shape");
  if (ybar.value().size() != y.size()) throw ShapeError("unsupervised_loss: counts and expectation differ in size");
  if (lambda < 0) throw ConfigError("unsupervised_loss: lambda must be >= 0");
  return ad::add(poisson_nll(ybar, y), ad::scale(ad::mean(ad::square(ad::sub(xhat, xtilde))), lambda));
}

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  if (!(lambda >= 0) || !std::isfinite(lambda)) throw ConfigError("train: lambda must be finite and >= 0");
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw ConfigError("train: learning_rate must be > 0");
  if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
  if (threads == 0) throw ConfigError("train: threads must be >= 1");
  if (!(max_dt > 0) || min_steps == 0 || blood_substeps == 0) throw ConfigError("train: invalid decoder grid");
  if (!(filter_lr_scale >= 0) || !std::isfinite(filter_lr_scale)) {
    throw ConfigError("train: filter_lr_scale must be finite and >= 0");
  }
}

Json TrainConfig::to_json() const {
  return {{"mode", mode_name(mode)},     {"lambda", lambda},   {"learning_rate", learning_rate},
          {"epochs", epochs},            {"batch_size", batch_size}, {"seed", seed},
          {"threads", threads},          {"max_dt", max_dt},   {"min_steps", min_steps},
          {"blood_substeps", blood_substeps}, {"filter_lr_scale", filter_lr_scale}};
}

TrainConfig TrainConfig::from_json(const Json& j) {
  static const std::set<std::string> known{"mode",    "lambda",  "learning_rate", "epochs",    "batch_size",
                                           "seed",    "threads", "max_dt",        "min_steps", "blood_substeps",
                                           "filter_lr_scale"};
  if (!j.is_object()) throw ConfigError("train: expected an object");
  TrainConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    if (!known.count(k)) throw ConfigError("train: unknown key '" + k + "'");
    try {
      const auto& v = it.value();
      if (k == "mode") c.mode = mode_from_name(v.get<std::string>());
      else if (k == "lambda") c.lambda = v.get<double>();
      else if (k == "learning_rate") c.learning_rate = v.get<double>();
      else if (k == "epochs") c.epochs = v.get<std::size_t>();
      else if (k == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "threads") c.threads = v.get<std::size_t>();
      else if (k == "max_dt") c.max_dt = v.get<double>();
      else if (k == "min_steps") c.min_steps = v.get<std::size_t>();
      else if (k == "blood_substeps") c.blood_substeps = v.get<std::size_t>();
      else c.filter_lr_scale = v.get<double>();
    } catch (const Json::exception& e) {
      throw ConfigError("train." + k + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------- Adam

void Adam::step(const std::vector<Tensor*>& params, const std::vector<std::vector<double>>& grads,
                std::span<const double> lr_scale) {
  if (params.size() != grads.size()) throw ShapeError("Adam: parameter and gradient counts differ");
  if (!lr_scale.empty() && lr_scale.size() != params.size()) throw ShapeError("Adam: one rate scale per tensor");
  if (m_.empty()) {
    for (auto* p : params) {
      m_.emplace_back(p->size(), 0.0);
      v_.emplace_back(p->size(), 0.0);
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& w = params[k]->values;
    const auto& g = grads[k];
    if (g.size() != w.size() || m_[k].size() != w.size()) throw ShapeError("Adam: gradient shape changed");
    const double lr = lr_ * (lr_scale.empty() ? 1.0 : lr_scale[k]);
    for (std::size_t i = 0; i < w.size(); ++i) {
      m_[k][i] = b1_ * m_[k][i] + (1 - b1_) * g[i];
      v_[k][i] = b2_ * v_[k][i] + (1 - b2_) * g[i] * g[i];
      w[i] -= lr * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps_);
    }
  }
}

// ---------------------------------------------------------------- data

const std::vector<PreparedSequence>& Problem::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw ConfigError("unknown split '" + name + "' (train, val, test)");
}

PreparedSequence prepare_sequence(const Sequence& s, const projector::Projector& proj, std::size_t frames) {
  PreparedSequence p;
  p.id = s.id;
  p.shape = {frames, s.activity.height, s.activity.width};
  p.input = recon::make_sequence_input(proj, recon::correct_sinograms(s.measured, s.info, proj.config()), frames);
  p.truth = s.activity.values;
  p.roi.resize(s.labels.size());
  for (std::size_t i = 0; i < p.roi.size(); ++i) p.roi[i] = s.labels.labels[i] != 0;
  p.counts.assign(s.measured.begin(), s.measured.end());
  p.scale_factor = s.info.scale_factor;
  p.randoms_per_bin = s.info.randoms_per_bin;
  p.nll_floor = saturated_nll(p.counts);
  return p;
}

Problem make_problem(const Dataset& data, const TrainConfig& cfg, bool load_test) {
  cfg.validate();
  Problem p;
  p.sim = data.config();
  p.schedule = p.sim.schedule();
  p.projector = std::make_unique<projector::Projector>(p.sim.projector);
  const auto feng = p.sim.feng;
  p.ctx = std::make_unique<kinetics::DecodeContext>(kinetics::DecodeContext::build(
      p.schedule, [feng](double t) { return phantom::feng_input(feng, t); }, p.sim.solver.decay_tau(),
      kinetics::SolverGrid::per_frame(p.schedule, cfg.max_dt, cfg.min_steps), cfg.blood_substeps));
  const std::size_t T = p.frames();
  for (const auto& s : data.load("train")) p.train.push_back(prepare_sequence(s, *p.projector, T));
  for (const auto& s : data.load("val")) p.val.push_back(prepare_sequence(s, *p.projector, T));
  if (load_test) {
    for (const auto& s : data.load("test")) p.test.push_back(prepare_sequence(s, *p.projector, T));
  }
  return p;
}

recon::Architecture problem_architecture(const Problem& p, recon::Architecture base) {
  base.frames = p.frames();
  base.height = p.sim.height;
  base.width = p.sim.width;
  base.num_bins = p.sim.projector.num_bins;
  base.bin_spacing = p.sim.projector.bin_spacing;
  base.validate();
  return base;
}

// ---------------------------------------------------------------- scoring

SequenceScores score_sequence(const PreparedSequence& s, std::span<const double> xhat) {
  const std::size_t P = s.shape.height * s.shape.width;
  auto mask = std::make_unique<bool[]>(P);
  for (std::size_t i = 0; i < P; ++i) mask[i] = s.roi[i] != 0;
  SequenceScores r;
  r.id = s.id;
  r.mse = metrics::mse_roi(s.truth, xhat, std::span<const bool>(mask.get(), P), s.shape);
  r.psnr = metrics::psnr(s.truth, xhat);
  r.ssim = s.shape.height >= 11 && s.shape.width >= 11 ? metrics::ssim(s.truth, xhat, s.shape)
                                                      : std::numeric_limits<double>::quiet_NaN();
  return r;
}

namespace {

// scale * D * G xhat + randoms, on the tape.
Var expected_counts(const Problem& pb, const PreparedSequence& s, Var xhat) {
  const auto& cfg = pb.projector->config();
  const std::size_t T = pb.frames(), R = cfg.rays();
  Tensor w({T, R}, std::vector<double>(T * R));
  for (std::size_t i = 0; i < T * R; ++i) w.values[i] = s.scale_factor * cfg.efficiency(i % cfg.num_bins);
  Var y = ad::mul(projector::project(*pb.projector, xhat), xhat.graph->input(std::move(w)));
  return ad::add_scalar(y, s.randoms_per_bin);
}

std::vector<double> expected_counts_values(const Problem& pb, const PreparedSequence& s,
                                           std::span<const double> xhat) {
  const auto& cfg = pb.projector->config();
  auto y = pb.projector->forward_frames(xhat, pb.frames());
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] = s.scale_factor * cfg.efficiency(i % cfg.num_bins) * y[i] + s.randoms_per_bin;
  }
  return y;
}

double mean_sq_diff(std::span<const double> a, std::span<const double> b, double scale) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = (a[i] - b[i]) * scale;
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

struct SeqGradient {
  double loss = 0.0;  // reported (excess) loss
  double regularizer = 0.0;
  std::vector<std::vector<double>> grads;
  std::vector<double> xhat;
};

SeqGradient sequence_gradient(const recon::Model& base, const Problem& pb, const PreparedSequence& s,
                              const TrainConfig& cfg) {
  recon::Model m = base;
  for (auto* t : m.parameters()) t->zero_grad();
  ad::Graph g;
  const auto vars = recon::bind(g, m);
  const auto f = recon::forward(g, m, vars, *pb.projector, *pb.ctx, s.input);
  const double inv = 1.0 / s.input.norm;
  Var xhat_n = ad::scale(f.xhat, inv), xtilde_n = ad::scale(f.xtilde, inv);
  Var loss;
  double offset = 0.0;
  if (cfg.mode == Mode::Supervised) {
    std::vector<double> x(s.truth);
    for (double& v : x) v *= inv;
    loss = supervised_loss(g.input(Tensor(f.xhat.shape(), std::move(x))), xhat_n, xtilde_n, cfg.lambda);
  } else {
    loss = unsupervised_loss(s.counts, expected_counts(pb, s, f.xhat), xhat_n, xtilde_n, cfg.lambda);
    offset = s.nll_floor;
  }
  SeqGradient out;
  out.loss = loss.value().item() - offset;
  out.xhat = f.xhat.value().values;
  out.regularizer = mean_sq_diff(out.xhat, f.xtilde.value().values, inv);
  if (!std::isfinite(out.loss)) return out;
  g.backward(loss);
  for (auto* t : m.parameters()) out.grads.push_back(t->grad ? *t->grad : std::vector<double>(t->size(), 0.0));
  return out;
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Runs `fn(i)` for i in [0, n) on up to `threads` workers; results land by index.
template <typename F>
void parallel_for(std::size_t n, std::size_t threads, F&& fn) {
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

EpochRecord summarize_epoch(std::size_t epoch, const std::string& split, const std::vector<double>& losses,
                            const std::vector<SequenceScores>& scores) {
  EpochRecord r{epoch, split, mean_of(losses), 0.0, 0.0, 0.0};
  for (const auto& s : scores) {
    r.mse += s.mse;
    r.psnr += s.psnr;
    r.ssim += s.ssim;
  }
  const double n = static_cast<double>(std::max<std::size_t>(scores.size(), 1));
  r.mse /= n;
  r.psnr /= n;
  r.ssim /= n;
  return r;
}

}  // namespace

double sequence_loss(recon::Model& model, const Problem& pb, const PreparedSequence& s, const TrainConfig& cfg,
                     std::vector<double>* xhat_out, double* regularizer) {
  const auto r = recon::reconstruct(model, *pb.projector, *pb.ctx, s.input);
  const double inv = 1.0 / s.input.norm;
  const double reg = mean_sq_diff(r.xhat, r.xtilde, inv);
  double loss;
  if (cfg.mode == Mode::Supervised) {
    loss = mean_sq_diff(s.truth, r.xhat, inv) + cfg.lambda * reg;
  } else {
    loss = poisson_nll_value(expected_counts_values(pb, s, r.xhat), s.counts) - s.nll_floor + cfg.lambda * reg;
  }
  if (xhat_out) *xhat_out = r.xhat;
  if (regularizer) *regularizer = reg;
  return loss;
}

TrainResult train_run(const Problem& pb, Variant variant, const recon::Architecture& base, const TrainConfig& cfg,
                      const EpochCallback& on_epoch) {
  cfg.validate();
  if (pb.train.empty() || pb.val.empty()) throw ConfigError("train_run: train and val splits must be nonempty");
  const auto arch = problem_architecture(pb, architecture_for(variant, base));
  recon::Model model = recon::Model::init(arch, cfg.seed);
  TrainResult res;
  auto record = [&](const EpochRecord& r) {
    res.history.push_back(r);
    if (on_epoch) on_epoch(r);
  };

  auto validate_epoch = [&](std::size_t epoch) {
    std::vector<double> losses(pb.val.size());
    std::vector<SequenceScores> scores(pb.val.size());
    parallel_for(pb.val.size(), cfg.threads, [&](std::size_t i) {
      recon::Model m = model;
      std::vector<double> xhat;
      losses[i] = sequence_loss(m, pb, pb.val[i], cfg, &xhat);
      scores[i] = score_sequence(pb.val[i], xhat);
    });
    const auto r = summarize_epoch(epoch, "val", losses, scores);
    if (!std::isfinite(r.loss)) {
      throw NumericalError("training diverged at epoch " + std::to_string(epoch) + " (validation loss not finite)");
    }
    record(r);
    return r.loss;
  };

  {
    std::vector<double> losses(pb.train.size()), regs(pb.train.size());
    std::vector<SequenceScores> scores(pb.train.size());
    parallel_for(pb.train.size(), cfg.threads, [&](std::size_t i) {
      recon::Model m = model;
      std::vector<double> xhat;
      losses[i] = sequence_loss(m, pb, pb.train[i], cfg, &xhat, &regs[i]);
      scores[i] = score_sequence(pb.train[i], xhat);
    });
    const auto r = summarize_epoch(0, "train", losses, scores);
    if (!std::isfinite(r.loss)) throw NumericalError("training diverged at epoch 0 (initial loss not finite)");
    record(r);
    res.train_loss.push_back(r.loss);
    res.final_regularizer = mean_of(regs);
  }
  double best = validate_epoch(0);
  res.model = model;
  res.best_epoch = 0;

  std::mt19937_64 rng(cfg.seed ^ 0x5eedf00dULL);
  Adam opt(cfg.learning_rate);
  // The filter comes first in Model::parameters().
  std::vector<double> lr_scale(model.parameters().size(), 1.0);
  lr_scale[0] = cfg.filter_lr_scale;
  std::vector<std::size_t> order(pb.train.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<double> losses(pb.train.size()), regs(pb.train.size());
    std::vector<SequenceScores> scores(pb.train.size());
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::size_t nb = std::min(cfg.batch_size, order.size() - b0);
      std::vector<SeqGradient> parts(nb);
      parallel_for(nb, cfg.threads, [&](std::size_t j) {
        parts[j] = sequence_gradient(model, pb, pb.train[order[b0 + j]], cfg);
      });
      std::vector<std::vector<double>> grads;
      for (std::size_t j = 0; j < nb; ++j) {
        const std::size_t idx = order[b0 + j];
        if (!std::isfinite(parts[j].loss)) {
          throw NumericalError("training diverged at epoch " + std::to_string(epoch) + " (loss not finite on " +
                               pb.train[idx].id + ")");
        }
        losses[idx] = parts[j].loss;
        regs[idx] = parts[j].regularizer;
        scores[idx] = score_sequence(pb.train[idx], parts[j].xhat);
        if (grads.empty()) {
          grads = std::move(parts[j].grads);
        } else {
          for (std::size_t k = 0; k < grads.size(); ++k) {
            for (std::size_t i = 0; i < grads[k].size(); ++i) grads[k][i] += parts[j].grads[k][i];
          }
        }
      }
      for (auto& g : grads) {
        for (double& v : g) {
          v /= static_cast<double>(nb);
          if (!std::isfinite(v)) throw NumericalError("training diverged at epoch " + std::to_string(epoch) +
                                                      " (gradient not finite)");
        }
      }
      opt.step(model.parameters(), grads, lr_scale);
    }
    const auto r = summarize_epoch(epoch, "train", losses, scores);
    record(r);
    res.train_loss.push_back(r.loss);
    res.final_regularizer = mean_of(regs);
    const double v = validate_epoch(epoch);
    if (v < best) {
      best = v;
      res.model = model;
      res.best_epoch = epoch;
    }
  }
  return res;
}

void write_epoch_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& rows) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "epoch,split,loss,mse,psnr,ssim\n" << std::setprecision(10);
  for (const auto& r : rows) {
    out << r.epoch << ',' << r.split << ',' << r.loss << ',' << r.mse << ',' << r.psnr << ',' << r.ssim << '\n';
  }
  if (!out) throw DataError("write failed: " + path.string());
}

// ---------------------------------------------------------------- evaluation

std::vector<SequenceScores> evaluate_model(recon::Model& model, const Problem& pb, const std::string& split,
                                           std::vector<std::vector<double>>* recons) {
  const auto& seqs = pb.split(split);
  if (seqs.empty()) throw DataError("split '" + split + "' is empty");
  const auto want = problem_architecture(pb, model.arch);
  if (want.to_json() != model.arch.to_json()) {
    throw DataError("checkpoint grid (" + std::to_string(model.arch.frames) + " frames, " +
                    std::to_string(model.arch.height) + "x" + std::to_string(model.arch.width) + ", " +
                    std::to_string(model.arch.num_bins) + " bins) does not match the dataset");
  }
  std::vector<SequenceScores> out;
  for (const auto& s : seqs) {
    const auto r = recon::reconstruct(model, *pb.projector, *pb.ctx, s.input);
    out.push_back(score_sequence(s, r.xhat));
    if (recons) recons->push_back(r.xhat);
  }
  return out;
}

std::vector<SequenceScores> evaluate_fbp(const Problem& pb, const std::string& split,
                                         std::vector<std::vector<double>>* recons) {
  const auto& seqs = pb.split(split);
  if (seqs.empty()) throw DataError("split '" + split + "' is empty");
  std::vector<SequenceScores> out;
  for (const auto& s : seqs) {
    const auto x = recon::fbp_baseline(*pb.projector, s.input.sinos.values, pb.frames());
    out.push_back(score_sequence(s, x));
    if (recons) recons->push_back(x);
  }
  return out;
}

ReportRow summarize(const std::string& method, const std::vector<SequenceScores>& scores) {
  std::vector<double> m, p, s;
  for (const auto& x : scores) {
    m.push_back(x.mse);
    p.push_back(x.psnr);
    s.push_back(x.ssim);
  }
  const auto a = metrics::mean_std(m), b = metrics::mean_std(p), c = metrics::mean_std(s);
  return {method, a.mean, a.std, b.mean, b.std, c.mean, c.std};
}

void write_report_csv(const std::filesystem::path& path, const std::vector<ReportRow>& rows) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "method,mse_mean,mse_std,psnr_mean,psnr_std,ssim_mean,ssim_std\n" << std::setprecision(10);
  for (const auto& r : rows) {
    out << r.method << ',' << r.mse_mean << ',' << r.mse_std << ',' << r.psnr_mean << ',' << r.psnr_std << ','
        << r.ssim_mean << ',' << r.ssim_std << '\n';
  }
  if (!out) throw DataError("write failed: " + path.string());
}

ad::GradCheckResult end_to_end_gradcheck(Variant variant, Mode mode, std::uint64_t seed, std::size_t samples,
                                         std::size_t n, std::size_t frames) {
  if (frames == 0 || frames > 18) throw ConfigError("gradcheck: frames must be in [1, 18]");
  const auto sched = phantom::ScanSchedule::standard().truncated(frames);
  const phantom::FengParams feng;
  const auto ctx = kinetics::DecodeContext::build(
      sched, [feng](double t) { return phantom::feng_input(feng, t); }, phantom::f18_decay_tau(),
      kinetics::SolverGrid::per_frame(sched, 1.0, 4), 4);
  projector::ProjectorConfig pc;
  pc.num_angles = 6;
  pc.num_bins = n + 3;
  pc.height = pc.width = n;
  projector::Projector proj(pc);
  recon::Architecture base;
  base.frames = frames;
  base.height = base.width = n;
  base.num_bins = pc.num_bins;
  base.encoder_hidden = 8;
  base.nn_hidden = {8};
  base.code_dim = 2;
  recon::Model m = recon::Model::init(architecture_for(variant, base), seed);
  std::mt19937_64 rng(seed + 17);
  std::normal_distribution<double> noise(0.0, 0.05);
  // Nudge every tensor off its initializer so zero-initialized paths carry gradient.
  for (auto* t : m.parameters()) {
    for (double& v : t->values) v += noise(rng);
  }
  std::uniform_real_distribution<double> u(0.5, 2.0);
  const std::size_t P = n * n;
  std::vector<double> sin(frames * proj.rays()), truth(frames * P), counts(frames * proj.rays());
  for (double& v : sin) v = u(rng);
  for (double& v : truth) v = 10.0 * u(rng);
  for (double& v : counts) v = std::floor(20.0 * u(rng));
  const auto input = recon::make_sequence_input(proj, sin, frames);
  const double inv = 1.0 / input.norm;
  auto f = [&](ad::Graph& g) {
    const auto vars = recon::bind(g, m);
    const auto fw = recon::forward(g, m, vars, proj, ctx, input);
    Var xh = ad::scale(fw.xhat, inv), xt = ad::scale(fw.xtilde, inv);
    if (mode == Mode::Supervised) {
      std::vector<double> x(truth);
      for (double& v : x) v *= inv;
      return supervised_loss(g.input(Tensor({frames, P}, std::move(x))), xh, xt, 0.1);
    }
    Var ybar = ad::add_scalar(ad::scale(projector::project(proj, fw.xhat), 3.0), 0.5);
    return unsupervised_loss(counts, ybar, xh, xt, 0.1);
  };
  const auto params = m.parameters();
  return ad::grad_check(f, params, 1e-6, samples, seed);
}

std::vector<ReportRow> variant_ordering_report(
    const std::map<Variant, std::vector<std::vector<SequenceScores>>>& runs) {
  std::vector<ReportRow> rows;
  for (auto v : kAllVariants) {
    const auto it = runs.find(v);
    if (it == runs.end() || it->second.empty()) {
      throw ConfigError("variant_ordering_report: no results for " + variant_name(v));
    }
    std::vector<SequenceScores> per_seed;
    for (const auto& seed : it->second) {
      const auto r = summarize(variant_name(v), seed);
      per_seed.push_back({"", r.mse_mean, r.psnr_mean, r.ssim_mean});
    }
    rows.push_back(summarize(variant_name(v), per_seed));
  }
  return rows;
}

}  // namespace hyke::train
