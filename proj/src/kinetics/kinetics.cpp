#include "hyke/kinetics/kinetics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

#include "hyke/ad/ops.hpp"
#include "hyke/error.hpp"

namespace hyke::kinetics {

std::size_t physics_state_dim(Physics physics) {
  switch (physics) {
    case Physics::OneTissue: return 1;
    case Physics::TwoTissue: return 2;
    case Physics::None: return 0;
  }
  return 0;
}

std::size_t physics_num_rates(Physics physics) {
  switch (physics) {
    case Physics::OneTissue: return 2;
    case Physics::TwoTissue: return 4;
    case Physics::None: return 0;
  }
  return 0;
}

void CompartmentParams::validate() const {
  if (k1 < 0 || k2 < 0 || k3 < 0 || k4 < 0) throw ConfigError("compartment: rate constants must be >= 0");
  if (volume < 0 || volume > 1) throw ConfigError("compartment: vascular fraction must lie in [0,1]");
}

double one_tissue_rhs(double z, double a, double k1, double k2) { return -k2 * z + k1 * a; }

std::array<double, 2> two_tissue_rhs(const std::array<double, 2>& z, double a, double k1, double k2, double k3,
                                     double k4) {
  return {-(k2 + k3) * z[0] + k4 * z[1] + k1 * a, k3 * z[0] - k4 * z[1]};
}

HybridModel HybridModel::physics_only(Physics physics) {
  if (physics == Physics::None) throw ConfigError("hybrid model: physics-only model needs a physics prior");
  HybridModel m;
  m.physics = physics;
  m.dim = physics_state_dim(physics);
  return m;
}

HybridModel HybridModel::with_residual(Physics physics, std::size_t dim, std::size_t code_dim,
                                       const std::vector<std::size_t>& hidden, std::uint64_t seed,
                                       double output_scale, bool include_input_in_nn, double state_scale) {
  HybridModel m;
  m.physics = physics;
  m.dim = dim;
  m.code_dim = code_dim;
  m.neural = true;
  m.include_input_in_nn = include_input_in_nn;
  m.state_scale = state_scale;
  std::vector<std::size_t> sizes{m.nn_input_size()};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(dim);
  m.theta = ad::MlpWeights::random(sizes, seed, output_scale);
  m.validate();
  return m;
}

void HybridModel::validate() const {
  if (dim == 0) throw ConfigError("hybrid model: state dimension must be positive");
  if (physics != Physics::None && dim != physics_state_dim(physics)) {
    throw ConfigError("hybrid model: state dimension " + std::to_string(dim) + " does not match physics prior");
  }
  if (physics == Physics::None && !neural) throw ConfigError("hybrid model: no physics and no neural term");
  if (!neural && code_dim != 0) throw ConfigError("hybrid model: neural code without a neural term");
  if (!(state_scale > 0)) throw ConfigError("hybrid model: state_scale must be positive");
  if (neural) {
    theta.validate();
    if (theta.input_size() != nn_input_size() || theta.output_size() != dim) {
      throw ShapeError("hybrid model: theta maps " + std::to_string(theta.input_size()) + " -> " +
                       std::to_string(theta.output_size()) + ", expected " + std::to_string(nn_input_size()) +
                       " -> " + std::to_string(dim));
    }
  }
}

std::vector<double> hybrid_rhs(const HybridModel& model, std::span<const double> z, double a,
                               std::span<const double> rates, std::span<const double> code) {
  if (z.size() != model.dim || rates.size() != model.num_rates() || code.size() != model.code_dim) {
    throw ShapeError("hybrid_rhs: got z " + std::to_string(z.size()) + ", rates " + std::to_string(rates.size()) +
                     ", code " + std::to_string(code.size()) + "; model expects " + std::to_string(model.dim) + ", " +
                     std::to_string(model.num_rates()) + ", " + std::to_string(model.code_dim));
  }
  std::vector<double> dz(model.dim, 0.0);
  if (model.physics == Physics::OneTissue) {
    dz[0] = one_tissue_rhs(z[0], a, rates[0], rates[1]);
  } else if (model.physics == Physics::TwoTissue) {
    const auto d = two_tissue_rhs({z[0], z[1]}, a, rates[0], rates[1], rates[2], rates[3]);
    dz[0] = d[0];
    dz[1] = d[1];
  }
  if (model.neural) {
    const double s = model.state_scale;
    std::vector<double> in;
    in.reserve(model.nn_input_size());
    for (double v : z) in.push_back(v / s);
    in.insert(in.end(), code.begin(), code.end());
    if (model.include_input_in_nn) in.push_back(a / s);
    const auto out = ad::mlp_eval(model.theta, in);
    for (std::size_t i = 0; i < model.dim; ++i) dz[i] += s * out[i];
  }
  return dz;
}

ad::Var hybrid_rhs(const HybridModel& model, const ad::MlpVars* theta, ad::Var z, double a,
                   std::optional<ad::Var> rates, std::optional<ad::Var> code) {
  using namespace ad;
  Graph& g = *z.graph;
  if (z.shape() != Shape{model.dim}) throw ShapeError("hybrid_rhs: z has shape " + to_string(z.shape()));
  if (model.num_rates() > 0 && (!rates || rates->shape() != Shape{model.num_rates()})) {
    throw ShapeError("hybrid_rhs: rates must have shape [" + std::to_string(model.num_rates()) + "]");
  }
  if (model.code_dim > 0 && (!code || code->shape() != Shape{model.code_dim})) {
    throw ShapeError("hybrid_rhs: code must have shape [" + std::to_string(model.code_dim) + "]");
  }
  std::optional<Var> dz;
  auto rate = [&](std::size_t i) { return slice(*rates, 0, i, i + 1); };
  if (model.physics == Physics::OneTissue) {
    dz = add(neg(mul(rate(1), z)), scale(rate(0), a));
  } else if (model.physics == Physics::TwoTissue) {
    Var ce = slice(z, 0, 0, 1), cm = slice(z, 0, 1, 2);
    Var d0 = add(add(neg(mul(add(rate(1), rate(2)), ce)), mul(rate(3), cm)), scale(rate(0), a));
    Var d1 = sub(mul(rate(2), ce), mul(rate(3), cm));
    dz = concat({d0, d1}, 0);
  }
  if (model.neural) {
    if (!theta) throw ConfigError("hybrid_rhs: neural model needs bound theta");
    const double s = model.state_scale;
    std::vector<Var> parts{scale(z, 1.0 / s)};
    if (model.code_dim > 0) parts.push_back(*code);
    if (model.include_input_in_nn) parts.push_back(g.input(Tensor::vector({a / s})));
    Var nn = scale(mlp_apply(*theta, parts.size() == 1 ? parts[0] : concat(parts, 0)), s);
    dz = dz ? add(*dz, nn) : nn;
  }
  return *dz;
}

double StatePath::total(std::size_t n) const {
  double s = 0.0;
  for (double v : at(n)) s += v;
  return s;
}

StatePath integrate(const Rhs& rhs, std::vector<double> z0, double t_end, double dt) {
  if (!(dt > 0)) throw ConfigError("integrate: dt must be positive");
  if (!(t_end > 0)) throw ConfigError("integrate: t_end must be positive");
  std::vector<double> grid{0.0};
  const auto full = static_cast<std::size_t>(std::floor(t_end / dt + 1e-9));
  for (std::size_t i = 1; i <= full; ++i) grid.push_back(static_cast<double>(i) * dt);
  if (t_end - grid.back() > 1e-9 * dt) grid.push_back(t_end);
  grid.back() = t_end;
  return integrate(rhs, std::move(z0), grid);
}

StatePath integrate(const Rhs& rhs, std::vector<double> z0, std::span<const double> grid) {
  if (grid.size() < 2) throw ConfigError("integrate: grid needs at least two nodes");
  const std::size_t dim = z0.size();
  StatePath path;
  path.dim = dim;
  path.times.assign(grid.begin(), grid.end());
  path.states.reserve(grid.size() * dim);
  path.states.insert(path.states.end(), z0.begin(), z0.end());
  std::vector<double> z = std::move(z0), k1(dim), k2(dim), k3(dim), k4(dim), u(dim);
  for (std::size_t n = 0; n + 1 < grid.size(); ++n) {
    const double t = grid[n], h = grid[n + 1] - grid[n];
    if (!(h > 0)) throw ConfigError("integrate: grid must be strictly increasing");
    rhs(t, z, k1);
    for (std::size_t i = 0; i < dim; ++i) u[i] = z[i] + 0.5 * h * k1[i];
    rhs(t + 0.5 * h, u, k2);
    for (std::size_t i = 0; i < dim; ++i) u[i] = z[i] + 0.5 * h * k2[i];
    rhs(t + 0.5 * h, u, k3);
    for (std::size_t i = 0; i < dim; ++i) u[i] = z[i] + h * k3[i];
    rhs(t + h, u, k4);
    for (std::size_t i = 0; i < dim; ++i) {
      z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
      if (!std::isfinite(z[i])) {
        throw NumericalError("integrate: non-finite state at step " + std::to_string(n) + " (t=" +
                             std::to_string(t + h) + ")");
      }
    }
    path.states.insert(path.states.end(), z.begin(), z.end());
  }
  return path;
}

namespace {

std::size_t node_of(const std::vector<double>& times, double t) {
  const auto it = std::lower_bound(times.begin(), times.end(), t - 1e-9 * std::max(1.0, std::abs(t)));
  if (it == times.end() || std::abs(*it - t) > 1e-9 * std::max(1.0, std::abs(t))) {
    throw ConfigError("frame integration: schedule boundary " + std::to_string(t) + " is not on the solver grid");
  }
  return static_cast<std::size_t>(it - times.begin());
}

double decay(double t, double tau) { return std::isinf(tau) ? 1.0 : std::exp(-t / tau); }

}  // namespace

SolverGrid SolverGrid::uniform(const phantom::ScanSchedule& schedule, double dt) {
  if (!(dt > 0)) throw ConfigError("solver grid: dt must be positive");
  SolverGrid g;
  g.times.push_back(0.0);
  g.boundary_nodes.push_back(0);
  for (std::size_t k = 0; k < schedule.num_frames(); ++k) {
    const double steps_f = schedule.end(k) / dt;
    const double steps_r = std::round(steps_f);
    if (std::abs(steps_f - steps_r) > 1e-6) {
      throw ConfigError("solver grid: frame boundary " + std::to_string(schedule.end(k)) +
                        " is not a multiple of dt=" + std::to_string(dt));
    }
    const auto last = static_cast<std::size_t>(steps_r);
    for (std::size_t i = g.times.size(); i <= last; ++i) g.times.push_back(static_cast<double>(i) * dt);
    g.times.back() = schedule.end(k);
    g.boundary_nodes.push_back(g.times.size() - 1);
  }
  return g;
}

SolverGrid SolverGrid::per_frame(const phantom::ScanSchedule& schedule, double max_dt, std::size_t min_steps) {
  if (!(max_dt > 0)) throw ConfigError("solver grid: max_dt must be positive");
  SolverGrid g;
  g.times.push_back(0.0);
  g.boundary_nodes.push_back(0);
  for (std::size_t k = 0; k < schedule.num_frames(); ++k) {
    const double d = schedule.duration(k);
    const auto steps = std::max<std::size_t>(std::max<std::size_t>(min_steps, 1),
                                             static_cast<std::size_t>(std::ceil(d / max_dt - 1e-9)));
    for (std::size_t i = 1; i <= steps; ++i) {
      g.times.push_back(schedule.start(k) + d * static_cast<double>(i) / static_cast<double>(steps));
    }
    g.times.back() = schedule.end(k);
    g.boundary_nodes.push_back(g.times.size() - 1);
  }
  return g;
}

std::vector<double> frame_activity(const StatePath& path, const std::function<double(double)>& plasma,
                                   double volume, double tau, const phantom::ScanSchedule& schedule) {
  std::vector<double> out;
  out.reserve(schedule.num_frames());
  for (std::size_t k = 0; k < schedule.num_frames(); ++k) {
    const std::size_t n0 = node_of(path.times, schedule.start(k));
    const std::size_t n1 = node_of(path.times, schedule.end(k));
    auto integrand = [&](std::size_t n) {
      const double t = path.times[n];
      return ((1.0 - volume) * path.total(n) + volume * plasma(t)) * decay(t, tau);
    };
    double acc = 0.0;
    double prev = integrand(n0);
    for (std::size_t n = n0; n < n1; ++n) {
      const double next = integrand(n + 1);
      acc += 0.5 * (path.times[n + 1] - path.times[n]) * (prev + next);
      prev = next;
    }
    out.push_back(acc / schedule.duration(k));
  }
  return out;
}

DecodeContext DecodeContext::build(const phantom::ScanSchedule& schedule, const std::function<double(double)>& plasma,
                                   double tau, SolverGrid grid, std::size_t blood_substeps) {
  DecodeContext ctx;
  ctx.num_frames = schedule.num_frames();
  if (grid.boundary_nodes.size() != ctx.num_frames + 1) {
    throw ConfigError("decode context: solver grid was built for a different schedule");
  }
  for (std::size_t k = 0; k <= ctx.num_frames; ++k) {
    if (std::abs(grid.times[grid.boundary_nodes[k]] - schedule.boundaries()[k]) > 1e-9) {
      throw ConfigError("decode context: schedule boundary not on the solver grid");
    }
  }
  const std::size_t N = grid.num_steps();
  for (std::size_t n = 0; n <= N; ++n) ctx.plasma_node.push_back(plasma(grid.times[n]));
  for (std::size_t n = 0; n < N; ++n) ctx.plasma_mid.push_back(plasma(0.5 * (grid.times[n] + grid.times[n + 1])));

  const std::size_t sub = std::max<std::size_t>(blood_substeps, 1);
  for (std::size_t k = 0; k < ctx.num_frames; ++k) {
    const std::size_t n0 = grid.boundary_nodes[k], n1 = grid.boundary_nodes[k + 1];
    const double inv = 1.0 / schedule.duration(k);
    std::vector<std::pair<std::size_t, double>> w;
    double blood = 0.0;
    for (std::size_t n = n0; n <= n1; ++n) {
      double weight = 0.0;
      if (n > n0) weight += 0.5 * (grid.times[n] - grid.times[n - 1]);
      if (n < n1) weight += 0.5 * (grid.times[n + 1] - grid.times[n]);
      w.emplace_back(n, weight * decay(grid.times[n], tau) * inv);
      if (n < n1) {
        const double h = (grid.times[n + 1] - grid.times[n]) / static_cast<double>(sub);
        for (std::size_t j = 0; j < sub; ++j) {
          const double ta = grid.times[n] + h * static_cast<double>(j);
          const double tb = j + 1 == sub ? grid.times[n + 1] : ta + h;
          blood += 0.5 * (tb - ta) * (plasma(ta) * decay(ta, tau) + plasma(tb) * decay(tb, tau));
        }
      }
    }
    ctx.frame_weights.push_back(std::move(w));
    ctx.blood.push_back(blood * inv);
  }
  ctx.grid = std::move(grid);
  return ctx;
}

namespace {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Batched evaluation of the hybrid right-hand side for all pixels (rows).
class BatchRhs {
 public:
  BatchRhs(const HybridModel& model, const Mat& rates, const Mat& code)
      : model_(model), rates_(rates), code_(code) {
    if (model.neural) kernel_ = ad::MlpKernel(model.theta);
  }

  struct Stage {
    Mat nn_input;
    ad::MlpKernel::Workspace ws;
  };

  void eval(const Mat& u, double a, Mat& out, Stage* stage) const {
    const Eigen::Index P = u.rows();
    out.resize(P, static_cast<Eigen::Index>(model_.dim));
    if (model_.physics == Physics::OneTissue) {
      out.col(0) = -rates_.col(1).cwiseProduct(u.col(0)) + a * rates_.col(0);
    } else if (model_.physics == Physics::TwoTissue) {
      out.col(0) = -(rates_.col(1) + rates_.col(2)).cwiseProduct(u.col(0)) + rates_.col(3).cwiseProduct(u.col(1)) +
                   a * rates_.col(0);
      out.col(1) = rates_.col(2).cwiseProduct(u.col(0)) - rates_.col(3).cwiseProduct(u.col(1));
    } else {
      out.setZero();
    }
    if (!model_.neural) return;
    Stage local;
    Stage& st = stage ? *stage : local;
    fill_input(u, a, st.nn_input);
    Mat nn;
    kernel_.forward(st.nn_input, st.ws, nn);
    out += model_.state_scale * nn;
  }

  // Accumulates d/du into gu and parameter gradients for cotangent gf.
  void vjp(const Mat& u, double a, const Stage& stage, const Mat& gf, Mat& gu, Mat& grates, Mat& gcode,
           ad::MlpKernel::Grads& gtheta) const {
    if (model_.physics == Physics::OneTissue) {
      gu.col(0) -= rates_.col(1).cwiseProduct(gf.col(0));
      grates.col(0) += a * gf.col(0);
      grates.col(1) -= u.col(0).cwiseProduct(gf.col(0));
    } else if (model_.physics == Physics::TwoTissue) {
      const auto g0 = gf.col(0), g1 = gf.col(1);
      gu.col(0) += -(rates_.col(1) + rates_.col(2)).cwiseProduct(g0) + rates_.col(2).cwiseProduct(g1);
      gu.col(1) += rates_.col(3).cwiseProduct(g0 - g1);
      grates.col(0) += a * g0;
      grates.col(1) -= u.col(0).cwiseProduct(g0);
      grates.col(2) += u.col(0).cwiseProduct(g1 - g0);
      grates.col(3) += u.col(1).cwiseProduct(g0 - g1);
    }
    if (!model_.neural) return;
    const double s = model_.state_scale;
    const auto d = static_cast<Eigen::Index>(model_.dim);
    const auto c = static_cast<Eigen::Index>(model_.code_dim);
    Mat gx;
    kernel_.backward(stage.nn_input, stage.ws, s * gf, gtheta, gx);
    gu += gx.leftCols(d) / s;
    if (c > 0) gcode += gx.middleCols(d, c);
  }

 private:
  void fill_input(const Mat& u, double a, Mat& x) const {
    const Eigen::Index P = u.rows();
    const auto d = static_cast<Eigen::Index>(model_.dim);
    const auto c = static_cast<Eigen::Index>(model_.code_dim);
    x.resize(P, static_cast<Eigen::Index>(model_.nn_input_size()));
    x.leftCols(d) = u / model_.state_scale;
    if (c > 0) x.middleCols(d, c) = code_;
    if (model_.include_input_in_nn) x.col(d + c).setConstant(a / model_.state_scale);
  }

  const HybridModel& model_;
  const Mat& rates_;
  const Mat& code_;
  ad::MlpKernel kernel_;
};

Mat plane_matrix(const ad::Tensor& t, std::size_t planes, std::size_t pixels) {
  // [planes, P] row-major -> P x planes
  Mat m(static_cast<Eigen::Index>(pixels), static_cast<Eigen::Index>(planes));
  for (std::size_t r = 0; r < planes; ++r) {
    for (std::size_t p = 0; p < pixels; ++p) m(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(r)) = t.values[r * pixels + p];
  }
  return m;
}

void add_plane_grad(const Mat& g, std::span<double> out) {
  const auto P = static_cast<std::size_t>(g.rows());
  for (Eigen::Index r = 0; r < g.cols(); ++r) {
    for (std::size_t p = 0; p < P; ++p) out[static_cast<std::size_t>(r) * P + p] += g(static_cast<Eigen::Index>(p), r);
  }
}

}  // namespace

ad::Var decode_frames(const HybridModel& model, const ad::MlpVars* theta, const DecodeInputs& inputs,
                      const DecodeContext& ctx) {
  using namespace ad;
  model.validate();
  Graph& graph = *inputs.volume.graph;
  const Shape& vshape = inputs.volume.shape();
  if (vshape.size() != 1) throw ShapeError("decode_frames: volume must be [P], got " + to_string(vshape));
  const std::size_t P = vshape[0], T = ctx.num_frames, nr = model.num_rates(), dn = model.code_dim;
  if (nr > 0 && (!inputs.rates || inputs.rates->shape() != Shape{nr, P})) {
    throw ShapeError("decode_frames: rates must be [" + std::to_string(nr) + "," + std::to_string(P) + "]");
  }
  if (dn > 0 && (!inputs.code || inputs.code->shape() != Shape{dn, P})) {
    throw ShapeError("decode_frames: code must be [" + std::to_string(dn) + "," + std::to_string(P) + "]");
  }
  if (model.neural && (!theta || theta->weights.size() != model.theta.num_layers())) {
    throw ConfigError("decode_frames: neural model needs bound theta");
  }

  // Operand order: volume, [rates], [code], [theta W0, b0, ...]
  std::vector<Var> operands{inputs.volume};
  const std::size_t rates_slot = operands.size();
  if (nr > 0) operands.push_back(*inputs.rates);
  const std::size_t code_slot = operands.size();
  if (dn > 0) operands.push_back(*inputs.code);
  const std::size_t theta_slot = operands.size();
  if (model.neural) {
    for (std::size_t l = 0; l < theta->weights.size(); ++l) {
      operands.push_back(theta->weights[l]);
      operands.push_back(theta->biases[l]);
    }
  }

  struct State {
    HybridModel model;
    Mat rates, code;
    Vec volume;
    std::vector<Mat> path;  // N+1 states, each P x dim
  };
  auto st = std::make_shared<State>();
  st->model = model;
  if (model.neural) {
    // Evaluate with the values bound on the tape.
    for (std::size_t l = 0; l < model.theta.num_layers(); ++l) {
      st->model.theta.weights[l].values = theta->weights[l].value().values;
      st->model.theta.biases[l].values = theta->biases[l].value().values;
    }
  }
  st->rates = nr > 0 ? plane_matrix(inputs.rates->value(), nr, P) : Mat(static_cast<Eigen::Index>(P), 0);
  st->code = dn > 0 ? plane_matrix(inputs.code->value(), dn, P) : Mat(static_cast<Eigen::Index>(P), 0);
  st->volume = Eigen::Map<const Vec>(inputs.volume.value().values.data(), static_cast<Eigen::Index>(P));

  const std::size_t N = ctx.grid.num_steps();
  const auto dim = static_cast<Eigen::Index>(model.dim);
  BatchRhs rhs(st->model, st->rates, st->code);
  st->path.reserve(N + 1);
  st->path.push_back(Mat::Zero(static_cast<Eigen::Index>(P), dim));
  Mat k1, k2, k3, k4;
  for (std::size_t n = 0; n < N; ++n) {
    const double h = ctx.grid.times[n + 1] - ctx.grid.times[n];
    const Mat& z = st->path.back();
    rhs.eval(z, ctx.plasma_node[n], k1, nullptr);
    rhs.eval(z + 0.5 * h * k1, ctx.plasma_mid[n], k2, nullptr);
    rhs.eval(z + 0.5 * h * k2, ctx.plasma_mid[n], k3, nullptr);
    rhs.eval(z + h * k3, ctx.plasma_node[n + 1], k4, nullptr);
    Mat next = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!next.allFinite()) {
      Eigen::Index bad = 0;
      for (Eigen::Index p = 0; p < next.rows(); ++p) {
        if (!next.row(p).allFinite()) {
          bad = p;
          break;
        }
      }
      throw NumericalError("decode_frames: non-finite state at step " + std::to_string(n) + " (t=" +
                           std::to_string(ctx.grid.times[n + 1]) + ", pixel " + std::to_string(bad) + ")");
    }
    st->path.push_back(std::move(next));
  }

  Tensor out = Tensor::zeros({T, P});
  for (std::size_t k = 0; k < T; ++k) {
    Vec tissue = Vec::Zero(static_cast<Eigen::Index>(P));
    for (const auto& [n, w] : ctx.frame_weights[k]) tissue += w * st->path[n].rowwise().sum();
    Vec frame = (1.0 - st->volume.array()).matrix().cwiseProduct(tissue) + ctx.blood[k] * st->volume;
    std::copy(frame.data(), frame.data() + P, out.values.begin() + static_cast<std::ptrdiff_t>(k * P));
  }

  const DecodeContext* cptr = &ctx;
  BackwardFn backward = [st, cptr, P, T, N, dim, nr, dn, rates_slot, code_slot, theta_slot](
                            std::span<const double> gout, std::span<const std::span<double>> gin) {
    const DecodeContext& ctx = *cptr;
    const auto Pi = static_cast<Eigen::Index>(P);
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> G(
        gout.data(), static_cast<Eigen::Index>(T), Pi);

    // Adjoint of the tissue curve at every node, and dV.
    std::vector<Vec> node_adj(N + 1, Vec::Zero(Pi));
    Vec gvol = Vec::Zero(Pi);
    for (std::size_t k = 0; k < T; ++k) {
      const Vec gk = G.row(static_cast<Eigen::Index>(k)).transpose();
      Vec tissue = Vec::Zero(Pi);
      for (const auto& [n, w] : ctx.frame_weights[k]) {
        tissue += w * st->path[n].rowwise().sum();
        node_adj[n] += w * (1.0 - st->volume.array()).matrix().cwiseProduct(gk);
      }
      gvol += gk.cwiseProduct(ctx.blood[k] * Vec::Ones(Pi) - tissue);
    }

    BatchRhs rhs(st->model, st->rates, st->code);
    Mat grates = Mat::Zero(Pi, static_cast<Eigen::Index>(nr));
    Mat gcode = Mat::Zero(Pi, static_cast<Eigen::Index>(dn));
    ad::MlpKernel::Grads gtheta;
    if (st->model.neural) gtheta = ad::MlpKernel(st->model.theta).zero_grads();

    Mat lambda = Mat::Zero(Pi, dim);
    for (Eigen::Index d = 0; d < dim; ++d) lambda.col(d) = node_adj[N];
    std::array<BatchRhs::Stage, 4> stages;
    std::array<Mat, 4> u, k;
    for (std::size_t n = N; n-- > 0;) {
      const double h = ctx.grid.times[n + 1] - ctx.grid.times[n];
      const double a[4] = {ctx.plasma_node[n], ctx.plasma_mid[n], ctx.plasma_mid[n], ctx.plasma_node[n + 1]};
      const Mat& z = st->path[n];
      u[0] = z;
      rhs.eval(u[0], a[0], k[0], &stages[0]);
      u[1] = z + 0.5 * h * k[0];
      rhs.eval(u[1], a[1], k[1], &stages[1]);
      u[2] = z + 0.5 * h * k[1];
      rhs.eval(u[2], a[2], k[2], &stages[2]);
      u[3] = z + h * k[2];
      rhs.eval(u[3], a[3], k[3], &stages[3]);

      std::array<Mat, 4> gk = {(h / 6.0) * lambda, (h / 3.0) * lambda, (h / 3.0) * lambda, (h / 6.0) * lambda};
      Mat gz = lambda;
      const double back[4] = {0.0, 0.5 * h, 0.5 * h, h};  // u_i = z + back[i] * k_{i-1}
      for (int i = 3; i >= 0; --i) {
        Mat gu = Mat::Zero(Pi, dim);
        rhs.vjp(u[i], a[i], stages[i], gk[i], gu, grates, gcode, gtheta);
        gz += gu;
        if (i > 0) gk[i - 1] += back[i] * gu;
      }
      for (Eigen::Index d = 0; d < dim; ++d) gz.col(d) += node_adj[n];
      lambda = std::move(gz);
    }

    if (!gin[0].empty()) {
      for (std::size_t p = 0; p < P; ++p) gin[0][p] += gvol(static_cast<Eigen::Index>(p));
    }
    if (nr > 0 && !gin[rates_slot].empty()) add_plane_grad(grates, gin[rates_slot]);
    if (dn > 0 && !gin[code_slot].empty()) add_plane_grad(gcode, gin[code_slot]);
    if (st->model.neural) {
      for (std::size_t l = 0; l < gtheta.weights.size(); ++l) {
        auto gw = gin[theta_slot + 2 * l];
        auto gb = gin[theta_slot + 2 * l + 1];
        const Mat& w = gtheta.weights[l];
        if (!gw.empty()) {
          for (Eigen::Index r = 0; r < w.rows(); ++r) {
            for (Eigen::Index c = 0; c < w.cols(); ++c) gw[static_cast<std::size_t>(r * w.cols() + c)] += w(r, c);
          }
        }
        if (!gb.empty()) {
          for (Eigen::Index c = 0; c < gtheta.biases[l].size(); ++c) gb[static_cast<std::size_t>(c)] += gtheta.biases[l](c);
        }
      }
    }
  };
  return graph.record_custom("decode_frames", operands, std::move(out), std::move(backward));
}

std::vector<double> decode_values(const HybridModel& model, std::span<const double> rates,
                                  std::span<const double> volume, std::span<const double> code,
                                  const DecodeContext& ctx) {
  model.validate();
  const std::size_t P = volume.size(), T = ctx.num_frames, nr = model.num_rates(), dn = model.code_dim;
  if (rates.size() != nr * P || code.size() != dn * P) {
    throw ShapeError("decode_values: expected " + std::to_string(nr) + " rate and " + std::to_string(dn) +
                     " code planes of " + std::to_string(P) + " pixels");
  }
  const auto Pi = static_cast<Eigen::Index>(P);
  Mat R(Pi, static_cast<Eigen::Index>(nr)), C(Pi, static_cast<Eigen::Index>(dn));
  for (std::size_t r = 0; r < nr; ++r) {
    for (std::size_t p = 0; p < P; ++p) R(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(r)) = rates[r * P + p];
  }
  for (std::size_t r = 0; r < dn; ++r) {
    for (std::size_t p = 0; p < P; ++p) C(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(r)) = code[r * P + p];
  }
  const Eigen::Map<const Vec> V(volume.data(), Pi);

  // node -> (frame, weight)
  const std::size_t N = ctx.grid.num_steps();
  std::vector<std::vector<std::pair<std::size_t, double>>> by_node(N + 1);
  for (std::size_t k = 0; k < T; ++k) {
    for (const auto& [n, w] : ctx.frame_weights[k]) by_node[n].emplace_back(k, w);
  }

  BatchRhs rhs(model, R, C);
  Mat tissue = Mat::Zero(Pi, static_cast<Eigen::Index>(T));
  Mat z = Mat::Zero(Pi, static_cast<Eigen::Index>(model.dim));
  Mat k1, k2, k3, k4;
  for (std::size_t n = 0;; ++n) {
    if (!by_node[n].empty()) {
      const Vec total = z.rowwise().sum();
      for (const auto& [k, w] : by_node[n]) tissue.col(static_cast<Eigen::Index>(k)) += w * total;
    }
    if (n == N) break;
    const double h = ctx.grid.times[n + 1] - ctx.grid.times[n];
    rhs.eval(z, ctx.plasma_node[n], k1, nullptr);
    rhs.eval(z + 0.5 * h * k1, ctx.plasma_mid[n], k2, nullptr);
    rhs.eval(z + 0.5 * h * k2, ctx.plasma_mid[n], k3, nullptr);
    rhs.eval(z + h * k3, ctx.plasma_node[n + 1], k4, nullptr);
    z += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!z.allFinite()) {
      Eigen::Index bad = 0;
      while (bad + 1 < z.rows() && z.row(bad).allFinite()) ++bad;
      throw NumericalError("decode: non-finite state at step " + std::to_string(n) + " (t=" +
                           std::to_string(ctx.grid.times[n + 1]) + ", pixel " + std::to_string(bad) + ")");
    }
  }
  std::vector<double> out(T * P);
  for (std::size_t k = 0; k < T; ++k) {
    for (std::size_t p = 0; p < P; ++p) {
      const auto pi = static_cast<Eigen::Index>(p);
      out[k * P + p] = (1.0 - V(pi)) * tissue(pi, static_cast<Eigen::Index>(k)) + V(pi) * ctx.blood[k];
    }
  }
  return out;
}

}  // namespace hyke::kinetics
