#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "hyke/ad/graph.hpp"
#include "hyke/ad/mlp.hpp"
#include "hyke/phantom/schedule.hpp"

namespace hyke::kinetics {

/// Prior compartment physics of the state-space model.
enum class Physics { None, OneTissue, TwoTissue };

std::size_t physics_state_dim(Physics physics);
std::size_t physics_num_rates(Physics physics);

/// Rate constants (min^-1) and vascular fraction of one pixel.
struct CompartmentParams {
  double k1 = 0.0;
  double k2 = 0.0;
  double k3 = 0.0;
  double k4 = 0.0;
  double volume = 0.0;

  /// Throws ConfigError for negative rates or V outside [0,1].
  void validate() const;
};

/// dC_T/dt = -k2 C_T + k1 a
double one_tissue_rhs(double z, double a, double k1, double k2);

/// d[C_E, C_M]/dt = [-(k2+k3) C_E + k4 C_M + k1 a, k3 C_E - k4 C_M]
std::array<double, 2> two_tissue_rhs(const std::array<double, 2>& z, double a, double k1, double k2, double k3,
                                     double k4);

/// Physics term plus an optional neural residual shared across pixels:
///   dz/dt = f_phys(z, a; rates) + s * NN([z/s, code, a/s]; theta)
/// `s` (state_scale) keeps network inputs O(1) when states are in physical
/// concentration units. The `a/s` input is present only when
/// include_input_in_nn is set.
struct HybridModel {
  Physics physics = Physics::OneTissue;
  std::size_t dim = 1;
  std::size_t code_dim = 0;
  bool neural = false;
  bool include_input_in_nn = false;
  double state_scale = 1.0;
  ad::MlpWeights theta;

  /// Physics-only model.
  static HybridModel physics_only(Physics physics);
  /// Model with a neural residual of the given hidden widths. `dim` must
  /// match the physics unless physics is None.
  static HybridModel with_residual(Physics physics, std::size_t dim, std::size_t code_dim,
                                   const std::vector<std::size_t>& hidden, std::uint64_t seed,
                                   double output_scale = 1.0, bool include_input_in_nn = false,
                                   double state_scale = 1.0);

  std::size_t num_rates() const { return physics_num_rates(physics); }
  std::size_t nn_input_size() const { return dim + code_dim + (include_input_in_nn ? 1 : 0); }
  void validate() const;
};

/// Tape-free right-hand side for one pixel.
std::vector<double> hybrid_rhs(const HybridModel& model, std::span<const double> z, double a,
                               std::span<const double> rates, std::span<const double> code);

/// Taped right-hand side, differentiable in z, rates, code and theta.
/// `theta` may be null for physics-only models; `rates`/`code` may be absent
/// when the model has none.
ad::Var hybrid_rhs(const HybridModel& model, const ad::MlpVars* theta, ad::Var z, double a,
                   std::optional<ad::Var> rates, std::optional<ad::Var> code);

/// Right-hand side callback: writes dz/dt at time t.
using Rhs = std::function<void(double t, std::span<const double> z, std::span<double> dz)>;

/// States on the solver grid, row-major [steps+1, dim].
struct StatePath {
  std::vector<double> times;
  std::vector<double> states;
  std::size_t dim = 0;

  std::size_t num_nodes() const { return times.size(); }
  std::span<const double> at(std::size_t n) const { return {states.data() + n * dim, dim}; }
  /// Sum of state components at node n (C_T = C_E + C_M for two-tissue).
  double total(std::size_t n) const;
};

/// Classical fixed-step RK4 on [0, t_end]; the last step is shortened when
/// t_end is not a multiple of dt. Throws NumericalError naming the step when
/// the state becomes non-finite.
StatePath integrate(const Rhs& rhs, std::vector<double> z0, double t_end, double dt);
/// RK4 on an explicit increasing grid starting at the first node.
StatePath integrate(const Rhs& rhs, std::vector<double> z0, std::span<const double> grid);

/// Solver grid aligned with the frame boundaries of a schedule.
struct SolverGrid {
  std::vector<double> times;
  std::vector<std::size_t> boundary_nodes;

  /// Uniform step; every boundary must fall on a multiple of dt.
  static SolverGrid uniform(const phantom::ScanSchedule& schedule, double dt);
  /// Each frame split into max(min_steps, ceil(duration / max_dt)) equal steps.
  static SolverGrid per_frame(const phantom::ScanSchedule& schedule, double max_dt, std::size_t min_steps);

  std::size_t num_steps() const { return times.size() - 1; }
};

/// Decay-weighted frame average by trapezoidal quadrature on the path grid:
///   x_k = 1/(t_k - t_{k-1}) * integral [(1-V) C_T + V C_P] e^{-t/tau} dt.
/// tau = +inf disables decay. Throws ConfigError if a schedule boundary is
/// not a node of the path grid.
std::vector<double> frame_activity(const StatePath& path, const std::function<double(double)>& plasma,
                                   double volume, double tau, const phantom::ScanSchedule& schedule);

constexpr double kNoDecay = std::numeric_limits<double>::infinity();

/// Precomputed input-function samples and quadrature weights for batched decoding.
struct DecodeContext {
  SolverGrid grid;
  std::size_t num_frames = 0;
  std::vector<double> plasma_node;  // C_P at grid nodes
  std::vector<double> plasma_mid;   // C_P at step midpoints
  /// Per frame: (node, weight) with weight = trapezoid weight * decay / duration.
  std::vector<std::vector<std::pair<std::size_t, double>>> frame_weights;
  /// Per frame average of C_P e^{-t/tau}.
  std::vector<double> blood;

  /// `blood_substeps` > 1 evaluates the blood average on a grid refined that
  /// many times (the tissue term always uses the solver grid).
  static DecodeContext build(const phantom::ScanSchedule& schedule, const std::function<double(double)>& plasma,
                             double tau, SolverGrid grid, std::size_t blood_substeps = 1);
};

/// Per-pixel parameter planes entering the batched decoder. Planes are
/// row-major with pixels along the last axis.
struct DecodeInputs {
  std::optional<ad::Var> rates;  // [num_rates, P]
  ad::Var volume;                // [P]
  std::optional<ad::Var> code;   // [code_dim, P]
};

/// Batched hybrid ODE solve plus frame integration for every pixel, recorded
/// as one differentiable primitive (exact reverse sweep through the unrolled
/// RK4 steps). Returns unclamped frame values [T, P]. `ctx` must outlive the
/// graph's backward pass.
ad::Var decode_frames(const HybridModel& model, const ad::MlpVars* theta, const DecodeInputs& inputs,
                      const DecodeContext& ctx);

/// Tape-free batched decode for inference and data generation. Planes are
/// row-major [num_rates, P], [P] and [code_dim, P]; returns [T, P]. Keeps only
/// the current state, so memory does not grow with the step count.
std::vector<double> decode_values(const HybridModel& model, std::span<const double> rates,
                                  std::span<const double> volume, std::span<const double> code,
                                  const DecodeContext& ctx);

}  // namespace hyke::kinetics
