#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "hyke/ad/graph.hpp"
#include "hyke/ad/mlp.hpp"
#include "hyke/io/raw.hpp"
#include "hyke/kinetics/kinetics.hpp"
#include "hyke/projector/projector.hpp"

namespace hyke::recon {

/// Discrete Ram-Lak kernel of length 2B-1 for bin spacing `ds`:
/// h[0] = 1/(4 ds^2), h[odd n] = -1/(pi^2 n^2 ds^2), h[even n != 0] = 0.
std::vector<double> ramp_kernel(std::size_t bins, double spacing);

/// Counts converted to activity units: (y - n) / (scale * D).
std::vector<double> correct_sinograms(std::span<const std::uint32_t> counts, const projector::SinogramInfo& info,
                                      const projector::ProjectorConfig& cfg);

/// Taped filtered backprojection of corrected sinograms [T, A*B] with
/// filter `phi` [2B-1]: (pi/A) * ds * G^T (phi * y), filtering along bins.
ad::Var filtered_backprojection(const projector::Projector& g, ad::Var sinos, ad::Var phi);

/// Plain FBP with the ramp filter (no clamp), [T, P].
std::vector<double> fbp(const projector::Projector& g, std::span<const double> sinos, std::size_t frames);
/// FBP followed by a nonnegativity clamp.
std::vector<double> fbp_baseline(const projector::Projector& g, std::span<const double> sinos, std::size_t frames);

/// Hyperparameters that fix tensor shapes; stored in checkpoints.
struct Architecture {
  std::size_t frames = 18;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t num_bins = 48;
  double bin_spacing = 1.0;
  kinetics::Physics physics = kinetics::Physics::OneTissue;
  bool neural = true;
  std::size_t code_dim = 4;
  std::vector<std::size_t> nn_hidden{16, 16};
  bool include_input_in_nn = false;
  double state_scale = 10.0;
  double nn_init_scale = 0.1;
  std::size_t encoder_hidden = 64;
  double rate_init = 0.1;
  double volume_init = 0.05;

  std::size_t state_dim() const;
  std::size_t num_rates() const { return kinetics::physics_num_rates(physics); }
  /// Encoder output planes: rates + code + V.
  std::size_t planes() const { return num_rates() + code_dim + 1; }
  void validate() const;

  io::Json to_json() const;
  static Architecture from_json(const io::Json& j);
};

std::string physics_name(kinetics::Physics p);
kinetics::Physics physics_from_name(const std::string& name);

/// All learnable tensors: filter phi, encoder psi and kinetics theta.
struct Model {
  Architecture arch;
  ad::Tensor filter;                 // phi [2B-1]
  ad::MlpWeights encoder_mlp;        // psi: T -> hidden -> planes
  ad::Tensor encoder_kernel;         // psi: depthwise [planes, 3, 3], residual
  ad::Tensor encoder_bias;           // psi: [planes]
  kinetics::HybridModel kinetics;    // theta lives in kinetics.theta when neural

  static Model init(const Architecture& arch, std::uint64_t seed);

  std::vector<ad::Tensor*> parameters();
  std::vector<const ad::Tensor*> parameters() const;
  std::vector<std::string> parameter_names() const;
  std::size_t parameter_count() const;
};

/// Parameter images produced by the encoder.
struct ParamVars {
  std::optional<ad::Var> rates;  // [num_rates, P], softplus
  ad::Var volume;                // [P], sigmoid
  std::optional<ad::Var> code;   // [code_dim, P], identity
};

/// Model tensors bound to a graph as learnable leaves.
struct BoundModel {
  ad::Var filter;
  ad::MlpVars encoder_mlp;
  ad::Var encoder_kernel;
  ad::Var encoder_bias;
  std::optional<ad::MlpVars> theta;
};
BoundModel bind(ad::Graph& g, Model& model);

/// Per-pixel temporal MLP, residual 3x3 depthwise refinement, then heads.
/// `xtilde` is [T, P] already divided by the sequence normalizer.
ParamVars kinetic_encode(const Model& model, const BoundModel& vars, ad::Var xtilde);

/// Hybrid decode of parameter images to activity [T, P], clamped at 0.
ad::Var decode_activity(const Model& model, const BoundModel& vars, const ParamVars& params,
                        const kinetics::DecodeContext& ctx);

/// Everything the pipeline needs from one measured sequence.
struct SequenceInput {
  ad::Tensor sinos;   // corrected sinograms [T, A*B]
  double norm = 1.0;  // encoder input divisor: max of the ramp FBP
};
SequenceInput make_sequence_input(const projector::Projector& g, std::vector<double> corrected, std::size_t frames);

struct ForwardVars {
  ad::Var xtilde;  // [T, P], activity units
  ParamVars params;
  ad::Var xhat;    // [T, P], activity units
};

/// Full encode-decode pass on a graph.
ForwardVars forward(ad::Graph& g, const Model& model, const BoundModel& vars, const projector::Projector& proj,
                    const kinetics::DecodeContext& ctx, const SequenceInput& input);

/// Inference without keeping a tape for the decoder.
struct Reconstruction {
  std::vector<double> xtilde;
  std::vector<double> xhat;
  std::vector<double> params;  // [planes, P]: rates, code, V (post-head)
};
Reconstruction reconstruct(Model& model, const projector::Projector& proj, const kinetics::DecodeContext& ctx,
                           const SequenceInput& input);

/// Checkpoint: "HYKE1", u64 header length, JSON header, u64 tensor count,
/// then per tensor: u32 name length, name, u32 rank, u64 extents, f64 values.
void save_checkpoint(const std::filesystem::path& path, const Model& model, const io::Json& meta = io::Json::object());
Model load_checkpoint(const std::filesystem::path& path, io::Json* meta = nullptr);
/// Tensor names stored in a checkpoint file, in order.
std::vector<std::string> checkpoint_tensor_names(const std::filesystem::path& path);

}  // namespace hyke::recon
