#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hyke/ad/gradcheck.hpp"
#include "hyke/ad/graph.hpp"
#include "hyke/kinetics/kinetics.hpp"
#include "hyke/metrics/metrics.hpp"
#include "hyke/projector/projector.hpp"
#include "hyke/recon/recon.hpp"
#include "hyke/train/dataset.hpp"

namespace hyke::train {

enum class Variant { PurelyPhysics, PurelyNeural, GlobalHybrid, Hyke };
constexpr std::array<Variant, 4> kAllVariants{Variant::PurelyPhysics, Variant::PurelyNeural, Variant::GlobalHybrid,
                                              Variant::Hyke};

/// "purely-physics", "purely-neural", "global-hybrid", "hyke".
std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

/// Specializes `base` (grid, prior physics, code size, widths) to a variant:
/// PurelyPhysics drops theta and the code, PurelyNeural drops the physics
/// term, GlobalHybrid drops the code.
recon::Architecture architecture_for(Variant v, recon::Architecture base);

enum class Mode { Supervised, Unsupervised };
std::string mode_name(Mode m);
Mode mode_from_name(const std::string& name);

constexpr double kExpectedFloor = 1e-8;

/// mean((x - xhat)^2) + lambda * mean((xhat - xtilde)^2).
ad::Var supervised_loss(ad::Var x, ad::Var xhat, ad::Var xtilde, double lambda);

/// -mean(y log max(ybar, eps) - ybar). Throws NumericalError for ybar < 0.
ad::Var poisson_nll(ad::Var ybar, std::span<const double> y);
/// The same value without a graph.
double poisson_nll_value(std::span<const double> ybar, std::span<const double> y);
/// Smallest attainable value of poisson_nll for counts y (at ybar = y).
double saturated_nll(std::span<const double> y);

/// poisson_nll(ybar, y) + lambda * mean((xhat - xtilde)^2).
ad::Var unsupervised_loss(std::span<const double> y, ad::Var ybar, ad::Var xhat, ad::Var xtilde, double lambda);

struct TrainConfig {
  Mode mode = Mode::Unsupervised;
  double lambda = 0.1;
  double learning_rate = 1e-3;
  std::size_t epochs = 200;
  std::size_t batch_size = 1;
  std::uint64_t seed = 1;
  std::size_t threads = 1;
  // Decoder grid used while training and evaluating.
  double max_dt = 3.0;
  std::size_t min_steps = 1;
  std::size_t blood_substeps = 8;
  // Learning-rate multiplier for the filter taps. Adam moves every tap by
  // about the learning rate per step, which dwarfs the ramp's small tails.
  double filter_lr_scale = 0.01;

  void validate() const;
  io::Json to_json() const;
  static TrainConfig from_json(const io::Json& j);
};

/// Adam with bias correction.
class Adam {
 public:
  Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(learning_rate), b1_(beta1), b2_(beta2), eps_(eps) {}
  /// One update of `params` from the gradients in `grads` (same layout).
  /// `lr_scale`, when given, multiplies the learning rate per tensor.
  void step(const std::vector<ad::Tensor*>& params, const std::vector<std::vector<double>>& grads,
            std::span<const double> lr_scale = {});
  std::size_t steps() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// A sequence with everything the losses and metrics need precomputed.
struct PreparedSequence {
  std::string id;
  metrics::SeqShape shape;
  recon::SequenceInput input;
  std::vector<double> truth;     // [T, P]
  std::vector<std::uint8_t> roi; // [P], 1 on non-background pixels
  std::vector<double> counts;    // [T, A*B]
  double scale_factor = 0.0;
  double randoms_per_bin = 0.0;
  double nll_floor = 0.0;        // saturated NLL of `counts`
};

/// Projector, decode grid and prepared splits shared by runs on one dataset.
struct Problem {
  SimulationConfig sim;
  phantom::ScanSchedule schedule;
  std::unique_ptr<projector::Projector> projector;
  std::unique_ptr<kinetics::DecodeContext> ctx;
  std::vector<PreparedSequence> train, val, test;

  std::size_t frames() const { return schedule.num_frames(); }
  const std::vector<PreparedSequence>& split(const std::string& name) const;
};

PreparedSequence prepare_sequence(const Sequence& s, const projector::Projector& proj, std::size_t frames);
Problem make_problem(const Dataset& data, const TrainConfig& cfg, bool load_test = true);

/// Grid geometry from the problem, everything else from `base`.
recon::Architecture problem_architecture(const Problem& p, recon::Architecture base);

struct EpochRecord {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0.0;
  double mse = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
};
void write_epoch_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& rows);

struct TrainResult {
  recon::Model model;  // best validation loss
  std::size_t best_epoch = 0;
  std::vector<EpochRecord> history;
  std::vector<double> train_loss;  // per epoch, index 0 at initialization
  /// Final mean((xhat - xtilde)^2 / norm^2) over the training set.
  double final_regularizer = 0.0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Adam over (phi, psi, theta). Epoch 0 evaluates the initialization; each
/// later epoch reports the mean mini-batch loss. Image terms are measured in
/// units of the sequence normalizer, and the Poisson term is reported minus
/// its saturated value so a perfect fit scores 0. Throws NumericalError
/// naming the epoch when the loss becomes non-finite.
TrainResult train_run(const Problem& problem, Variant variant, const recon::Architecture& base,
                      const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Loss of a model on a prepared sequence in the given mode (tape-free).
double sequence_loss(recon::Model& model, const Problem& problem, const PreparedSequence& s, const TrainConfig& cfg,
                     std::vector<double>* xhat_out = nullptr, double* regularizer = nullptr);

struct SequenceScores {
  std::string id;
  double mse = 0.0;  // over non-background pixels
  double psnr = 0.0;
  double ssim = 0.0;  // NaN for images smaller than the SSIM window
};
SequenceScores score_sequence(const PreparedSequence& s, std::span<const double> xhat);

/// Reconstructs every sequence of a split. `recons`, if given, receives the
/// activity estimates in split order.
std::vector<SequenceScores> evaluate_model(recon::Model& model, const Problem& problem, const std::string& split,
                                           std::vector<std::vector<double>>* recons = nullptr);
/// Ramp-filtered FBP with the nonnegativity clamp.
std::vector<SequenceScores> evaluate_fbp(const Problem& problem, const std::string& split,
                                         std::vector<std::vector<double>>* recons = nullptr);

/// `method,mse_mean,mse_std,psnr_mean,psnr_std,ssim_mean,ssim_std`
struct ReportRow {
  std::string method;
  double mse_mean = 0.0, mse_std = 0.0;
  double psnr_mean = 0.0, psnr_std = 0.0;
  double ssim_mean = 0.0, ssim_std = 0.0;
};
/// Mean and population std over the given scores.
ReportRow summarize(const std::string& method, const std::vector<SequenceScores>& scores);
void write_report_csv(const std::filesystem::path& path, const std::vector<ReportRow>& rows);

/// Finite-difference check of the full encode -> decode -> loss chain on a
/// small random instance (n x n pixels, T frames).
ad::GradCheckResult end_to_end_gradcheck(Variant variant, Mode mode, std::uint64_t seed, std::size_t samples = 80,
                                         std::size_t n = 4, std::size_t frames = 6);

/// One row per variant: mean and std across seeds of each seed's split mean.
/// Throws ConfigError when a variant is missing or has no seeds.
std::vector<ReportRow> variant_ordering_report(const std::map<Variant, std::vector<std::vector<SequenceScores>>>& runs);

}  // namespace hyke::train
