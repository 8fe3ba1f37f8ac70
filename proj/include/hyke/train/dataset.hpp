#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hyke/io/raw.hpp"
#include "hyke/phantom/phantom.hpp"
#include "hyke/projector/projector.hpp"

namespace hyke::train {

/// Everything needed to synthesize a dataset.
struct SimulationConfig {
  std::size_t width = 32;
  std::size_t height = 32;
  std::size_t num_train = 40;
  std::size_t num_val = 5;
  std::size_t num_test = 5;
  std::uint64_t seed = 1;
  std::vector<double> frame_durations;  // empty: 3x1, 9x3, 6x5 min
  std::string label_map;                // raw u8 raster shared by all sequences; empty: synthetic
  phantom::FengParams feng;
  phantom::RoiPriors priors = phantom::default_priors();
  phantom::SolverConfig solver;
  projector::ProjectorConfig projector;

  SimulationConfig();
  phantom::ScanSchedule schedule() const;
  std::size_t total() const { return num_train + num_val + num_test; }
  void validate() const;

  io::Json to_json() const;
  static SimulationConfig from_json(const io::Json& j);
};

/// Writes `seq_NNNN/` directories (labels, kinetics, activity, expected and
/// measured sinograms, each with a sidecar) and `manifest.json` with splits,
/// the resolved config and FNV-1a file hashes. Refuses to overwrite an
/// existing manifest unless `force`.
void simulate_dataset(const SimulationConfig& cfg, const std::filesystem::path& out, bool force);

/// One loaded sequence.
struct Sequence {
  std::string id;
  phantom::LabelMap labels;
  phantom::ActivitySeq activity;
  std::vector<std::uint32_t> measured;
  projector::SinogramInfo info;
};

class Dataset {
 public:
  /// Reads the manifest; with `verify` every listed file hash is checked.
  static Dataset open(const std::filesystem::path& root, bool verify = true);

  const std::filesystem::path& root() const { return root_; }
  const SimulationConfig& config() const { return config_; }
  const io::Json& manifest() const { return manifest_; }
  const std::vector<std::string>& split(const std::string& name) const;
  std::vector<Sequence> load(const std::string& split) const;
  Sequence load_sequence(const std::string& id) const;

 private:
  std::filesystem::path root_;
  SimulationConfig config_;
  io::Json manifest_;
  std::vector<std::string> train_, val_, test_;
};

}  // namespace hyke::train
