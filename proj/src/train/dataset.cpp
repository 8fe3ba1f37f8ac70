#include "hyke/train/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <set>

#include "hyke/error.hpp"

namespace hyke::train {

namespace fs = std::filesystem;
using io::Json;

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent streams per sequence: 0 geometry, 1 kinetics, 2 counts.
std::uint64_t stream_seed(std::uint64_t base, std::size_t index, std::uint64_t stream) {
  return splitmix(splitmix(base) ^ splitmix(static_cast<std::uint64_t>(index) * 4 + stream + 1));
}

std::string sequence_id(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "seq_%04zu", i);
  return buf;
}

// Copies keys of `j` into `target`, rejecting unknown names.
template <typename F>
void each_key(const Json& j, const std::string& where, const std::set<std::string>& known, F&& apply) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) throw ConfigError(where + ": unknown key '" + it.key() + "'");
    try {
      apply(it.key(), it.value());
    } catch (const Json::exception& e) {
      throw ConfigError(where + "." + it.key() + ": " + e.what());
    }
  }
}

}  // namespace

SimulationConfig::SimulationConfig() {
  projector.num_angles = 64;
  projector.num_bins = 48;
  projector.height = height;
  projector.width = width;
  projector.target_total_counts = 1.1e6;
}

phantom::ScanSchedule SimulationConfig::schedule() const {
  return frame_durations.empty() ? phantom::ScanSchedule::standard()
                                 : phantom::ScanSchedule::from_durations(frame_durations);
}

void SimulationConfig::validate() const {
  if (width < 16 || height < 16) throw ConfigError("simulate: phantom must be at least 16x16");
  if (num_train == 0 || num_val == 0) throw ConfigError("simulate: train and val splits must be nonempty");
  if (projector.width != width || projector.height != height) {
    throw ConfigError("simulate: projector grid differs from the phantom grid");
  }
  if (!(solver.dt > 0)) throw ConfigError("simulate: solver dt must be positive");
  projector.validate();
  feng.validate();
  for (const auto& [roi, p] : priors) p.validate(roi);
  (void)schedule();
}

Json SimulationConfig::to_json() const {
  Json proj = {{"num_angles", projector.num_angles},
               {"num_bins", projector.num_bins},
               {"bin_spacing", projector.bin_spacing},
               {"efficiencies", projector.efficiencies},
               {"randoms_fraction", projector.randoms_fraction},
               {"target_total_counts", projector.target_total_counts}};
  return {{"width", width},
          {"height", height},
          {"num_train", num_train},
          {"num_val", num_val},
          {"num_test", num_test},
          {"seed", seed},
          {"frame_durations", frame_durations},
          {"label_map", label_map},
          {"feng",
           {{"a1", feng.a1}, {"a2", feng.a2}, {"a3", feng.a3}, {"l1", feng.l1}, {"l2", feng.l2}, {"l3", feng.l3}}},
          {"solver", {{"dt", solver.dt}, {"tau", solver.tau}}},
          {"projector", proj},
          {"priors", phantom::priors_to_json(priors)}};
}

SimulationConfig SimulationConfig::from_json(const Json& j) {
  SimulationConfig c;
  const std::set<std::string> top{"width",           "height", "num_train", "num_val", "num_test", "seed",
                                  "frame_durations", "feng",   "solver",    "projector", "priors",   "label_map"};
  each_key(j, "simulate", top, [&](const std::string& k, const Json& v) {
    if (k == "width") c.width = v.get<std::size_t>();
    else if (k == "height") c.height = v.get<std::size_t>();
    else if (k == "num_train") c.num_train = v.get<std::size_t>();
    else if (k == "num_val") c.num_val = v.get<std::size_t>();
    else if (k == "num_test") c.num_test = v.get<std::size_t>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else if (k == "frame_durations") c.frame_durations = v.get<std::vector<double>>();
    else if (k == "label_map") c.label_map = v.get<std::string>();
    else if (k == "priors") c.priors = phantom::priors_from_json(v);
    else if (k == "feng") {
      each_key(v, "simulate.feng", {"a1", "a2", "a3", "l1", "l2", "l3"}, [&](const std::string& f, const Json& x) {
        double* dst = f == "a1" ? &c.feng.a1 : f == "a2" ? &c.feng.a2 : f == "a3" ? &c.feng.a3
                    : f == "l1" ? &c.feng.l1 : f == "l2" ? &c.feng.l2 : &c.feng.l3;
        *dst = x.get<double>();
      });
    } else if (k == "solver") {
      each_key(v, "simulate.solver", {"dt", "tau", "threads"}, [&](const std::string& f, const Json& x) {
        if (f == "dt") c.solver.dt = x.get<double>();
        else if (f == "tau") c.solver.tau = x.get<double>();
        else c.solver.threads = x.get<std::size_t>();
      });
    } else if (k == "projector") {
      each_key(v, "simulate.projector",
               {"num_angles", "num_bins", "bin_spacing", "efficiencies", "randoms_fraction", "target_total_counts"},
               [&](const std::string& f, const Json& x) {
                 auto& p = c.projector;
                 if (f == "num_angles") p.num_angles = x.get<std::size_t>();
                 else if (f == "num_bins") p.num_bins = x.get<std::size_t>();
                 else if (f == "bin_spacing") p.bin_spacing = x.get<double>();
                 else if (f == "efficiencies") p.efficiencies = x.get<std::vector<double>>();
                 else if (f == "randoms_fraction") p.randoms_fraction = x.get<double>();
                 else p.target_total_counts = x.get<double>();
               });
    }
  });
  c.projector.width = c.width;
  c.projector.height = c.height;
  c.validate();
  return c;
}

void simulate_dataset(const SimulationConfig& cfg, const fs::path& out, bool force) {
  cfg.validate();
  const auto manifest_path = out / "manifest.json";
  if (fs::exists(manifest_path) && !force) {
    throw ConfigError(out.string() + " already holds a dataset (use --force to overwrite)");
  }
  io::ensure_directory(out);
  const auto schedule = cfg.schedule();
  const std::size_t frames = schedule.num_frames();
  projector::Projector proj(cfg.projector);

  Json splits = {{"train", Json::array()}, {"val", Json::array()}, {"test", Json::array()}};
  Json sequences = Json::object();
  Json files = Json::object();
  for (std::size_t i = 0; i < cfg.total(); ++i) {
    const auto id = sequence_id(i);
    const auto dir = out / id;
    io::ensure_directory(dir);
    const auto geo_seed = stream_seed(cfg.seed, i, 0);
    const auto kin_seed = stream_seed(cfg.seed, i, 1);
    const auto count_seed = stream_seed(cfg.seed, i, 2);

    const auto labels = cfg.label_map.empty() ? phantom::build_label_map(cfg.width, cfg.height, geo_seed)
                                              : phantom::load_label_map(cfg.label_map, cfg.width, cfg.height);
    const auto fields = phantom::sample_kinetics(labels, cfg.priors, kin_seed);
    const auto activity = phantom::generate_ground_truth(fields, cfg.feng, schedule, cfg.solver);
    const auto expected = projector::measurement_expectation(proj, activity.values, frames);
    const auto counts = projector::sample_poisson(expected.values, count_seed);

    phantom::write_labels(dir, labels, geo_seed, schedule);
    phantom::write_kinetics(dir, fields, kin_seed, schedule);
    phantom::write_activity(dir, activity, kin_seed, schedule);
    projector::SinogramInfo info{{frames, cfg.projector.num_angles, cfg.projector.num_bins},
                                 "",
                                 count_seed,
                                 expected.scale_factor,
                                 cfg.projector.randoms_fraction,
                                 expected.randoms_per_bin};
    projector::write_expected(dir / "sino_expected.f32", expected.values, info);
    projector::write_measured(dir / "sino_measured.u32", counts, info);

    const char* split = i < cfg.num_train ? "train" : i < cfg.num_train + cfg.num_val ? "val" : "test";
    splits[split].push_back(id);
    sequences[id] = {{"split", split}, {"geometry_seed", geo_seed}, {"kinetics_seed", kin_seed},
                     {"count_seed", count_seed}};
    for (const char* name : {"labels.u8", "kinetics.f32", "activity.f32", "sino_expected.f32", "sino_measured.u32"}) {
      const auto raw = dir / name;
      files[id + "/" + name] = io::fnv1a_file(raw);
      files[id + "/" + name + ".json"] = io::fnv1a_file(io::sidecar_path(raw));
    }
  }
  io::write_json(manifest_path, {{"format", "hyke-dataset-1"},
                                 {"config", cfg.to_json()},
                                 {"splits", splits},
                                 {"sequences", sequences},
                                 {"hash", "fnv1a-64"},
                                 {"files", files}});
}

Dataset Dataset::open(const fs::path& root, bool verify) {
  const auto manifest_path = root / "manifest.json";
  if (!fs::exists(manifest_path)) throw DataError("no dataset manifest at " + manifest_path.string());
  Dataset d;
  d.root_ = root;
  d.manifest_ = io::read_json(manifest_path);
  try {
    if (d.manifest_.at("format") != "hyke-dataset-1") throw DataError(manifest_path.string() + ": unknown format");
    d.config_ = SimulationConfig::from_json(d.manifest_.at("config"));
    const auto& s = d.manifest_.at("splits");
    d.train_ = s.at("train").get<std::vector<std::string>>();
    d.val_ = s.at("val").get<std::vector<std::string>>();
    d.test_ = s.at("test").get<std::vector<std::string>>();
  } catch (const Json::exception& e) {
    throw DataError(manifest_path.string() + ": malformed manifest (" + e.what() + ")");
  } catch (const ConfigError& e) {
    throw DataError(manifest_path.string() + ": " + e.what());
  }
  if (verify) {
    for (const auto& [rel, hash] : d.manifest_.at("files").items()) {
      const auto path = root / rel;
      if (!fs::exists(path)) throw DataError("dataset file missing: " + path.string());
      if (io::fnv1a_file(path) != hash.get<std::string>()) throw DataError("hash mismatch: " + path.string());
    }
  }
  return d;
}

const std::vector<std::string>& Dataset::split(const std::string& name) const {
  if (name == "train") return train_;
  if (name == "val") return val_;
  if (name == "test") return test_;
  throw ConfigError("unknown split '" + name + "' (train, val, test)");
}

Sequence Dataset::load_sequence(const std::string& id) const {
  const auto dir = root_ / id;
  Sequence s;
  s.id = id;
  s.labels = phantom::read_labels(dir);
  s.activity = phantom::read_activity(dir);
  s.measured = projector::read_measured(dir / "sino_measured.u32", &s.info);
  const auto& p = config_.projector;
  const std::vector<std::size_t> want{s.activity.frames, p.num_angles, p.num_bins};
  if (s.info.shape != want || s.labels.width != config_.width || s.labels.height != config_.height ||
      s.activity.width != config_.width || s.activity.height != config_.height) {
    throw DataError(dir.string() + ": sequence shape disagrees with the manifest config");
  }
  return s;
}

std::vector<Sequence> Dataset::load(const std::string& name) const {
  std::vector<Sequence> out;
  for (const auto& id : split(name)) out.push_back(load_sequence(id));
  return out;
}

}  // namespace hyke::train
