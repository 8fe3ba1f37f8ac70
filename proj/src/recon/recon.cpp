#include "hyke/recon/recon.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "hyke/ad/ops.hpp"
#include "hyke/error.hpp"

namespace hyke::recon {

using ad::Tensor;
using ad::Var;

std::vector<double> ramp_kernel(std::size_t bins, double spacing) {
  if (bins == 0 || !(spacing > 0)) throw ConfigError("ramp_kernel: need bins > 0 and spacing > 0");
  const std::size_t len = 2 * bins - 1, mid = bins - 1;
  std::vector<double> h(len, 0.0);
  for (std::size_t i = 0; i < len; ++i) {
    const long n = static_cast<long>(i) - static_cast<long>(mid);
    if (n == 0) {
      h[i] = 0.25 / (spacing * spacing);
    } else if (n % 2 != 0) {
      const double d = std::numbers::pi * static_cast<double>(n) * spacing;
      h[i] = -1.0 / (d * d);
    }
  }
  return h;
}

std::vector<double> correct_sinograms(std::span<const std::uint32_t> counts, const projector::SinogramInfo& info,
                                      const projector::ProjectorConfig& cfg) {
  if (!(info.scale_factor > 0)) throw DataError("sinogram sidecar has no positive scale factor");
  const std::size_t B = cfg.num_bins;
  std::vector<double> out(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    out[i] = (static_cast<double>(counts[i]) - info.randoms_per_bin) / (info.scale_factor * cfg.efficiency(i % B));
  }
  return out;
}

Var filtered_backprojection(const projector::Projector& g, Var sinos, Var phi) {
  const auto& cfg = g.config();
  const auto& s = sinos.shape();
  if (s.size() != 2 || s[1] != g.rays()) {
    throw ShapeError("filtered_backprojection: sinograms must be [T," + std::to_string(g.rays()) + "], got " +
                     ad::to_string(s));
  }
  if (phi.shape() != ad::Shape{2 * cfg.num_bins - 1}) {
    throw ShapeError("filtered_backprojection: filter must have " + std::to_string(2 * cfg.num_bins - 1) + " taps");
  }
  const std::size_t T = s[0];
  Var rows = ad::reshape(sinos, {T * cfg.num_angles, cfg.num_bins});
  Var filtered = ad::reshape(ad::conv1d(rows, phi), {T, g.rays()});
  const double factor = std::numbers::pi / static_cast<double>(cfg.num_angles) * cfg.bin_spacing;
  return ad::scale(projector::backproject(g, filtered), factor);
}

std::vector<double> fbp(const projector::Projector& g, std::span<const double> sinos, std::size_t frames) {
  ad::Graph graph;
  Var s = graph.input(Tensor({frames, g.rays()}, std::vector<double>(sinos.begin(), sinos.end())));
  Var phi = graph.input(Tensor::vector(ramp_kernel(g.config().num_bins, g.config().bin_spacing)));
  return filtered_backprojection(g, s, phi).value().values;
}

std::vector<double> fbp_baseline(const projector::Projector& g, std::span<const double> sinos, std::size_t frames) {
  auto x = fbp(g, sinos, frames);
  for (double& v : x) v = std::max(v, 0.0);
  return x;
}

std::string physics_name(kinetics::Physics p) {
  switch (p) {
    case kinetics::Physics::None: return "none";
    case kinetics::Physics::OneTissue: return "one-tissue";
    case kinetics::Physics::TwoTissue: return "two-tissue";
  }
  return "none";
}

kinetics::Physics physics_from_name(const std::string& name) {
  if (name == "none") return kinetics::Physics::None;
  if (name == "one-tissue") return kinetics::Physics::OneTissue;
  if (name == "two-tissue") return kinetics::Physics::TwoTissue;
  throw ConfigError("unknown physics prior '" + name + "' (none, one-tissue, two-tissue)");
}

std::size_t Architecture::state_dim() const {
  return physics == kinetics::Physics::None ? 1 : kinetics::physics_state_dim(physics);
}

void Architecture::validate() const {
  if (frames == 0 || height == 0 || width == 0 || num_bins == 0 || !(bin_spacing > 0)) {
    throw ConfigError("architecture: empty geometry");
  }
  if (physics == kinetics::Physics::None && !neural) throw ConfigError("architecture: no physics and no neural term");
  if (!neural && code_dim != 0) throw ConfigError("architecture: a neural code needs a neural term");
  if (encoder_hidden == 0) throw ConfigError("architecture: encoder_hidden must be positive");
  if (!(rate_init > 0) || !(volume_init > 0 && volume_init < 1)) {
    throw ConfigError("architecture: rate_init must be > 0 and volume_init in (0,1)");
  }
  if (!(state_scale > 0)) throw ConfigError("architecture: state_scale must be positive");
}

io::Json Architecture::to_json() const {
  return {{"frames", frames},
          {"height", height},
          {"width", width},
          {"num_bins", num_bins},
          {"bin_spacing", bin_spacing},
          {"physics", physics_name(physics)},
          {"neural", neural},
          {"code_dim", code_dim},
          {"nn_hidden", nn_hidden},
          {"include_input_in_nn", include_input_in_nn},
          {"state_scale", state_scale},
          {"nn_init_scale", nn_init_scale},
          {"encoder_hidden", encoder_hidden},
          {"rate_init", rate_init},
          {"volume_init", volume_init}};
}

Architecture Architecture::from_json(const io::Json& j) {
  Architecture a;
  try {
    a.frames = j.at("frames").get<std::size_t>();
    a.height = j.at("height").get<std::size_t>();
    a.width = j.at("width").get<std::size_t>();
    a.num_bins = j.at("num_bins").get<std::size_t>();
    a.bin_spacing = j.at("bin_spacing").get<double>();
    a.physics = physics_from_name(j.at("physics").get<std::string>());
    a.neural = j.at("neural").get<bool>();
    a.code_dim = j.at("code_dim").get<std::size_t>();
    a.nn_hidden = j.at("nn_hidden").get<std::vector<std::size_t>>();
    a.include_input_in_nn = j.at("include_input_in_nn").get<bool>();
    a.state_scale = j.at("state_scale").get<double>();
    a.nn_init_scale = j.at("nn_init_scale").get<double>();
    a.encoder_hidden = j.at("encoder_hidden").get<std::size_t>();
    a.rate_init = j.at("rate_init").get<double>();
    a.volume_init = j.at("volume_init").get<double>();
  } catch (const io::Json::exception& e) {
    throw DataError(std::string("architecture header: ") + e.what());
  }
  a.validate();
  return a;
}

Model Model::init(const Architecture& arch, std::uint64_t seed) {
  arch.validate();
  Model m;
  m.arch = arch;
  m.filter = Tensor::vector(ramp_kernel(arch.num_bins, arch.bin_spacing), true);
  const std::size_t planes = arch.planes(), nr = arch.num_rates();
  m.encoder_mlp = ad::MlpWeights::random({arch.frames, arch.encoder_hidden, planes}, seed);
  auto& bias = m.encoder_mlp.biases.back().values;
  const double rate_bias = std::log(std::expm1(arch.rate_init));
  for (std::size_t i = 0; i < nr; ++i) bias[i] = rate_bias;
  bias[planes - 1] = std::log(arch.volume_init / (1.0 - arch.volume_init));
  m.encoder_kernel = Tensor::zeros({planes, 3, 3}, true);
  m.encoder_bias = Tensor::zeros({planes}, true);
  if (arch.neural) {
    m.kinetics = kinetics::HybridModel::with_residual(arch.physics, arch.state_dim(), arch.code_dim, arch.nn_hidden,
                                                      seed + 0x9e3779b97f4a7c15ULL, arch.nn_init_scale,
                                                      arch.include_input_in_nn, arch.state_scale);
  } else {
    m.kinetics = kinetics::HybridModel::physics_only(arch.physics);
  }
  return m;
}

std::vector<Tensor*> Model::parameters() {
  std::vector<Tensor*> out{&filter};
  for (auto* t : encoder_mlp.tensors()) out.push_back(t);
  out.push_back(&encoder_kernel);
  out.push_back(&encoder_bias);
  if (kinetics.neural) {
    for (auto* t : kinetics.theta.tensors()) out.push_back(t);
  }
  return out;
}

std::vector<const Tensor*> Model::parameters() const {
  std::vector<const Tensor*> out;
  for (auto* t : const_cast<Model*>(this)->parameters()) out.push_back(t);
  return out;
}

std::vector<std::string> Model::parameter_names() const {
  std::vector<std::string> out{"phi"};
  for (auto& n : encoder_mlp.tensor_names("psi.mlp")) out.push_back(n);
  out.push_back("psi.conv.kernel");
  out.push_back("psi.conv.bias");
  if (kinetics.neural) {
    for (auto& n : kinetics.theta.tensor_names("theta")) out.push_back(n);
  }
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto* t : parameters()) n += t->size();
  return n;
}

BoundModel bind(ad::Graph& g, Model& model) {
  BoundModel b{g.parameter(model.filter), ad::bind(g, model.encoder_mlp), g.parameter(model.encoder_kernel),
               g.parameter(model.encoder_bias), std::nullopt};
  if (model.kinetics.neural) b.theta = ad::bind(g, model.kinetics.theta);
  return b;
}

ParamVars kinetic_encode(const Model& model, const BoundModel& vars, Var xtilde) {
  const auto& a = model.arch;
  const std::size_t P = a.height * a.width;
  if (xtilde.shape() != ad::Shape{a.frames, P}) {
    throw ShapeError("kinetic_encode: expected [" + std::to_string(a.frames) + "," + std::to_string(P) + "], got " +
                     ad::to_string(xtilde.shape()));
  }
  if (!xtilde.value().all_finite()) throw NumericalError("kinetic_encode: non-finite input");
  const std::size_t planes = a.planes(), nr = a.num_rates(), dn = a.code_dim;
  Var per_pixel = ad::mlp_apply(vars.encoder_mlp, ad::transpose(xtilde));  // [P, planes]
  Var maps = ad::reshape(ad::transpose(per_pixel), {planes, a.height, a.width});
  Var refined = ad::add(maps, ad::conv2d(maps, vars.encoder_kernel, vars.encoder_bias));
  Var flat = ad::reshape(refined, {planes, P});
  ParamVars out;
  if (nr > 0) out.rates = ad::softplus(ad::slice(flat, 0, 0, nr));
  if (dn > 0) out.code = ad::slice(flat, 0, nr, nr + dn);
  out.volume = ad::reshape(ad::sigmoid(ad::slice(flat, 0, planes - 1, planes)), {P});
  return out;
}

Var decode_activity(const Model& model, const BoundModel& vars, const ParamVars& params,
                    const kinetics::DecodeContext& ctx) {
  const ad::MlpVars* theta = vars.theta ? &*vars.theta : nullptr;
  return ad::relu(kinetics::decode_frames(model.kinetics, theta, {params.rates, params.volume, params.code}, ctx));
}

SequenceInput make_sequence_input(const projector::Projector& g, std::vector<double> corrected, std::size_t frames) {
  SequenceInput in;
  const auto x = fbp(g, corrected, frames);
  const double peak = *std::max_element(x.begin(), x.end());
  in.norm = peak > 0 ? peak : 1.0;
  in.sinos = Tensor({frames, g.rays()}, std::move(corrected));
  return in;
}

ForwardVars forward(ad::Graph& g, const Model& model, const BoundModel& vars, const projector::Projector& proj,
                    const kinetics::DecodeContext& ctx, const SequenceInput& input) {
  if (ctx.num_frames != model.arch.frames) throw ShapeError("forward: schedule and model disagree on frame count");
  if (proj.config().height != model.arch.height || proj.config().width != model.arch.width ||
      proj.config().num_bins != model.arch.num_bins || proj.config().bin_spacing != model.arch.bin_spacing) {
    throw ShapeError("forward: projector geometry does not match the model");
  }
  ForwardVars f;
  f.xtilde = filtered_backprojection(proj, g.input(input.sinos), vars.filter);
  f.params = kinetic_encode(model, vars, ad::scale(f.xtilde, 1.0 / input.norm));
  f.xhat = decode_activity(model, vars, f.params, ctx);
  return f;
}

Reconstruction reconstruct(Model& model, const projector::Projector& proj, const kinetics::DecodeContext& ctx,
                           const SequenceInput& input) {
  ad::Graph g;
  const auto vars = bind(g, model);
  Var xt = filtered_backprojection(proj, g.input(input.sinos), vars.filter);
  const auto p = kinetic_encode(model, vars, ad::scale(xt, 1.0 / input.norm));
  Reconstruction r;
  r.xtilde = xt.value().values;
  const std::vector<double> empty;
  const auto& rates = p.rates ? p.rates->value().values : empty;
  const auto& code = p.code ? p.code->value().values : empty;
  r.xhat = kinetics::decode_values(model.kinetics, rates, p.volume.value().values, code, ctx);
  for (double& v : r.xhat) v = std::max(v, 0.0);
  r.params = rates;
  r.params.insert(r.params.end(), code.begin(), code.end());
  r.params.insert(r.params.end(), p.volume.value().values.begin(), p.volume.value().values.end());
  return r;
}

namespace {

constexpr char kMagic[5] = {'H', 'Y', 'K', 'E', '1'};

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::ifstream& in, const std::filesystem::path& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw DataError(path.string() + ": truncated checkpoint");
  return v;
}

struct RawTensor {
  std::string name;
  ad::Shape shape;
  std::vector<double> values;
};

std::vector<RawTensor> read_tensors(std::ifstream& in, const std::filesystem::path& path) {
  const auto count = get<std::uint64_t>(in, path);
  if (count > 100000) throw DataError(path.string() + ": implausible tensor count");
  std::vector<RawTensor> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    RawTensor t;
    const auto len = get<std::uint32_t>(in, path);
    if (len > 4096) throw DataError(path.string() + ": implausible tensor name length");
    t.name.resize(len);
    in.read(t.name.data(), len);
    const auto rank = get<std::uint32_t>(in, path);
    if (rank > 8) throw DataError(path.string() + ": implausible tensor rank");
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      t.shape.push_back(static_cast<std::size_t>(get<std::uint64_t>(in, path)));
      n *= t.shape.back();
    }
    if (n > (std::size_t{1} << 32)) throw DataError(path.string() + ": implausible tensor size");
    t.values.resize(n);
    in.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw DataError(path.string() + ": truncated checkpoint");
    out.push_back(std::move(t));
  }
  return out;
}

io::Json read_header(std::ifstream& in, const std::filesystem::path& path) {
  char magic[5];
  in.read(magic, 5);
  if (!in || std::memcmp(magic, kMagic, 5) != 0) throw DataError(path.string() + ": not a HYKE1 checkpoint");
  const auto len = get<std::uint64_t>(in, path);
  if (len > (1u << 24)) throw DataError(path.string() + ": implausible header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError(path.string() + ": truncated checkpoint");
  try {
    return io::Json::parse(text);
  } catch (const io::Json::exception& e) {
    throw DataError(path.string() + ": bad header (" + e.what() + ")");
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model, const io::Json& meta) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  const std::string header = io::Json{{"architecture", model.arch.to_json()}, {"meta", meta}}.dump();
  out.write(kMagic, 5);
  put<std::uint64_t>(out, header.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  const auto tensors = model.parameters();
  const auto names = model.parameter_names();
  put<std::uint64_t>(out, tensors.size());
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(names[i].size()));
    out.write(names[i].data(), static_cast<std::streamsize>(names[i].size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors[i]->shape.size()));
    for (auto e : tensors[i]->shape) put<std::uint64_t>(out, e);
    out.write(reinterpret_cast<const char*>(tensors[i]->values.data()),
              static_cast<std::streamsize>(tensors[i]->values.size() * sizeof(double)));
  }
  if (!out) throw DataError("write failed: " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path, io::Json* meta) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  const auto header = read_header(in, path);
  if (!header.contains("architecture")) throw DataError(path.string() + ": header lacks architecture");
  Model m = Model::init(Architecture::from_json(header.at("architecture")), 0);
  const auto stored = read_tensors(in, path);
  const auto names = m.parameter_names();
  auto tensors = m.parameters();
  if (stored.size() != tensors.size()) {
    throw DataError(path.string() + ": " + std::to_string(stored.size()) + " tensors, architecture needs " +
                    std::to_string(tensors.size()));
  }
  for (std::size_t i = 0; i < stored.size(); ++i) {
    if (stored[i].name != names[i] || stored[i].shape != tensors[i]->shape) {
      throw DataError(path.string() + ": tensor " + stored[i].name + " " + ad::to_string(stored[i].shape) +
                      " does not match expected " + names[i] + " " + ad::to_string(tensors[i]->shape));
    }
    if (!ad::all_finite(stored[i].values)) throw DataError(path.string() + ": tensor " + stored[i].name + " is not finite");
    tensors[i]->values = stored[i].values;
  }
  if (meta) *meta = header.value("meta", io::Json::object());
  return m;
}

std::vector<std::string> checkpoint_tensor_names(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  (void)read_header(in, path);
  std::vector<std::string> names;
  for (auto& t : read_tensors(in, path)) names.push_back(std::move(t.name));
  return names;
}

}  // namespace hyke::recon
