#include "hyke/ad/mlp.hpp"

#include <cmath>
#include <random>

#include "hyke/ad/ops.hpp"
#include "hyke/error.hpp"

namespace hyke::ad {

MlpWeights MlpWeights::zeros(std::vector<std::size_t> layer_sizes) {
  MlpWeights m;
  m.layer_sizes = std::move(layer_sizes);
  if (m.layer_sizes.size() < 2) throw ConfigError("mlp: need at least input and output sizes");
  for (std::size_t l = 0; l + 1 < m.layer_sizes.size(); ++l) {
    m.weights.push_back(Tensor::zeros({m.layer_sizes[l], m.layer_sizes[l + 1]}, true));
    m.biases.push_back(Tensor::zeros({m.layer_sizes[l + 1]}, true));
  }
  return m;
}

MlpWeights MlpWeights::random(std::vector<std::size_t> layer_sizes, std::uint64_t seed, double output_scale) {
  MlpWeights m = zeros(std::move(layer_sizes));
  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l < m.weights.size(); ++l) {
    const double fan = static_cast<double>(m.layer_sizes[l] + m.layer_sizes[l + 1]);
    const double limit = std::sqrt(6.0 / fan) * (l + 1 == m.weights.size() ? output_scale : 1.0);
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (double& w : m.weights[l].values) w = dist(rng);
  }
  return m;
}

std::vector<Tensor*> MlpWeights::tensors() {
  std::vector<Tensor*> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.push_back(&weights[l]);
    out.push_back(&biases[l]);
  }
  return out;
}

std::vector<const Tensor*> MlpWeights::tensors() const {
  std::vector<const Tensor*> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.push_back(&weights[l]);
    out.push_back(&biases[l]);
  }
  return out;
}

std::vector<std::string> MlpWeights::tensor_names(const std::string& prefix) const {
  std::vector<std::string> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.push_back(prefix + ".W" + std::to_string(l));
    out.push_back(prefix + ".b" + std::to_string(l));
  }
  return out;
}

void MlpWeights::validate() const {
  if (layer_sizes.size() < 2 || weights.size() != layer_sizes.size() - 1 || biases.size() != weights.size()) {
    throw ShapeError("mlp: layer list does not match weight count");
  }
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (weights[l].shape != Shape{layer_sizes[l], layer_sizes[l + 1]} || biases[l].shape != Shape{layer_sizes[l + 1]}) {
      throw ShapeError("mlp: layer " + std::to_string(l) + " has weight " + to_string(weights[l].shape) + " bias " +
                       to_string(biases[l].shape) + ", expected [" + std::to_string(layer_sizes[l]) + "," +
                       std::to_string(layer_sizes[l + 1]) + "]");
    }
  }
}

MlpVars bind(Graph& graph, MlpWeights& weights) {
  weights.validate();
  MlpVars vars;
  for (std::size_t l = 0; l < weights.num_layers(); ++l) {
    vars.weights.push_back(graph.parameter(weights.weights[l]));
    vars.biases.push_back(graph.parameter(weights.biases[l]));
  }
  return vars;
}

Var mlp_apply(const MlpVars& vars, Var input) {
  if (vars.weights.empty()) throw ConfigError("mlp_apply: empty network");
  const std::size_t in = vars.weights.front().shape()[0];
  const bool single = input.shape().size() == 1;
  if ((single && input.shape()[0] != in) || (!single && (input.shape().size() != 2 || input.shape()[1] != in))) {
    throw ShapeError("mlp_apply: input " + to_string(input.shape()) + " does not match input size " +
                     std::to_string(in));
  }
  Var h = single ? reshape(input, {1, in}) : input;
  for (std::size_t l = 0; l < vars.weights.size(); ++l) {
    h = add(matmul(h, vars.weights[l]), vars.biases[l]);
    if (l + 1 < vars.weights.size()) h = tanh(h);
  }
  if (single) h = reshape(h, {h.shape()[1]});
  return h;
}

Var mlp_apply(Graph& graph, MlpWeights& weights, Var input) { return mlp_apply(bind(graph, weights), input); }

std::vector<double> mlp_eval(const MlpWeights& weights, const std::vector<double>& input) {
  weights.validate();
  if (input.size() != weights.input_size()) {
    throw ShapeError("mlp_eval: input length " + std::to_string(input.size()) + " != " +
                     std::to_string(weights.input_size()));
  }
  std::vector<double> h = input;
  for (std::size_t l = 0; l < weights.num_layers(); ++l) {
    const std::size_t n_in = weights.layer_sizes[l], n_out = weights.layer_sizes[l + 1];
    std::vector<double> next(weights.biases[l].values);
    for (std::size_t i = 0; i < n_in; ++i) {
      for (std::size_t o = 0; o < n_out; ++o) next[o] += h[i] * weights.weights[l].values[i * n_out + o];
    }
    if (l + 1 < weights.num_layers()) {
      for (double& v : next) v = std::tanh(v);
    }
    h = std::move(next);
  }
  return h;
}

namespace {

// Vectorizes through Eigen's exp; std::tanh is scalar-only for doubles.
// Absolute error stays at the rounding level.
void fast_tanh(Eigen::MatrixXd& a) {
  const Eigen::ArrayXXd e = (-2.0 * a.array().abs()).exp();
  a = ((1.0 - e) / (1.0 + e) * a.array().sign()).matrix();
}

}  // namespace

MlpKernel::MlpKernel(const MlpWeights& weights) {
  weights.validate();
  in_ = weights.input_size();
  out_ = weights.output_size();
  for (std::size_t l = 0; l < weights.num_layers(); ++l) {
    const auto r = static_cast<Eigen::Index>(weights.layer_sizes[l]);
    const auto c = static_cast<Eigen::Index>(weights.layer_sizes[l + 1]);
    w_.push_back(Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        weights.weights[l].values.data(), r, c));
    b_.push_back(Eigen::Map<const Eigen::RowVectorXd>(weights.biases[l].values.data(), c));
  }
}

void MlpKernel::forward(const Mat& input, Workspace& ws, Mat& output) const {
  ws.activations.resize(w_.size() - 1);
  const Mat* h = &input;
  for (std::size_t l = 0; l + 1 < w_.size(); ++l) {
    Mat& a = ws.activations[l];
    a.noalias() = *h * w_[l];
    a.rowwise() += b_[l];
    fast_tanh(a);
    h = &a;
  }
  output.noalias() = *h * w_.back();
  output.rowwise() += b_.back();
}

void MlpKernel::backward(const Mat& input, const Workspace& ws, const Mat& grad_output, Grads& grads,
                         Mat& grad_input) const {
  Mat g = grad_output;
  for (std::size_t l = w_.size(); l-- > 0;) {
    const Mat& h = l == 0 ? input : ws.activations[l - 1];
    grads.weights[l].noalias() += h.transpose() * g;
    grads.biases[l] += g.colwise().sum();
    Mat gh = g * w_[l].transpose();
    if (l > 0) {
      gh.array() *= 1.0 - ws.activations[l - 1].array().square();
      g = std::move(gh);
    } else {
      grad_input = std::move(gh);
    }
  }
}

MlpKernel::Grads MlpKernel::zero_grads() const {
  Grads g;
  for (std::size_t l = 0; l < w_.size(); ++l) {
    g.weights.push_back(Mat::Zero(w_[l].rows(), w_[l].cols()));
    g.biases.push_back(Eigen::RowVectorXd::Zero(b_[l].size()));
  }
  return g;
}

}  // namespace hyke::ad
