#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "hyke/ad/graph.hpp"
#include "hyke/ad/tensor.hpp"

namespace hyke::ad {

/// Fully connected network: affine + tanh on every hidden layer, affine output.
/// Layer i maps L_i -> L_{i+1} with weight [L_i, L_{i+1}] and bias [L_{i+1}].
struct MlpWeights {
  std::vector<std::size_t> layer_sizes;
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;

  static MlpWeights zeros(std::vector<std::size_t> layer_sizes);
  /// Glorot-uniform weights, zero biases; the output layer is additionally
  /// multiplied by `output_scale`.
  static MlpWeights random(std::vector<std::size_t> layer_sizes, std::uint64_t seed, double output_scale = 1.0);

  std::size_t num_layers() const { return weights.size(); }
  std::size_t input_size() const { return layer_sizes.front(); }
  std::size_t output_size() const { return layer_sizes.back(); }
  bool empty() const { return weights.empty(); }

  /// Learnable tensors in a fixed order (W0, b0, W1, b1, ...).
  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;
  std::vector<std::string> tensor_names(const std::string& prefix) const;

  void validate() const;
};

struct MlpVars {
  std::vector<Var> weights;
  std::vector<Var> biases;
};

MlpVars bind(Graph& graph, MlpWeights& weights);

/// Records the network on the tape. `input` is [L0] or a batch [N, L0].
Var mlp_apply(const MlpVars& vars, Var input);
Var mlp_apply(Graph& graph, MlpWeights& weights, Var input);

/// Plain forward pass on one input vector, no tape.
std::vector<double> mlp_eval(const MlpWeights& weights, const std::vector<double>& input);

/// Batched forward/vector-Jacobian kernel for fused primitives. Rows of the
/// input matrix are independent samples.
class MlpKernel {
 public:
  using Mat = Eigen::MatrixXd;

  struct Workspace {
    std::vector<Mat> activations;  // post-tanh hidden activations, one per hidden layer
  };

  /// Per-tensor gradient accumulators in MlpWeights::tensors() order.
  struct Grads {
    std::vector<Mat> weights;
    std::vector<Eigen::RowVectorXd> biases;
  };

  MlpKernel() = default;
  explicit MlpKernel(const MlpWeights& weights);

  std::size_t input_size() const { return in_; }
  std::size_t output_size() const { return out_; }

  void forward(const Mat& input, Workspace& ws, Mat& output) const;
  /// Accumulates weight gradients into `grads` and writes d(loss)/d(input).
  void backward(const Mat& input, const Workspace& ws, const Mat& grad_output, Grads& grads,
                Mat& grad_input) const;

  Grads zero_grads() const;

 private:
  std::vector<Mat> w_;
  std::vector<Eigen::RowVectorXd> b_;
  std::size_t in_ = 0;
  std::size_t out_ = 0;
};

}  // namespace hyke::ad
