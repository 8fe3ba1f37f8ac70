#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hyke/ad/tensor.hpp"

namespace hyke::ad {

enum class OpKind {
  Input,
  Parameter,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Square,
  Exp,
  Log,
  Sigmoid,
  Softplus,
  Tanh,
  Relu,
  MatMul,
  Sum,
  Mean,
  Concat,
  Slice,
  Reshape,
  Transpose,
  Conv1d,
  Conv2d,
  Custom,
};

std::string_view op_name(OpKind kind);

class Graph;

/// Handle to a tensor recorded on a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t size() const { return value().size(); }
};

/// Extra arguments for the kinds that need them.
///  Concat/Slice: `axis`, Slice: `[begin, end)`, Reshape: `shape`.
struct OpAttrs {
  std::size_t axis = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
  Shape shape;
};

/// Reverse rule for a custom primitive. `grad_in[i]` is empty when operand i
/// needs no gradient; otherwise the rule must accumulate (+=) into it.
using BackwardFn =
    std::function<void(std::span<const double> grad_out, std::span<const std::span<double>> grad_in)>;

/// Tape of primitive operations in topological (recording) order.
///
/// Single-threaded. One Graph per forward evaluation; backward() consumes it.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Constant leaf. Rejects non-finite values.
  Var input(Tensor t);
  Var input(double scalar);

  /// Learnable leaf. backward() accumulates d(loss)/d(t) into `t.grad`, so
  /// `t` must outlive the graph's backward pass.
  Var parameter(Tensor& t);

  /// Records a built-in primitive. Shape mismatches throw ShapeError naming
  /// the op kind and operand shapes; domain violations throw NumericalError.
  Var record(OpKind kind, std::span<const Var> operands, const OpAttrs& attrs = {});
  Var record(OpKind kind, std::initializer_list<Var> operands, const OpAttrs& attrs = {}) {
    return record(kind, std::span<const Var>(operands.begin(), operands.size()), attrs);
  }

  /// Records a fused primitive whose forward value was computed by the caller.
  Var record_custom(std::string name, std::span<const Var> operands, Tensor output, BackwardFn backward);

  const Tensor& value(Var v) const;

  /// Reverse sweep from a scalar loss. The graph cannot be reused afterwards.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Node {
    OpKind kind;
    std::string name;
    std::vector<std::size_t> operands;
    Tensor value;
    Tensor* param = nullptr;
    bool needs_grad = false;
    BackwardFn backward;
  };

  Var push(Node node);
  void check_owned(Var v) const;

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

}  // namespace hyke::ad
