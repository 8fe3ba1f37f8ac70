#include "hyke/ad/graph.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "hyke/error.hpp"

namespace hyke::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMat>;
using MatMap = Eigen::Map<RowMat>;

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

[[noreturn]] void shape_error(OpKind kind, std::span<const Var> operands, const std::string& detail) {
  std::string msg = std::string(op_name(kind)) + ": shape mismatch";
  for (const auto& v : operands) msg += " " + to_string(v.shape());
  if (!detail.empty()) msg += " (" + detail + ")";
  throw ShapeError(msg);
}

void check_arity(OpKind kind, std::span<const Var> operands, std::size_t lo, std::size_t hi) {
  if (operands.size() < lo || operands.size() > hi) {
    throw ShapeError(std::string(op_name(kind)) + ": expected " + std::to_string(lo) +
                     (lo == hi ? "" : ".." + std::to_string(hi)) + " operands, got " +
                     std::to_string(operands.size()));
  }
}

}  // namespace

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Input: return "input";
    case OpKind::Parameter: return "parameter";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::Neg: return "neg";
    case OpKind::Square: return "square";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Softplus: return "softplus";
    case OpKind::Tanh: return "tanh";
    case OpKind::Relu: return "relu";
    case OpKind::MatMul: return "matmul";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::Reshape: return "reshape";
    case OpKind::Transpose: return "transpose";
    case OpKind::Conv1d: return "conv1d";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Custom: return "custom";
  }
  return "unknown";
}

const Tensor& Var::value() const {
  if (!graph) throw ConfigError("var: not attached to a graph");
  return graph->value(*this);
}

const Tensor& Graph::value(Var v) const {
  check_owned(v);
  return nodes_[v.id].value;
}

void Graph::check_owned(Var v) const {
  if (v.graph != this || v.id >= nodes_.size()) throw ConfigError("graph: operand from another graph");
}

Var Graph::push(Node node) {
  if (consumed_) throw ConfigError("graph: already consumed by backward()");
  if (!node.value.all_finite()) {
    throw NumericalError(std::string(op_name(node.kind)) + (node.name.empty() ? "" : " '" + node.name + "'") +
                         ": produced non-finite values");
  }
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Graph::input(Tensor t) {
  Node n{OpKind::Input, {}, {}, std::move(t), nullptr, false, {}};
  n.value.requires_grad = false;
  n.value.grad.reset();
  return push(std::move(n));
}

Var Graph::input(double scalar) { return input(Tensor::scalar(scalar)); }

Var Graph::parameter(Tensor& t) {
  Node n{OpKind::Parameter, {}, {}, Tensor(t.shape, t.values), &t, true, {}};
  if (!t.grad || t.grad->size() != t.values.size()) t.zero_grad();
  return push(std::move(n));
}

Var Graph::record_custom(std::string name, std::span<const Var> operands, Tensor output, BackwardFn backward) {
  Node n{OpKind::Custom, std::move(name), {}, std::move(output), nullptr, false, std::move(backward)};
  for (const auto& v : operands) {
    check_owned(v);
    n.operands.push_back(v.id);
    n.needs_grad = n.needs_grad || nodes_[v.id].needs_grad;
  }
  return push(std::move(n));
}

Var Graph::record(OpKind kind, std::span<const Var> operands, const OpAttrs& attrs) {
  for (const auto& v : operands) check_owned(v);
  Node node{kind, {}, {}, {}, nullptr, false, {}};
  for (const auto& v : operands) {
    node.operands.push_back(v.id);
    node.needs_grad = node.needs_grad || nodes_[v.id].needs_grad;
  }
  auto val = [&](std::size_t i) -> const Tensor& { return nodes_[operands[i].id].value; };
  const std::vector<std::size_t> ids = node.operands;
  Graph* self = this;
  auto operand_values = [self, ids](std::size_t i) -> const Tensor& { return self->nodes_[ids[i]].value; };

  switch (kind) {
    case OpKind::Add:
    case OpKind::Sub:
    case OpKind::Mul:
    case OpKind::Div: {
      check_arity(kind, operands, 2, 2);
      const Tensor& a = val(0);
      const Tensor& b = val(1);
      Shape out_shape;
      if (a.shape == b.shape || b.size() == 1 || is_suffix(b.shape, a.shape)) {
        out_shape = a.shape;
      } else if (a.size() == 1 || is_suffix(a.shape, b.shape)) {
        out_shape = b.shape;
      } else {
        shape_error(kind, operands, "operands must match or one must be a trailing suffix");
      }
      const std::size_t n = numel(out_shape), na = a.size(), nb = b.size();
      std::vector<double> out(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double x = a.values[i % na], y = b.values[i % nb];
        switch (kind) {
          case OpKind::Add: out[i] = x + y; break;
          case OpKind::Sub: out[i] = x - y; break;
          case OpKind::Mul: out[i] = x * y; break;
          default:
            if (y == 0.0) throw NumericalError("div: division by zero at index " + std::to_string(i));
            out[i] = x / y;
        }
      }
      node.value = Tensor(out_shape, std::move(out));
      node.backward = [kind, operand_values, n, na, nb](std::span<const double> g,
                                                         std::span<const std::span<double>> gin) {
        const auto& a = operand_values(0).values;
        const auto& b = operand_values(1).values;
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t ia = i % na, ib = i % nb;
          switch (kind) {
            case OpKind::Add:
              if (!gin[0].empty()) gin[0][ia] += g[i];
              if (!gin[1].empty()) gin[1][ib] += g[i];
              break;
            case OpKind::Sub:
              if (!gin[0].empty()) gin[0][ia] += g[i];
              if (!gin[1].empty()) gin[1][ib] -= g[i];
              break;
            case OpKind::Mul:
              if (!gin[0].empty()) gin[0][ia] += g[i] * b[ib];
              if (!gin[1].empty()) gin[1][ib] += g[i] * a[ia];
              break;
            default:
              if (!gin[0].empty()) gin[0][ia] += g[i] / b[ib];
              if (!gin[1].empty()) gin[1][ib] -= g[i] * a[ia] / (b[ib] * b[ib]);
          }
        }
      };
      break;
    }

    case OpKind::Neg:
    case OpKind::Square:
    case OpKind::Exp:
    case OpKind::Log:
    case OpKind::Sigmoid:
    case OpKind::Softplus:
    case OpKind::Tanh:
    case OpKind::Relu: {
      check_arity(kind, operands, 1, 1);
      const Tensor& a = val(0);
      std::vector<double> out(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a.values[i];
        switch (kind) {
          case OpKind::Neg: out[i] = -x; break;
          case OpKind::Square: out[i] = x * x; break;
          case OpKind::Exp: out[i] = std::exp(x); break;
          case OpKind::Log:
            if (!(x > 0.0)) {
              throw NumericalError("log: domain error, value " + std::to_string(x) + " at index " +
                                   std::to_string(i));
            }
            out[i] = std::log(x);
            break;
          case OpKind::Sigmoid: out[i] = sigmoid(x); break;
          case OpKind::Softplus: out[i] = softplus(x); break;
          case OpKind::Tanh: out[i] = std::tanh(x); break;
          default: out[i] = x > 0.0 ? x : 0.0;
        }
      }
      node.value = Tensor(a.shape, std::move(out));
      node.backward = [kind, operand_values, self, id = nodes_.size()](std::span<const double> g,
                                                                        std::span<const std::span<double>> gin) {
        if (gin[0].empty()) return;
        const auto& x = operand_values(0).values;
        const auto& y = self->nodes_[id].value.values;
        for (std::size_t i = 0; i < g.size(); ++i) {
          double d = 0.0;
          switch (kind) {
            case OpKind::Neg: d = -1.0; break;
            case OpKind::Square: d = 2.0 * x[i]; break;
            case OpKind::Exp: d = y[i]; break;
            case OpKind::Log: d = 1.0 / x[i]; break;
            case OpKind::Sigmoid: d = y[i] * (1.0 - y[i]); break;
            case OpKind::Softplus: d = sigmoid(x[i]); break;
            case OpKind::Tanh: d = 1.0 - y[i] * y[i]; break;
            default: d = x[i] > 0.0 ? 1.0 : 0.0;
          }
          gin[0][i] += g[i] * d;
        }
      };
      break;
    }

    case OpKind::MatMul: {
      check_arity(kind, operands, 2, 2);
      const Tensor& a = val(0);
      const Tensor& b = val(1);
      if (a.rank() != 2 || (b.rank() != 1 && b.rank() != 2) || a.shape[1] != b.shape[0]) {
        shape_error(kind, operands, "expects [m,k] x [k,n] or [m,k] x [k]");
      }
      const std::size_t m = a.shape[0], k = a.shape[1], nc = b.rank() == 2 ? b.shape[1] : 1;
      std::vector<double> out(m * nc);
      MatMap(out.data(), m, nc).noalias() = ConstMatMap(a.values.data(), m, k) * ConstMatMap(b.values.data(), k, nc);
      node.value = Tensor(b.rank() == 2 ? Shape{m, nc} : Shape{m}, std::move(out));
      node.backward = [operand_values, m, k, nc](std::span<const double> g, std::span<const std::span<double>> gin) {
        ConstMatMap G(g.data(), m, nc);
        if (!gin[0].empty()) {
          MatMap(gin[0].data(), m, k).noalias() += G * ConstMatMap(operand_values(1).values.data(), k, nc).transpose();
        }
        if (!gin[1].empty()) {
          MatMap(gin[1].data(), k, nc).noalias() += ConstMatMap(operand_values(0).values.data(), m, k).transpose() * G;
        }
      };
      break;
    }

    case OpKind::Sum:
    case OpKind::Mean: {
      check_arity(kind, operands, 1, 1);
      const Tensor& a = val(0);
      if (a.size() == 0) shape_error(kind, operands, "empty tensor");
      double s = 0.0;
      for (double x : a.values) s += x;
      const double factor = kind == OpKind::Mean ? 1.0 / static_cast<double>(a.size()) : 1.0;
      node.value = Tensor::scalar(s * factor);
      node.backward = [factor](std::span<const double> g, std::span<const std::span<double>> gin) {
        if (gin[0].empty()) return;
        for (double& x : gin[0]) x += g[0] * factor;
      };
      break;
    }

    case OpKind::Concat: {
      if (operands.empty()) shape_error(kind, operands, "no operands");
      const Shape& s0 = val(0).shape;
      const std::size_t axis = attrs.axis;
      if (axis >= s0.size()) shape_error(kind, operands, "axis out of range");
      Shape out_shape = s0;
      out_shape[axis] = 0;
      for (std::size_t i = 0; i < operands.size(); ++i) {
        const Shape& si = val(i).shape;
        if (si.size() != s0.size()) shape_error(kind, operands, "rank differs");
        for (std::size_t d = 0; d < si.size(); ++d) {
          if (d != axis && si[d] != s0[d]) shape_error(kind, operands, "non-axis extent differs");
        }
        out_shape[axis] += si[axis];
      }
      std::size_t outer = 1, inner = 1;
      for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
      for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
      std::vector<std::size_t> widths;
      for (std::size_t i = 0; i < operands.size(); ++i) widths.push_back(val(i).shape[axis] * inner);
      const std::size_t row = out_shape[axis] * inner;
      std::vector<double> out(numel(out_shape));
      for (std::size_t o = 0; o < outer; ++o) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < operands.size(); ++i) {
          std::copy_n(val(i).values.begin() + static_cast<std::ptrdiff_t>(o * widths[i]), widths[i],
                      out.begin() + static_cast<std::ptrdiff_t>(o * row + off));
          off += widths[i];
        }
      }
      node.value = Tensor(out_shape, std::move(out));
      node.backward = [outer, row, widths](std::span<const double> g, std::span<const std::span<double>> gin) {
        for (std::size_t o = 0; o < outer; ++o) {
          std::size_t off = 0;
          for (std::size_t i = 0; i < widths.size(); ++i) {
            if (!gin[i].empty()) {
              for (std::size_t j = 0; j < widths[i]; ++j) gin[i][o * widths[i] + j] += g[o * row + off + j];
            }
            off += widths[i];
          }
        }
      };
      break;
    }

    case OpKind::Slice: {
      check_arity(kind, operands, 1, 1);
      const Shape& s = val(0).shape;
      if (attrs.axis >= s.size() || attrs.begin >= attrs.end || attrs.end > s[attrs.axis]) {
        shape_error(kind, operands,
                    "range [" + std::to_string(attrs.begin) + "," + std::to_string(attrs.end) + ") on axis " +
                        std::to_string(attrs.axis));
      }
      std::size_t outer = 1, inner = 1;
      for (std::size_t d = 0; d < attrs.axis; ++d) outer *= s[d];
      for (std::size_t d = attrs.axis + 1; d < s.size(); ++d) inner *= s[d];
      const std::size_t in_row = s[attrs.axis] * inner, width = (attrs.end - attrs.begin) * inner,
                        start = attrs.begin * inner;
      Shape out_shape = s;
      out_shape[attrs.axis] = attrs.end - attrs.begin;
      std::vector<double> out(outer * width);
      for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(val(0).values.begin() + static_cast<std::ptrdiff_t>(o * in_row + start), width,
                    out.begin() + static_cast<std::ptrdiff_t>(o * width));
      }
      node.value = Tensor(out_shape, std::move(out));
      node.backward = [outer, in_row, width, start](std::span<const double> g, std::span<const std::span<double>> gin) {
        if (gin[0].empty()) return;
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t j = 0; j < width; ++j) gin[0][o * in_row + start + j] += g[o * width + j];
        }
      };
      break;
    }

    case OpKind::Reshape: {
      check_arity(kind, operands, 1, 1);
      if (numel(attrs.shape) != val(0).size()) shape_error(kind, operands, "target " + to_string(attrs.shape));
      node.value = Tensor(attrs.shape, val(0).values);
      node.backward = [](std::span<const double> g, std::span<const std::span<double>> gin) {
        if (gin[0].empty()) return;
        for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
      };
      break;
    }

    case OpKind::Transpose: {
      check_arity(kind, operands, 1, 1);
      const Tensor& x = val(0);
      if (x.rank() != 2) shape_error(kind, operands, "needs a matrix");
      const std::size_t r = x.shape[0], c = x.shape[1];
      std::vector<double> out(r * c);
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x.values[i * c + j];
      }
      node.value = Tensor({c, r}, std::move(out));
      node.backward = [r, c](std::span<const double> g, std::span<const std::span<double>> gin) {
        if (gin[0].empty()) return;
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) gin[0][i * c + j] += g[j * r + i];
        }
      };
      break;
    }

    case OpKind::Conv1d: {
      // Rows of x are filtered independently with a centered, zero-padded
      // cross-correlation: out[r,i] = sum_j k[j] * x[r, i + j - (K-1)/2].
      check_arity(kind, operands, 2, 2);
      const Tensor& x = val(0);
      const Tensor& k = val(1);
      if (x.rank() != 2 || k.rank() != 1 || k.size() % 2 == 0) {
        shape_error(kind, operands, "expects x [rows,len] and odd-length kernel [K]");
      }
      const std::size_t rows = x.shape[0], len = x.shape[1], K = k.size();
      const auto half = static_cast<std::ptrdiff_t>(K / 2);
      std::vector<double> out(rows * len, 0.0);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.values.data() + r * len;
        double* orow = out.data() + r * len;
        for (std::size_t i = 0; i < len; ++i) {
          const auto ii = static_cast<std::ptrdiff_t>(i);
          const std::ptrdiff_t jlo = std::max<std::ptrdiff_t>(0, half - ii);
          const std::ptrdiff_t jhi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(K),
                                                              static_cast<std::ptrdiff_t>(len) + half - ii);
          double acc = 0.0;
          for (std::ptrdiff_t j = jlo; j < jhi; ++j) acc += k.values[static_cast<std::size_t>(j)] * xr[ii + j - half];
          orow[i] = acc;
        }
      }
      node.value = Tensor(x.shape, std::move(out));
      node.backward = [operand_values, rows, len, K, half](std::span<const double> g,
                                                           std::span<const std::span<double>> gin) {
        const auto& xv = operand_values(0).values;
        const auto& kv = operand_values(1).values;
        for (std::size_t r = 0; r < rows; ++r) {
          const double* xr = xv.data() + r * len;
          const double* gr = g.data() + r * len;
          for (std::size_t i = 0; i < len; ++i) {
            const auto ii = static_cast<std::ptrdiff_t>(i);
            const std::ptrdiff_t jlo = std::max<std::ptrdiff_t>(0, half - ii);
            const std::ptrdiff_t jhi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(K),
                                                                static_cast<std::ptrdiff_t>(len) + half - ii);
            const double gi = gr[i];
            if (gi == 0.0) continue;
            for (std::ptrdiff_t j = jlo; j < jhi; ++j) {
              const auto src = static_cast<std::size_t>(ii + j - half);
              if (!gin[0].empty()) gin[0][r * len + src] += kv[static_cast<std::size_t>(j)] * gi;
              if (!gin[1].empty()) gin[1][static_cast<std::size_t>(j)] += xr[src] * gi;
            }
          }
        }
      };
      break;
    }

    case OpKind::Conv2d: {
      // Depthwise, zero-padded "same" cross-correlation with optional per-channel bias:
      // x [C,H,W], k [C,kh,kw] (odd extents), bias [C].
      check_arity(kind, operands, 2, 3);
      const Tensor& x = val(0);
      const Tensor& k = val(1);
      if (x.rank() != 3 || k.rank() != 3 || k.shape[0] != x.shape[0] || k.shape[1] % 2 == 0 ||
          k.shape[2] % 2 == 0 || (operands.size() == 3 && val(2).shape != Shape{x.shape[0]})) {
        shape_error(kind, operands, "expects x [C,H,W], kernel [C,kh,kw] with odd kh,kw, bias [C]");
      }
      const std::size_t C = x.shape[0], H = x.shape[1], W = x.shape[2], KH = k.shape[1], KW = k.shape[2];
      const bool has_bias = operands.size() == 3;
      auto sweep = [C, H, W, KH, KW](const auto& visit) {
        const auto hh = static_cast<std::ptrdiff_t>(KH / 2), hw = static_cast<std::ptrdiff_t>(KW / 2);
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t i = 0; i < H; ++i) {
            for (std::size_t j = 0; j < W; ++j) {
              for (std::size_t u = 0; u < KH; ++u) {
                const auto si = static_cast<std::ptrdiff_t>(i) + static_cast<std::ptrdiff_t>(u) - hh;
                if (si < 0 || si >= static_cast<std::ptrdiff_t>(H)) continue;
                for (std::size_t v = 0; v < KW; ++v) {
                  const auto sj = static_cast<std::ptrdiff_t>(j) + static_cast<std::ptrdiff_t>(v) - hw;
                  if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(W)) continue;
                  visit((c * H + i) * W + j, (c * H + static_cast<std::size_t>(si)) * W + static_cast<std::size_t>(sj),
                        (c * KH + u) * KW + v);
                }
              }
            }
          }
        }
      };
      std::vector<double> out(x.size(), 0.0);
      if (has_bias) {
        for (std::size_t c = 0; c < C; ++c) std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(c * H * W), H * W, val(2).values[c]);
      }
      sweep([&](std::size_t o, std::size_t s, std::size_t w) { out[o] += k.values[w] * x.values[s]; });
      node.value = Tensor(x.shape, std::move(out));
      node.backward = [operand_values, sweep, has_bias, C, H, W](std::span<const double> g,
                                                                  std::span<const std::span<double>> gin) {
        const auto& xv = operand_values(0).values;
        const auto& kv = operand_values(1).values;
        sweep([&](std::size_t o, std::size_t s, std::size_t w) {
          if (!gin[0].empty()) gin[0][s] += kv[w] * g[o];
          if (!gin[1].empty()) gin[1][w] += xv[s] * g[o];
        });
        if (has_bias && !gin[2].empty()) {
          for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t p = 0; p < H * W; ++p) gin[2][c] += g[c * H * W + p];
          }
        }
      };
      break;
    }

    case OpKind::Input:
    case OpKind::Parameter:
    case OpKind::Custom:
      throw ConfigError(std::string("record: ") + std::string(op_name(kind)) +
                        " is created through input()/parameter()/record_custom()");
  }
  return push(std::move(node));
}

void Graph::backward(Var loss) {
  check_owned(loss);
  if (consumed_) throw ConfigError("backward: graph already consumed");
  const Tensor& lv = nodes_[loss.id].value;
  if (lv.size() != 1) throw ShapeError("backward: loss must be scalar, got shape " + to_string(lv.shape));
  consumed_ = true;
  if (!nodes_[loss.id].needs_grad) return;

  std::vector<std::vector<double>> adj(loss.id + 1);
  adj[loss.id] = {1.0};
  std::vector<std::span<double>> gin;
  for (std::size_t idx = loss.id + 1; idx-- > 0;) {
    Node& n = nodes_[idx];
    if (!n.needs_grad || adj[idx].empty()) continue;
    if (n.kind == OpKind::Parameter) {
      auto& pg = *n.param->grad;
      for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += adj[idx][i];
      continue;
    }
    if (n.kind == OpKind::Input || !n.backward) continue;
    gin.assign(n.operands.size(), {});
    for (std::size_t i = 0; i < n.operands.size(); ++i) {
      const std::size_t oid = n.operands[i];
      if (!nodes_[oid].needs_grad) continue;
      if (adj[oid].empty()) adj[oid].assign(nodes_[oid].value.size(), 0.0);
      gin[i] = adj[oid];
    }
    n.backward(adj[idx], gin);
    std::vector<double>().swap(adj[idx]);
  }
}

}  // namespace hyke::ad
