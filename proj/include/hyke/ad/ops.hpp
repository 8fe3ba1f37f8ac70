#pragma once

#include <vector>

#include "hyke/ad/graph.hpp"

namespace hyke::ad {

inline Var add(Var a, Var b) { return a.graph->record(OpKind::Add, {a, b}); }
inline Var sub(Var a, Var b) { return a.graph->record(OpKind::Sub, {a, b}); }
inline Var mul(Var a, Var b) { return a.graph->record(OpKind::Mul, {a, b}); }
inline Var div(Var a, Var b) { return a.graph->record(OpKind::Div, {a, b}); }
inline Var neg(Var a) { return a.graph->record(OpKind::Neg, {a}); }
inline Var square(Var a) { return a.graph->record(OpKind::Square, {a}); }
inline Var exp(Var a) { return a.graph->record(OpKind::Exp, {a}); }
inline Var log(Var a) { return a.graph->record(OpKind::Log, {a}); }
inline Var sigmoid(Var a) { return a.graph->record(OpKind::Sigmoid, {a}); }
inline Var softplus(Var a) { return a.graph->record(OpKind::Softplus, {a}); }
inline Var tanh(Var a) { return a.graph->record(OpKind::Tanh, {a}); }
inline Var relu(Var a) { return a.graph->record(OpKind::Relu, {a}); }
inline Var matmul(Var a, Var b) { return a.graph->record(OpKind::MatMul, {a, b}); }
inline Var sum(Var a) { return a.graph->record(OpKind::Sum, {a}); }
inline Var mean(Var a) { return a.graph->record(OpKind::Mean, {a}); }

inline Var scale(Var a, double c) { return mul(a, a.graph->input(c)); }
inline Var add_scalar(Var a, double c) { return add(a, a.graph->input(c)); }

inline Var reshape(Var a, Shape shape) {
  OpAttrs attrs;
  attrs.shape = std::move(shape);
  return a.graph->record(OpKind::Reshape, {a}, attrs);
}

inline Var transpose(Var a) { return a.graph->record(OpKind::Transpose, {a}); }

inline Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  OpAttrs attrs;
  attrs.axis = axis;
  attrs.begin = begin;
  attrs.end = end;
  return a.graph->record(OpKind::Slice, {a}, attrs);
}

inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  OpAttrs attrs;
  attrs.axis = axis;
  return parts.front().graph->record(OpKind::Concat, parts, attrs);
}

/// Row-wise centered cross-correlation, x [rows,len], kernel [K] odd.
inline Var conv1d(Var x, Var kernel) { return x.graph->record(OpKind::Conv1d, {x, kernel}); }

/// Depthwise "same" cross-correlation, x [C,H,W], kernel [C,kh,kw], bias [C].
inline Var conv2d(Var x, Var kernel, Var bias) { return x.graph->record(OpKind::Conv2d, {x, kernel, bias}); }
inline Var conv2d(Var x, Var kernel) { return x.graph->record(OpKind::Conv2d, {x, kernel}); }

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }

}  // namespace hyke::ad
