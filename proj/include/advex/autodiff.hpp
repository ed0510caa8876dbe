#pragma once

// Tape-based reverse-mode differentiation. Every primitive appends a node to
// an append-only Graph; gradient passes are themselves expressed with the same
// primitives, so the result of grad_graph() can be differentiated again.

#include <array>
#include <cstdint>
#include <deque>
#include <vector>

#include "advex/tensor.hpp"

namespace advex {

enum class OpKind : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Neg,
  Scale,
  AddConst,
  MatMul,
  Transpose,
  Conv2d,
  Conv2dInputGrad,
  Conv2dWeightGrad,
  AvgPool,
  AvgPoolGrad,
  BroadcastChannels,
  SumChannels,
  Reshape,
  Clamp,
  Exp,
  Log,
  Square,
  Abs,
  Pow,
  Sum,
  Expand,
  Max,
  Relu,
  HHRelu,
  HHReluGrad,
};

const char* op_name(OpKind op);

struct OpAttrs {
  double a = 0.0;
  double b = 0.0;
  int i0 = 0;
  int i1 = 0;
  Shape shape;
};

struct Node {
  OpKind op = OpKind::Leaf;
  std::array<std::uint32_t, 2> inputs{};
  std::uint8_t input_count = 0;
  bool requires_grad = false;
  Tensor value;
  OpAttrs attrs;
};

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* g, std::uint32_t id) : graph_(g), id_(id) {}

  Graph& graph() const { return *graph_; }
  std::uint32_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const;
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph* graph_ = nullptr;
  std::uint32_t id_ = 0;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::uint32_t id) const { return nodes_.at(id); }

  /// Debug mode: every op checks its output for NaN/inf and throws
  /// NumericError naming the op.
  void set_check_finite(bool on) { check_finite_ = on; }
  bool check_finite() const { return check_finite_; }

  /// Nodes created while recording is off never require grad.
  bool recording() const { return recording_; }

  // Used by the primitive implementations.
  Var push(OpKind op, std::initializer_list<Var> inputs, Tensor value, OpAttrs attrs = {});

 private:
  friend std::vector<Tensor> grad(Var, const std::vector<Var>&);
  friend std::vector<Var> grad_graph(Var, const std::vector<Var>&);
  friend class NoRecordScope;

  std::deque<Node> nodes_;
  bool check_finite_ = false;
  bool recording_ = true;
};

/// Gradients of a scalar `output` with respect to each of `wrt`, as plain
/// tensors. Temporary nodes are discarded afterwards. A wrt node that does
/// not reach `output` gets a zero tensor of its shape.
std::vector<Tensor> grad(Var output, const std::vector<Var>& wrt);

/// Differentiable variant: the returned gradients are nodes on the same graph.
std::vector<Var> grad_graph(Var output, const std::vector<Var>& wrt);

// Elementwise binary ops accept equal shapes or a rank-0 operand on either
// side.
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator-(Var a);

Var scale(Var x, double c);
Var add_const(Var x, double c);
Var matmul(Var a, Var b);
Var transpose(Var x);

/// x: [B,C,H,W], w: [O,C,KH,KW] -> [B,O,Ho,Wo], zero padding.
Var conv2d(Var x, Var w, int stride, int pad);
/// Adjoint of conv2d in its input: gy [B,O,Ho,Wo] -> [B,C,H,W].
Var conv2d_input_grad(Var gy, Var w, const Shape& x_shape, int stride, int pad);
/// Adjoint of conv2d in its kernel: -> [O,C,KH,KW].
Var conv2d_weight_grad(Var x, Var gy, const Shape& w_shape, int stride, int pad);

/// Non-overlapping k x k average pooling over [B,C,H,W].
Var avg_pool(Var x, int k);
Var avg_pool_grad(Var gy, int k, const Shape& x_shape);

/// b: [C] spread over `shape` = [B,C,H,W]; sum_channels is its adjoint.
Var broadcast_channels(Var b, const Shape& shape);
Var sum_channels(Var x);

Var reshape(Var x, Shape shape);
Var clamp(Var x, double lo, double hi);
Var exp(Var x);
Var log(Var x);
Var square(Var x);
Var abs(Var x);
Var pow(Var x, int n);
Var sum(Var x);
Var expand(Var scalar, const Shape& shape);
Var max(Var x);
Var relu(Var x);
Var hhrelu(Var x, double d);
/// Derivative of hhrelu as a differentiable op.
Var hhrelu_grad(Var x, double d);

// Scalar reference implementations shared by the graph ops and nn-core.
double hhrelu_value(double x, double d);
double hhrelu_derivative(double x, double d);

}  // namespace advex
