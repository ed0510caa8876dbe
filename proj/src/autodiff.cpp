#include "advex/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>

#include "advex/error.hpp"

namespace advex {

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "subtract";
    case OpKind::Mul: return "multiply";
    case OpKind::Neg: return "negate";
    case OpKind::Scale: return "scale";
    case OpKind::AddConst: return "add_const";
    case OpKind::MatMul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Conv2dInputGrad: return "conv2d_input_grad";
    case OpKind::Conv2dWeightGrad: return "conv2d_weight_grad";
    case OpKind::AvgPool: return "avg_pool";
    case OpKind::AvgPoolGrad: return "avg_pool_grad";
    case OpKind::BroadcastChannels: return "broadcast_channels";
    case OpKind::SumChannels: return "sum_channels";
    case OpKind::Reshape: return "reshape";
    case OpKind::Clamp: return "clamp";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Square: return "square";
    case OpKind::Abs: return "abs";
    case OpKind::Pow: return "pow";
    case OpKind::Sum: return "sum";
    case OpKind::Expand: return "expand";
    case OpKind::Max: return "max";
    case OpKind::Relu: return "relu";
    case OpKind::HHRelu: return "hhrelu";
    case OpKind::HHReluGrad: return "hhrelu_grad";
  }
  return "?";
}

const Tensor& Var::value() const { return graph_->node(id_).value; }
bool Var::requires_grad() const { return graph_->node(id_).requires_grad; }

// Turns off gradient tracking for nodes created inside its lifetime.
class NoRecordScope {
 public:
  explicit NoRecordScope(Graph& g) : g_(g), prev_(g.recording_) { g_.recording_ = false; }
  ~NoRecordScope() { g_.recording_ = prev_; }
  NoRecordScope(const NoRecordScope&) = delete;
  NoRecordScope& operator=(const NoRecordScope&) = delete;

 private:
  Graph& g_;
  bool prev_;
};

Var Graph::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.op = OpKind::Leaf;
  n.requires_grad = requires_grad && recording_;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Graph::push(OpKind op, std::initializer_list<Var> inputs, Tensor value, OpAttrs attrs) {
  Node n;
  n.op = op;
  bool rg = false;
  for (const Var& v : inputs) {
    if (&v.graph() != this) throw Error(std::string(op_name(op)) + ": operands belong to different graphs");
    n.inputs[n.input_count++] = v.id();
    rg = rg || v.requires_grad();
  }
  n.requires_grad = rg && recording_;
  if (check_finite_ && !value.all_finite()) {
    throw NumericError(std::string("non-finite output from ") + op_name(op));
  }
  n.value = std::move(value);
  n.attrs = std::move(attrs);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

// ---------------------------------------------------------------------------
// Scalar helpers

double hhrelu_value(double x, double d) {
  if (x < 0.0) return 0.0;
  if (x < 0.5 / d) return d * x * x;
  return x - 0.25 / d;
}

double hhrelu_derivative(double x, double d) {
  if (x < 0.0) return 0.0;
  if (x < 0.5 / d) return 2.0 * d * x;
  return 1.0;
}

namespace {

double hhrelu_second(double x, double d) { return (x >= 0.0 && x < 0.5 / d) ? 2.0 * d : 0.0; }

enum class Bcast { Same, LeftScalar, RightScalar };

Bcast check_binary(const char* name, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Bcast::Same;
  if (a.rank() == 0) return Bcast::LeftScalar;
  if (b.rank() == 0) return Bcast::RightScalar;
  throw ShapeError(std::string(name) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()));
}

template <class F>
Tensor binary_map(const char* name, const Tensor& a, const Tensor& b, F f) {
  switch (check_binary(name, a, b)) {
    case Bcast::Same: {
      Tensor out(a.shape());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
      return out;
    }
    case Bcast::LeftScalar: {
      Tensor out(b.shape());
      const double s = a[0];
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(s, b[i]);
      return out;
    }
    case Bcast::RightScalar: {
      Tensor out(a.shape());
      const double s = b[0];
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], s);
      return out;
    }
  }
  return {};
}

template <class F>
Tensor unary_map(const Tensor& x, F f) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return out;
}

Tensor matmul_values(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  auto A = a.data();
  auto B = b.data();
  auto C = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &B[p * n];
      double* crow = &C[i * n];
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return out;
}

struct ConvDims {
  std::size_t B, C, H, W, O, KH, KW, Ho, Wo;
  int stride, pad;
};

ConvDims conv_dims(const Shape& x, const Shape& w, int stride, int pad) {
  if (x.size() != 4 || w.size() != 4) {
    throw ShapeError("conv2d: expected rank-4 input and kernel, got " + shape_str(x) + " and " + shape_str(w));
  }
  if (x[1] != w[1]) {
    throw ShapeError("conv2d: input has " + std::to_string(x[1]) + " channels, kernel expects " +
                     std::to_string(w[1]));
  }
  if (stride < 1 || pad < 0) throw ConfigError("conv2d: stride must be >= 1 and pad >= 0");
  const long hp = long(x[2]) + 2 * pad - long(w[2]);
  const long wp = long(x[3]) + 2 * pad - long(w[3]);
  if (hp < 0 || wp < 0) {
    throw ShapeError("conv2d: kernel " + shape_str(w) + " larger than padded input " + shape_str(x));
  }
  ConvDims d{x[0], x[1], x[2], x[3], w[0], w[2], w[3], std::size_t(hp / stride + 1),
             std::size_t(wp / stride + 1), stride, pad};
  return d;
}

// Visits every (output position, kernel tap) pair that lands inside the input.
template <class F>
void conv_for_each(const ConvDims& d, F f) {
  for (std::size_t b = 0; b < d.B; ++b)
    for (std::size_t o = 0; o < d.O; ++o)
      for (std::size_t oh = 0; oh < d.Ho; ++oh)
        for (std::size_t ow = 0; ow < d.Wo; ++ow) {
          const std::size_t yi = ((b * d.O + o) * d.Ho + oh) * d.Wo + ow;
          for (std::size_t c = 0; c < d.C; ++c)
            for (std::size_t kh = 0; kh < d.KH; ++kh) {
              const long ih = long(oh) * d.stride - d.pad + long(kh);
              if (ih < 0 || ih >= long(d.H)) continue;
              for (std::size_t kw = 0; kw < d.KW; ++kw) {
                const long iw = long(ow) * d.stride - d.pad + long(kw);
                if (iw < 0 || iw >= long(d.W)) continue;
                const std::size_t xi = ((b * d.C + c) * d.H + std::size_t(ih)) * d.W + std::size_t(iw);
                const std::size_t wi = ((o * d.C + c) * d.KH + kh) * d.KW + kw;
                f(yi, xi, wi);
              }
            }
        }
}

Tensor mask_tensor(const Tensor& x, double (*f)(double, double), double param) {
  Tensor m(x.shape());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = f(x[i], param);
  return m;
}

Var mul_const(Var g, Tensor mask) {
  Var m = g.graph().constant(std::move(mask));
  return g * m;
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward primitives

Var operator+(Var a, Var b) {
  return a.graph().push(OpKind::Add, {a, b},
                        binary_map("add", a.value(), b.value(), [](double x, double y) { return x + y; }));
}

Var operator-(Var a, Var b) {
  return a.graph().push(OpKind::Sub, {a, b},
                        binary_map("subtract", a.value(), b.value(), [](double x, double y) { return x - y; }));
}

Var operator*(Var a, Var b) {
  return a.graph().push(OpKind::Mul, {a, b},
                        binary_map("multiply", a.value(), b.value(), [](double x, double y) { return x * y; }));
}

Var operator-(Var a) {
  return a.graph().push(OpKind::Neg, {a}, unary_map(a.value(), [](double x) { return -x; }));
}

Var scale(Var x, double c) {
  OpAttrs at;
  at.a = c;
  return x.graph().push(OpKind::Scale, {x}, unary_map(x.value(), [c](double v) { return c * v; }), at);
}

Var add_const(Var x, double c) {
  OpAttrs at;
  at.a = c;
  return x.graph().push(OpKind::AddConst, {x}, unary_map(x.value(), [c](double v) { return v + c; }), at);
}

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
  }
  return a.graph().push(OpKind::MatMul, {a, b}, matmul_values(av, bv));
}

Var transpose(Var x) {
  const Tensor& v = x.value();
  if (v.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(v.shape()));
  const std::size_t r = v.dim(0), c = v.dim(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = v[i * c + j];
  return x.graph().push(OpKind::Transpose, {x}, std::move(out));
}

Var conv2d(Var x, Var w, int stride, int pad) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const ConvDims d = conv_dims(xv.shape(), wv.shape(), stride, pad);
  Tensor out({d.B, d.O, d.Ho, d.Wo});
  auto X = xv.data();
  auto Wt = wv.data();
  auto Y = out.data();
  conv_for_each(d, [&](std::size_t yi, std::size_t xi, std::size_t wi) { Y[yi] += X[xi] * Wt[wi]; });
  OpAttrs at;
  at.i0 = stride;
  at.i1 = pad;
  return x.graph().push(OpKind::Conv2d, {x, w}, std::move(out), at);
}

Var conv2d_input_grad(Var gy, Var w, const Shape& x_shape, int stride, int pad) {
  const Tensor& gv = gy.value();
  const Tensor& wv = w.value();
  const ConvDims d = conv_dims(x_shape, wv.shape(), stride, pad);
  if (gv.shape() != Shape{d.B, d.O, d.Ho, d.Wo}) {
    throw ShapeError("conv2d_input_grad: output gradient " + shape_str(gv.shape()) + " does not match " +
                     shape_str(Shape{d.B, d.O, d.Ho, d.Wo}));
  }
  Tensor out(x_shape);
  auto G = gv.data();
  auto Wt = wv.data();
  auto X = out.data();
  conv_for_each(d, [&](std::size_t yi, std::size_t xi, std::size_t wi) { X[xi] += G[yi] * Wt[wi]; });
  OpAttrs at;
  at.i0 = stride;
  at.i1 = pad;
  at.shape = x_shape;
  return gy.graph().push(OpKind::Conv2dInputGrad, {gy, w}, std::move(out), at);
}

Var conv2d_weight_grad(Var x, Var gy, const Shape& w_shape, int stride, int pad) {
  const Tensor& xv = x.value();
  const Tensor& gv = gy.value();
  const ConvDims d = conv_dims(xv.shape(), w_shape, stride, pad);
  if (gv.shape() != Shape{d.B, d.O, d.Ho, d.Wo}) {
    throw ShapeError("conv2d_weight_grad: output gradient " + shape_str(gv.shape()) + " does not match " +
                     shape_str(Shape{d.B, d.O, d.Ho, d.Wo}));
  }
  Tensor out(w_shape);
  auto X = xv.data();
  auto G = gv.data();
  auto Wt = out.data();
  conv_for_each(d, [&](std::size_t yi, std::size_t xi, std::size_t wi) { Wt[wi] += X[xi] * G[yi]; });
  OpAttrs at;
  at.i0 = stride;
  at.i1 = pad;
  at.shape = w_shape;
  return x.graph().push(OpKind::Conv2dWeightGrad, {x, gy}, std::move(out), at);
}

Var avg_pool(Var x, int k) {
  const Tensor& v = x.value();
  if (v.rank() != 4 || k < 1 || v.dim(2) % k != 0 || v.dim(3) % k != 0) {
    throw ShapeError("avg_pool: window " + std::to_string(k) + " does not tile " + shape_str(v.shape()));
  }
  const std::size_t B = v.dim(0), C = v.dim(1), H = v.dim(2), W = v.dim(3);
  const std::size_t Ho = H / k, Wo = W / k;
  Tensor out({B, C, Ho, Wo});
  const double inv = 1.0 / double(k * k);
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w) out[(bc * Ho + h / k) * Wo + w / k] += inv * v[(bc * H + h) * W + w];
  OpAttrs at;
  at.i0 = k;
  return x.graph().push(OpKind::AvgPool, {x}, std::move(out), at);
}

Var avg_pool_grad(Var gy, int k, const Shape& x_shape) {
  const Tensor& g = gy.value();
  if (x_shape.size() != 4 || k < 1 || x_shape[2] % k != 0 || x_shape[3] % k != 0 ||
      g.shape() != Shape{x_shape[0], x_shape[1], x_shape[2] / k, x_shape[3] / k}) {
    throw ShapeError("avg_pool_grad: gradient " + shape_str(g.shape()) + " does not match input " +
                     shape_str(x_shape));
  }
  const std::size_t BC = x_shape[0] * x_shape[1], H = x_shape[2], W = x_shape[3];
  const std::size_t Ho = H / k, Wo = W / k;
  Tensor out(x_shape);
  const double inv = 1.0 / double(k * k);
  for (std::size_t bc = 0; bc < BC; ++bc)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w) out[(bc * H + h) * W + w] = inv * g[(bc * Ho + h / k) * Wo + w / k];
  OpAttrs at;
  at.i0 = k;
  at.shape = x_shape;
  return gy.graph().push(OpKind::AvgPoolGrad, {gy}, std::move(out), at);
}

Var broadcast_channels(Var b, const Shape& shape) {
  const Tensor& v = b.value();
  if (v.rank() != 1 || shape.size() != 4 || shape[1] != v.dim(0)) {
    throw ShapeError("broadcast_channels: cannot spread " + shape_str(v.shape()) + " over " + shape_str(shape));
  }
  Tensor out(shape);
  const std::size_t C = shape[1], HW = shape[2] * shape[3];
  for (std::size_t n = 0; n < shape[0]; ++n)
    for (std::size_t c = 0; c < C; ++c)
      std::fill_n(out.data().begin() + std::ptrdiff_t((n * C + c) * HW), HW, v[c]);
  OpAttrs at;
  at.shape = shape;
  return b.graph().push(OpKind::BroadcastChannels, {b}, std::move(out), at);
}

Var sum_channels(Var x) {
  const Tensor& v = x.value();
  if (v.rank() != 4) throw ShapeError("sum_channels: expected rank 4, got " + shape_str(v.shape()));
  const std::size_t C = v.dim(1), HW = v.dim(2) * v.dim(3);
  Tensor out({C});
  for (std::size_t n = 0; n < v.dim(0); ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) out[c] += v[(n * C + c) * HW + i];
  return x.graph().push(OpKind::SumChannels, {x}, std::move(out));
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(shape);
  OpAttrs at;
  at.shape = std::move(shape);
  return x.graph().push(OpKind::Reshape, {x}, std::move(out), at);
}

Var clamp(Var x, double lo, double hi) {
  if (!(lo <= hi)) throw ConfigError("clamp: lower bound exceeds upper bound");
  OpAttrs at;
  at.a = lo;
  at.b = hi;
  return x.graph().push(OpKind::Clamp, {x}, unary_map(x.value(), [lo, hi](double v) { return std::clamp(v, lo, hi); }),
                        at);
}

Var exp(Var x) {
  return x.graph().push(OpKind::Exp, {x}, unary_map(x.value(), [](double v) { return std::exp(v); }));
}

Var log(Var x) {
  return x.graph().push(OpKind::Log, {x}, unary_map(x.value(), [](double v) { return std::log(v); }));
}

Var square(Var x) {
  return x.graph().push(OpKind::Square, {x}, unary_map(x.value(), [](double v) { return v * v; }));
}

Var abs(Var x) {
  return x.graph().push(OpKind::Abs, {x}, unary_map(x.value(), [](double v) { return std::fabs(v); }));
}

Var pow(Var x, int n) {
  OpAttrs at;
  at.i0 = n;
  return x.graph().push(OpKind::Pow, {x}, unary_map(x.value(), [n](double v) { return std::pow(v, n); }), at);
}

Var sum(Var x) {
  return x.graph().push(OpKind::Sum, {x}, Tensor::scalar(advex::sum(x.value().data())));
}

Var expand(Var s, const Shape& shape) {
  if (s.size() != 1) throw ShapeError("expand: expected a scalar, got " + shape_str(s.shape()));
  OpAttrs at;
  at.shape = shape;
  return s.graph().push(OpKind::Expand, {s}, Tensor(shape, s.value()[0]), at);
}

Var max(Var x) {
  const auto d = x.value().data();
  return x.graph().push(OpKind::Max, {x}, Tensor::scalar(*std::max_element(d.begin(), d.end())));
}

Var relu(Var x) {
  return x.graph().push(OpKind::Relu, {x}, unary_map(x.value(), [](double v) { return v > 0.0 ? v : 0.0; }));
}

Var hhrelu(Var x, double d) {
  if (!(d > 0.0)) throw ConfigError("hhrelu: d must be positive");
  OpAttrs at;
  at.a = d;
  return x.graph().push(OpKind::HHRelu, {x}, unary_map(x.value(), [d](double v) { return hhrelu_value(v, d); }), at);
}

Var hhrelu_grad(Var x, double d) {
  if (!(d > 0.0)) throw ConfigError("hhrelu: d must be positive");
  OpAttrs at;
  at.a = d;
  return x.graph().push(OpKind::HHReluGrad, {x},
                        unary_map(x.value(), [d](double v) { return hhrelu_derivative(v, d); }), at);
}

// ---------------------------------------------------------------------------
// Reverse pass

namespace {

// Reduces a gradient of a broadcast binary op back to the operand's shape.
Var reduce_to(Var g, const Tensor& operand) {
  if (operand.rank() == 0 && g.value().rank() != 0) return sum(g);
  return g;
}

struct Backward {
  Graph& g;
  std::vector<std::optional<Var>>& grads;
  const std::vector<char>& need;

  void accumulate(std::uint32_t id, Var contrib) {
    if (!need[id]) return;
    auto& slot = grads[id];
    slot = slot ? (*slot + contrib) : contrib;
  }

  void run(std::uint32_t id, Var gout) {
    const Node& n = g.node(id);
    const Var self(&g, id);
    const std::uint32_t i0 = n.inputs[0];
    const std::uint32_t i1 = n.inputs[1];
    const Var a(&g, i0);
    const Var b = n.input_count > 1 ? Var(&g, i1) : Var();
    auto needs = [&](int k) { return need[k == 0 ? i0 : i1] != 0; };

    switch (n.op) {
      case OpKind::Leaf:
        return;
      case OpKind::Add:
        if (needs(0)) accumulate(i0, reduce_to(gout, a.value()));
        if (needs(1)) accumulate(i1, reduce_to(gout, b.value()));
        return;
      case OpKind::Sub:
        if (needs(0)) accumulate(i0, reduce_to(gout, a.value()));
        if (needs(1)) accumulate(i1, reduce_to(-gout, b.value()));
        return;
      case OpKind::Mul:
        if (needs(0)) accumulate(i0, reduce_to(gout * b, a.value()));
        if (needs(1)) accumulate(i1, reduce_to(gout * a, b.value()));
        return;
      case OpKind::Neg:
        accumulate(i0, -gout);
        return;
      case OpKind::Scale:
        accumulate(i0, scale(gout, n.attrs.a));
        return;
      case OpKind::AddConst:
      case OpKind::Reshape:
        accumulate(i0, n.op == OpKind::Reshape ? reshape(gout, a.shape()) : gout);
        return;
      case OpKind::MatMul:
        if (needs(0)) accumulate(i0, matmul(gout, transpose(b)));
        if (needs(1)) accumulate(i1, matmul(transpose(a), gout));
        return;
      case OpKind::Transpose:
        accumulate(i0, transpose(gout));
        return;
      case OpKind::Conv2d:
        if (needs(0)) accumulate(i0, conv2d_input_grad(gout, b, a.shape(), n.attrs.i0, n.attrs.i1));
        if (needs(1)) accumulate(i1, conv2d_weight_grad(a, gout, b.shape(), n.attrs.i0, n.attrs.i1));
        return;
      case OpKind::Conv2dInputGrad:
        // out = C_w^T gy; linear in gy and in w.
        if (needs(0)) accumulate(i0, conv2d(gout, b, n.attrs.i0, n.attrs.i1));
        if (needs(1)) accumulate(i1, conv2d_weight_grad(gout, a, b.shape(), n.attrs.i0, n.attrs.i1));
        return;
      case OpKind::Conv2dWeightGrad:
        // out[w] = <conv(x, e_w), gy>
        if (needs(0)) accumulate(i0, conv2d_input_grad(b, gout, a.shape(), n.attrs.i0, n.attrs.i1));
        if (needs(1)) accumulate(i1, conv2d(a, gout, n.attrs.i0, n.attrs.i1));
        return;
      case OpKind::AvgPool:
        accumulate(i0, avg_pool_grad(gout, n.attrs.i0, a.shape()));
        return;
      case OpKind::AvgPoolGrad:
        accumulate(i0, avg_pool(gout, n.attrs.i0));
        return;
      case OpKind::BroadcastChannels:
        accumulate(i0, sum_channels(gout));
        return;
      case OpKind::SumChannels:
        accumulate(i0, broadcast_channels(gout, a.shape()));
        return;
      case OpKind::Clamp: {
        const double lo = n.attrs.a, hi = n.attrs.b;
        Tensor m(a.shape());
        for (std::size_t i = 0; i < m.size(); ++i) m[i] = (a.value()[i] >= lo && a.value()[i] <= hi) ? 1.0 : 0.0;
        accumulate(i0, mul_const(gout, std::move(m)));
        return;
      }
      case OpKind::Exp:
        accumulate(i0, gout * self);
        return;
      case OpKind::Log:
        accumulate(i0, gout * pow(a, -1));
        return;
      case OpKind::Square:
        accumulate(i0, scale(gout * a, 2.0));
        return;
      case OpKind::Abs:
        accumulate(i0, mul_const(gout, mask_tensor(a.value(), [](double v, double) {
                                   return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
                                 }, 0.0)));
        return;
      case OpKind::Pow: {
        const int p = n.attrs.i0;
        if (p == 0) return;
        if (p == 1) {
          accumulate(i0, gout);
        } else {
          accumulate(i0, gout * scale(pow(a, p - 1), double(p)));
        }
        return;
      }
      case OpKind::Sum:
        accumulate(i0, expand(gout, a.shape()));
        return;
      case OpKind::Expand:
        accumulate(i0, sum(gout));
        return;
      case OpKind::Max: {
        const auto d = a.value().data();
        Tensor onehot(a.shape());
        onehot[std::size_t(std::max_element(d.begin(), d.end()) - d.begin())] = 1.0;
        accumulate(i0, mul_const(expand(gout, a.shape()), std::move(onehot)));
        return;
      }
      case OpKind::Relu:
        accumulate(i0, mul_const(gout, mask_tensor(a.value(), [](double v, double) { return v > 0.0 ? 1.0 : 0.0; }, 0.0)));
        return;
      case OpKind::HHRelu:
        accumulate(i0, gout * hhrelu_grad(a, n.attrs.a));
        return;
      case OpKind::HHReluGrad:
        accumulate(i0, mul_const(gout, mask_tensor(a.value(), hhrelu_second, n.attrs.a)));
        return;
    }
  }
};

std::vector<std::optional<Var>> reverse_pass(Graph& g, Var output, const std::vector<Var>& wrt) {
  if (output.size() != 1) {
    throw ShapeError("grad: output must be scalar, got shape " + shape_str(output.shape()));
  }
  const std::uint32_t out = output.id();
  std::vector<char> need(out + 1, 0);
  std::uint32_t lowest = out + 1;
  for (const Var& w : wrt) {
    if (&w.graph() != &g) throw Error("grad: wrt variable belongs to another graph");
    if (w.id() <= out) {
      need[w.id()] = 1;
      lowest = std::min(lowest, w.id());
    }
  }
  for (std::uint32_t id = lowest; id <= out; ++id) {
    if (need[id]) continue;
    const Node& n = g.node(id);
    for (std::uint8_t k = 0; k < n.input_count; ++k) {
      if (need[n.inputs[k]]) {
        need[id] = 1;
        break;
      }
    }
  }

  std::vector<std::optional<Var>> grads(out + 1);
  if (!need[out]) return grads;
  grads[out] = g.constant(Tensor(output.shape(), 1.0));
  Backward bw{g, grads, need};
  for (std::uint32_t id = out + 1; id-- > lowest;) {
    if (!need[id] || !grads[id]) continue;
    bw.run(id, *grads[id]);
  }
  return grads;
}

}  // namespace

std::vector<Tensor> grad(Var output, const std::vector<Var>& wrt) {
  Graph& g = output.graph();
  const std::size_t mark = g.nodes_.size();
  std::vector<Tensor> result;
  result.reserve(wrt.size());
  {
    NoRecordScope scope(g);
    auto grads = reverse_pass(g, output, wrt);
    for (const Var& w : wrt) {
      if (w.id() < grads.size() && grads[w.id()]) {
        result.push_back(grads[w.id()]->value());
      } else {
        result.emplace_back(w.shape(), 0.0);
      }
    }
  }
  g.nodes_.resize(mark);
  return result;
}

std::vector<Var> grad_graph(Var output, const std::vector<Var>& wrt) {
  Graph& g = output.graph();
  auto grads = reverse_pass(g, output, wrt);
  std::vector<Var> result;
  result.reserve(wrt.size());
  for (const Var& w : wrt) {
    if (w.id() < grads.size() && grads[w.id()]) {
      result.push_back(*grads[w.id()]);
    } else {
      result.push_back(g.constant(Tensor(w.shape(), 0.0)));
    }
  }
  return result;
}

}  // namespace advex
