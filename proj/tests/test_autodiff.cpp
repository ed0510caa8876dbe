#include <gtest/gtest.h>

#include "advex/autodiff.hpp"
#include "advex/error.hpp"
#include "support.hpp"

using namespace advex;
using advex::testing::numeric_grad;
using advex::testing::random_tensor;
using advex::testing::relative_error;

TEST(Autodiff, SumOfSquares) {
  Graph g;
  auto x = g.leaf(Tensor::vector({1, 2, 3}));
  auto gx = grad(sum(square(x)), {x});
  EXPECT_EQ(gx[0].values(), (std::vector<double>{2, 4, 6}));
}

TEST(Autodiff, SecondDerivativeOfCube) {
  Graph g;
  auto x = g.leaf(Tensor::scalar(2.0));
  auto y = pow(x, 3);
  auto dy = grad_graph(y, {x});
  auto d2 = grad(dy[0], {x});
  EXPECT_NEAR(d2[0].item(), 12.0, 1e-12);
}

TEST(Autodiff, Linearity) {
  std::mt19937_64 rng(1);
  auto a = random_tensor({5}, rng);
  Graph g;
  auto x = g.leaf(a);
  auto f = sum(square(x));
  auto h = sum(exp(x));
  auto gf = grad(f, {x})[0];
  auto gh = grad(h, {x})[0];
  auto gsum = grad(scale(f, 2.0) + scale(h, -3.0), {x})[0];
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(gsum[i], 2 * gf[i] - 3 * gh[i], 1e-12);
}

TEST(Autodiff, NonScalarOutputThrows) {
  Graph g;
  auto x = g.leaf(Tensor::vector({1, 2}));
  EXPECT_THROW(grad(square(x), {x}), ShapeError);
}

TEST(Autodiff, UnreachableGetsZeros) {
  Graph g;
  auto x = g.leaf(Tensor::vector({1, 2}));
  auto z = g.leaf(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  auto gz = grad(sum(x), {x, z});
  EXPECT_EQ(gz[1], Tensor({2, 2}));
}

TEST(Autodiff, ShapeMismatchThrows) {
  Graph g;
  auto a = g.leaf(Tensor::vector({1, 2}));
  auto b = g.leaf(Tensor::vector({1, 2, 3}));
  EXPECT_THROW(a + b, ShapeError);
  EXPECT_THROW(matmul(a, b), ShapeError);
}

TEST(Autodiff, CheckFiniteNamesOp) {
  Graph g;
  g.set_check_finite(true);
  auto x = g.leaf(Tensor::vector({-1.0}));
  try {
    log(x);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("log"), std::string::npos);
  }
}

// Every primitive against central differences of its own forward pass.
namespace {

using Fn = std::function<Var(Var)>;

double check_op(const Fn& f, const Tensor& x0) {
  auto eval = [&](const Tensor& x) {
    Graph g;
    auto v = g.leaf(x, false);
    return sum(f(v)).value().item();
  };
  Graph g;
  auto x = g.leaf(x0);
  auto analytic = grad(sum(f(x)), {x})[0];
  auto numeric = numeric_grad(eval, x0, 1e-6);
  return relative_error(analytic.data(), numeric.data());
}

}  // namespace

TEST(Autodiff, PrimitivesMatchFiniteDifferences) {
  std::mt19937_64 rng(7);
  auto x = random_tensor({2, 3}, rng, 0.2, 0.9);
  auto w = random_tensor({3, 4}, rng);
  std::vector<std::pair<const char*, Fn>> ops{
      {"mul", [](Var v) { return v * v; }},
      {"sub", [](Var v) { return v - square(v); }},
      {"neg", [](Var v) { return -v; }},
      {"add_const", [](Var v) { return square(add_const(v, 0.3)); }},
      {"matmul", [&](Var v) { return square(matmul(v, v.graph().constant(w))); }},
      {"transpose", [&](Var v) { return transpose(v) * transpose(v); }},
      {"exp", [](Var v) { return exp(v); }},
      {"log", [](Var v) { return log(v); }},
      {"abs", [](Var v) { return abs(add_const(v, -0.5)); }},
      {"pow", [](Var v) { return pow(v, 4); }},
      {"relu", [](Var v) { return square(relu(add_const(v, -0.5))); }},
      {"hhrelu", [](Var v) { return hhrelu(add_const(v, -0.5), 2.0); }},
      {"hhrelu_grad", [](Var v) { return hhrelu_grad(add_const(v, -0.5), 2.0) * v; }},
      {"clamp", [](Var v) { return square(clamp(v, 0.3, 0.8)); }},
      {"max", [](Var v) { return square(max(v)); }},
      {"reshape", [](Var v) { return square(reshape(v, {3, 2})); }},
      {"expand", [](Var v) { return expand(sum(v), {2, 2}) * expand(sum(v), {2, 2}); }},
  };
  for (const auto& [name, f] : ops) EXPECT_LT(check_op(f, x), 1e-7) << name;
}

TEST(Autodiff, ConvAndPoolMatchFiniteDifferences) {
  std::mt19937_64 rng(9);
  auto x = random_tensor({2, 2, 6, 6}, rng);
  auto w = random_tensor({3, 2, 3, 3}, rng);
  auto b = random_tensor({3}, rng);
  for (int stride : {1, 2}) {
    for (int pad : {0, 1}) {
      Fn f = [&](Var v) {
        auto y = conv2d(v, v.graph().constant(w), stride, pad);
        return square(y + broadcast_channels(v.graph().constant(b), y.shape()));
      };
      EXPECT_LT(check_op(f, x), 1e-7) << "conv input stride " << stride << " pad " << pad;
      Fn fw = [&](Var v) { return square(conv2d(v.graph().constant(x), v, stride, pad)); };
      EXPECT_LT(check_op(fw, w), 1e-7) << "conv kernel stride " << stride << " pad " << pad;
    }
  }
  EXPECT_LT(check_op([](Var v) { return square(avg_pool(v, 2)); }, x), 1e-7);
  EXPECT_LT(check_op([](Var v) { return square(sum_channels(v)); }, x), 1e-7);
}

TEST(Autodiff, DoubleBackwardThroughConv) {
  // d/dw of sum((dL/dx)^2) with L = sum(conv(x, w)^2), checked numerically in w.
  std::mt19937_64 rng(11);
  auto x0 = random_tensor({1, 1, 5, 5}, rng);
  auto w0 = random_tensor({2, 1, 3, 3}, rng);
  auto scalar = [&](const Tensor& w, bool differentiate, Tensor* out) {
    Graph g;
    auto x = g.leaf(x0);
    auto wv = g.leaf(w);
    auto y = conv2d(x, wv, 1, 1);
    auto gx = grad_graph(sum(hhrelu(y, 1.0)), {x})[0];
    auto s = sum(square(gx));
    if (differentiate) *out = grad(s, {wv})[0];
    return s.value().item();
  };
  Tensor analytic;
  scalar(w0, true, &analytic);
  auto numeric = numeric_grad([&](const Tensor& w) { return scalar(w, false, nullptr); }, w0, 1e-5);
  EXPECT_LT(relative_error(analytic.data(), numeric.data()), 1e-6);
}
