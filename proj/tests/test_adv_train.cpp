#include <gtest/gtest.h>

#include <cmath>

#include "advex/adv_train.hpp"
#include "advex/error.hpp"
#include "support.hpp"

using namespace advex;
using advex::testing::random_tensor;

TEST(StepSchedule, SevenSteps) {
  auto psi = step_schedule(7);
  ASSERT_EQ(psi.size(), 7u);
  EXPECT_DOUBLE_EQ(psi[0], 0.25);
  double s = 0.0;
  for (double p : psi) s += p;
  EXPECT_NEAR(s, 1.0, 1e-15);
  for (std::size_t i = 1; i < psi.size(); ++i) EXPECT_LT(psi[i], psi[i - 1]);
}

TEST(StepSchedule, DecreasingAndNormalizedForAnyK) {
  for (int k = 1; k <= 64; ++k) {
    auto psi = step_schedule(k);
    double s = 0.0;
    for (std::size_t i = 0; i < psi.size(); ++i) {
      s += psi[i];
      if (i > 0) {
        EXPECT_LT(psi[i], psi[i - 1]);
      }
    }
    EXPECT_NEAR(s, 1.0, 1e-12) << k;
  }
  EXPECT_THROW(step_schedule(0), ConfigError);
}

namespace {

struct Fixture {
  Network net = Network::mlp_2d(3, Activation::HHRelu, 1.0, 8);
  Tensor x;
  std::vector<std::size_t> labels{0, 1, 2, 0, 1, 2};
  Fixture() {
    std::mt19937_64 rng(1);
    advex::testing::randomize(net, rng, 1.0);
    x = random_tensor({6, 2}, rng, 0.2, 0.8);
  }
};

std::vector<double> row_norms(const Tensor& a, const Tensor& b) {
  const std::size_t B = a.dim(0), n = a.size() / B;
  std::vector<double> out(B);
  for (std::size_t r = 0; r < B; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += (a[r * n + j] - b[r * n + j]) * (a[r * n + j] - b[r * n + j]);
    out[r] = std::sqrt(s);
  }
  return out;
}

}  // namespace

TEST(PerturbL2, ZeroEpsilonIsIdentity) {
  Fixture f;
  AdvTrainConfig cfg{AdvMode::L2, 0.0, 7};
  EXPECT_EQ(perturb_l2(f.net, f.x, f.labels, cfg), f.x);
  cfg.mode = AdvMode::L2Min;
  EXPECT_EQ(perturb_l2min(f.net, f.x, f.labels, cfg), f.x);
}

TEST(PerturbL2, StaysWithinBudgetAndRaisesLoss) {
  Fixture f;
  AdvTrainConfig cfg{AdvMode::L2, 0.1, 7};
  auto adv = perturb_l2(f.net, f.x, f.labels, cfg);
  for (double n : row_norms(adv, f.x)) EXPECT_LE(n, 0.1 + 1e-12);
  for (double v : adv.data()) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
  auto ce = [&](const Tensor& x) {
    Graph g;
    auto p = f.net.bind(g, false);
    return cross_entropy_loss(f.net.forward(g.constant(x), p), f.labels).value().item();
  };
  EXPECT_GT(ce(adv), ce(f.x));
}

TEST(PerturbL2Min, StaysWithinBudget) {
  Fixture f;
  AdvTrainConfig cfg{AdvMode::L2Min, 0.3, 7};
  auto adv = perturb_l2min(f.net, f.x, f.labels, cfg);
  for (double n : row_norms(adv, f.x)) EXPECT_LE(n, 0.3 + 1e-12);
  EXPECT_NE(adv, f.x);
}

TEST(PerturbL2Min, MisclassifiedInputDoesNotMove) {
  // Output 1 dominates everywhere in the unit square; label 0 is wrong from the start.
  Network net({2}, {DenseLayer{2, 2}});
  auto& w = net.parameters()[0].value;
  w[0] = 1.0;
  w[1] = -1.0;
  net.parameters()[1].value[1] = 5.0;
  auto x = Tensor::matrix(1, 2, {0.5, 0.5});
  std::vector<std::size_t> labels{0};
  AdvTrainConfig cfg{AdvMode::L2Min, 0.2, 7};
  EXPECT_EQ(perturb_l2min(net, x, labels, cfg), x);
}

TEST(PerturbGaussian, ZeroScaleAndMoments) {
  Rng rng(3);
  Tensor x({20000}, 0.5);
  EXPECT_EQ(perturb_gaussian(x, 0.0, rng), x);
  auto y = perturb_gaussian(x, 0.1, rng);
  double m = 0.0, v = 0.0;
  for (double e : y.data()) m += e;
  m /= double(y.size());
  for (double e : y.data()) v += (e - m) * (e - m);
  v /= double(y.size());
  EXPECT_NEAR(m, 0.5, 0.005);
  EXPECT_NEAR(std::sqrt(v), 0.1, 0.005);
}

TEST(ComposeBatch, HalfHalf) {
  Batch clean{Tensor({8, 1}, 0.0), {0, 1, 2, 3, 4, 5, 6, 7}};
  Batch adv{Tensor({8, 1}, 1.0), {9, 9, 9, 9, 9, 9, 9, 9}};
  auto hh = compose_batch(clean, adv, true);
  EXPECT_EQ(hh.labels, clean.labels);
  for (int i = 0; i < 8; ++i) EXPECT_EQ(hh.x[i], i < 4 ? 0.0 : 1.0);
  auto full = compose_batch(clean, adv, false);
  EXPECT_EQ(full.x, adv.x);
  EXPECT_EQ(full.labels, clean.labels);
  Batch odd{Tensor({3, 1}, 0.0), {0, 1, 2}};
  auto o = compose_batch(odd, Batch{Tensor({3, 1}, 1.0), {0, 1, 2}}, true);
  EXPECT_EQ(o.x.values(), (std::vector<double>{0.0, 0.0, 1.0}));
  EXPECT_THROW(compose_batch(clean, odd, true), ShapeError);
}

TEST(AdvTrainConfig, Validation) {
  EXPECT_EQ(adv_mode_from_string("l2min"), AdvMode::L2Min);
  EXPECT_EQ(to_string(AdvMode::Gaussian), "gaussian");
  EXPECT_THROW(adv_mode_from_string("pgd"), ConfigError);
  EXPECT_THROW((AdvTrainConfig{AdvMode::L2, -0.1, 7}.validate()), ConfigError);
  EXPECT_THROW((AdvTrainConfig{AdvMode::L2, 0.1, 0}.validate()), ConfigError);
}
