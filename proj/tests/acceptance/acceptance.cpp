// Acceptance suite A1-A13. One PASS/FAIL line per criterion; exit status is
// the number of failures.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "../support.hpp"
#include "advex/adv_train.hpp"
#include "advex/attack.hpp"
#include "advex/metrics.hpp"
#include "advex/nn.hpp"
#include "advex/regularizers.hpp"
#include "advex/train.hpp"

using namespace advex;
using advex::testing::numeric_grad;
using advex::testing::random_tensor;
using advex::testing::relative_error;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  const char* id;
  const char* name;
  double budget_seconds;
  std::function<Outcome()> run;
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// Gradient of a scalar loss over every parameter, flattened.
std::vector<double> flat_grad(const Network& net, const std::function<Var(Graph&, std::span<const Var>)>& loss) {
  Graph g;
  auto params = net.bind(g, true);
  auto grads = grad(loss(g, params), params);
  std::vector<double> out;
  for (const auto& t : grads) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

std::vector<double> flat_fd(const Network& net, const std::function<Var(Graph&, std::span<const Var>)>& loss,
                            double h) {
  Network probe = net;
  std::vector<double> out;
  for (std::size_t p = 0; p < net.parameters().size(); ++p) {
    auto f = [&](const Tensor& v) {
      probe.parameters()[p].value = v;
      Graph g;
      auto params = probe.bind(g, false);
      return loss(g, params).value().item();
    };
    auto fd = numeric_grad(f, net.parameters()[p].value, h);
    probe.parameters()[p].value = net.parameters()[p].value;
    out.insert(out.end(), fd.data().begin(), fd.data().end());
  }
  return out;
}

Outcome a1() {
  std::mt19937_64 rng(101);
  double worst = 0.0;
  std::size_t params = 0;
  std::vector<Network> nets{Network::mlp_2d(3, Activation::HHRelu, 1.0, 32),
                            Network::cnn_tiny({1, 8, 8}, 4, Activation::HHRelu, 1.0),
                            Network({2, 6, 6}, {ConvLayer{2, 3, 3, 1, 1}, ActivationLayer{Activation::HHRelu, 2.0},
                                                PoolLayer{2}, FlattenLayer{}, DenseLayer{27, 5}})};
  for (auto& net : nets) {
    advex::testing::randomize(net, rng, 0.6);
    params = std::max(params, net.parameter_count());
    Shape xs{3};
    xs.insert(xs.end(), net.input_shape().begin(), net.input_shape().end());
    const Tensor x = random_tensor(xs, rng, 0.0, 1.0);
    const std::vector<std::size_t> labels{0, 1, 2};
    auto loss = [&](Graph& g, std::span<const Var> p) {
      return cross_entropy_loss(net.forward(g.constant(x), p), labels);
    };
    worst = std::max(worst, relative_error(flat_grad(net, loss), flat_fd(net, loss, 1e-6)));
  }
  return {worst < 1e-6 && params <= 10000,
          fmt("max relative error %.3g", worst) + ", largest net " + std::to_string(params) + " params"};
}

Outcome a2() {
  std::mt19937_64 rng(202);
  Network net({2}, {DenseLayer{2, 16}, ActivationLayer{}, DenseLayer{16, 16}, ActivationLayer{}, DenseLayer{16, 3}});
  advex::testing::randomize(net, rng, 0.9);
  const Tensor x = random_tensor({4, 2}, rng, 0.0, 1.0);
  const Tensor w = random_tensor({4, 3}, rng);
  // S = sum_j (d(w . y) / dx_j)^2
  auto loss = [&](Graph& g, std::span<const Var> p) {
    Var xv = g.leaf(x, true);
    Var y = net.forward(xv, p);
    Var gx = grad_graph(sum(y * g.constant(w)), {xv})[0];
    return sum(square(gx));
  };
  const double err = relative_error(flat_grad(net, loss), flat_fd(net, loss, 1e-6));
  return {err < 1e-4, fmt("relative error %.3g", err)};
}

Outcome a3() {
  double worst_cont = 0.0;
  bool bounds = true;
  std::size_t probes = 0;
  for (double d : {0.25, 1.0, 4.0}) {
    const double knee = 1.0 / (2.0 * d);
    for (double b : {0.0, knee}) {
      for (double e : {1e-10, 1e-12}) {
        worst_cont = std::max(worst_cont, std::abs(hhrelu_value(b - e, d) - hhrelu_value(b + e, d)));
        worst_cont = std::max(worst_cont, std::abs(hhrelu_derivative(b - e, d) - hhrelu_derivative(b + e, d)));
      }
    }
    std::vector<double> xs;
    for (int i = -40000; i <= 40000; ++i) xs.push_back(i * 1e-4);
    for (double b : {0.0, knee}) {
      xs.insert(xs.end(), {b, std::nextafter(b, -1.0), std::nextafter(b, 2.0)});
    }
    for (double x : xs) {
      const double f = hhrelu_value(x, d), relu = std::max(x, 0.0);
      bounds = bounds && f >= 0.0 && f <= relu && f >= relu - 1.0 / (4.0 * d) - 1e-15;
      ++probes;
    }
  }
  return {worst_cont < 1e-9 && bounds,
          fmt("max breakpoint jump %.3g", worst_cont) + ", " + std::to_string(probes) + " probes, bounds " +
              (bounds ? "hold" : "violated")};
}

Outcome a4() {
  std::vector<double> y(1000, 0.0);
  y[0] = 10.0;
  const double s1 = softmax(y)[0];
  y[0] = 3.8;
  const double s2 = softmax(y)[0];
  y[1] = 6.2;
  const auto s = softmax(y);
  const double pp = 0.001;
  const bool ok = std::abs(s1 - 0.957) <= pp && std::abs(s2 - 0.043) <= pp && std::abs(s[0] - 0.029) <= pp &&
                  std::abs(s[1] - 0.321) <= pp;
  std::ostringstream os;
  os.precision(4);
  os << "s = " << s1 << ", " << s2 << ", (" << s[0] << ", " << s[1] << ")";
  return {ok, os.str()};
}

Outcome a5() {
  struct Case {
    std::size_t V;
    double expect;
  };
  bool ok = true;
  std::ostringstream os;
  os.precision(3);
  for (Case c : {Case{10, 0.01}, Case{1000, 6e-5}, Case{80, 1e-3}}) {
    const double k = suggest_k_out(0.8, c.V);
    ok = ok && std::abs(k - c.expect) <= 0.15 * c.expect;
    os << "V=" << c.V << ": " << k << " ";
  }
  return {ok, os.str()};
}

Outcome a6() {
  const std::vector<double> r1{0.0, 0.03}, acc1{0.909, 0.1};
  const std::vector<double> r2{0.0, 0.07}, acc2{0.684, 0.1};
  const double t1 = ara_from_points(r1, acc1, 0.1), t2 = ara_from_points(r2, acc2, 0.1);
  // The same curves as step functions of dense radii.
  auto step_area = [](double clean, double S) {
    const std::size_t M = 100000;
    const double end = S * clean / (clean - 0.1);
    std::vector<double> radii;
    for (std::size_t i = 0; i < M; ++i) {
      const double u = (double(i) + 0.5) / double(M);
      radii.push_back(u < 1.0 - clean ? 0.0 : (u - (1.0 - clean)) / clean * end);
    }
    return ara_from_radii(radii, 0.1, 0.2);
  };
  const double s1 = step_area(0.909, 0.03), s2 = step_area(0.684, 0.07);
  auto near = [](double a, double b) { return std::abs(a - b) <= 0.02 * b; };
  const bool ok = near(t1, 0.0121) && near(t2, 0.0204) && near(s1, 0.0121) && near(s2, 0.0204);
  std::ostringstream os;
  os.precision(4);
  os << "trapezoid " << t1 << ", " << t2 << "; step " << s1 << ", " << s2;
  return {ok, os.str()};
}

Outcome a7() {
  std::mt19937_64 rng(707);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  int done = 0;
  while (done < 20) {
    const double angle = 2.0 * std::acos(-1.0) * u(rng);
    const double scale = 0.5 + 4.5 * u(rng);
    const double w0 = scale * std::cos(angle), w1 = scale * std::sin(angle);
    const double x0 = 0.3 + 0.4 * u(rng), x1 = 0.3 + 0.4 * u(rng);
    const double dist = 0.01 + 0.14 * u(rng);
    // Boundary w.x + b = 0 at distance `dist` from x, x on the class-0 side.
    const double b = -(w0 * x0 + w1 * x1) - dist * scale;
    const double p0 = x0 + dist * w0 / scale, p1 = x1 + dist * w1 / scale;
    if (p0 < 0.0 || p0 > 1.0 || p1 < 0.0 || p1 > 1.0) continue;
    Network net({2}, {DenseLayer{2, 2}});
    auto& W = net.parameters()[0].value;
    W[1] = w0;
    W[3] = w1;
    net.parameters()[1].value[1] = b;
    auto o = attack(net, Tensor::vector({x0, x1}), 0, AttackConfig{});
    const double expect = dist / std::sqrt(2.0);
    const double rel = o.success ? std::abs(o.rmse - expect) / expect : INFINITY;
    worst = std::max(worst, rel);
    ++done;
  }
  return {worst < 0.05, fmt("worst relative RMSE error %.3g over 20 classifiers", worst)};
}

Outcome a8() {
  const auto psi = step_schedule(7);
  double s = 0.0;
  bool decreasing = true;
  for (std::size_t i = 0; i < psi.size(); ++i) {
    s += psi[i];
    if (i > 0) decreasing = decreasing && psi[i] < psi[i - 1];
  }
  const bool ok = psi[0] == 0.25 && std::abs(s - 1.0) < 1e-15 && decreasing;
  return {ok, fmt("psi_7,0 = %.17g", psi[0]) + fmt(", sum = %.17g", s)};
}

CurveOptions curve_options() {
  CurveOptions o;
  o.quota = 200;
  o.cap = 0.2;
  o.seed = 5;
  return o;
}

Outcome a9() {
  const Dataset train_set = gen_blobs(3, 300, 0.15, 1), test_set = gen_blobs(3, 300, 0.15, 2);
  std::vector<double> areas, grads;
  std::ostringstream os;
  os.precision(4);
  for (double psi : {0.0, 1.0, 30.0}) {
    TrainConfig cfg;
    cfg.lipschitz.psi = psi;
    cfg.lipschitz.dead_zone = 1.0;
    cfg.seed = 3;
    auto r = train(cfg, train_set);
    const auto curve = build_curve(r.net, test_set, Goal::Adv, AttackConfig{}, curve_options());
    const auto ev = evaluate(r.net, test_set);
    areas.push_back(curve.area);
    grads.push_back(ev.mean_abs_grad);
    os << "psi=" << psi << ": ARA " << curve.area << " E|dy/dx| " << ev.mean_abs_grad << "; ";
  }
  const bool ok = areas[0] < areas[1] && areas[1] < areas[2] && grads[0] > grads[1] && grads[1] > grads[2];
  return {ok, os.str()};
}

Outcome a10() {
  Dataset train_set = gen_blobs(3, 50, 0.065, 1);
  const Dataset test_set = gen_blobs(3, 300, 0.065, 2);
  Rng noise(77);
  for (auto& e : train_set.examples) {
    if (std::uniform_real_distribution<double>(0.0, 1.0)(noise) < 0.3) e.label = (e.label + 1 + noise() % 2) % 3;
  }
  std::vector<double> areas;
  for (bool adversarial : {false, true}) {
    TrainConfig cfg;
    cfg.epochs = 500;
    cfg.batch_size = 8;
    cfg.schedule.step_epochs = {375.0, 458.5};
    cfg.seed = 3;
    if (adversarial) cfg.adversarial = {AdvMode::L2Min, 0.1, 7, true, 0.0};
    auto r = train(cfg, train_set);
    areas.push_back(build_curve(r.net, test_set, Goal::Adv, AttackConfig{}, curve_options()).area);
  }
  const double ratio = areas[1] / areas[0];
  return {ratio >= 1.5, fmt("ARA %.4g", areas[0]) + fmt(" -> %.4g", areas[1]) + fmt(" (%.2fx)", ratio)};
}

Outcome a11() {
  const Dataset train_set = gen_blobs(3, 300, 0.15, 1);
  TrainConfig cfg;
  cfg.lipschitz.psi = 1.0;
  cfg.lipschitz.dead_zone = 1.0;
  cfg.seed = 3;
  const double target = train(cfg, train_set).report.final().classification;

  cfg.lipschitz.psi = 0.0;
  cfg.adaptive_psi = AdaptivePsiConfig{0.1, 0.02, 1.0, 0.01, target};
  cfg.seed = 103;
  const auto report = train(cfg, train_set).report;
  double min_psi = INFINITY;
  for (const auto& e : report.epochs) min_psi = std::min(min_psi, e.min_psi);
  const double final_loss = report.final().classification;
  const double rel = std::abs(final_loss - target) / target;
  return {rel <= 0.05 && min_psi >= 0.1,
          fmt("target %.5g", target) + fmt(", final %.5g", final_loss) + fmt(" (%.2f%%)", 100 * rel) +
              fmt(", min psi %.4g", min_psi) + fmt(", final psi %.4g", report.final().psi)};
}

Outcome a12() {
  const Dataset train_set = gen_blobs(2, 150, 0.15, 1), test_set = gen_blobs(2, 300, 0.15, 2);
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.schedule.step_epochs = {22.0, 27.0};
  cfg.seed = 3;
  const auto net = train(cfg, train_set).net;
  CurveOptions opt = curve_options();
  opt.quota = 100;
  const auto adv = build_curve(net, test_set, Goal::Adv, AttackConfig{}, opt);
  const auto btr = build_curve(net, test_set, Goal::Btr, AttackConfig{}, opt);
  std::size_t differing = 0;
  for (std::size_t i = 0; i < std::min(adv.radii.size(), btr.radii.size()); ++i) differing += adv.radii[i] != btr.radii[i];
  const bool ok = adv.attacked == 100 && adv.radii.size() == btr.radii.size() && differing == 0;
  return {ok, std::to_string(adv.attacked) + " attacked, " + std::to_string(differing) + " radii differ" +
                  fmt(", ARA %.4g", adv.area)};
}

Outcome a13() {
  // Constant classifier: every output fixed, majority class wins everywhere.
  Dataset data = gen_blobs(3, 40, 0.1, 4);
  data.examples.resize(100);
  std::vector<std::size_t> counts(3);
  for (auto t : data.all_labels()) ++counts[t];
  const std::size_t majority = std::size_t(std::max_element(counts.begin(), counts.end()) - counts.begin());
  Network flat = Network::mlp_2d(3);
  flat.parameters().back().value[majority] = 1.0;
  const double area = build_curve(flat, data, Goal::Adv, AttackConfig{}, curve_options()).area;

  // Every extension off against a hand-written plain loop.
  const Dataset train_set = gen_blobs(3, 100, 0.15, 1);
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.schedule.step_epochs = {7.0, 9.0};
  cfg.seed = 11;
  const auto via_train = train(cfg, train_set);

  Network net = Network::from_preset(cfg.preset, train_set.image_shape, train_set.classes, cfg.activation, cfg.d);
  net.initialize(derive_seed(cfg.seed, kStreamInit));
  Rng shuffle(derive_seed(cfg.seed, kStreamShuffle));
  OptimizerState opt = make_optimizer(net, cfg.sgd, cfg.schedule.rate(0.0));
  const std::size_t n = train_set.size(), nb = (n + cfg.batch_size - 1) / cfg.batch_size;
  std::vector<double> epoch_loss;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled_indices(n, shuffle);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < nb; ++b) {
      std::span<const std::size_t> idx(order.data() + b * cfg.batch_size,
                                       std::min(n, (b + 1) * cfg.batch_size) - b * cfg.batch_size);
      Graph g;
      auto params = net.bind(g);
      Var loss = cross_entropy_loss(net.forward(g.constant(train_set.batch(idx)), params), train_set.labels(idx));
      const auto grads = grad(loss, params);
      opt.learning_rate = cfg.schedule.rate(double(epoch) + double(b) / double(nb));
      sgd_step(net, opt, grads);
      loss_sum += loss.value().item();
    }
    epoch_loss.push_back(loss_sum / double(nb));
  }
  bool identical = true;
  for (std::size_t p = 0; p < net.parameters().size(); ++p) {
    identical = identical && net.parameters()[p].value == via_train.net.parameters()[p].value;
  }
  for (int e = 0; e < cfg.epochs; ++e) identical = identical && epoch_loss[std::size_t(e)] == via_train.report.epochs[std::size_t(e)].classification;
  return {area == 0.0 && identical,
          fmt("constant-classifier ARA %.3g", area) + ", plain loop " + (identical ? "bit-identical" : "differs")};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {"A1", "autodiff first order", 10, a1},
      {"A2", "autodiff second order", 30, a2},
      {"A3", "hhrelu continuity and bounds", 1, a3},
      {"A4", "softmax constants", 1, a4},
      {"A5", "k_out guideline", 1, a5},
      {"A6", "ARA triangles", 1, a6},
      {"A7", "attack minimality oracle", 60, a7},
      {"A8", "step schedule", 1, a8},
      {"A9", "monotone psi trend", 600, a9},
      {"A10", "adversarial training effect", 600, a10},
      {"A11", "adaptive psi controller", 600, a11},
      {"A12", "btr equals adv on two classes", 300, a12},
      {"A13", "degenerate invariants", 120, a13},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs <= c.budget_seconds;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::printf("%-4s %s  %s: %s [%.2fs / %.0fs%s]\n", c.id, pass ? "PASS" : "FAIL", c.name, o.detail.c_str(), secs,
                c.budget_seconds, in_time ? "" : " over budget");
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria failed\n", failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
