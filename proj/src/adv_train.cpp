#include "advex/adv_train.hpp"

#include <algorithm>
#include <cmath>

#include "advex/error.hpp"

namespace advex {

AdvMode adv_mode_from_string(const std::string& s) {
  if (s == "none") return AdvMode::None;
  if (s == "l2") return AdvMode::L2;
  if (s == "l2min") return AdvMode::L2Min;
  if (s == "gaussian") return AdvMode::Gaussian;
  throw ConfigError("unknown adversarial training mode '" + s + "'");
}

std::string to_string(AdvMode m) {
  switch (m) {
    case AdvMode::None: return "none";
    case AdvMode::L2: return "l2";
    case AdvMode::L2Min: return "l2min";
    case AdvMode::Gaussian: return "gaussian";
  }
  return "none";
}

void AdvTrainConfig::validate() const {
  if (!(epsilon >= 0.0)) throw ConfigError("adv_train: epsilon must be >= 0");
  if (steps < 1) throw ConfigError("adv_train: steps must be >= 1");
  if (!(gaussian_scale >= 0.0)) throw ConfigError("adv_train: gaussian scale must be >= 0");
}

std::vector<double> step_schedule(int k) {
  if (k < 1) throw ConfigError("step_schedule: k must be >= 1");
  std::vector<double> w(static_cast<std::size_t>(k));
  const double denom = double(k) * double(k + 1);
  for (int n = 0; n < k; ++n) w[std::size_t(n)] = 2.0 * double(k - n) / denom;
  return w;
}

namespace {

// Gradient of the summed cross-entropy with respect to each input row.
Tensor loss_input_grad(const Network& net, const Tensor& x, std::span<const std::size_t> labels) {
  Graph g;
  auto params = net.bind(g, false);
  Var xv = g.leaf(x, true);
  Var loss = cross_entropy_loss(net.forward(xv, params), labels);
  return grad(loss, {xv})[0];
}

std::vector<bool> correct_rows(const Network& net, const Tensor& x, std::span<const std::size_t> labels) {
  const Tensor y = net.logits(x);
  const std::size_t V = y.dim(1);
  std::vector<bool> ok(labels.size());
  for (std::size_t b = 0; b < labels.size(); ++b) ok[b] = argmax(y.data().subspan(b * V, V)) == labels[b];
  return ok;
}

void check_batch(const Tensor& x, std::span<const std::size_t> labels) {
  if (x.rank() < 2 || x.dim(0) != labels.size()) {
    throw ShapeError("adversary: batch " + shape_str(x.shape()) + " vs " + std::to_string(labels.size()) + " labels");
  }
}

// x[row] += length * dir[row] / ||dir[row]||, clamped to [0,1]. Zero rows are
// left in place.
void step_row(Tensor& x, const Tensor& dir, std::size_t row, std::size_t n, double length) {
  auto d = dir.data().subspan(row * n, n);
  const double norm = l2_norm(d);
  if (!std::isfinite(norm)) throw NumericError("adversary: non-finite gradient");
  if (norm == 0.0 || length == 0.0) return;
  for (std::size_t j = 0; j < n; ++j) {
    double& v = x[row * n + j];
    v = std::clamp(v + length * d[j] / norm, 0.0, 1.0);
  }
}

}  // namespace

Tensor perturb_l2(const Network& net, const Tensor& x_batch, std::span<const std::size_t> labels,
                  const AdvTrainConfig& cfg) {
  cfg.validate();
  check_batch(x_batch, labels);
  Tensor x = x_batch;
  if (cfg.epsilon == 0.0) return x;
  const std::size_t B = labels.size(), n = x.size() / B;
  const double length = cfg.epsilon / double(cfg.steps);
  for (int s = 0; s < cfg.steps; ++s) {
    const Tensor gx = loss_input_grad(net, x, labels);
    for (std::size_t b = 0; b < B; ++b) step_row(x, gx, b, n, length);
  }
  return x;
}

Tensor perturb_l2min(const Network& net, const Tensor& x_batch, std::span<const std::size_t> labels,
                     const AdvTrainConfig& cfg) {
  cfg.validate();
  check_batch(x_batch, labels);
  Tensor x = x_batch;
  if (cfg.epsilon == 0.0) return x;
  const std::size_t B = labels.size(), n = x.size() / B;
  const auto weights = step_schedule(cfg.steps);
  for (int s = 0; s < cfg.steps; ++s) {
    const double length = weights[std::size_t(s)] * cfg.epsilon;
    const auto ok = correct_rows(net, x, labels);
    const bool any_correct = std::find(ok.begin(), ok.end(), true) != ok.end();
    const Tensor gx = any_correct ? loss_input_grad(net, x, labels) : Tensor(x.shape());
    Tensor back(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) back[i] = x_batch[i] - x[i];
    for (std::size_t b = 0; b < B; ++b) step_row(x, ok[b] ? gx : back, b, n, length);
  }
  return x;
}

Tensor perturb_gaussian(const Tensor& x, double scale, Rng& rng) {
  if (!(scale >= 0.0)) throw ConfigError("gaussian noise: scale must be >= 0");
  Tensor out = x;
  if (scale == 0.0) return out;
  std::normal_distribution<double> noise(0.0, scale);
  for (double& v : out.data()) v = std::clamp(v + noise(rng), 0.0, 1.0);
  return out;
}

Batch compose_batch(const Batch& clean, const Batch& adversarial, bool half_half) {
  if (clean.x.shape() != adversarial.x.shape() || clean.labels.size() != adversarial.labels.size() ||
      clean.x.rank() < 1 || clean.x.dim(0) != clean.labels.size()) {
    throw ShapeError("compose_batch: clean " + shape_str(clean.x.shape()) + " and adversarial " +
                     shape_str(adversarial.x.shape()) + " batches differ");
  }
  if (!half_half) return Batch{adversarial.x, clean.labels};
  const std::size_t B = clean.labels.size();
  const std::size_t n = clean.x.size() / B;
  const std::size_t keep = B - B / 2;
  Batch out{clean.x, clean.labels};
  std::copy(adversarial.x.data().begin() + std::ptrdiff_t(keep * n), adversarial.x.data().end(),
            out.x.data().begin() + std::ptrdiff_t(keep * n));
  return out;
}

}  // namespace advex
