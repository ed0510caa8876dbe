#include "advex/attack.hpp"

#include <algorithm>
#include <cmath>

#include "advex/error.hpp"

namespace advex {

Goal goal_from_string(const std::string& s) {
  if (s == "adv") return Goal::Adv;
  if (s == "btr") return Goal::Btr;
  if (s == "explain-plus") return Goal::ExplainPlus;
  if (s == "explain-minus") return Goal::ExplainMinus;
  if (s == "high-confidence") return Goal::HighConfidence;
  throw ConfigError("unknown attack goal '" + s + "'");
}

std::string to_string(Goal g) {
  switch (g) {
    case Goal::Adv: return "adv";
    case Goal::Btr: return "btr";
    case Goal::ExplainPlus: return "explain-plus";
    case Goal::ExplainMinus: return "explain-minus";
    case Goal::HighConfidence: return "high-confidence";
  }
  return "adv";
}

void AttackConfig::validate(std::size_t classes) const {
  if (steps < 1) throw ConfigError("attack: steps must be >= 1");
  if (!(eta > 0.0) || !(lr > 0.0)) throw ConfigError("attack: eta and lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("attack: momentum must lie in [0,1)");
  const bool explain = goal == Goal::ExplainPlus || goal == Goal::ExplainMinus;
  if (explain) {
    if (!(rho >= 0.0)) throw ConfigError("attack: explain goals need rho >= 0");
    if (!target) throw ConfigError("attack: explain goals need a target class");
  }
  if (target && *target >= classes) throw ConfigError("attack: target class out of range");
  if (!(margin >= 0.0)) throw ConfigError("attack: margin must be >= 0");
}

bool goal_adv(std::span<const double> s, std::size_t t) {
  double best_other = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < s.size(); ++j) {
    if (j != t) best_other = std::max(best_other, s[j]);
  }
  return s[t] - best_other < 0.0;
}

bool goal_btr(std::span<const double> s, std::size_t t) { return s[t] < 1.0 / double(s.size()); }

bool goal_explain(std::span<const double> delta, double rho) {
  if (delta.empty()) return false;
  return l2_norm(delta) / std::sqrt(double(delta.size())) > rho;
}

bool goal_high_confidence(std::span<const double> s, std::size_t t, double margin) {
  if (s.size() < 2) return false;
  std::size_t j = t == 0 ? 1 : 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != t && s[i] > s[j]) j = i;
  }
  double runner_up = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != j) runner_up = std::max(runner_up, s[i]);
  }
  return s[j] - runner_up > margin;
}

std::vector<AttackOutcome> attack_batch(const Network& net, const Tensor& x_batch,
                                        std::span<const std::size_t> labels, const AttackConfig& cfg) {
  const std::size_t V = net.classes();
  cfg.validate(V);
  if (x_batch.rank() < 2 || x_batch.dim(0) != labels.size()) {
    throw ShapeError("attack: batch " + shape_str(x_batch.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  }
  const std::size_t B = labels.size();
  const std::size_t n = x_batch.size() / B;
  Shape example_shape(x_batch.shape().begin() + 1, x_batch.shape().end());
  for (auto t : labels) {
    if (t >= V) throw ConfigError("attack: label out of range");
  }

  const bool explain = cfg.goal == Goal::ExplainPlus || cfg.goal == Goal::ExplainMinus;
  std::vector<std::size_t> followed(B);
  for (std::size_t b = 0; b < B; ++b) followed[b] = explain ? *cfg.target : labels[b];
  const Tensor follow_mask = one_hot(followed, V);
  // Descending +d s/dx lowers the followed probability; explain-plus raises it.
  const double direction = cfg.goal == Goal::ExplainPlus ? -1.0 : 1.0;

  std::vector<AttackOutcome> out(B);
  Tensor delta(x_batch.shape());
  Tensor velocity(x_batch.shape());
  Tensor step(x_batch.shape());
  Tensor x_hat(x_batch.shape());
  std::vector<double> applied(n);

  for (int it = 0; it < cfg.steps; ++it) {
    for (std::size_t i = 0; i < x_hat.size(); ++i) x_hat[i] = std::clamp(x_batch[i] + delta[i], 0.0, 1.0);

    Graph g;
    auto params = net.bind(g, false);
    Var xv = g.leaf(x_hat, true);
    Var probs = softmax_rows(net.forward(xv, params));
    const Tensor s = probs.value();

    std::vector<char> met(B);
    bool any_unmet = false;
    for (std::size_t b = 0; b < B; ++b) {
      auto sb = s.data().subspan(b * V, V);
      for (std::size_t j = 0; j < n; ++j) applied[j] = x_hat[b * n + j] - x_batch[b * n + j];
      switch (cfg.goal) {
        case Goal::Adv: met[b] = goal_adv(sb, labels[b]); break;
        case Goal::Btr: met[b] = goal_btr(sb, labels[b]); break;
        case Goal::HighConfidence: met[b] = goal_high_confidence(sb, labels[b], cfg.margin); break;
        case Goal::ExplainPlus:
        case Goal::ExplainMinus: met[b] = goal_explain(applied, cfg.rho); break;
      }
      any_unmet = any_unmet || !met[b];
      if (!met[b]) {
        if (!out[b].success) out[b].final_prediction.assign(sb.begin(), sb.end());
        continue;
      }
      const double norm = l2_norm(applied);
      if (norm < out[b].m_best) {
        AttackOutcome& o = out[b];
        o.success = true;
        o.m_best = norm;
        o.rmse = norm / std::sqrt(double(n));
        o.delta_best = Tensor(example_shape, applied);
        o.adversarial = slice_row(x_hat, b);
        o.final_prediction.assign(sb.begin(), sb.end());
        if (!o.first_success_step) o.first_success_step = it;
      }
    }

    Tensor gx;
    if (any_unmet) {
      Var selected = sum(probs * g.constant(follow_mask));
      gx = grad(selected, {xv})[0];
    }
    for (std::size_t b = 0; b < B; ++b) {
      if (met[b]) {
        for (std::size_t j = 0; j < n; ++j) step[b * n + j] = 2.0 * delta[b * n + j];
        continue;
      }
      auto gb = gx.data().subspan(b * n, n);
      const double norm = l2_norm(gb);
      if (!std::isfinite(norm)) {
        throw NumericError("attack: non-finite input gradient at step " + std::to_string(it) + " for row " +
                           std::to_string(b));
      }
      for (std::size_t j = 0; j < n; ++j) step[b * n + j] = norm > 0.0 ? direction * cfg.eta * gb[j] / norm : 0.0;
    }
    for (std::size_t i = 0; i < delta.size(); ++i) {
      velocity[i] = cfg.momentum * velocity[i] + step[i];
      delta[i] -= cfg.lr * velocity[i];
    }
  }
  return out;
}

AttackOutcome attack(const Network& net, const Tensor& x, std::size_t label, const AttackConfig& cfg) {
  if (x.shape() != net.input_shape()) {
    throw ShapeError("attack: input " + shape_str(x.shape()) + " does not match network input " +
                     shape_str(net.input_shape()));
  }
  Shape batched{1};
  batched.insert(batched.end(), x.shape().begin(), x.shape().end());
  const std::size_t labels[1] = {label};
  return attack_batch(net, x.reshaped(batched), labels, cfg).front();
}

}  // namespace advex
