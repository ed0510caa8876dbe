#pragma once

#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advex/nn.hpp"
#include "advex/tensor.hpp"

namespace advex {

enum class Goal { Adv, Btr, ExplainPlus, ExplainMinus, HighConfidence };

Goal goal_from_string(const std::string& s);
std::string to_string(Goal g);

struct AttackConfig {
  int steps = 450;        // N
  double eta = 0.55;      // length of each normalized classification step
  double lr = 0.01;       // optimizer applied to the perturbation
  double momentum = 0.9;
  Goal goal = Goal::Adv;
  double rho = 0.0;       // explain goals: RMSE budget
  double margin = 0.5;    // high-confidence goal
  std::optional<std::size_t> target;  // explain goals

  void validate(std::size_t classes) const;
};

struct AttackOutcome {
  bool success = false;
  /// Perturbation actually applied at the best iterate (clamp(x+delta) - x).
  std::optional<Tensor> delta_best;
  /// The attacked input clamp(x + delta) at the best iterate.
  std::optional<Tensor> adversarial;
  /// L2 norm of delta_best; +inf marks a censored (never successful) attack.
  double m_best = std::numeric_limits<double>::infinity();
  double rmse = std::numeric_limits<double>::infinity();
  std::optional<int> first_success_step;
  /// Softmax at the adversarial point, or at the last iterate when censored.
  std::vector<double> final_prediction;

  bool censored() const { return !success; }
};

bool goal_adv(std::span<const double> s, std::size_t t);
bool goal_btr(std::span<const double> s, std::size_t t);
/// True iff RMSE(delta) > rho.
bool goal_explain(std::span<const double> delta, double rho);
bool goal_high_confidence(std::span<const double> s, std::size_t t, double margin);

/// Tick-tock minimal attack on a single input (shape = net.input_shape()).
/// While the goal is unmet the perturbation follows the normalized gradient of
/// the selected class probability; once met it descends ||delta||^2. One
/// momentum optimizer carries across both phases.
AttackOutcome attack(const Network& net, const Tensor& x, std::size_t label, const AttackConfig& cfg);

/// Same algorithm run independently on every row of x_batch [B, ...]; each
/// outcome is bit-identical to attacking that row alone.
std::vector<AttackOutcome> attack_batch(const Network& net, const Tensor& x_batch,
                                        std::span<const std::size_t> labels, const AttackConfig& cfg);

}  // namespace advex
