#pragma once

#include <span>
#include <string>
#include <vector>

#include "advex/nn.hpp"
#include "advex/random.hpp"
#include "advex/tensor.hpp"

namespace advex {

enum class AdvMode { None, L2, L2Min, Gaussian };

AdvMode adv_mode_from_string(const std::string& s);
std::string to_string(AdvMode m);

struct AdvTrainConfig {
  AdvMode mode = AdvMode::None;
  double epsilon = 0.0;  // raw L2 radius of the adversary
  int steps = 7;
  bool half_half = false;
  double gaussian_scale = 0.0;

  void validate() const;
};

/// psi_{k,n} = 2(k-n) / (k(k+1)), n = 0..k-1. Decreasing, sums to one.
std::vector<double> step_schedule(int k);

/// Fixed-step L2 adversary: `steps` ascent steps on cross-entropy, each
/// gradient scaled to length epsilon/steps, clamped to [0,1] after every
/// step. Rows with a zero gradient skip that step. x_batch: [B, ...].
Tensor perturb_l2(const Network& net, const Tensor& x_batch, std::span<const std::size_t> labels,
                  const AdvTrainConfig& cfg);

/// Boundary-seeking adversary. At step n a correctly classified row follows
/// the normalized loss gradient with length psi_{k,n}*epsilon; a misclassified
/// row moves back along the negated current perturbation by the same length
/// (no move when the perturbation is zero).
Tensor perturb_l2min(const Network& net, const Tensor& x_batch, std::span<const std::size_t> labels,
                     const AdvTrainConfig& cfg);

/// i.i.d. N(0, scale^2) noise per element, clamped to [0,1].
Tensor perturb_gaussian(const Tensor& x, double scale, Rng& rng);

struct Batch {
  Tensor x;
  std::vector<std::size_t> labels;
};

/// half_half: first B - B/2 rows from `clean`, remaining rows from
/// `adversarial`; otherwise all of `adversarial`. Labels are the clean ones.
Batch compose_batch(const Batch& clean, const Batch& adversarial, bool half_half);

}  // namespace advex
