#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "advex/autodiff.hpp"
#include "advex/nn.hpp"
#include "advex/random.hpp"

namespace advex {

enum class TandemCombine { Subtract, Add };

/// Knobs of the stochastic input-gradient penalty.
struct LipschitzConfig {
  double psi = 0.0;        // strength
  std::size_t K = 1;       // outputs drawn per example, without replacement
  int z = 2;               // power on each |dy/dx_j|
  int q = 0;               // power on the per-output gradient L1 sum
  double zeta = 0.0;       // probability the first draw is forced to the true class
  double dead_zone = 0.0;  // sigma: gradient magnitudes below this are free
  bool tandem = false;     // forced draw uses y_t - max_{i != t} y_i instead
  TandemCombine tandem_combine = TandemCombine::Subtract;

  void validate(std::size_t classes) const;
};

/// Output indices selected for one example. When `forced` is set the first
/// entry is the true class (and, in tandem mode, stands for the tandem
/// difference).
struct OutputDraw {
  std::vector<std::size_t> indices;
  bool forced = false;
};

OutputDraw draw_outputs(std::size_t classes, std::size_t K, std::size_t label, double zeta, Rng& rng);

/// psi/(K*N_in) * sum_k sum_j (sum_l g_l)^q * g_j^z, averaged over the batch,
/// with g = max(|d y_sel / d x| - sigma, 0). `x` is the network input leaf
/// and `y` the outputs computed from it; the result stays differentiable in
/// the network parameters. Returns a constant zero when psi == 0 without
/// consuming randomness.
Var lipschitz_loss(Var x, Var y, std::span<const std::size_t> labels, const LipschitzConfig& cfg, Rng& rng);

/// Convenience form that runs the forward pass itself on `g`.
Var lipschitz_loss(const Network& net, std::span<const Var> params, const Tensor& x_batch,
                   std::span<const std::size_t> labels, const LipschitzConfig& cfg, Rng& rng);

struct OutputZeroConfig {
  double k_out = 0.0;
};

/// k_out * mean over the batch of sum_i y_i^2.
Var output_zero_loss(Var y, const OutputZeroConfig& cfg);

/// Output-zeroing strength that balances cross-entropy at confidence
/// `s_target` when the other V-1 logits sit at zero.
double suggest_k_out(double s_target, std::size_t classes);

struct AdaptivePsiConfig {
  double k_psi0 = 220.0;
  double k_psi = 0.02;
  double eps_better = 1.0;
  double eps_worse = 0.01;
  double target_loss = 1.0;

  void validate() const;
};

/// Integrating controller: psi = k_psi0 * exp(k_psi * I), where I accumulates
/// clip(-ln(L / L_target), -eps_worse, eps_better) and never drops below 0.
class AdaptivePsi {
 public:
  explicit AdaptivePsi(const AdaptivePsiConfig& cfg);

  double psi() const;
  double integral() const { return integral_; }
  const AdaptivePsiConfig& config() const { return cfg_; }

  /// Feeds one batch's classification loss; returns the new psi.
  double update(double batch_loss);

 private:
  AdaptivePsiConfig cfg_;
  double integral_ = 0.0;
};

}  // namespace advex
