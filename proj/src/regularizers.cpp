#include "advex/regularizers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "advex/error.hpp"

namespace advex {

void LipschitzConfig::validate(std::size_t classes) const {
  if (!(psi >= 0.0)) throw ConfigError("lipschitz: psi must be >= 0");
  if (K < 1 || K > classes) {
    throw ConfigError("lipschitz: K must lie in [1, " + std::to_string(classes) + "], got " + std::to_string(K));
  }
  if (z < 1) throw ConfigError("lipschitz: z must be >= 1");
  if (q < 0) throw ConfigError("lipschitz: q must be >= 0");
  if (!(zeta >= 0.0 && zeta <= 1.0)) throw ConfigError("lipschitz: zeta must lie in [0,1]");
  if (!(dead_zone >= 0.0)) throw ConfigError("lipschitz: dead zone must be >= 0");
  if (tandem && classes < 2) throw ConfigError("lipschitz: tandem needs at least two classes");
}

OutputDraw draw_outputs(std::size_t classes, std::size_t K, std::size_t label, double zeta, Rng& rng) {
  if (K < 1 || K > classes) throw ConfigError("draw_outputs: K out of range");
  if (label >= classes) throw ConfigError("draw_outputs: label out of range");
  OutputDraw d;
  if (zeta > 0.0) d.forced = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < zeta;
  std::vector<std::size_t> pool(classes);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  if (K < classes) {
    for (std::size_t i = 0; i < K; ++i) {
      const std::size_t j = std::uniform_int_distribution<std::size_t>(i, classes - 1)(rng);
      std::swap(pool[i], pool[j]);
    }
  }
  pool.resize(K);
  if (d.forced) {
    auto it = std::find(pool.begin(), pool.end(), label);
    if (it != pool.end()) {
      std::iter_swap(pool.begin(), it);
    } else {
      pool[0] = label;
    }
  }
  d.indices = std::move(pool);
  return d;
}

Var lipschitz_loss(Var x, Var y, std::span<const std::size_t> labels, const LipschitzConfig& cfg, Rng& rng) {
  Graph& g = y.graph();
  const Tensor& yv = y.value();
  if (yv.rank() != 2 || yv.dim(0) != labels.size()) {
    throw ShapeError("lipschitz_loss: outputs " + shape_str(yv.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  }
  const std::size_t B = yv.dim(0), V = yv.dim(1);
  cfg.validate(V);
  if (B == 0) throw ConfigError("lipschitz_loss: empty batch");
  if (x.shape().empty() || x.shape()[0] != B) {
    throw ShapeError("lipschitz_loss: input " + shape_str(x.shape()) + " does not match batch of " +
                     std::to_string(B));
  }
  if (cfg.psi == 0.0) return g.constant(Tensor::scalar(0.0));
  const std::size_t N = x.size() / B;

  std::vector<OutputDraw> draws;
  draws.reserve(B);
  for (std::size_t b = 0; b < B; ++b) draws.push_back(draw_outputs(V, cfg.K, labels[b], cfg.zeta, rng));

  Var total;
  for (std::size_t k = 0; k < cfg.K; ++k) {
    Tensor mask({B, V});
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t t = labels[b];
      if (k == 0 && draws[b].forced && cfg.tandem) {
        std::size_t rival = t == 0 ? 1 : 0;
        for (std::size_t i = 0; i < V; ++i) {
          if (i != t && yv[b * V + i] > yv[b * V + rival]) rival = i;
        }
        mask[b * V + t] += 1.0;
        mask[b * V + rival] += cfg.tandem_combine == TandemCombine::Subtract ? -1.0 : 1.0;
      } else {
        mask[b * V + draws[b].indices[k]] = 1.0;
      }
    }
    // Row b of the masked batch-sum gradient is example b's own input gradient.
    Var selected = sum(y * g.constant(std::move(mask)));
    Var grad_x = reshape(grad_graph(selected, {x})[0], {B, N});
    Var mag = abs(grad_x);
    if (cfg.dead_zone > 0.0) mag = relu(add_const(mag, -cfg.dead_zone));
    Var term = cfg.z == 1 ? mag : (cfg.z == 2 ? square(mag) : pow(mag, cfg.z));
    if (cfg.q > 0) {
      Var l1 = matmul(mag, g.constant(Tensor({N, 1}, 1.0)));
      term = term * matmul(pow(l1, cfg.q), g.constant(Tensor({1, N}, 1.0)));
    }
    Var s = sum(term);
    total = total.valid() ? total + s : s;
  }
  return scale(total, cfg.psi / (double(cfg.K) * double(N) * double(B)));
}

Var lipschitz_loss(const Network& net, std::span<const Var> params, const Tensor& x_batch,
                   std::span<const std::size_t> labels, const LipschitzConfig& cfg, Rng& rng) {
  if (params.empty()) throw ConfigError("lipschitz_loss: no parameters bound");
  Graph& g = params.front().graph();
  Var x = g.leaf(x_batch, true);
  Var y = net.forward(x, params);
  return lipschitz_loss(x, y, labels, cfg, rng);
}

Var output_zero_loss(Var y, const OutputZeroConfig& cfg) {
  if (!(cfg.k_out >= 0.0)) throw ConfigError("output zeroing: k_out must be >= 0");
  if (y.shape().empty()) throw ShapeError("output_zero_loss: expected [B,V] outputs");
  const double batch = double(y.shape()[0]);
  return scale(sum(square(y)), cfg.k_out / batch);
}

double suggest_k_out(double s_target, std::size_t classes) {
  if (classes < 2) throw ConfigError("suggest_k_out: need at least two classes");
  const double V = double(classes);
  if (!(s_target > 1.0 / V) || !(s_target < 1.0)) {
    throw ConfigError("suggest_k_out: target confidence must lie in (1/V, 1)");
  }
  // s_t = e^y / (e^y + V - 1)  =>  y = ln(s_t (V-1) / (1 - s_t))
  const double y = std::log(s_target * (V - 1.0) / (1.0 - s_target));
  return (1.0 - s_target) / (2.0 * y * (1.0 + (V - 1.0) * (1.0 - s_target)));
}

void AdaptivePsiConfig::validate() const {
  if (!(k_psi0 > 0.0) || !(k_psi > 0.0) || !(eps_better > 0.0) || !(eps_worse > 0.0) || !(target_loss > 0.0)) {
    throw ConfigError("adaptive psi: k_psi0, k_psi, eps_better, eps_worse and target loss must all be positive");
  }
}

AdaptivePsi::AdaptivePsi(const AdaptivePsiConfig& cfg) : cfg_(cfg) { cfg_.validate(); }

double AdaptivePsi::psi() const { return cfg_.k_psi0 * std::exp(cfg_.k_psi * integral_); }

double AdaptivePsi::update(double batch_loss) {
  if (!std::isfinite(batch_loss)) throw NumericError("adaptive psi: non-finite training loss");
  if (batch_loss < 0.0) throw ConfigError("adaptive psi: training loss must be >= 0");
  const double d = std::clamp(-std::log(batch_loss / cfg_.target_loss), -cfg_.eps_worse, cfg_.eps_better);
  integral_ = std::max(0.0, integral_ + d);
  return psi();
}

}  // namespace advex
