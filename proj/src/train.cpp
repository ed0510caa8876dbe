#include "advex/train.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <json.hpp>

#include "advex/error.hpp"

namespace advex {

using nlohmann::json;

void TrainConfig::validate(std::size_t classes) const {
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch size must be >= 1");
  if (!(d > 0.0)) throw ConfigError("train: HHReLU d must be > 0");
  if (!(schedule.base > 0.0)) throw ConfigError("train: learning rate must be > 0");
  lipschitz.validate(classes);
  if (adaptive_psi) {
    if (lipschitz.psi > 0.0) throw ConfigError("train: fixed psi and adaptive psi are mutually exclusive");
    adaptive_psi->validate();
  }
  if (!(output_zero.k_out >= 0.0)) throw ConfigError("train: k_out must be >= 0");
  adversarial.validate();
  if (augment.pad < 0 || !(augment.flip_prob >= 0.0 && augment.flip_prob <= 1.0)) {
    throw ConfigError("train: invalid augmentation settings");
  }
}

// ---------------------------------------------------------------------------
// JSON

std::string to_json(const TrainConfig& c) {
  json j;
  j["preset"] = c.preset;
  j["activation"] = c.activation == Activation::HHRelu ? "hhrelu" : "relu";
  j["d"] = c.d;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["lr"] = {{"base", c.schedule.base},
             {"warmup_epochs", c.schedule.warmup_epochs},
             {"step_epochs", c.schedule.step_epochs},
             {"step_factor", c.schedule.step_factor}};
  j["sgd"] = {{"momentum", c.sgd.momentum}, {"weight_decay", c.sgd.weight_decay}, {"bias_decay", c.sgd.bias_decay}};
  const auto& l = c.lipschitz;
  j["lipschitz"] = {{"psi", l.psi},
                    {"K", l.K},
                    {"z", l.z},
                    {"q", l.q},
                    {"zeta", l.zeta},
                    {"dead_zone", l.dead_zone},
                    {"tandem", l.tandem},
                    {"tandem_combine", l.tandem_combine == TandemCombine::Subtract ? "subtract" : "add"}};
  if (c.adaptive_psi) {
    const auto& a = *c.adaptive_psi;
    j["adaptive_psi"] = {{"k_psi0", a.k_psi0},
                         {"k_psi", a.k_psi},
                         {"eps_better", a.eps_better},
                         {"eps_worse", a.eps_worse},
                         {"target_loss", a.target_loss}};
  } else {
    j["adaptive_psi"] = nullptr;
  }
  j["k_out"] = c.output_zero.k_out;
  j["adversarial"] = {{"mode", to_string(c.adversarial.mode)},
                      {"epsilon", c.adversarial.epsilon},
                      {"steps", c.adversarial.steps},
                      {"half_half", c.adversarial.half_half},
                      {"gaussian_scale", c.adversarial.gaussian_scale}};
  j["augment"] = {{"pad", c.augment.pad}, {"flip_prob", c.augment.flip_prob}};
  j["seed"] = c.seed;
  return j.dump(2);
}

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!ok.count(it.key())) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

TrainConfig train_config_from_json(const std::string& text) {
  TrainConfig c;
  try {
    const json j = json::parse(text);
    check_keys(j,
               {"preset", "activation", "d", "epochs", "batch_size", "lr", "sgd", "lipschitz", "adaptive_psi", "k_out",
                "adversarial", "augment", "seed"},
               "config");
    read(j, "preset", c.preset);
    if (j.contains("activation")) {
      const auto a = j.at("activation").get<std::string>();
      if (a != "hhrelu" && a != "relu") throw ConfigError("config: activation must be hhrelu or relu");
      c.activation = a == "hhrelu" ? Activation::HHRelu : Activation::Relu;
    }
    read(j, "d", c.d);
    read(j, "epochs", c.epochs);
    read(j, "batch_size", c.batch_size);
    if (j.contains("lr")) {
      const auto& l = j.at("lr");
      check_keys(l, {"base", "warmup_epochs", "step_epochs", "step_factor"}, "config.lr");
      read(l, "base", c.schedule.base);
      read(l, "warmup_epochs", c.schedule.warmup_epochs);
      read(l, "step_epochs", c.schedule.step_epochs);
      read(l, "step_factor", c.schedule.step_factor);
    }
    if (j.contains("sgd")) {
      const auto& s = j.at("sgd");
      check_keys(s, {"momentum", "weight_decay", "bias_decay"}, "config.sgd");
      read(s, "momentum", c.sgd.momentum);
      read(s, "weight_decay", c.sgd.weight_decay);
      read(s, "bias_decay", c.sgd.bias_decay);
    }
    if (j.contains("lipschitz")) {
      const auto& l = j.at("lipschitz");
      check_keys(l, {"psi", "K", "z", "q", "zeta", "dead_zone", "tandem", "tandem_combine"}, "config.lipschitz");
      auto& o = c.lipschitz;
      read(l, "psi", o.psi);
      read(l, "K", o.K);
      read(l, "z", o.z);
      read(l, "q", o.q);
      read(l, "zeta", o.zeta);
      read(l, "dead_zone", o.dead_zone);
      read(l, "tandem", o.tandem);
      if (l.contains("tandem_combine")) {
        const auto t = l.at("tandem_combine").get<std::string>();
        if (t != "subtract" && t != "add") throw ConfigError("config.lipschitz: tandem_combine must be subtract or add");
        o.tandem_combine = t == "subtract" ? TandemCombine::Subtract : TandemCombine::Add;
      }
    }
    if (j.contains("adaptive_psi") && !j.at("adaptive_psi").is_null()) {
      const auto& a = j.at("adaptive_psi");
      check_keys(a, {"k_psi0", "k_psi", "eps_better", "eps_worse", "target_loss"}, "config.adaptive_psi");
      AdaptivePsiConfig p;
      read(a, "k_psi0", p.k_psi0);
      read(a, "k_psi", p.k_psi);
      read(a, "eps_better", p.eps_better);
      read(a, "eps_worse", p.eps_worse);
      read(a, "target_loss", p.target_loss);
      c.adaptive_psi = p;
    }
    read(j, "k_out", c.output_zero.k_out);
    if (j.contains("adversarial")) {
      const auto& a = j.at("adversarial");
      check_keys(a, {"mode", "epsilon", "steps", "half_half", "gaussian_scale"}, "config.adversarial");
      if (a.contains("mode")) c.adversarial.mode = adv_mode_from_string(a.at("mode").get<std::string>());
      read(a, "epsilon", c.adversarial.epsilon);
      read(a, "steps", c.adversarial.steps);
      read(a, "half_half", c.adversarial.half_half);
      read(a, "gaussian_scale", c.adversarial.gaussian_scale);
    }
    if (j.contains("augment")) {
      const auto& a = j.at("augment");
      check_keys(a, {"pad", "flip_prob"}, "config.augment");
      read(a, "pad", c.augment.pad);
      read(a, "flip_prob", c.augment.flip_prob);
    }
    read(j, "seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError("config: " + std::string(e.what()));
  }
  return c;
}

std::string to_json(const TrainReport& report) {
  json epochs = json::array();
  for (const auto& e : report.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"classification", e.classification},
                      {"lipschitz", e.lipschitz},
                      {"output_zero", e.output_zero},
                      {"total", e.total},
                      {"psi", e.psi},
                      {"min_psi", e.min_psi},
                      {"accuracy", e.accuracy},
                      {"learning_rate", e.learning_rate}});
  }
  json j{{"epochs", std::move(epochs)}, {"checkpoint", report.checkpoint}};
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Training loop

TrainResult train(const TrainConfig& cfg, const Dataset& data, const EpochCallback& on_epoch) {
  cfg.validate(data.classes);
  if (data.size() == 0) throw ConfigError("train: empty dataset");
  Network net = Network::from_preset(cfg.preset, data.image_shape, data.classes, cfg.activation, cfg.d);
  net.initialize(derive_seed(cfg.seed, kStreamInit));

  Rng shuffle_rng(derive_seed(cfg.seed, kStreamShuffle));
  Rng lipschitz_rng(derive_seed(cfg.seed, kStreamLipschitz));
  Rng noise_rng(derive_seed(cfg.seed, kStreamNoise));
  Rng augment_rng(derive_seed(cfg.seed, kStreamAugment));

  OptimizerState opt = make_optimizer(net, cfg.sgd, cfg.schedule.rate(0.0));
  std::optional<AdaptivePsi> controller;
  if (cfg.adaptive_psi) controller.emplace(*cfg.adaptive_psi);

  const std::size_t n = data.size(), V = data.classes;
  const std::size_t batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  TrainResult result{net, {}};
  Network& model = result.net;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochStats st;
    st.epoch = epoch;
    st.min_psi = std::numeric_limits<double>::infinity();
    std::size_t correct = 0;
    const auto order = shuffled_indices(n, shuffle_rng);
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + lo, hi - lo);
      Tensor x = data.batch(idx);
      const auto labels = data.labels(idx);
      const std::size_t B = labels.size(), N = x.size() / B;

      if (cfg.augment.active()) {
        for (std::size_t r = 0; r < B; ++r) {
          const Tensor a = augment(slice_row(x, r), cfg.augment, augment_rng);
          std::copy(a.data().begin(), a.data().end(), x.data().begin() + std::ptrdiff_t(r * N));
        }
      }

      if (cfg.adversarial.mode != AdvMode::None) {
        Tensor adv;
        switch (cfg.adversarial.mode) {
          case AdvMode::L2: adv = perturb_l2(model, x, labels, cfg.adversarial); break;
          case AdvMode::L2Min: adv = perturb_l2min(model, x, labels, cfg.adversarial); break;
          case AdvMode::Gaussian: adv = perturb_gaussian(x, cfg.adversarial.gaussian_scale, noise_rng); break;
          case AdvMode::None: break;
        }
        x = compose_batch({x, labels}, {adv, labels}, cfg.adversarial.half_half).x;
      }

      const double psi = controller ? controller->psi() : cfg.lipschitz.psi;
      Graph g;
      const auto params = model.bind(g);
      Var xv = g.leaf(x, psi > 0.0);
      Var y = model.forward(xv, params);
      Var ce = cross_entropy_loss(y, labels);
      Var total = ce;
      double lip_value = 0.0, zero_value = 0.0;
      if (psi > 0.0) {
        LipschitzConfig lc = cfg.lipschitz;
        lc.psi = psi;
        Var lip = lipschitz_loss(xv, y, labels, lc, lipschitz_rng);
        lip_value = lip.value().item();
        total = total + lip;
      }
      if (cfg.output_zero.k_out > 0.0) {
        Var oz = output_zero_loss(y, cfg.output_zero);
        zero_value = oz.value().item();
        total = total + oz;
      }
      const double total_value = total.value().item();
      if (!std::isfinite(total_value)) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(b));
      }
      const auto grads = grad(total, params);
      opt.learning_rate = cfg.schedule.rate(double(epoch) + double(b) / double(batches));
      sgd_step(model, opt, grads);

      const double ce_value = ce.value().item();
      if (controller) controller->update(std::max(ce_value, std::numeric_limits<double>::min()));

      const Tensor& yv = y.value();
      for (std::size_t r = 0; r < B; ++r) correct += argmax(yv.data().subspan(r * V, V)) == labels[r];
      st.classification += ce_value;
      st.lipschitz += lip_value;
      st.output_zero += zero_value;
      st.total += total_value;
      st.min_psi = std::min(st.min_psi, psi);
      st.learning_rate = opt.learning_rate;
    }
    const double nb = double(batches);
    st.classification /= nb;
    st.lipschitz /= nb;
    st.output_zero /= nb;
    st.total /= nb;
    st.psi = controller ? controller->psi() : cfg.lipschitz.psi;
    st.accuracy = double(correct) / double(n);
    result.report.epochs.push_back(st);
    if (on_epoch) on_epoch(st);
  }
  return result;
}

EvalResult evaluate(const Network& net, const Dataset& data, std::size_t limit) {
  if (data.classes != net.classes() || data.image_shape != net.input_shape()) {
    throw ShapeError("evaluate: dataset does not match the network");
  }
  EvalResult r;
  const std::size_t n = data.size(), V = net.classes(), chunk = 128;
  if (n == 0) return r;
  std::size_t correct = 0;
  const std::size_t grad_n = limit == 0 ? n : std::min(n, limit);
  double abs_sum = 0.0, max_sum = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t lo = 0; lo < n; lo += chunk) {
    const std::size_t hi = std::min(n, lo + chunk);
    idx.resize(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) idx[i - lo] = i;
    const Tensor x = data.batch(idx);
    const auto labels = data.labels(idx);
    const std::size_t B = idx.size(), N = x.size() / B;

    Graph g;
    const auto params = net.bind(g, false);
    Var xv = g.leaf(x, lo < grad_n);
    Var y = net.forward(xv, params);
    for (std::size_t b = 0; b < B; ++b) correct += argmax(y.value().data().subspan(b * V, V)) == labels[b];
    if (lo >= grad_n) continue;

    const std::size_t rows = std::min(hi, grad_n) - lo;
    std::vector<double> row_max(rows, 0.0);
    for (std::size_t i = 0; i < V; ++i) {
      Tensor mask({B, V});
      for (std::size_t b = 0; b < rows; ++b) mask[b * V + i] = 1.0;
      const Tensor gx = grad(sum(y * g.constant(std::move(mask))), {xv})[0];
      for (std::size_t b = 0; b < rows; ++b) {
        for (std::size_t j = 0; j < N; ++j) {
          const double a = std::abs(gx[b * N + j]);
          abs_sum += a;
          row_max[b] = std::max(row_max[b], a);
        }
      }
    }
    for (double m : row_max) max_sum += m;
  }
  r.examples = grad_n;
  r.accuracy = double(correct) / double(n);
  r.mean_abs_grad = abs_sum / (double(grad_n) * double(V) * double(net.input_size()));
  r.mean_max_grad = max_sum / double(grad_n);
  return r;
}

}  // namespace advex
