#include "advex/nn.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <json.hpp>

#include "advex/error.hpp"

namespace advex {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

std::string layer_prefix(std::size_t i) { return "layer" + std::to_string(i); }

}  // namespace

Network::Network(Shape input_shape, std::vector<Layer> layers, std::string preset)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)), preset_(std::move(preset)) {
  if (input_shape_.empty()) throw ShapeError("network input shape must have rank >= 1");
  Shape cur = input_shape_;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string where = "layer " + std::to_string(i) + ": ";
    std::visit(
        Overloaded{
            [&](const DenseLayer& l) {
              if (cur.size() != 1 || cur[0] != l.in) {
                throw ShapeError(where + "dense expects [" + std::to_string(l.in) + "], gets " + shape_str(cur));
              }
              if (l.out == 0) throw ShapeError(where + "dense output size is zero");
              params_.push_back({layer_prefix(i) + ".weight", ParamKind::Weight, Tensor({l.in, l.out})});
              params_.push_back({layer_prefix(i) + ".bias", ParamKind::Bias, Tensor({l.out})});
              cur = {l.out};
            },
            [&](const ConvLayer& l) {
              if (cur.size() != 3 || cur[0] != l.in_channels) {
                throw ShapeError(where + "conv expects [" + std::to_string(l.in_channels) + ",H,W], gets " +
                                 shape_str(cur));
              }
              if (l.stride < 1 || l.pad < 0 || l.kernel == 0 || l.out_channels == 0) {
                throw ConfigError(where + "invalid conv parameters");
              }
              const long h = (long(cur[1]) + 2 * l.pad - long(l.kernel));
              const long w = (long(cur[2]) + 2 * l.pad - long(l.kernel));
              if (h < 0 || w < 0) throw ShapeError(where + "kernel larger than padded input " + shape_str(cur));
              params_.push_back({layer_prefix(i) + ".weight", ParamKind::Weight,
                                 Tensor({l.out_channels, l.in_channels, l.kernel, l.kernel})});
              params_.push_back({layer_prefix(i) + ".bias", ParamKind::Bias, Tensor({l.out_channels})});
              cur = {l.out_channels, std::size_t(h / l.stride + 1), std::size_t(w / l.stride + 1)};
            },
            [&](const PoolLayer& l) {
              if (cur.size() != 3 || l.window < 1 || cur[1] % l.window || cur[2] % l.window) {
                throw ShapeError(where + "pool window " + std::to_string(l.window) + " does not tile " +
                                 shape_str(cur));
              }
              cur = {cur[0], cur[1] / l.window, cur[2] / l.window};
            },
            [&](const FlattenLayer&) { cur = {numel(cur)}; },
            [&](const ActivationLayer& l) {
              if (l.kind == Activation::HHRelu && !(l.d > 0.0)) throw ConfigError(where + "hhrelu d must be > 0");
            },
        },
        layers_[i]);
  }
  if (cur.size() != 1) throw ShapeError("network output must be a vector, got " + shape_str(cur));
  classes_ = cur[0];
}

Network Network::mlp_2d(std::size_t classes, Activation act, double d, std::size_t hidden) {
  ActivationLayer a{act, d};
  return Network({2},
                 {DenseLayer{2, hidden}, a, DenseLayer{hidden, hidden}, a, DenseLayer{hidden, classes}},
                 "mlp-2d");
}

Network Network::cnn_tiny(const Shape& in, std::size_t classes, Activation act, double d) {
  if (in.size() != 3 || in[1] != in[2] || in[1] % 4 != 0) {
    throw ShapeError("cnn-tiny needs a square {C,H,W} input with H divisible by 4, got " + shape_str(in));
  }
  ActivationLayer a{act, d};
  const int pool = int(in[1] / 4);
  return Network(in,
                 {ConvLayer{in[0], 8, 3, 1, 1}, a, ConvLayer{8, 16, 3, 2, 1}, a, ConvLayer{16, 16, 3, 2, 1}, a,
                  PoolLayer{pool}, FlattenLayer{}, DenseLayer{16, classes}},
                 "cnn-tiny");
}

Network Network::from_preset(const std::string& preset, const Shape& input_shape, std::size_t classes,
                             Activation act, double d) {
  if (preset == "mlp-2d") {
    if (input_shape != Shape{2}) throw ShapeError("mlp-2d needs 2-element inputs, got " + shape_str(input_shape));
    return mlp_2d(classes, act, d);
  }
  if (preset == "cnn-tiny") return cnn_tiny(input_shape, classes, act, d);
  throw ConfigError("unknown architecture preset '" + preset + "'");
}

void Network::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  // The last weight tensor is the output layer.
  std::size_t last_weight = 0;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].kind == ParamKind::Weight) last_weight = i;
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = params_[i];
    if (p.kind == ParamKind::Bias || i == last_weight) {
      std::fill(p.value.data().begin(), p.value.data().end(), 0.0);
      continue;
    }
    const Shape& s = p.value.shape();
    const std::size_t fan_in = s.size() == 2 ? s[0] : s[1] * s[2] * s[3];
    const double bound = std::sqrt(6.0 / double(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : p.value.data()) v = dist(rng);
  }
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::vector<Var> Network::bind(Graph& g, bool requires_grad) const {
  std::vector<Var> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(g.leaf(p.value, requires_grad));
  return out;
}

Var Network::forward(Var x, std::span<const Var> params) const {
  if (params.size() != params_.size()) {
    throw ShapeError("forward: expected " + std::to_string(params_.size()) + " parameters, got " +
                     std::to_string(params.size()));
  }
  Shape expect{0};
  expect.insert(expect.end(), input_shape_.begin(), input_shape_.end());
  const Shape& xs = x.shape();
  expect[0] = xs.empty() ? 0 : xs[0];
  if (xs != expect) {
    throw ShapeError("forward: input " + shape_str(xs) + " does not match [B]+" + shape_str(input_shape_));
  }
  Graph& g = x.graph();
  const std::size_t batch = xs[0];
  std::size_t pi = 0;
  Var h = x;
  for (const Layer& layer : layers_) {
    h = std::visit(
        Overloaded{
            [&](const DenseLayer& l) {
              Var w = params[pi++];
              Var b = params[pi++];
              Var ones = g.constant(Tensor({batch, 1}, 1.0));
              return matmul(h, w) + matmul(ones, reshape(b, {1, l.out}));
            },
            [&](const ConvLayer& l) {
              Var w = params[pi++];
              Var b = params[pi++];
              Var y = conv2d(h, w, l.stride, l.pad);
              return y + broadcast_channels(b, y.shape());
            },
            [&](const PoolLayer& l) { return avg_pool(h, l.window); },
            [&](const FlattenLayer&) {
              return reshape(h, {batch, h.size() / batch});
            },
            [&](const ActivationLayer& l) { return l.kind == Activation::HHRelu ? hhrelu(h, l.d) : relu(h); },
        },
        layer);
  }
  return h;
}

Tensor Network::logits(const Tensor& batch) const {
  Graph g;
  auto params = bind(g, false);
  return forward(g.constant(batch), params).value();
}

Tensor hhrelu(const Tensor& x, double d) {
  if (!(d > 0.0)) throw ConfigError("hhrelu: d must be positive");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = hhrelu_value(x[i], d);
  return out;
}

std::vector<double> softmax(std::span<const double> y) {
  if (y.empty()) throw ShapeError("softmax of an empty vector");
  const double m = *std::max_element(y.begin(), y.end());
  std::vector<double> s(y.size());
  double z = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) z += (s[i] = std::exp(y[i] - m));
  for (double& v : s) v /= z;
  return s;
}

double cross_entropy(std::span<const double> s, std::size_t t) {
  if (t >= s.size()) throw ConfigError("cross_entropy: class " + std::to_string(t) + " out of range");
  return -std::log(std::max(s[t], kLogFloor));
}

std::size_t argmax(std::span<const double> v) {
  return std::size_t(std::max_element(v.begin(), v.end()) - v.begin());
}

Tensor one_hot(std::span<const std::size_t> labels, std::size_t classes) {
  Tensor out({labels.size(), classes});
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (labels[b] >= classes) throw ConfigError("label " + std::to_string(labels[b]) + " out of range");
    out[b * classes + labels[b]] = 1.0;
  }
  return out;
}

namespace {

struct RowTools {
  Var shifted;  // y minus its (constant) row max
  Var row_sum_exp;  // [B,V], each row holding sum_j exp(shifted_j)
  Var e;
};

RowTools row_tools(Var y) {
  const Tensor& v = y.value();
  if (v.rank() != 2) throw ShapeError("expected [B,V] outputs, got " + shape_str(v.shape()));
  const std::size_t B = v.dim(0), V = v.dim(1);
  Tensor shift(v.shape());
  for (std::size_t b = 0; b < B; ++b) {
    const double m = *std::max_element(v.data().begin() + std::ptrdiff_t(b * V),
                                       v.data().begin() + std::ptrdiff_t((b + 1) * V));
    std::fill_n(shift.data().begin() + std::ptrdiff_t(b * V), V, m);
  }
  Graph& g = y.graph();
  Var z = y - g.constant(std::move(shift));
  Var e = exp(z);
  Var rs = matmul(matmul(e, g.constant(Tensor({V, 1}, 1.0))), g.constant(Tensor({1, V}, 1.0)));
  return {z, rs, e};
}

}  // namespace

Var softmax_rows(Var y) {
  RowTools t = row_tools(y);
  return t.e * pow(t.row_sum_exp, -1);
}

Var log_softmax_rows(Var y) {
  RowTools t = row_tools(y);
  return t.shifted - log(t.row_sum_exp);
}

Var cross_entropy_loss(Var logits, std::span<const std::size_t> labels) {
  const Tensor& v = logits.value();
  if (v.rank() != 2 || v.dim(0) != labels.size()) {
    throw ShapeError("cross_entropy_loss: logits " + shape_str(v.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  Graph& g = logits.graph();
  const std::size_t B = v.dim(0), V = v.dim(1);
  Var picked = matmul(log_softmax_rows(logits) * g.constant(one_hot(labels, V)), g.constant(Tensor({V, 1}, 1.0)));
  Var floored = clamp(picked, std::log(kLogFloor), std::numeric_limits<double>::infinity());
  return scale(sum(floored), -1.0 / double(B));
}

// ---------------------------------------------------------------------------

OptimizerState make_optimizer(const Network& net, const SgdConfig& cfg, double learning_rate) {
  if (cfg.momentum < 0.0 || cfg.momentum >= 1.0) throw ConfigError("momentum must lie in [0,1)");
  if (cfg.weight_decay < 0.0 || cfg.bias_decay < 0.0) throw ConfigError("weight decay must be nonnegative");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  OptimizerState st;
  st.learning_rate = learning_rate;
  st.config = cfg;
  for (const auto& p : net.parameters()) st.momentum.emplace_back(p.value.shape(), 0.0);
  return st;
}

void sgd_step(Network& net, OptimizerState& state, std::span<const Tensor> grads) {
  auto& params = net.parameters();
  if (grads.size() != params.size() || state.momentum.size() != params.size()) {
    throw ShapeError("sgd_step: " + std::to_string(grads.size()) + " gradients for " +
                     std::to_string(params.size()) + " parameters");
  }
  const double mu = state.config.momentum;
  const double lr = state.learning_rate;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& theta = params[i].value;
    Tensor& v = state.momentum[i];
    const Tensor& g = grads[i];
    if (g.shape() != theta.shape() || v.shape() != theta.shape()) {
      throw ShapeError("sgd_step: gradient for " + params[i].name + " has shape " + shape_str(g.shape()) +
                       ", parameter is " + shape_str(theta.shape()));
    }
    const double decay = params[i].kind == ParamKind::Weight ? state.config.weight_decay : state.config.bias_decay;
    for (std::size_t k = 0; k < theta.size(); ++k) {
      v[k] = mu * v[k] + g[k] + decay * theta[k];
      theta[k] -= lr * v[k];
    }
  }
}

void sgd_step(Network& net, OptimizerState& state, const std::map<std::string, Tensor>& grads) {
  std::vector<Tensor> ordered;
  ordered.reserve(net.parameters().size());
  for (const auto& p : net.parameters()) {
    auto it = grads.find(p.name);
    if (it == grads.end()) throw ConfigError("sgd_step: no gradient for parameter " + p.name);
    ordered.push_back(it->second);
  }
  sgd_step(net, state, ordered);
}

double LrSchedule::rate(double epoch) const {
  double lr = base;
  if (warmup_epochs > 0.0 && epoch < warmup_epochs) {
    lr = base / 10.0 + (base - base / 10.0) * (epoch / warmup_epochs);
  }
  for (double s : step_epochs) {
    if (epoch >= s) lr *= step_factor;
  }
  return lr;
}

// ---------------------------------------------------------------------------

namespace {

json layer_to_json(const Layer& layer) {
  return std::visit(
      Overloaded{
          [](const DenseLayer& l) { return json{{"type", "dense"}, {"in", l.in}, {"out", l.out}}; },
          [](const ConvLayer& l) {
            return json{{"type", "conv"},        {"in_channels", l.in_channels}, {"out_channels", l.out_channels},
                        {"kernel", l.kernel},    {"stride", l.stride},           {"pad", l.pad}};
          },
          [](const PoolLayer& l) { return json{{"type", "avg_pool"}, {"window", l.window}}; },
          [](const FlattenLayer&) { return json{{"type", "flatten"}}; },
          [](const ActivationLayer& l) {
            return json{{"type", "activation"}, {"kind", l.kind == Activation::HHRelu ? "hhrelu" : "relu"}, {"d", l.d}};
          },
      },
      layer);
}

Layer layer_from_json(const json& j) {
  const std::string type = j.at("type");
  if (type == "dense") return DenseLayer{j.at("in"), j.at("out")};
  if (type == "conv") {
    return ConvLayer{j.at("in_channels"), j.at("out_channels"), j.at("kernel"), j.at("stride"), j.at("pad")};
  }
  if (type == "avg_pool") return PoolLayer{j.at("window")};
  if (type == "flatten") return FlattenLayer{};
  if (type == "activation") {
    const std::string kind = j.at("kind");
    if (kind != "hhrelu" && kind != "relu") throw FormatError("unknown activation '" + kind + "'");
    return ActivationLayer{kind == "hhrelu" ? Activation::HHRelu : Activation::Relu, j.at("d")};
  }
  throw FormatError("unknown layer type '" + type + "'");
}

}  // namespace

void save_checkpoint(const Network& net, const std::string& dir) {
  fs::create_directories(dir);
  json m;
  m["format"] = "advex-checkpoint";
  m["version"] = 1;
  m["preset"] = net.preset();
  m["input_shape"] = net.input_shape();
  m["classes"] = net.classes();
  m["layers"] = json::array();
  double d = 1.0;
  for (const auto& l : net.layers()) {
    m["layers"].push_back(layer_to_json(l));
    if (auto* a = std::get_if<ActivationLayer>(&l)) d = a->d;
  }
  m["d"] = d;
  m["parameters"] = json::array();
  for (std::size_t i = 0; i < net.parameters().size(); ++i) {
    const auto& p = net.parameters()[i];
    char prefix[8];
    std::snprintf(prefix, sizeof prefix, "p%03zu_", i);
    const std::string file = prefix + p.name + ".aetn";
    save_aetn((fs::path(dir) / file).string(), p.value);
    m["parameters"].push_back({{"name", p.name},
                               {"kind", p.kind == ParamKind::Weight ? "weight" : "bias"},
                               {"shape", p.value.shape()},
                               {"file", file}});
  }
  std::ofstream os(fs::path(dir) / "manifest.json", std::ios::trunc);
  if (!os) throw Error("cannot write checkpoint manifest in " + dir);
  os << m.dump(2) << '\n';
}

Network load_checkpoint(const std::string& dir) {
  std::ifstream is(fs::path(dir) / "manifest.json");
  if (!is) throw Error("no checkpoint manifest in " + dir);
  json m;
  try {
    m = json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError("checkpoint manifest: " + std::string(e.what()));
  }
  if (m.value("format", "") != "advex-checkpoint") throw FormatError(dir + " is not an advex checkpoint");
  std::vector<Layer> layers;
  for (const auto& l : m.at("layers")) layers.push_back(layer_from_json(l));
  Network net(m.at("input_shape").get<Shape>(), std::move(layers), m.value("preset", "custom"));
  const auto& plist = m.at("parameters");
  if (plist.size() != net.parameters().size()) {
    throw FormatError("checkpoint lists " + std::to_string(plist.size()) + " parameters, architecture has " +
                      std::to_string(net.parameters().size()));
  }
  for (std::size_t i = 0; i < plist.size(); ++i) {
    auto& p = net.parameters()[i];
    if (plist[i].at("name") != p.name) throw FormatError("checkpoint parameter order mismatch at " + p.name);
    Tensor t = load_aetn((fs::path(dir) / plist[i].at("file").get<std::string>()).string());
    if (t.shape() != p.value.shape()) {
      throw FormatError("checkpoint parameter " + p.name + " has shape " + shape_str(t.shape()));
    }
    p.value = std::move(t);
  }
  return net;
}

}  // namespace advex
